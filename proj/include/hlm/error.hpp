#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hlm {

/// Base of every error the library raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input data: malformed files, unknown labels, invalid records.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid parameters or configuration (maps to the CLI usage exit code).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity reached the optimizer.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class EmptyCorpusError : public DataError {
 public:
  EmptyCorpusError() : DataError("empty corpus: no non-empty documents or words") {}
  explicit EmptyCorpusError(const std::string& what) : DataError("empty corpus: " + what) {}
};

class DecodingError : public DataError {
 public:
  DecodingError(std::size_t offset, const std::string& what)
      : DataError("malformed UTF-8 at byte offset " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class InvalidTokenError : public DataError {
 public:
  InvalidTokenError(std::size_t position, long long id, const std::string& what)
      : DataError("invalid token id " + std::to_string(id) + " at position " +
                  std::to_string(position) + ": " + what),
        position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// Parse failure in a line-oriented file; carries the 1-based line number.
class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace hlm
