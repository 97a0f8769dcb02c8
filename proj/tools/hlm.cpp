#include <string>
#include <vector>

#include "hlm/cli.hpp"

int main(int argc, char** argv) {
  return hlm::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
