#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hlm/baselines.hpp"
#include "hlm/bert.hpp"
#include "hlm/denoiser.hpp"
#include "hlm/error.hpp"
#include "hlm/finetune.hpp"
#include "hlm/metrics.hpp"
#include "hlm/pretrain_data.hpp"
#include "hlm/textnorm.hpp"
#include "hlm/tokenizer.hpp"
#include "hlm/trainer.hpp"

namespace hlm::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

inline constexpr int kOk = 0;
inline constexpr int kDataError = 1;
inline constexpr int kUsageError = 2;

/// Shortest decimal that round-trips.
inline std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline void write_json(const std::string& path, const ojson& j) { write_file(path, j.dump(2) + "\n"); }

inline ojson read_json(const std::string& path) {
  try {
    return ojson::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid JSON in '" + path + "': " + e.what());
  }
}

inline nlohmann::json plain(const ojson& j) { return nlohmann::json::parse(j.dump()); }

// ---- command plumbing ----------------------------------------------------------

/// One subcommand: its flags, the variables they bind, and the action.
class Command {
 public:
  Command(CLI::App& root, const std::string& name, const std::string& help) : app_(root.add_subcommand(name, help)) {
    app_->add_option("--config", config_path_, "JSON file of flag values; explicit flags take precedence");
    option("seed", seed_, "random seed");
  }

  template <typename T>
  CLI::Option* option(const std::string& name, T& var, const std::string& help) {
    auto* o = app_->add_option("--" + name, var, help)->capture_default_str();
    echo_.emplace_back(name, [&var] { return ojson(var); });
    return o;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    auto* o = app_->add_flag("--" + name, var, help)->capture_default_str();
    echo_.emplace_back(name, [&var] { return ojson(var); });
    return o;
  }

  void require(std::initializer_list<std::string> names) { required_.insert(required_.end(), names); }
  void action(std::function<void(Command&)> f) { action_ = std::move(f); }

  CLI::App* app() const { return app_; }
  std::uint64_t seed() const { return seed_; }
  std::ostream& out() const { return *out_; }
  std::ostream& log() const { return *err_; }

  /// Config-file values fill the flags left unset on the command line.
  void merge_config() {
    if (config_path_.empty()) return;
    const auto cfg = read_json(config_path_);
    if (!cfg.is_object()) throw ConfigError("config file '" + config_path_ + "' must hold a JSON object");
    for (const auto& [key, value] : cfg.items()) {
      CLI::Option* o = nullptr;
      try {
        o = app_->get_option("--" + key);
      } catch (const CLI::OptionNotFound&) {
      }
      if (!o || key == "config") throw ConfigError("unknown key '" + key + "' in config file for " + app_->get_name());
      if (o->count() > 0) continue;
      o->clear();
      const auto add = [&](const ojson& v) { o->add_result(v.is_string() ? v.get<std::string>() : v.dump()); };
      if (value.is_array()) {
        for (const auto& v : value) add(v);
      } else {
        add(value);
      }
      try {
        o->run_callback();
      } catch (const CLI::ParseError& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
      }
    }
  }

  void check_required() const {
    for (const auto& name : required_)
      if (app_->get_option("--" + name)->count() == 0) throw ConfigError(app_->get_name() + ": --" + name + " is required");
  }

  ojson effective_config() const {
    ojson j = ojson::object();
    j["command"] = app_->get_name();
    for (const auto& [name, get] : echo_) j[name] = get();
    return j;
  }

  /// Creates `dir` and echoes the effective configuration into it.
  void prepare_output_dir(const std::string& dir) const {
    fs::create_directories(dir);
    write_json((fs::path(dir) / "effective_config.json").string(), effective_config());
  }

  void run(std::ostream& out, std::ostream& err) {
    out_ = &out;
    err_ = &err;
    merge_config();
    check_required();
    action_(*this);
  }

 private:
  CLI::App* app_;
  std::string config_path_;
  std::uint64_t seed_ = 0;
  std::vector<std::pair<std::string, std::function<ojson()>>> echo_;
  std::vector<std::string> required_;
  std::function<void(Command&)> action_;
  std::ostream* out_ = &std::cout;
  std::ostream* err_ = &std::cerr;
};

inline NormalizationConfig normalizer_of(bool keep_case, bool keep_accents) {
  NormalizationConfig n;
  n.lowercase = !keep_case;
  n.strip_diacritics = !keep_accents;
  return n;
}

// ---- task metrics ----------------------------------------------------------------

inline ojson class_table(const std::vector<std::pair<std::string, metrics::ClassScore>>& scores) {
  ojson t = ojson::array();
  for (const auto& [name, s] : scores)
    t.push_back({{"class", name}, {"precision", s.precision()}, {"recall", s.recall()}, {"f1", s.f1()},
                 {"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}});
  return t;
}

inline void check_task(const std::string& task) {
  if (task != "pos" && task != "ner" && task != "nli") throw ConfigError("--task must be pos, ner or nli, got '" + task + "'");
}

inline ojson score_tagging(const std::string& task, const std::vector<finetune::TaggedSentence>& gold,
                           const std::vector<finetune::TaggedSentence>& pred) {
  if (gold.size() != pred.size())
    throw DataError("gold has " + std::to_string(gold.size()) + " sentences, predictions " + std::to_string(pred.size()));
  std::vector<std::vector<std::string>> g, p;
  std::vector<std::string> flat_g, flat_p;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i].words != pred[i].words) throw DataError("sentence " + std::to_string(i + 1) + ": words differ between gold and predictions");
    g.push_back(gold[i].labels);
    p.push_back(pred[i].labels);
    flat_g.insert(flat_g.end(), gold[i].labels.begin(), gold[i].labels.end());
    flat_p.insert(flat_p.end(), pred[i].labels.begin(), pred[i].labels.end());
  }
  ojson r{{"task", task}};
  if (task == "pos") {
    std::set<std::string> classes(flat_g.begin(), flat_g.end());
    classes.insert(flat_p.begin(), flat_p.end());
    r["metric"] = "accuracy";
    r["value"] = metrics::accuracy(g, p);
    r["per_class"] = class_table(metrics::per_class_f1(flat_g, flat_p, {classes.begin(), classes.end()}));
    return r;
  }
  const auto all = metrics::entity_micro_f1(g, p);
  r["metric"] = "entity_micro_f1";
  r["value"] = all.f1();
  r["precision"] = all.precision();
  r["recall"] = all.recall();
  ojson t = ojson::array();
  for (const auto& type : metrics::entity_types(g, p)) {
    const auto s = metrics::entity_micro_f1(g, p, type);
    t.push_back({{"class", type}, {"precision", s.precision()}, {"recall", s.recall()}, {"f1", s.f1()},
                 {"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}});
  }
  r["per_class"] = t;
  return r;
}

inline ojson score_nli(const std::vector<finetune::NliPair>& gold, const std::vector<finetune::NliPair>& pred) {
  if (gold.size() != pred.size())
    throw DataError("gold has " + std::to_string(gold.size()) + " pairs, predictions " + std::to_string(pred.size()));
  std::vector<std::string> g, p;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i].premise != pred[i].premise || gold[i].hypothesis != pred[i].hypothesis)
      throw DataError("record " + std::to_string(i + 1) + ": text differs between gold and predictions");
    g.push_back(finetune::to_string(gold[i].label));
    p.push_back(finetune::to_string(pred[i].label));
  }
  return {{"task", "nli"},
          {"metric", "accuracy"},
          {"value", metrics::accuracy(g, p)},
          {"per_class", class_table(metrics::per_class_f1(g, p, finetune::nli_label_names()))}};
}

inline ojson score_files(const std::string& task, const std::string& gold, const std::string& pred) {
  if (task == "nli") return score_nli(finetune::read_nli(gold), finetune::read_nli(pred));
  return score_tagging(task, finetune::read_conll(gold, task == "ner"), finetune::read_conll(pred, false));
}

// ---- fine-tuning -------------------------------------------------------------------

struct FinetuneArgs {
  std::string task = "pos";
  std::string model = "bert";
  std::string ckpt, train, dev, test, vectors;
  double lr = 0.0;
  std::size_t batch_size = 16;
  std::size_t patience = 3;
  std::size_t max_epochs = 0;
  double dropout = 0.1;
  bool crf = false;
  std::size_t max_len = 0;
  std::size_t word_dim = 300;
  std::size_t hidden = 0;
  std::size_t layers = 2;
  double clip_norm = 0.0;
  std::uint64_t seed = 0;

  double effective_lr() const { return lr > 0 ? lr : (model == "bert" ? 3e-5 : 1e-3); }
};

/// Overrides one hyper-parameter by flag name (grid axes use these names).
inline void set_hyperparameter(FinetuneArgs& a, const std::string& key, const nlohmann::json& v) {
  try {
    if (key == "lr") a.lr = v.get<double>();
    else if (key == "batch-size") a.batch_size = v.get<std::size_t>();
    else if (key == "patience") a.patience = v.get<std::size_t>();
    else if (key == "max-epochs") a.max_epochs = v.get<std::size_t>();
    else if (key == "dropout") a.dropout = v.get<double>();
    else if (key == "crf") a.crf = v.get<bool>();
    else if (key == "max-len") a.max_len = v.get<std::size_t>();
    else if (key == "word-dim") a.word_dim = v.get<std::size_t>();
    else if (key == "hidden") a.hidden = v.get<std::size_t>();
    else if (key == "layers") a.layers = v.get<std::size_t>();
    else if (key == "clip-norm") a.clip_norm = v.get<double>();
    else throw ConfigError("'" + key + "' is not a tunable hyper-parameter");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for '" + key + "': " + e.what());
  }
}

struct FinetuneOutcome {
  EarlyStoppingResult fit;
  nlohmann::json model_config;
  bert::ParamMap<float> params;
  std::vector<finetune::TaggedSentence> dev_tags, test_tags;
  std::vector<finetune::NliPair> dev_pairs, test_pairs;
};

/// Training labels sorted, "O" first when present.
inline finetune::LabelSet label_set_of(const std::vector<finetune::TaggedSentence>& train) {
  std::set<std::string> seen;
  for (const auto& s : train) seen.insert(s.labels.begin(), s.labels.end());
  std::vector<std::string> names;
  if (seen.erase("O")) names.push_back("O");
  names.insert(names.end(), seen.begin(), seen.end());
  if (names.empty()) throw DataError("training data has no labels");
  return finetune::LabelSet(names);
}

/// Copies of `data` labeled with the first label, for prediction.
inline std::vector<finetune::TaggedSentence> unlabeled(const std::vector<finetune::TaggedSentence>& data,
                                                       const finetune::LabelSet& labels) {
  auto out = data;
  for (auto& s : out) s.labels.assign(s.words.size(), labels.names().front());
  return out;
}

inline std::string checkpoint_file(const std::string& path) {
  return fs::is_directory(path) ? (fs::path(path) / "checkpoint.bin").string() : path;
}

inline finetune::FitConfig fit_config(const FinetuneArgs& a) {
  finetune::FitConfig fc;
  fc.lr = a.effective_lr();
  fc.batch_size = a.batch_size;
  fc.seed = a.seed;
  fc.patience = a.patience;
  fc.max_epochs = a.max_epochs;
  fc.clip_norm = a.clip_norm;
  return fc;
}

inline std::vector<std::vector<std::string>> word_lists(const std::vector<finetune::TaggedSentence>& data) {
  std::vector<std::vector<std::string>> out;
  for (const auto& s : data) out.push_back(s.words);
  return out;
}

inline std::optional<baselines::WordVectors> load_vectors(const FinetuneArgs& a) {
  if (a.vectors.empty()) return std::nullopt;
  return baselines::read_word_vectors(a.vectors);
}

inline FinetuneOutcome run_tagging(const FinetuneArgs& a, std::ostream& log) {
  const bool bio2 = a.task == "ner";
  const auto train = finetune::read_conll(a.train, bio2);
  const auto dev = finetune::read_conll(a.dev, bio2);
  std::vector<finetune::TaggedSentence> test;
  if (!a.test.empty()) test = finetune::read_conll(a.test, bio2);
  const auto labels = label_set_of(train);
  const auto fc = fit_config(a);
  FinetuneOutcome o;
  const auto with_labels = [](const std::vector<finetune::TaggedSentence>& data, const std::vector<std::vector<int>>& pred,
                              const finetune::LabelSet& ls) {
    std::vector<finetune::TaggedSentence> out;
    for (std::size_t i = 0; i < data.size(); ++i) {
      finetune::TaggedSentence s{data[i].words, {}};
      for (int id : pred[i]) s.labels.push_back(ls.name(id));
      s.labels.resize(s.words.size(), ls.names().front());
      out.push_back(std::move(s));
    }
    return out;
  };

  if (a.model == "bert") {
    if (a.ckpt.empty()) throw ConfigError("finetune --model bert needs --ckpt");
    const auto ck = load_checkpoint<float>(checkpoint_file(a.ckpt));
    auto c = ck.config.at("bert").get<bert::BertConfig>();
    c.dropout = a.dropout;
    const auto vocab = Vocabulary::from_json(ck.config.at("vocab"));
    const std::size_t max_len = a.max_len ? std::min(a.max_len, c.max_positions) : c.max_positions;
    const auto warn = [&](const std::string& m) { log << "warning: " << m << "\n"; };
    const auto tr = finetune::align_all(train, vocab, labels, max_len, warn);
    const auto dv = finetune::align_all(dev, vocab, labels, max_len, warn);
    o.params = finetune::encoder_params(ck.params);
    finetune::add_tagging_head<float>(o.params, c.hidden, labels.size(), a.crf, a.seed);
    o.fit = finetune::fit<float, finetune::AlignedSentence>(tr, dv, o.params, finetune::tagging_objective<float>(c), fc);
    const auto predict = [&](const std::vector<finetune::TaggedSentence>& data) {
      const auto aligned = finetune::align_all(unlabeled(data, labels), vocab, labels, max_len);
      return with_labels(data, finetune::predict_tags<float>(aligned, o.params, c), labels);
    };
    o.dev_tags = predict(dev);
    if (!test.empty()) o.test_tags = predict(test);
    o.model_config = {{"model", a.model}, {"task", a.task}, {"labels", labels.names()}, {"crf", a.crf},
                      {"bert", c}, {"max_len", max_len}, {"vocab", ck.config.at("vocab")}};
    return o;
  }
  if (a.model != "bilstm-cnn-crf") throw ConfigError("tagging models are bert and bilstm-cnn-crf, got '" + a.model + "'");
  const baselines::Lexicon lex(word_lists(train));
  const auto vectors = load_vectors(a);
  baselines::TaggerConfig tc;
  tc.word_dim = vectors ? vectors->dim : a.word_dim;
  tc.hidden = a.hidden ? a.hidden : 100;
  tc.layers = a.layers;
  tc.dropout = a.dropout;
  const auto encode_gold = [&](const std::vector<finetune::TaggedSentence>& data) {
    std::vector<baselines::TaggedWords> out;
    for (const auto& s : data) out.push_back(baselines::encode_tagged(s, lex, labels));
    return out;
  };
  const auto encode = [&](const std::vector<finetune::TaggedSentence>& data) { return encode_gold(unlabeled(data, labels)); };
  const auto tr = encode_gold(train), dv = encode_gold(dev);
  o.params = baselines::init_tagger<float>(tc, lex, labels.size(), a.seed, vectors ? &*vectors : nullptr);
  o.fit = finetune::fit<float, baselines::TaggedWords>(tr, dv, o.params, baselines::tagger_objective<float>(tc.dropout), fc);
  const auto predict = [&](const std::vector<finetune::TaggedSentence>& data) {
    std::vector<std::vector<int>> pred;
    for (const auto& s : encode(data)) pred.push_back(baselines::tag<float>(s, o.params));
    return with_labels(data, pred, labels);
  };
  o.dev_tags = predict(dev);
  if (!test.empty()) o.test_tags = predict(test);
  o.model_config = {{"model", a.model}, {"task", a.task}, {"labels", labels.names()}, {"tagger", tc}, {"lexicon", lex}};
  return o;
}

inline FinetuneOutcome run_nli(const FinetuneArgs& a) {
  const auto train = finetune::read_nli(a.train);
  const auto dev = finetune::read_nli(a.dev);
  std::vector<finetune::NliPair> test;
  if (!a.test.empty()) test = finetune::read_nli(a.test);
  const auto fc = fit_config(a);
  FinetuneOutcome o;
  const auto with_labels = [](std::vector<finetune::NliPair> data, const std::vector<int>& pred) {
    for (std::size_t i = 0; i < data.size(); ++i) data[i].label = static_cast<finetune::NliLabel>(pred[i]);
    return data;
  };
  if (a.model == "bert") {
    if (a.ckpt.empty()) throw ConfigError("finetune --model bert needs --ckpt");
    const auto ck = load_checkpoint<float>(checkpoint_file(a.ckpt));
    auto c = ck.config.at("bert").get<bert::BertConfig>();
    c.dropout = a.dropout;
    const auto vocab = Vocabulary::from_json(ck.config.at("vocab"));
    const std::size_t max_len = a.max_len ? std::min(a.max_len, c.max_positions) : c.max_positions;
    const auto encode = [&](const std::vector<finetune::NliPair>& d) {
      std::vector<finetune::EncodedPair> out;
      for (const auto& p : d) out.push_back(finetune::encode_pair(p, vocab, max_len));
      return out;
    };
    const auto tr = encode(train), dv = encode(dev);
    o.params = finetune::encoder_params(ck.params);
    finetune::add_pair_head<float>(o.params, c.hidden, a.seed);
    o.fit = finetune::fit<float, finetune::EncodedPair>(tr, dv, o.params, finetune::pair_objective<float>(c), fc);
    o.dev_pairs = with_labels(dev, finetune::predict_pairs<float>(dv, o.params, c));
    if (!test.empty()) o.test_pairs = with_labels(test, finetune::predict_pairs<float>(encode(test), o.params, c));
    o.model_config = {{"model", a.model}, {"task", a.task}, {"labels", finetune::nli_label_names()},
                      {"bert", c}, {"max_len", max_len}, {"vocab", ck.config.at("vocab")}};
    return o;
  }
  if (a.model != "dam") throw ConfigError("NLI models are bert and dam, got '" + a.model + "'");
  std::vector<std::vector<std::string>> sentences;
  for (const auto& p : train) {
    sentences.push_back(split_words(p.premise));
    sentences.push_back(split_words(p.hypothesis));
  }
  const baselines::Lexicon lex(sentences);
  const auto vectors = load_vectors(a);
  baselines::DamConfig dc;
  dc.word_dim = vectors ? vectors->dim : a.word_dim;
  dc.hidden = a.hidden ? a.hidden : 200;
  dc.dropout = a.dropout;
  const auto encode = [&](const std::vector<finetune::NliPair>& d) {
    std::vector<baselines::WordPair> out;
    for (const auto& p : d) out.push_back(baselines::encode_words(p, lex));
    return out;
  };
  const auto tr = encode(train), dv = encode(dev);
  o.params = baselines::init_dam<float>(dc, lex, a.seed, vectors ? &*vectors : nullptr);
  o.fit = finetune::fit<float, baselines::WordPair>(tr, dv, o.params, baselines::dam_objective<float>(dc.dropout), fc);
  const auto predict = [&](const std::vector<finetune::NliPair>& d) {
    std::vector<int> pred;
    for (const auto& w : encode(d)) pred.push_back(baselines::dam_predict<float>(w, o.params));
    return with_labels(d, pred);
  };
  o.dev_pairs = predict(dev);
  if (!test.empty()) o.test_pairs = predict(test);
  o.model_config = {{"model", a.model}, {"task", a.task}, {"labels", finetune::nli_label_names()}, {"dam", dc}, {"lexicon", lex}};
  return o;
}

inline FinetuneOutcome run_finetune(const FinetuneArgs& a, std::ostream& log) {
  check_task(a.task);
  if (a.batch_size == 0) throw ConfigError("--batch-size must be positive");
  return a.task == "nli" ? run_nli(a) : run_tagging(a, log);
}

/// Model, predictions and metrics of one fine-tuning run under `dir`.
inline ojson write_finetune_outputs(const FinetuneArgs& a, const FinetuneOutcome& o, const std::string& dir) {
  const auto path = [&](const std::string& f) { return (fs::path(dir) / f).string(); };
  save_checkpoint(path("model.bin"), o.model_config, o.params);
  ojson m{{"task", a.task}, {"model", a.model}, {"seed", a.seed},
          {"best_epoch", o.fit.best_epoch}, {"best_dev_loss", o.fit.best_loss}, {"dev_loss_history", o.fit.history}};
  if (a.task == "nli") {
    write_nli(path("dev_pred.jsonl"), o.dev_pairs);
    m["dev"] = score_nli(finetune::read_nli(a.dev), o.dev_pairs);
    if (!a.test.empty()) {
      write_nli(path("test_pred.jsonl"), o.test_pairs);
      m["test"] = score_nli(finetune::read_nli(a.test), o.test_pairs);
    }
  } else {
    write_file(path("dev_pred.conll"), finetune::conll_string(o.dev_tags));
    m["dev"] = score_tagging(a.task, finetune::read_conll(a.dev, a.task == "ner"), o.dev_tags);
    if (!a.test.empty()) {
      write_file(path("test_pred.conll"), finetune::conll_string(o.test_tags));
      m["test"] = score_tagging(a.task, finetune::read_conll(a.test, a.task == "ner"), o.test_tags);
    }
  }
  write_json(path("metrics.json"), m);
  return m;
}

inline void add_finetune_flags(Command& c, FinetuneArgs& a) {
  c.option("task", a.task, "pos, ner or nli");
  c.option("model", a.model, "bert, bilstm-cnn-crf (tagging) or dam (nli)");
  c.option("ckpt", a.ckpt, "pre-trained checkpoint file or directory (bert)");
  c.option("train", a.train, "training data (CoNLL or JSONL)");
  c.option("dev", a.dev, "development data");
  c.option("test", a.test, "test data; predictions and metrics written when given");
  c.option("vectors", a.vectors, "word vectors in text format (baselines)");
  c.option("lr", a.lr, "Adam learning rate; 0 picks 3e-5 for bert, 1e-3 for baselines");
  c.option("batch-size", a.batch_size, "examples per step");
  c.option("patience", a.patience, "epochs without dev-loss improvement before stopping");
  c.option("max-epochs", a.max_epochs, "epoch limit, 0 for none");
  c.option("dropout", a.dropout, "dropout rate");
  c.flag("crf", a.crf, "CRF output layer on the bert tagger");
  c.option("max-len", a.max_len, "sequence length limit, 0 for the checkpoint's");
  c.option("word-dim", a.word_dim, "baseline word embedding size (ignored with --vectors)");
  c.option("hidden", a.hidden, "baseline hidden size, 0 for the model default");
  c.option("layers", a.layers, "BiLSTM layers");
  c.option("clip-norm", a.clip_norm, "gradient norm clip, 0 for none");
  c.require({"train", "dev"});
}

// ---- subcommands ---------------------------------------------------------------------

struct Cli {
  CLI::App app{"Greek BERT toolkit: corpus preparation, tokenizer, pre-training, fine-tuning and evaluation", "hlm"};
  std::vector<std::unique_ptr<Command>> commands;

  Command& add(const std::string& name, const std::string& help) {
    commands.push_back(std::make_unique<Command>(app, name, help));
    return *commands.back();
  }

  Cli() {
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    {
      auto& c = add("normalize", "normalize and segment a raw corpus");
      auto in = std::make_shared<std::string>(), out = std::make_shared<std::string>();
      auto keep_case = std::make_shared<bool>(false), keep_accents = std::make_shared<bool>(false);
      c.option("in", *in, "raw UTF-8 text");
      c.option("out", *out, "normalized corpus");
      c.flag("keep-case", *keep_case, "do not lowercase");
      c.flag("keep-accents", *keep_accents, "do not strip diacritics");
      c.require({"in", "out"});
      c.action([=](Command&) {
        write_file(*out, serialize_corpus(read_corpus(*in, normalizer_of(*keep_case, *keep_accents))));
      });
    }
    {
      auto& c = add("train-tokenizer", "learn a BPE vocabulary");
      auto corpus = std::make_shared<std::string>(), out = std::make_shared<std::string>();
      auto size = std::make_shared<std::size_t>(35000), min_freq = std::make_shared<std::size_t>(1);
      auto keep_case = std::make_shared<bool>(false), keep_accents = std::make_shared<bool>(false);
      c.option("corpus", *corpus, "corpus file");
      c.option("vocab-size", *size, "target vocabulary size");
      c.option("min-char-freq", *min_freq, "rarer characters map to UNK");
      c.flag("keep-case", *keep_case, "do not lowercase");
      c.flag("keep-accents", *keep_accents, "do not strip diacritics");
      c.option("out", *out, "vocabulary JSON");
      c.require({"corpus", "out"});
      c.action([=](Command&) {
        const auto n = normalizer_of(*keep_case, *keep_accents);
        train_bpe(read_corpus(*corpus, n), *size, *min_freq, n).save(*out);
      });
    }
    {
      auto& c = add("tokenize", "split text into sub-word tokens, one line per input line");
      auto vocab = std::make_shared<std::string>(), in = std::make_shared<std::string>(), out = std::make_shared<std::string>();
      auto ids = std::make_shared<bool>(false);
      c.option("vocab", *vocab, "vocabulary JSON");
      c.option("in", *in, "input text");
      c.option("out", *out, "output file, standard output when empty");
      c.flag("ids", *ids, "print token ids instead of strings");
      c.require({"vocab", "in"});
      c.action([=](Command& cmd) {
        const auto v = Vocabulary::load(*vocab);
        std::string text;
        for (const auto& line : split_lines(read_file(*in))) {
          const auto enc = encode(line, v);
          for (std::size_t i = 0; i < enc.ids.size(); ++i) {
            if (i) text += ' ';
            text += *ids ? std::to_string(enc.ids[i]) : v.token(enc.ids[i]);
          }
          text += '\n';
        }
        if (out->empty()) cmd.out() << text;
        else write_file(*out, text);
      });
    }
    {
      auto& c = add("frag-ratio", "sub-word tokens per word of a corpus");
      auto vocab = std::make_shared<std::string>(), corpus = std::make_shared<std::string>();
      c.option("vocab", *vocab, "vocabulary JSON");
      c.option("corpus", *corpus, "corpus file");
      c.require({"vocab", "corpus"});
      c.action([=](Command& cmd) {
        const auto v = Vocabulary::load(*vocab);
        cmd.out() << format_number(fragmentation_ratio(read_corpus(*corpus, v.normalizer()), v).ratio()) << "\n";
      });
    }
    {
      auto& c = add("build-pretrain-data", "sentence pairs with MLM masking as JSONL");
      auto corpus = std::make_shared<std::string>(), vocab = std::make_shared<std::string>(),
           out = std::make_shared<std::string>();
      auto max_len = std::make_shared<std::size_t>(128);
      auto neg = std::make_shared<double>(0.5);
      auto policy = std::make_shared<MaskingPolicy>();
      c.option("corpus", *corpus, "corpus file");
      c.option("vocab", *vocab, "vocabulary JSON");
      c.option("max-len", *max_len, "tokens per instance including specials");
      c.option("negative-prob", *neg, "probability of a random second sentence");
      c.option("select-prob", policy->select_prob, "fraction of tokens selected for prediction");
      c.option("mask-frac", policy->mask_frac, "selected tokens replaced by MASK");
      c.option("random-frac", policy->random_frac, "selected tokens replaced by a random token");
      c.option("keep-frac", policy->keep_frac, "selected tokens left unchanged");
      c.option("out", *out, "instances JSONL");
      c.require({"corpus", "vocab", "out"});
      c.action([=](Command& cmd) {
        const auto v = Vocabulary::load(*vocab);
        MaskingPolicy mp = *policy;
        mp.rng_seed = Rng(cmd.seed()).derive(1).next();
        const auto pairs = build_sentence_pairs(read_corpus(*corpus, v.normalizer()), v, *max_len, *neg, cmd.seed());
        write_instances(mask_instances(pairs, mp, v.size()), *out);
      });
    }
    {
      auto& c = add("pretrain", "MLM and NSP pre-training of a BERT encoder");
      auto data = std::make_shared<std::string>(), vocab = std::make_shared<std::string>(),
           out = std::make_shared<std::string>();
      auto model = std::make_shared<bert::BertConfig>();
      auto pc = std::make_shared<PretrainConfig>();
      c.option("data", *data, "instances JSONL");
      c.option("vocab", *vocab, "vocabulary JSON");
      c.option("out", *out, "output directory");
      c.option("layers", model->layers, "transformer layers");
      c.option("hidden", model->hidden, "hidden size");
      c.option("heads", model->heads, "attention heads");
      c.option("intermediate", model->intermediate, "feed-forward size");
      c.option("max-len", model->max_positions, "position embeddings");
      c.option("dropout", model->dropout, "dropout rate");
      c.option("steps", pc->steps, "optimizer steps");
      c.option("batch-size", pc->batch_size, "instances per step");
      c.option("lr", pc->lr, "Adam learning rate");
      c.option("checkpoint-every", pc->checkpoint_every, "also save every this many steps, 0 for the end only");
      c.option("clip-norm", pc->clip_norm, "gradient norm clip, 0 for none");
      c.require({"data", "vocab", "out"});
      c.action([=](Command& cmd) {
        const auto v = Vocabulary::load(*vocab);
        auto m = *model;
        m.vocab_size = v.size();
        m.validate();
        auto p = *pc;
        p.seed = cmd.seed();
        const auto instances = read_instances(*data);
        for (std::size_t i = 0; i < instances.size(); ++i) {
          try {
            validate_instance(instances[i], m.max_positions, m.vocab_size);
          } catch (const DataError& e) {
            throw DataError(*data + ": instance " + std::to_string(i + 1) + ": " + e.what());
          }
        }
        cmd.prepare_output_dir(*out);
        const nlohmann::json config{{"bert", m}, {"pretrain", p}, {"vocab", plain(v.to_json())}};
        const auto dir = fs::path(*out);
        auto params = bert::init_weights<float>(m, p.seed);
        const auto curve = pretrain<float>(instances, params, m, p, [&](std::size_t step, const bert::ParamMap<float>& w) {
          save_checkpoint((dir / ("step-" + std::to_string(step) + ".bin")).string(), config, w);
          cmd.log() << "step " << step << "\n";
        });
        save_checkpoint((dir / "checkpoint.bin").string(), config, params);
        write_file((dir / "loss_curve.csv").string(), loss_curve_csv(curve));
        const auto acc = evaluate_pretraining<float>(instances, params, m);
        write_json((dir / "metrics.json").string(),
                   {{"steps", p.steps}, {"final_loss", curve.empty() ? 0.0 : curve.back().loss},
                    {"mlm_accuracy", acc.mlm}, {"nsp_accuracy", acc.nsp}, {"eval_loss", acc.loss}});
      });
    }
    {
      auto& c = add("finetune", "fine-tune on PoS tagging, NER or NLI with early stopping");
      auto a = std::make_shared<FinetuneArgs>();
      auto out = std::make_shared<std::string>();
      add_finetune_flags(c, *a);
      c.option("out", *out, "output directory");
      c.require({"out"});
      c.action([=](Command& cmd) {
        auto args = *a;
        args.seed = cmd.seed();
        cmd.prepare_output_dir(*out);
        const auto m = write_finetune_outputs(args, run_finetune(args, cmd.log()), *out);
        cmd.out() << m.at("dev").at("metric").get<std::string>() << " (dev) "
                  << format_number(m.at("dev").at("value").get<double>()) << "\n";
      });
    }
    {
      auto& c = add("grid-search", "fine-tune every grid point and keep the lowest dev loss");
      auto a = std::make_shared<FinetuneArgs>();
      auto grid = std::make_shared<std::string>(), out = std::make_shared<std::string>();
      add_finetune_flags(c, *a);
      c.option("grid", *grid, "JSON object of flag name -> list of values");
      c.option("out", *out, "output directory");
      c.require({"grid", "out"});
      c.action([=](Command& cmd) {
        auto base = *a;
        base.seed = cmd.seed();
        const auto spec = GridSpec::from_json(read_json(*grid));
        for (const auto& [axis, values] : spec.axes) set_hyperparameter(base, axis, values.front());
        cmd.prepare_output_dir(*out);
        std::optional<FinetuneOutcome> best;
        const auto result = grid_search(spec, [&](const ojson& point) {
          auto args = base;
          for (const auto& [k, v] : point.items()) set_hyperparameter(args, k, plain(v));
          auto o = run_finetune(args, cmd.log());
          const double loss = o.fit.best_loss;
          cmd.log() << point.dump() << " dev loss " << format_number(loss) << "\n";
          if (!best || loss < best->fit.best_loss) best = std::move(o);
          return loss;
        });
        auto best_args = base;
        for (const auto& [k, v] : result.best.items()) set_hyperparameter(best_args, k, plain(v));
        const auto best_dir = (fs::path(*out) / "best").string();
        fs::create_directories(best_dir);
        write_finetune_outputs(best_args, *best, best_dir);
        ojson table = ojson::array();
        for (const auto& row : result.table) {
          ojson r{{"point", row.point}};
          r["dev_loss"] = row.dev_loss ? ojson(*row.dev_loss) : ojson(nullptr);
          if (!row.error.empty()) r["error"] = row.error;
          table.push_back(r);
        }
        write_json((fs::path(*out) / "grid.json").string(),
                   {{"best", result.best}, {"best_dev_loss", result.best_loss}, {"best_index", result.best_index},
                    {"table", table}});
        cmd.out() << "best " << result.best.dump() << " dev loss " << format_number(result.best_loss) << "\n";
      });
    }
    {
      auto& c = add("evaluate", "score prediction files against gold data");
      auto task = std::make_shared<std::string>("pos"), gold = std::make_shared<std::string>(),
           report = std::make_shared<std::string>();
      auto preds = std::make_shared<std::vector<std::string>>();
      c.option("task", *task, "pos, ner or nli");
      c.option("gold", *gold, "gold data");
      c.option("pred", *preds, "one or more prediction files (one per seed)");
      c.option("report", *report, "report JSON, standard output only when empty");
      c.require({"gold", "pred"});
      c.action([=](Command& cmd) {
        check_task(*task);
        ojson r;
        if (preds->size() == 1) {
          r = score_files(*task, *gold, preds->front());
        } else {
          ojson runs = ojson::array();
          std::vector<double> values;
          for (const auto& p : *preds) {
            auto s = score_files(*task, *gold, p);
            s["pred"] = p;
            values.push_back(s.at("value").get<double>());
            runs.push_back(std::move(s));
          }
          r = {{"task", *task}, {"metric", runs.front().at("metric")}, {"runs", runs},
               {"summary", ojson::parse(to_json(summarize(values)).dump())}};
        }
        if (!report->empty()) {
          const auto parent = fs::path(*report).parent_path();
          if (!parent.empty()) fs::create_directories(parent);
          write_json(*report, r);
        }
        cmd.out() << r.dump(2) << "\n";
      });
    }
    {
      auto& c = add("score-pairs", "pseudo-perplexity of sentence pairs under a pre-trained MLM");
      auto ckpt = std::make_shared<std::string>(), vocab = std::make_shared<std::string>(),
           in = std::make_shared<std::string>(), out = std::make_shared<std::string>(),
           report = std::make_shared<std::string>();
      auto fraction = std::make_shared<double>(1.0);
      c.option("ckpt", *ckpt, "pre-trained checkpoint file or directory");
      c.option("vocab", *vocab, "vocabulary JSON, the checkpoint's when empty");
      c.option("in", *in, "pairs JSONL");
      c.option("out", *out, "retained pairs JSONL, lowest perplexity first");
      c.option("keep-fraction", *fraction, "fraction of pairs retained");
      c.option("report", *report, "selection summary JSON");
      c.require({"ckpt", "in", "out"});
      c.action([=](Command& cmd) {
        const auto ck = load_checkpoint<float>(checkpoint_file(*ckpt));
        const auto conf = ck.config.at("bert").get<bert::BertConfig>();
        const auto v = vocab->empty() ? Vocabulary::from_json(ck.config.at("vocab")) : Vocabulary::load(*vocab);
        if (v.size() != conf.vocab_size) throw DataError("vocabulary size does not match the checkpoint");
        std::vector<ojson> raw;
        const auto pairs = finetune::read_nli(*in, &raw);
        const denoiser::BertScorer<float> scorer(ck.params, conf);
        std::vector<denoiser::ScoredPair> scored;
        for (const auto& p : pairs) scored.push_back(denoiser::pseudo_perplexity(p, scorer, v, conf.max_positions));
        const auto sel = denoiser::select_top_fraction(scored, *fraction);
        std::vector<std::size_t> order(scored.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return scored[x].ppl < scored[y].ppl; });
        std::string text;
        for (std::size_t k = 0; k < sel.retained.size(); ++k) {
          auto r = raw[order[k]];
          r["ppl"] = scored[order[k]].ppl;
          r["token_count"] = scored[order[k]].token_count;
          text += r.dump() + "\n";
        }
        write_file(*out, text);
        if (!report->empty()) write_file(*report, sel.report.dump(2) + "\n");
        cmd.out() << "retained " << sel.retained.size() << " of " << scored.size() << "\n";
      });
    }
  }

  static std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start < text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      out.push_back(text.substr(start, end - start));
      start = end + 1;
    }
    return out;
  }
};

/// Parses `args` (without the program name) and runs the subcommand.
/// Returns 0 on success, 1 on bad data, 2 on usage errors.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Cli cli;
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    cli.app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = cli.app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }
  for (auto& c : cli.commands) {
    if (!c->app()->parsed()) continue;
    try {
      c->run(out, err);
      return kOk;
    } catch (const ConfigError& e) {
      err << "usage error: " << e.what() << "\n\n" << c->app()->help();
      return kUsageError;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kDataError;
    }
  }
  return kUsageError;
}

}  // namespace hlm::cli
