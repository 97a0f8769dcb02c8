#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck_models.hpp"
#include "hlm/trainer.hpp"

namespace ad = hlm::ad;
namespace bert = hlm::bert;
namespace fs = std::filesystem;
using hlm::ParamMap;

namespace {

ParamMap<double> single(const std::string& name, ad::Tensor<double> t) { return {{name, t}}; }

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("hlm_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

bert::BertConfig mini(std::size_t vocab = 40) {
  bert::BertConfig c;
  c.vocab_size = vocab;
  c.max_positions = 24;
  return c;
}

std::vector<hlm::PretrainInstance> toy_instances(std::uint64_t seed, std::size_t n, std::size_t vocab) {
  hlm::Rng rng(seed);
  std::vector<hlm::PretrainInstance> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(hlm::testing::random_instance(rng, vocab, 16));
  return out;
}

}  // namespace

TEST(Adam, FirstStepWithUnitGradient) {
  auto p = single("w", ad::Tensor<double>::zeros({3, 2}, true));
  for (auto& g : p.at("w").mutable_grad()) g = 1.0;
  hlm::AdamState s;
  hlm::adam_step(p, s, {0.1});
  for (double w : p.at("w").data()) EXPECT_NEAR(w, -0.1, 1e-6);
  EXPECT_EQ(s.t, 1u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = single("w", ad::Tensor<double>::from({1, 3}, {0.5, -2.0, 3.0}, true));
  hlm::AdamState s;
  for (int i = 0; i < 10; ++i) {
    hlm::zero_grads(p);
    hlm::adam_step(p, s, {0.1});
  }
  EXPECT_EQ(std::vector<double>(p.at("w").data().begin(), p.at("w").data().end()), (std::vector<double>{0.5, -2.0, 3.0}));
}

TEST(Adam, QuadraticMatchesScalarSimulation) {
  auto p = single("x", ad::Tensor<double>::from({1, 1}, {1.0}, true));
  hlm::AdamState s;
  for (int t = 0; t < 100; ++t) {
    hlm::zero_grads(p);
    auto& x = p.at("x");
    ad::backward(ad::mul(x, x));
    hlm::adam_step(p, s, {0.05});
  }
  EXPECT_NEAR(p.at("x").item(), -0.00421140038463883, 1e-12);
  EXPECT_LT(std::abs(p.at("x").item()), 0.2);
}

TEST(Adam, MatchesScalarReferenceOnRandomInputs) {
  hlm::Rng rng(5);
  auto p = single("w", hlm::testing::random_tensor(rng, {4, 5}));
  std::vector<double> x(p.at("w").data().begin(), p.at("w").data().end()), m(20, 0), v(20, 0);
  hlm::AdamState s;
  const hlm::AdamConfig cfg{0.01, 0.8, 0.99, 1e-6};
  for (int t = 1; t <= 20; ++t) {
    auto g = p.at("w").mutable_grad();
    for (std::size_t i = 0; i < 20; ++i) g[i] = rng.normal();
    for (std::size_t i = 0; i < 20; ++i) {
      m[i] = 0.8 * m[i] + 0.2 * g[i];
      v[i] = 0.99 * v[i] + 0.01 * g[i] * g[i];
      x[i] -= 0.01 * (m[i] / (1 - std::pow(0.8, t))) / (std::sqrt(v[i] / (1 - std::pow(0.99, t))) + 1e-6);
    }
    hlm::adam_step(p, s, cfg);
  }
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(p.at("w").data()[i], x[i], 1e-7);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  auto p = single("layer0/ffn/in/w", ad::Tensor<double>::zeros({1, 2}, true));
  p.at("layer0/ffn/in/w").mutable_grad()[1] = std::nan("");
  hlm::AdamState s;
  try {
    hlm::adam_step(p, s, {});
    FAIL();
  } catch (const hlm::NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0/ffn/in/w"), std::string::npos);
  }
}

TEST(Adam, ClippingBoundsTheGlobalNorm) {
  auto p = single("w", ad::Tensor<double>::zeros({1, 2}, true));
  p.at("w").mutable_grad()[0] = 30.0;
  p.at("w").mutable_grad()[1] = 40.0;
  hlm::AdamState s;
  hlm::adam_step(p, s, {0.1, 0.9, 0.999, 1e-8, 5.0});
  EXPECT_NEAR(s.m.at("w")[0], 0.1 * 3.0, 1e-12);
  EXPECT_NEAR(s.m.at("w")[1], 0.1 * 4.0, 1e-12);
}

TEST(Checkpoint, LayoutIsBitExact) {
  ParamMap<float> p;
  p["b"] = ad::Tensor<float>::from({1, 1}, {1.0f});
  p["a"] = ad::Tensor<float>::from({2}, {-2.0f, 0.5f});
  const auto bytes = hlm::serialize_checkpoint<float>({{"k", 1}}, p);
  ASSERT_EQ(bytes.substr(0, 4), "HLM1");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t meta_len = raw[4] | raw[5] << 8 | raw[6] << 16 | raw[7] << 24;
  const auto meta = nlohmann::json::parse(bytes.substr(8, meta_len));
  EXPECT_EQ(meta["config"]["k"], 1);
  EXPECT_EQ(meta["tensors"][0]["name"], "a");
  EXPECT_EQ(meta["tensors"][1]["name"], "b");
  EXPECT_EQ(meta["tensors"][1]["offset"], 8);
  EXPECT_EQ(bytes.size(), 8 + meta_len + 12);
  // -2.0f = 0xC0000000 little-endian
  const std::string expect_a("\x00\x00\x00\xC0", 4);
  EXPECT_EQ(bytes.substr(8 + meta_len, 4), expect_a);
}

TEST(Checkpoint, RoundTripGivesBitIdenticalForward) {
  const auto c = mini();
  auto p = bert::init_weights<float>(c, 3);
  const auto dir = scratch("roundtrip");
  const auto path = (dir / "model.hlm").string();
  hlm::save_checkpoint<float>(path, nlohmann::json(c), p);
  EXPECT_FALSE(fs::exists(path + ".tmp"));
  const auto ck = hlm::load_checkpoint<float>(path);
  EXPECT_EQ(ck.config.get<bert::BertConfig>(), c);
  const auto data = toy_instances(4, 4, c.vocab_size);
  const auto a = bert::pretrain_loss<float>(data, p, c);
  const auto b = bert::pretrain_loss<float>(data, ck.params, c);
  EXPECT_EQ(a.total.item(), b.total.item());
  const std::vector<int> rows{0, 1, 2};
  const auto ha = bert::encode<float>(data[0].ids, data[0].segment_ids, data[0].attention_length, p, c);
  const auto hb = bert::encode<float>(data[0].ids, data[0].segment_ids, data[0].attention_length, ck.params, c);
  const auto la = bert::mlm_logits(ha, rows, p), lb = bert::mlm_logits(hb, rows, ck.params);
  EXPECT_TRUE(std::equal(la.data().begin(), la.data().end(), lb.data().begin()));
}

TEST(Checkpoint, FailedWriteLeavesNoPartialFile) {
  const auto dir = scratch("failed");
  fs::create_directories(dir / "taken");
  ParamMap<float> p{{"w", ad::Tensor<float>::zeros({1, 1})}};
  // renaming a file onto a non-empty directory fails
  std::ofstream(dir / "taken" / "x") << "x";
  EXPECT_ANY_THROW(hlm::save_checkpoint<float>((dir / "taken").string(), {}, p));
  EXPECT_FALSE(fs::exists(dir / "taken.tmp"));
  EXPECT_THROW(hlm::save_checkpoint<float>((dir / "missing" / "m.hlm").string(), {}, p), hlm::DataError);
  EXPECT_FALSE(fs::exists(dir / "missing"));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  EXPECT_THROW(hlm::parse_checkpoint<float>("HLM2\0\0\0\0"), hlm::DataError);
  ParamMap<float> p{{"w", ad::Tensor<float>::zeros({4, 4})}};
  auto bytes = hlm::serialize_checkpoint<float>({}, p);
  bytes.resize(bytes.size() - 1);
  EXPECT_THROW(hlm::parse_checkpoint<float>(bytes), hlm::DataError);
}

TEST(Pretrain, ZeroStepsKeepsInitialization) {
  const auto c = mini();
  auto p = bert::init_weights<float>(c, 3);
  const auto before = hlm::serialize_checkpoint<float>({}, p);
  hlm::PretrainConfig cfg;
  cfg.steps = 0;
  EXPECT_TRUE(hlm::pretrain<float>(toy_instances(1, 8, c.vocab_size), p, c, cfg).empty());
  EXPECT_EQ(hlm::serialize_checkpoint<float>({}, p), before);
}

TEST(Pretrain, SameSeedGivesIdenticalCheckpoints) {
  const auto c = mini();
  const auto data = toy_instances(2, 12, c.vocab_size);
  hlm::PretrainConfig cfg;
  cfg.steps = 20;
  cfg.batch_size = 4;
  cfg.seed = 9;
  const auto run = [&] {
    auto p = bert::init_weights<float>(c, 1);
    hlm::pretrain<float>(data, p, c, cfg);
    return hlm::serialize_checkpoint<float>(nlohmann::json(c), p);
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  cfg.seed = 10;
  EXPECT_NE(a, run());
}

TEST(Pretrain, RepeatedBatchLossDecreases) {
  const auto c = mini();
  const auto data = toy_instances(3, 4, c.vocab_size);
  auto p = bert::init_weights<float>(c, 2);
  hlm::PretrainConfig cfg;
  cfg.steps = 50;
  cfg.batch_size = 4;
  cfg.lr = 1e-3;
  std::size_t calls = 0;
  cfg.checkpoint_every = 10;
  const auto curve = hlm::pretrain<float>(data, p, c, cfg, [&](std::size_t, const ParamMap<float>&) { ++calls; });
  ASSERT_EQ(curve.size(), 50u);
  EXPECT_EQ(calls, 5u);
  for (const auto& pt : curve) EXPECT_GE(pt.loss, 0.0);
  EXPECT_LT(curve.back().loss, curve.front().loss);
  const auto csv = hlm::loss_curve_csv(curve);
  EXPECT_EQ(csv.substr(0, 12), "step,loss\n1,");
}

TEST(Pretrain, EmptyDataIsDataError) {
  const auto c = mini();
  auto p = bert::init_weights<float>(c, 2);
  EXPECT_THROW(hlm::pretrain<float>({}, p, c, {}), hlm::DataError);
}

TEST(EarlyStopping, DefinitionTrace) {
  hlm::EarlyStopping es(3);
  const std::vector<double> losses{3, 2, 2.1, 2.2, 2.3};
  std::size_t stopped_after = 0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    es.observe(losses[i]);
    if (es.should_stop()) {
      stopped_after = i + 1;
      break;
    }
  }
  EXPECT_EQ(stopped_after, 5u);
  EXPECT_EQ(es.best_epoch(), 2u);
}

TEST(EarlyStopping, RestoresBestWeights) {
  const std::vector<double> losses{5, 4, 4.5, 3.5, 3.6, 3.5, 3.7, 9};
  int weights = 0;
  const auto r = hlm::train_until_stopped<int>(
      [&](std::size_t epoch) {
        weights = static_cast<int>(epoch);
        return losses[epoch - 1];
      },
      [&] { return weights; }, [&](const int& w) { weights = w; });
  // 3.5 at epoch 6 ties the best and does not count as an improvement
  EXPECT_EQ(r.history.size(), 7u);
  EXPECT_EQ(r.best_epoch, 4u);
  EXPECT_EQ(weights, 4);
  EXPECT_TRUE(r.stopped);
  for (double l : r.history) EXPECT_GE(l, r.best_loss);
}

TEST(EarlyStopping, EpochCapEndsRun) {
  int weights = 0;
  const auto r = hlm::train_until_stopped<int>([&](std::size_t e) { return 10.0 - static_cast<double>(e); },
                                              [&] { return weights; }, [&](const int& w) { weights = w; }, 3, 6);
  EXPECT_FALSE(r.stopped);
  EXPECT_EQ(r.best_epoch, 6u);
}

TEST(Grid, EnumerationOrderAndSinglePoint) {
  const auto g = hlm::GridSpec::from_json(nlohmann::ordered_json::parse(R"({"lr":[1,2],"batch":[16,32,64]})"));
  ASSERT_EQ(g.size(), 6u);
  EXPECT_EQ(g.point(0).dump(), R"({"lr":1,"batch":16})");
  EXPECT_EQ(g.point(1).dump(), R"({"lr":1,"batch":32})");
  EXPECT_EQ(g.point(3).dump(), R"({"lr":2,"batch":16})");
  const auto one = hlm::GridSpec::from_json(nlohmann::ordered_json::parse(R"({"lr":[0.5]})"));
  EXPECT_EQ(hlm::grid_search(one, [](const auto&) { return 1.0; }).best["lr"], 0.5);
}

TEST(Grid, WinnerMatchesExhaustiveMinimumAndTiesGoEarlier) {
  const auto g = hlm::GridSpec::from_json(nlohmann::ordered_json::parse(R"({"a":[0,1,2],"b":[0,1]})"));
  const auto f = [](const nlohmann::ordered_json& p) {
    const double a = p["a"].get<double>(), b = p["b"].get<double>();
    return (a - 1.2) * (a - 1.2) + (b - 0.1) * (b - 0.1);
  };
  const auto r = hlm::grid_search(g, f);
  double best = 1e9;
  std::size_t arg = 0;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (f(g.point(i)) < best) best = f(g.point(i)), arg = i;
  EXPECT_EQ(r.best_index, arg);
  EXPECT_EQ(r.table.size(), 6u);
  EXPECT_EQ(hlm::grid_search(g, [](const auto&) { return 2.0; }).best_index, 0u);
}

TEST(Grid, FailuresAreRecordedAndTotalFailureAggregated) {
  const auto g = hlm::GridSpec::from_json(nlohmann::ordered_json::parse(R"({"a":[0,1,2]})"));
  const auto r = hlm::grid_search(g, [](const nlohmann::ordered_json& p) {
    if (p["a"] == 0) throw hlm::NumericalError("diverged");
    return p["a"].get<double>();
  });
  EXPECT_EQ(r.best_index, 1u);
  EXPECT_EQ(r.table[0].error, "diverged");
  try {
    hlm::grid_search(g, [](const auto&) -> double { throw hlm::NumericalError("boom"); });
    FAIL();
  } catch (const hlm::Error& e) {
    EXPECT_NE(std::string(e.what()).find("every grid point failed"), std::string::npos);
  }
  EXPECT_THROW(hlm::GridSpec::from_json(nlohmann::ordered_json::parse(R"({"a":[]})")), hlm::ConfigError);
}

TEST(Seeds, MeanAndUnbiasedStd) {
  const auto r = hlm::repeat_with_seeds([](std::uint64_t s) { return static_cast<double>(s); }, {1, 2, 3});
  EXPECT_DOUBLE_EQ(r.mean, 2.0);
  EXPECT_DOUBLE_EQ(r.std, 1.0);
  EXPECT_EQ(r.n(), 3u);
  EXPECT_EQ(hlm::summarize({5, 5, 5}).std, 0.0);
  EXPECT_THROW(hlm::summarize({1.0}), hlm::ConfigError);
  hlm::Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> v{rng.normal(), rng.normal(), rng.normal()};
    const double mean = (v[0] + v[1] + v[2]) / 3;
    const double var = ((v[0] - mean) * (v[0] - mean) + (v[1] - mean) * (v[1] - mean) + (v[2] - mean) * (v[2] - mean)) / 2;
    const auto s = hlm::summarize(v);
    EXPECT_NEAR(s.mean, mean, 1e-12);
    EXPECT_NEAR(s.std, std::sqrt(var), 1e-12);
  }
}
