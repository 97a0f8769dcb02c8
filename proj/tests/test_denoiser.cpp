#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "denoise_setup.hpp"
#include "hlm/denoiser.hpp"

namespace bert = hlm::bert;
namespace dn = hlm::denoiser;
namespace ft = hlm::finetune;

namespace {

struct ConstantScorer {
  double ce;
  std::vector<double> cross_entropy(std::span<const dn::MaskedQuery> q) const { return std::vector<double>(q.size(), ce); }
};

hlm::Vocabulary small_vocab() {
  std::vector<hlm::Document> docs{{{"ενα δυο τρια", "τεσσερα πεντε εξι"}, ""}};
  return hlm::train_bpe(docs, 60);
}

std::vector<dn::ScoredPair> scored(const std::vector<double>& ppl) {
  std::vector<dn::ScoredPair> out;
  for (std::size_t i = 0; i < ppl.size(); ++i) out.push_back({{std::to_string(i), "x", ft::NliLabel::neutral}, 1, ppl[i]});
  return out;
}

std::vector<std::string> premises(const std::vector<dn::ScoredPair>& s) {
  std::vector<std::string> out;
  for (const auto& p : s) out.push_back(p.pair.premise);
  return out;
}

}  // namespace

TEST(PseudoPerplexity, CertainModelScoresOne) {
  const auto v = small_vocab();
  const auto s = dn::pseudo_perplexity(ft::NliPair{"ενα δυο", "τρια", ft::NliLabel::neutral}, ConstantScorer{0.0}, v, 32);
  EXPECT_EQ(s.ppl, 1.0);
  EXPECT_EQ(s.token_count, hlm::encode("ενα δυο", v).size() + hlm::encode("τρια", v).size());
}

TEST(PseudoPerplexity, UniformModelScoresVocabularySize) {
  const auto v = small_vocab();
  bert::BertConfig c;
  c.vocab_size = v.size();
  c.max_positions = 32;
  auto p = bert::init_weights<float>(c, 3);
  // transform output pinned to zero leaves only the zero bias: uniform logits
  for (auto& x : p.at("mlm/ln/gain").mutable_data()) x = 0;
  const dn::BertScorer<float> scorer(p, c);
  const auto s = dn::pseudo_perplexity(ft::NliPair{"ενα δυο", "πεντε εξι", ft::NliLabel::neutral}, scorer, v, 32);
  EXPECT_NEAR(s.ppl, static_cast<double>(v.size()), 1e-4 * v.size());
}

TEST(PseudoPerplexity, EmptyPairIsAnError) {
  const auto v = small_vocab();
  EXPECT_THROW(dn::pseudo_perplexity(ft::NliPair{"", " ", ft::NliLabel::neutral}, ConstantScorer{0.0}, v, 32),
               hlm::DataError);
}

TEST(PseudoPerplexity, MaskedCopiesCoverEveryNonSpecialPosition) {
  const ft::EncodedPair e{{hlm::special::cls, 7, 8, hlm::special::sep, 9, hlm::special::sep}, {0, 0, 0, 0, 1, 1}, 0};
  const auto q = dn::masked_copies(e);
  ASSERT_EQ(q.size(), 3u);
  const std::vector<int> positions{1, 2, 4};
  for (std::size_t i = 0; i < q.size(); ++i) {
    EXPECT_EQ(q[i].position, positions[i]);
    EXPECT_EQ(q[i].label, e.ids[positions[i]]);
    EXPECT_EQ(q[i].ids[positions[i]], hlm::special::mask);
    EXPECT_EQ(std::count(q[i].ids.begin(), q[i].ids.end(), hlm::special::mask), 1);
  }
}

class OverfitDenoiser : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { fixture_ = new hlm::testing::DenoiseFixture(hlm::testing::overfit_denoiser(16, 400)); }
  static void TearDownTestSuite() { delete fixture_; }
  static hlm::testing::DenoiseFixture* fixture_;
};
hlm::testing::DenoiseFixture* OverfitDenoiser::fixture_ = nullptr;

TEST_F(OverfitDenoiser, BatchedSequentialAndShuffledOrderAgree) {
  const auto& f = *fixture_;
  const dn::BertScorer<float> scorer(f.params, f.config);
  hlm::Rng rng(4);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto batched = dn::pseudo_perplexity(f.clean[i], scorer, f.vocab, 64, true);
    const auto sequential = dn::pseudo_perplexity(f.clean[i], scorer, f.vocab, 64, false);
    EXPECT_NEAR(batched.ppl, sequential.ppl, 1e-5 * batched.ppl);
    auto queries = dn::masked_copies(ft::encode_pair(f.clean[i], f.vocab, 64));
    rng.shuffle(queries.begin(), queries.end());
    double sum = 0;
    for (double ce : scorer.cross_entropy(queries)) sum += ce;
    EXPECT_NEAR(std::exp(sum / static_cast<double>(queries.size())), batched.ppl, 1e-5 * batched.ppl);
    EXPECT_EQ(dn::pseudo_perplexity(f.clean[i], scorer, f.vocab, 64).ppl, batched.ppl);
    EXPECT_GE(batched.ppl, 1.0);
  }
}

TEST_F(OverfitDenoiser, CleanPairsScoreBelowTheirShuffledCopies) {
  const auto& f = *fixture_;
  const dn::BertScorer<float> scorer(f.params, f.config);
  std::size_t lower = 0;
  for (std::size_t i = 0; i < f.clean.size(); ++i)
    lower += dn::pseudo_perplexity(f.clean[i], scorer, f.vocab, 64).ppl <
             dn::pseudo_perplexity(f.corrupted[i], scorer, f.vocab, 64).ppl;
  EXPECT_GE(static_cast<double>(lower), 0.9 * static_cast<double>(f.clean.size()));
}

TEST(Selection, FullFractionIsSortedIdentity) {
  const auto s = dn::select_top_fraction(scored({3, 1, 2, 1}), 1.0);
  EXPECT_EQ(premises(s.retained), (std::vector<std::string>{"1", "3", "2", "0"}));
  EXPECT_EQ(s.report["retained"], 4);
}

TEST(Selection, ThreeLowestOfTen) {
  const auto s = dn::select_top_fraction(scored({9, 4, 7, 0.5, 8, 3, 6, 5, 2, 10}), 0.3);
  EXPECT_EQ(premises(s.retained), (std::vector<std::string>{"3", "8", "5"}));
  EXPECT_EQ(s.report["threshold_ppl"], 3.0);
  EXPECT_EQ(s.report["total"], 10);
}

TEST(Selection, MatchesSortOracleAndNests) {
  hlm::Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> ppl(1 + rng.uniform_index(40));
    for (auto& p : ppl) p = 1.0 + static_cast<double>(rng.uniform_index(8));  // many ties
    const auto input = scored(ppl);
    std::vector<std::size_t> oracle(ppl.size());
    for (std::size_t i = 0; i < oracle.size(); ++i) oracle[i] = i;
    // insertion sort: stable by construction
    for (std::size_t i = 1; i < oracle.size(); ++i)
      for (std::size_t j = i; j > 0 && ppl[oracle[j]] < ppl[oracle[j - 1]]; --j) std::swap(oracle[j], oracle[j - 1]);
    std::vector<std::string> previous;
    for (double fraction : {0.1, 0.25, 0.5, 0.75, 1.0}) {
      const auto got = premises(dn::select_top_fraction(input, fraction).retained);
      const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ppl.size()) - 1e-9));
      ASSERT_EQ(got.size(), std::max<std::size_t>(keep, 1));
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], std::to_string(oracle[i]));
      ASSERT_LE(previous.size(), got.size());
      EXPECT_TRUE(std::equal(previous.begin(), previous.end(), got.begin()));
      previous = got;
    }
  }
}

TEST(Selection, ExactProductsAreNotRoundedUp) {
  // 0.3 * 10 is 3.0000000000000004 in binary
  EXPECT_EQ(dn::select_top_fraction(scored({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}), 0.3).retained.size(), 3u);
  EXPECT_EQ(dn::select_top_fraction(scored({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}), 0.31).retained.size(), 4u);
}

TEST(Selection, Errors) {
  EXPECT_THROW(dn::select_top_fraction(scored({1}), 0.0), hlm::ConfigError);
  EXPECT_THROW(dn::select_top_fraction(scored({1}), 1.5), hlm::ConfigError);
  EXPECT_THROW(dn::select_top_fraction(scored({1}), std::nan("")), hlm::ConfigError);
  EXPECT_THROW(dn::select_top_fraction({}, 0.5), hlm::DataError);
}
