// crowdqc/tests/test_metrics.cpp

#include <gtest/gtest.h>

#include <random>

#include "crowdqc/metrics.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

namespace crowdqc {
namespace {

TokenSeq T(std::initializer_list<const char *> w) { return TokenSeq(w.begin(), w.end()); }

TEST(Breakdown, Examples) {
  auto b = breakdown(T({"the", "cat"}), T({"the", "cat"}));
  EXPECT_EQ(b.errors(), 0);
  EXPECT_EQ(b.twer(), 0.0);

  b = breakdown(T({"the", "bat", "sat"}), T({"the", "cat", "sat"}));
  EXPECT_EQ(b.substitutions, 1);
  EXPECT_NEAR(b.twer(), 1.0 / 3.0, 1e-15);

  b = breakdown(T({}), T({"a", "b"}));
  EXPECT_EQ(b.deletions, 2);
  EXPECT_DOUBLE_EQ(b.twer(), 1.0);

  b = breakdown(T({"a", "x", "b"}), T({"a", "b"}));
  EXPECT_EQ(b.insertions, 1);
  EXPECT_DOUBLE_EQ(b.ins_rate(), 0.5);

  EXPECT_THROW(breakdown(T({"a"}), T({})), DataError);
  EXPECT_EQ(breakdown(T({}), T({})).twer(), 0.0);
}

TEST(Breakdown, InsertionsCanExceedOneHundredPercent) {
  auto b = breakdown(T({"a", "b", "c", "d"}), T({"a"}));
  EXPECT_DOUBLE_EQ(b.twer(), 3.0);
}

TEST(EditAlign, TieBreakPrefersSubstitutionThenDeletion) {
  // hyp "b" vs ref "a c": sub+del and del+sub tie; backtrace from the end
  // prefers the substitution at the last column.
  auto al = edit_align(T({"b"}), T({"a", "c"}));
  ASSERT_EQ(al.ops.size(), 2u);
  EXPECT_EQ(al.ops[0].op, EditOp::kDelete);
  EXPECT_EQ(al.ops[1].op, EditOp::kSubstitute);
}

TEST(EditAlign, MatchesBruteForceOracle) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> len(0, 8), sym(0, 3);
  const char *alphabet[] = {"a", "b", "c", "d"};
  for (int trial = 0; trial < 300; ++trial) {
    TokenSeq h, r;
    for (int n = len(rng); n > 0; --n) h.push_back(alphabet[sym(rng)]);
    for (int n = len(rng); n > 0; --n) r.push_back(alphabet[sym(rng)]);
    auto al = edit_align(h, r);
    EXPECT_EQ(al.distance, testing::naive_distance(h, r, h.size(), r.size()));
    auto expect = testing::naive_alignment(h, r);
    ASSERT_EQ(al.ops.size(), expect.size());
    for (std::size_t k = 0; k < expect.size(); ++k) {
      EXPECT_EQ(al.ops[k].op, expect[k].op);
      EXPECT_EQ(al.ops[k].hyp_index, expect[k].hyp_index);
      EXPECT_EQ(al.ops[k].ref_index, expect[k].ref_index);
    }
    EXPECT_EQ(edit_distance(h, r), al.distance);
  }
}

TEST(EditDistance, MetricProperties) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> len(0, 10), sym(0, 2);
  const char *alphabet[] = {"x", "y", "z"};
  auto draw = [&] {
    TokenSeq s;
    for (int n = len(rng); n > 0; --n) s.push_back(alphabet[sym(rng)]);
    return s;
  };
  for (int trial = 0; trial < 500; ++trial) {
    TokenSeq a = draw(), b = draw(), c = draw();
    EXPECT_EQ(edit_distance(a, b), edit_distance(b, a));
    EXPECT_EQ(edit_distance(a, a), 0u);
    EXPECT_LE(edit_distance(a, c), edit_distance(a, b) + edit_distance(b, c));
    auto al = edit_align(a, b);
    long errs = 0;
    std::size_t hyp_seen = 0, ref_seen = 0;
    for (const auto &op : al.ops) {
      errs += op.op == EditOp::kMatch ? 0 : 1;
      hyp_seen += op.hyp_index ? 1 : 0;
      ref_seen += op.ref_index ? 1 : 0;
    }
    EXPECT_EQ(static_cast<std::size_t>(errs), al.distance);
    EXPECT_EQ(hyp_seen, a.size());
    EXPECT_EQ(ref_seen, b.size());
  }
}

TEST(CorpusTwer, IsMicroAveraged) {
  std::vector<Utterance> utts = {{"a", Subset::kDevClean, T({"one"}), {}, {}},
                                 {"b", Subset::kDevClean, T({"w", "w", "w", "w", "w", "w", "w",
                                                             "w", "w", "w"}), {}, {}}};
  Corpus c(utts, {});
  std::map<std::string, TokenSeq> hyp = {{"a", T({})},
                                         {"b", T({"w", "w", "w", "w", "w", "w", "w", "w", "w",
                                                  "w"})}};
  auto r = corpus_twer(c, hyp);
  // pooled 1/11, not the 50% macro average
  EXPECT_NEAR(r.total.twer(), 1.0 / 11.0, 1e-15);
  EXPECT_NEAR(r.per_subset.at(Subset::kDevClean).twer(), 1.0 / 11.0, 1e-15);
  hyp.erase("b");
  EXPECT_EQ(corpus_twer(c, hyp).total.twer(), 1.0);  // only hypothesized utterances count
  hyp["zz"] = T({"x"});
  EXPECT_THROW(corpus_twer(c, hyp), DataError);
}

TEST(CorpusTwer, PooledRateEqualsSumOfCounts) {
  testing::SyntheticOptions opt;
  opt.train_utterances = 30;
  opt.eval_utterances = 10;
  opt.emissions = false;
  Corpus c = testing::SyntheticCorpus(opt).corpus();
  auto r = raw_twer(c);
  long errors = 0, words = 0;
  for (const auto &resp : c.responses()) {
    const auto &ref = *c.find(resp.utterance_id)->reference;
    errors += static_cast<long>(edit_distance(resp.text, ref));
    words += static_cast<long>(ref.size());
  }
  EXPECT_EQ(r.total.errors(), errors);
  EXPECT_EQ(r.total.ref_words, words);
  ErrorBreakdown sum;
  for (const auto &[s, b] : r.per_subset) sum += b;
  EXPECT_EQ(sum, r.total);
}

TEST(Agreement, PeerDistances) {
  std::vector<TokenSeq> rs = {T({"a", "b"}), T({"a", "b"}), T({"a", "c", "d"})};
  auto f = agreement_features(rs);
  ASSERT_EQ(f.size(), 3u);
  EXPECT_DOUBLE_EQ(f[0].min_peer_distance, 0.0);
  EXPECT_DOUBLE_EQ(f[0].mean_peer_distance, (0.0 + 2.0 / 3.0) / 2.0);
  EXPECT_DOUBLE_EQ(f[2].min_peer_distance, 2.0 / 3.0);
  auto single = agreement_features(std::vector<TokenSeq>{T({"x"})});
  EXPECT_DOUBLE_EQ(single[0].mean_peer_distance, 1.0);
  EXPECT_DOUBLE_EQ(normalized_distance(T({}), T({})), 0.0);
}

}  // namespace
}  // namespace crowdqc
