// crowdqc/tests/test_corpus.cpp

#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "crowdqc/corpus.hpp"
#include "support/synthetic.hpp"

namespace crowdqc {
namespace {

TEST(NormalizeText, StripsPunctuationAndLowercases) {
  EXPECT_EQ(normalize_text("Hello, World!"), (TokenSeq{"hello", "world"}));
  EXPECT_EQ(normalize_text(""), TokenSeq{});
  EXPECT_EQ(normalize_text("   \t "), TokenSeq{});
}

TEST(NormalizeText, QuestionMarkBecomesUnknown) {
  EXPECT_EQ(normalize_text("I can't ? go"), (TokenSeq{"i", "can't", "<unk>", "go"}));
  EXPECT_EQ(normalize_text("the bo?t sank"), (TokenSeq{"the", "<unk>", "sank"}));
}

TEST(NormalizeText, ApostrophesOnlyInsideWords) {
  EXPECT_EQ(normalize_text("'quoted' don't"), (TokenSeq{"quoted", "don't"}));
  EXPECT_EQ(normalize_text("it\xE2\x80\x99s"), (TokenSeq{"it's"}));
}

TEST(NormalizeText, DigitsKeptVerbatim) {
  EXPECT_EQ(normalize_text("Room 42."), (TokenSeq{"room", "42"}));
}

TEST(NormalizeText, IdempotentOnRandomStrings) {
  std::mt19937_64 rng(3);
  const std::string alphabet = "abcXYZ' ?,.!-\t019";
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1), len(0, 30);
  for (int trial = 0; trial < 2000; ++trial) {
    std::string s;
    for (std::size_t n = len(rng); n > 0; --n) s += alphabet[pick(rng)];
    TokenSeq once = normalize_text(s);
    EXPECT_EQ(normalize_text(join_tokens(once)), once) << "input: " << s;
    for (const auto &tok : once) {
      EXPECT_FALSE(tok.empty());
      EXPECT_EQ(tok.find_first_of(" \t"), std::string::npos);
    }
  }
}

TEST(Subset, NamesRoundTrip) {
  for (Subset s : kAllSubsets) EXPECT_EQ(parse_subset(subset_name(s)), s);
  EXPECT_FALSE(parse_subset("train-clean-100"));
  EXPECT_EQ(parse_subset_list("all").size(), kAllSubsets.size());
  EXPECT_EQ(parse_subset_list("dev-clean,test-other"),
            (std::vector<Subset>{Subset::kDevClean, Subset::kTestOther}));
  EXPECT_THROW(parse_subset_list("dev-clean,nope"), UsageError);
}

constexpr const char *kRefs =
    "utterance_id\tsubset\tduration_s\treference_text\n"
    "u1\tdev-clean\t2.5\tthe cat sat\n"
    "u2\ttest-other\t\tno reference here\n"
    "u3\ttest-other\t1.0\t\n";

constexpr const char *kResponses =
    "utterance_id\tworker_id\tsubmit_order\tspend_time\traw_text\n"
    "u1\tw2\t1\t\tThe cat, sat.\n"
    "u1\tw1\t0\t10.5\tthe hat sat\n"
    "u2\tw1\t0\t3\tno reference hear\n"
    "u1\tw1\t2\t4\tthe cat sat\n";

Corpus parse(const std::string &refs, const std::string &resps) {
  std::istringstream r(refs), p(resps);
  return Corpus(read_references(r, "refs.tsv"), read_responses(p, "resp.tsv"));
}

TEST(LoadCorpus, ParsesAndOrders) {
  Corpus c = parse(kRefs, kResponses);
  ASSERT_EQ(c.utterances().size(), 3u);
  ASSERT_EQ(c.responses().size(), 4u);
  auto u1 = c.responses_for("u1");
  ASSERT_EQ(u1.size(), 3u);
  EXPECT_EQ(u1[0].worker_id, "w1");
  EXPECT_EQ(u1[0].submit_order, 0);
  EXPECT_EQ(u1[1].text, (TokenSeq{"the", "cat", "sat"}));
  EXPECT_FALSE(u1[1].spend_time);
  EXPECT_DOUBLE_EQ(*u1[0].spend_time, 10.5);
  // duplicate (utterance, worker) pairs survive with distinct submit_order
  EXPECT_EQ(u1[2].worker_id, "w1");
  EXPECT_FALSE(c.find("u3")->reference);
  EXPECT_FALSE(c.find("u2")->audio_duration);
  EXPECT_EQ(c.find("u1")->subset, Subset::kDevClean);
}

TEST(LoadCorpus, UnknownUtteranceIsDataError) {
  std::string bad = std::string(kResponses) + "u9\tw1\t0\t\tghost\n";
  EXPECT_THROW(parse(kRefs, bad), DataError);
}

TEST(LoadCorpus, DuplicateSubmitOrderIsDataError) {
  std::string bad = std::string(kResponses) + "u1\tw3\t0\t\tagain\n";
  EXPECT_THROW(parse(kRefs, bad), DataError);
}

TEST(LoadCorpus, ErrorsNameFileLineAndColumn) {
  std::string bad = std::string(kResponses) + "u1\tw3\tseven\t\tagain\n";
  try {
    parse(kRefs, bad);
    FAIL() << "expected DataError";
  } catch (const DataError &e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("resp.tsv:6"), std::string::npos) << msg;
    EXPECT_NE(msg.find("submit_order"), std::string::npos) << msg;
  }
  std::string bad_subset = std::string(kRefs) + "u4\ttrain-clean-100\t1\tx\n";
  EXPECT_THROW(parse(bad_subset, kResponses), DataError);
  EXPECT_THROW(parse("utterance_id\tsubset\n", kResponses), DataError);
}

TEST(LoadCorpus, ColumnMapAdaptsLayout) {
  std::istringstream r(
      "id\tsplit\ttranscript\n"
      "a\tdev-clean\tone two\n");
  std::istringstream p(
      "audio\tannotator\tanswer\n"
      "a\tx\tOne two!\n"
      "a\ty\tone\n");
  ColumnMap m;
  m.ref_utterance_id = "id";
  m.subset = "split";
  m.duration = "";
  m.reference_text = "transcript";
  m.utterance_id = "audio";
  m.worker_id = "annotator";
  m.raw_text = "answer";
  m.submit_order = "";
  m.spend_time = "";
  Corpus c(read_references(r, "r", m), read_responses(p, "p", m));
  auto rs = c.responses_for("a");
  ASSERT_EQ(rs.size(), 2u);
  EXPECT_EQ(rs[0].worker_id, "x");
  EXPECT_EQ(rs[1].submit_order, 1);
}

TEST(LoadCorpus, WriteReadRoundTrip) {
  testing::SyntheticOptions opt;
  opt.train_utterances = 20;
  opt.eval_utterances = 5;
  opt.emissions = false;
  Corpus a = testing::SyntheticCorpus(opt).corpus();
  std::stringstream refs, resps;
  write_references(refs, a);
  write_responses(resps, a);
  Corpus b(read_references(refs, "r"), read_responses(resps, "p"));
  ASSERT_EQ(a.responses().size(), b.responses().size());
  for (std::size_t i = 0; i < a.responses().size(); ++i) {
    EXPECT_EQ(a.responses()[i].text, b.responses()[i].text);
    EXPECT_EQ(a.responses()[i].submit_order, b.responses()[i].submit_order);
  }
  for (std::size_t i = 0; i < a.utterances().size(); ++i)
    EXPECT_EQ(a.utterances()[i].reference, b.utterances()[i].reference);
}

TEST(Split, KeepsOnlyRequestedSubsets) {
  Corpus c = parse(kRefs, kResponses);
  Corpus other = split(c, std::vector<std::string>{"test-other"});
  EXPECT_EQ(other.utterances().size(), 2u);
  EXPECT_EQ(other.responses().size(), 1u);
  EXPECT_THROW(split(c, std::vector<std::string>{"bogus"}), UsageError);
}

TEST(WorkerStats, AcceptRateOverDecidedResponses) {
  Corpus c = parse(kRefs, kResponses);
  std::unordered_map<std::size_t, Decision> d;
  auto u1 = c.responses_for("u1");
  d[c.response_index(u1[0])] = Decision::kAccept;  // w1
  d[c.response_index(u1[2])] = Decision::kReject;  // w1
  auto stats = compute_worker_stats(c, d);
  EXPECT_EQ(stats.at("w1").response_count, 3);
  EXPECT_DOUBLE_EQ(stats.at("w1").accept_rate, 0.5);
  EXPECT_DOUBLE_EQ(stats.at("w2").accept_rate, 1.0);
  for (const auto &[id, s] : stats) {
    EXPECT_GE(s.accept_rate, 0.0);
    EXPECT_LE(s.accept_rate, 1.0);
  }
}

}  // namespace
}  // namespace crowdqc
