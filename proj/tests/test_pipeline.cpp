// crowdqc/tests/test_pipeline.cpp

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "crowdqc/pipeline.hpp"
#include "support/synthetic.hpp"

namespace crowdqc {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "crowdqc_pipeline_test";
    fs::remove_all(dir_);
    testing::SyntheticOptions opt;
    opt.train_utterances = 80;
    opt.eval_utterances = 16;
    testing::SyntheticCorpus(opt).write(dir_);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  PipelineConfig config(const std::string &out) const {
    PipelineConfig c;
    c.responses = (dir_ / "responses.tsv").string();
    c.references = (dir_ / "references.tsv").string();
    c.emissions_dir = (dir_ / "emissions").string();
    c.out_dir = (dir_ / out).string();
    c.gbm.rounds = 30;
    return c;
  }

  static fs::path dir_;
};

fs::path PipelineTest::dir_;

TEST(Config, ParsesKeysAndComments) {
  std::istringstream in(
      "# comment\n"
      "target_reject_rate = 0.1\n"
      "alpha = tune   # trailing comment\n"
      "strategy = rover\n"
      "seed = 42\n"
      "eval_subsets = dev-clean,test-clean\n"
      "column.raw_text = answer\n"
      "gbm_rounds = 7\n"
      "responses = data/r.tsv\n");
  auto c = parse_config(in, "x.conf", "/base");
  EXPECT_DOUBLE_EQ(c.target_reject_rate, 0.1);
  EXPECT_FALSE(c.alpha);
  EXPECT_EQ(c.strategy, Strategy::kRover);
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.eval_subsets.size(), 2u);
  EXPECT_EQ(c.columns.raw_text, "answer");
  EXPECT_EQ(c.gbm.rounds, 7);
  EXPECT_EQ(c.responses, "/base/data/r.tsv");
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  for (const char *text : {"colour = blue\n", "alpha = 2\n", "strategy = median\n",
                           "seed = x\n", "no equals sign\n", "eval_subsets = dev-clean,zzz\n"}) {
    std::istringstream in(text);
    EXPECT_THROW(parse_config(in, "bad.conf"), UsageError) << text;
  }
}

TEST_F(PipelineTest, OpenGateKeepsRawQuality) {
  PipelineConfig c = config("open");
  c.threshold = std::numeric_limits<double>::infinity();
  c.strategy = Strategy::kRandom;
  c.seed = 5;
  Corpus corpus = load_corpus(c);
  EvidenceSource ev(c, std::cerr);
  auto tp = train_pipeline(corpus, c, ev);
  Corpus eval = split(corpus, c.eval_subsets);
  auto rep = simulate(eval, c, {&tp.cem, tp.threshold, tp.alpha, &tp.ranking}, ev);
  EXPECT_EQ(rep.total.rejected, 0);
  EXPECT_EQ(rep.total.reject_rate(), 0.0);
  EXPECT_EQ(rep.total.post_cem, rep.total.raw);
  EXPECT_EQ(rep.total.accepted, rep.total.raw);
  for (std::size_t u = 0; u < eval.utterances().size(); ++u) {
    const auto &utt = eval.utterances()[u];
    auto rs = eval.responses_for(u);
    EXPECT_EQ(rep.hypotheses.at(utt.id), rs[select_random(rs, mix_seed(5, utt.id))].text);
  }
}

TEST_F(PipelineTest, ClosedGateKeepsLeastBadResponse) {
  PipelineConfig c = config("closed");
  c.threshold = -1.0;
  c.strategy = Strategy::kLongest;
  Corpus corpus = load_corpus(c);
  EvidenceSource ev(c, std::cerr);
  auto tp = train_pipeline(corpus, c, ev);
  Corpus eval = split(corpus, c.eval_subsets);
  auto rep = simulate(eval, c, {&tp.cem, tp.threshold, tp.alpha, &tp.ranking}, ev);
  EXPECT_EQ(rep.total.reject_rate(), 1.0);
  EXPECT_EQ(rep.total.accepted.segments, 0);
  EXPECT_EQ(rep.total.post_cem.segments, static_cast<long>(eval.utterances().size()));
  auto scores = score_corpus(eval, tp.cem, c, ev);
  // the kept response is the one with the smallest predicted error count
  std::map<std::string, std::pair<double, TokenSeq>> best;
  for (const auto &sc : scores) {
    const Response &r = eval.responses()[sc.response];
    auto it = best.find(r.utterance_id);
    if (it == best.end() || sc.predicted_errors < it->second.first)
      best[r.utterance_id] = {sc.predicted_errors, r.text};
  }
  for (const auto &[id, b] : best) EXPECT_EQ(rep.hypotheses.at(id), b.second) << id;
}

TEST_F(PipelineTest, RoverEqualsEcmAtAlphaOne) {
  PipelineConfig c = config("rover");
  c.strategy = Strategy::kRover;
  Corpus corpus = load_corpus(c);
  EvidenceSource ev(c, std::cerr);
  auto tp = train_pipeline(corpus, c, ev);
  Corpus eval = split(corpus, c.eval_subsets);
  auto rover = simulate(eval, c, {&tp.cem, tp.threshold, 0.3, &tp.ranking}, ev);
  c.strategy = Strategy::kEcm;
  auto ecm = simulate(eval, c, {&tp.cem, tp.threshold, 1.0, &tp.ranking}, ev);
  EXPECT_EQ(rover.hypotheses, ecm.hypotheses);
  EXPECT_EQ(rover.alpha, 1.0);
}

TEST_F(PipelineTest, OracleNeedsReferences) {
  PipelineConfig c = config("oracle");
  Corpus corpus = load_corpus(c);
  std::vector<Utterance> utts = corpus.utterances();
  utts[0].reference.reset();
  Corpus missing(utts, corpus.responses());
  EvidenceSource ev(c, std::cerr);
  auto tp = train_pipeline(corpus, c, ev);
  c.strategy = Strategy::kOracle;
  EXPECT_THROW(simulate(missing, c, {&tp.cem, tp.threshold, tp.alpha, &tp.ranking}, ev),
               DataError);
}

TEST_F(PipelineTest, EndToEndIsDeterministic) {
  PipelineConfig a = config("run_a");
  PipelineConfig b = config("run_b");
  a.seed = b.seed = 3;
  std::ostringstream log;
  end_to_end(a, log);
  end_to_end(b, log);
  for (const char *f : {"report.tsv", "report.md", "hypotheses.tsv", "word_cem.txt",
                        "utterance_cem.txt", "params.txt", "lexicon.tsv"}) {
    ASSERT_TRUE(fs::exists(fs::path(a.out_dir) / f)) << f;
    EXPECT_EQ(slurp(fs::path(a.out_dir) / f), slurp(fs::path(b.out_dir) / f)) << f;
  }
}

TEST_F(PipelineTest, MissingEmissionsDirectoryWarnsAndProceeds) {
  PipelineConfig c = config("no_emissions");
  c.emissions_dir = (dir_ / "does_not_exist").string();
  std::ostringstream log;
  auto r = end_to_end(c, log);
  EXPECT_NE(log.str().find("warning"), std::string::npos);
  EXPECT_GT(r.report.total.utterances, 0);
}

TEST_F(PipelineTest, ReportTsvRoundTrip) {
  PipelineConfig c = config("report");
  std::ostringstream log;
  auto r = end_to_end(c, log);
  std::stringstream tsv;
  write_report_tsv(tsv, r.report);
  auto back = parse_report_tsv(tsv, "report.tsv");
  ASSERT_EQ(back.subsets.size(), r.report.subsets.size());
  for (std::size_t i = 0; i < back.subsets.size(); ++i) {
    auto expect = r.report.subsets[i];
    expect.speech_seconds = back.subsets[i].speech_seconds;  // printed with 3 decimals
    EXPECT_EQ(back.subsets[i], expect);
  }
  EXPECT_EQ(back.total.final, r.report.total.final);

  std::ostringstream md;
  write_report_markdown(md, r.report);
  EXPECT_EQ(md.str().rfind("| Subset | # Utterances | speech hours | # Workers | # Responses | TWER (%) |", 0), 0u);

  auto loaded = load_models(c.out_dir);
  EXPECT_EQ(loaded.cem.word, r.trained.cem.word);
  EXPECT_EQ(loaded.cem.utterance, r.trained.cem.utterance);
  EXPECT_EQ(loaded.threshold, r.trained.threshold);
}

TEST(Report, EmptyReportIsHeaderOnly) {
  SimulationReport empty;
  std::ostringstream tsv;
  write_report_tsv(tsv, empty);
  std::string s = tsv.str();
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 1);
  EXPECT_EQ(s.rfind("subset\tutterances\t", 0), 0u);
}

TEST(WordConfidences, ReadWriteAndLookup) {
  WordConfidenceTable t;
  t[{"u1", "w1"}] = {0.25, 0.5};
  std::stringstream s;
  write_word_confidences(s, t);
  auto back = read_word_confidences(s, "c.tsv");
  EXPECT_EQ(back, t);
  Response r;
  r.utterance_id = "u1";
  r.worker_id = "w1";
  r.text = {"a", "b"};
  std::vector<Response> rs = {r, r};
  rs[1].submit_order = 1;
  EXPECT_THROW(confidences_for(rs, t, std::nullopt), DataError);
  auto c = confidences_for(rs, t, 0.5);
  EXPECT_EQ(c[0], (std::vector<double>{0.25, 0.5}));
  EXPECT_EQ(c[1], (std::vector<double>{0.5, 0.5}));
  std::istringstream bad("utterance_id\tworker_id\tword_index\tconfidence\nu\tw\t0\t1.5\n");
  EXPECT_THROW(read_word_confidences(bad, "bad.tsv"), DataError);
}

}  // namespace
}  // namespace crowdqc
