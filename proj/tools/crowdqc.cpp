// crowdqc/tools/crowdqc.cpp
//
// Command line front end. Exit status: 0 ok, 1 usage or config error,
// 2 data error, 3 internal invariant violation.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "crowdqc/pipeline.hpp"

namespace {

using namespace crowdqc;

struct GlobalFlags {
  std::string config;
  std::optional<long long> seed;
  std::string emissions_dir;
  std::string wav_dir;
  std::string out_dir;
  std::string responses;
  std::string references;
  std::string meta;
};

PipelineConfig resolve_config(const GlobalFlags &g) {
  PipelineConfig c = g.config.empty() ? PipelineConfig{} : load_config(g.config);
  if (g.seed) {
    if (*g.seed < 0) throw UsageError("--seed must be non-negative");
    c.seed = static_cast<std::uint64_t>(*g.seed);
  }
  if (!g.emissions_dir.empty()) c.emissions_dir = g.emissions_dir;
  if (!g.wav_dir.empty()) c.wav_dir = g.wav_dir;
  if (!g.out_dir.empty()) c.out_dir = g.out_dir;
  if (!g.responses.empty()) c.responses = g.responses;
  if (!g.references.empty()) c.references = g.references;
  if (!g.meta.empty()) c.meta = g.meta;
  return c;
}

ReportFormat parse_format(const std::string &f) {
  if (f == "tsv") return ReportFormat::kTsv;
  if (f == "markdown" || f == "md") return ReportFormat::kMarkdown;
  throw UsageError("unknown format '" + f + "' (tsv or markdown)");
}

// twer ----------------------------------------------------------------------

int cmd_twer(const PipelineConfig &config, const std::string &format) {
  Corpus corpus = load_corpus(config);
  SimulationReport r;
  std::map<Subset, SubsetReport> per;
  std::map<Subset, std::set<std::string>> workers;
  std::set<std::string> all_workers;
  for (std::size_t u = 0; u < corpus.utterances().size(); ++u) {
    const auto &utt = corpus.utterances()[u];
    SubsetReport &s = per[utt.subset];
    auto rs = corpus.responses_for(u);
    s.utterances += 1;
    s.responses += static_cast<long>(rs.size());
    s.speech_seconds += utt.audio_duration.value_or(0.0);
    for (const auto &resp : rs) {
      workers[utt.subset].insert(resp.worker_id);
      all_workers.insert(resp.worker_id);
      if (utt.reference) s.raw += count_errors(resp.text, *utt.reference);
    }
  }
  r.total.name = "all";
  for (auto &[subset, s] : per) {
    s.name = std::string(subset_name(subset));
    s.workers = static_cast<long>(workers[subset].size());
    r.total.utterances += s.utterances;
    r.total.responses += s.responses;
    r.total.speech_seconds += s.speech_seconds;
    r.total.raw += s.raw;
    r.subsets.push_back(s);
  }
  r.total.workers = static_cast<long>(all_workers.size());

  std::vector<const SubsetReport *> rows;
  for (const auto &s : r.subsets) rows.push_back(&s);
  rows.push_back(&r.total);
  if (parse_format(format) == ReportFormat::kTsv) {
    std::cout << "subset\tutterances\tspeech_hours\tworkers\tresponses\tref_words\tdeletions\t"
                 "insertions\tsubstitutions\ttwer\n";
    for (const auto *s : rows)
      std::cout << s->name << '\t' << s->utterances << '\t'
                << detail::fixed(s->speech_seconds / 3600.0, 2) << '\t' << s->workers << '\t'
                << s->responses << '\t' << s->raw.ref_words << '\t' << s->raw.deletions << '\t'
                << s->raw.insertions << '\t' << s->raw.substitutions << '\t'
                << detail::pct(s->raw.twer()) << '\n';
  } else {
    std::ostringstream md;
    write_report_markdown(md, r);
    // only the first table (statistics and raw TWER) is meaningful here
    std::string text = md.str();
    std::cout << text.substr(0, text.find("\n\n") + 1);
  }
  return 0;
}

// aggregate -------------------------------------------------------------------

int cmd_aggregate(PipelineConfig config, const std::string &confidence_path,
                  std::optional<double> alpha, const std::string &strategy,
                  const std::string &output) {
  if (!strategy.empty()) config.strategy = parse_strategy(strategy);
  if (alpha) {
    if (*alpha < 0 || *alpha > 1) throw UsageError("--alpha must lie in [0, 1]");
    config.alpha = alpha;
  }
  Corpus corpus = load_corpus(config);
  WordConfidenceTable table;
  // without a confidence file every word gets the neutral gap confidence
  const bool uniform = confidence_path.empty();
  if (!uniform) {
    auto in = detail::open_input(confidence_path);
    table = read_word_confidences(in, confidence_path);
  }
  const std::optional<double> fallback =
      uniform ? std::optional<double>(config.gap_confidence) : std::nullopt;
  FusionConfig fc;
  fc.alpha = config.strategy == Strategy::kRover ? 1.0 : config.alpha.value_or(0.8);
  fc.gap_confidence = config.gap_confidence;
  WorkerRanking ranking;
  if (config.strategy == Strategy::kBestWorker)
    ranking = rank_workers(split(corpus, config.train_subsets));

  std::map<std::string, TokenSeq> hyps;
  for (std::size_t u = 0; u < corpus.utterances().size(); ++u) {
    const auto &utt = corpus.utterances()[u];
    auto rs = corpus.responses_for(u);
    if (rs.empty()) continue;
    std::size_t pick = 0;
    switch (config.strategy) {
      case Strategy::kEcm:
      case Strategy::kRover: {
        std::vector<TokenSeq> texts;
        for (const auto &r : rs) texts.push_back(r.text);
        hyps[utt.id] = fuse(texts, confidences_for(rs, table, fallback), fc);
        continue;
      }
      case Strategy::kRandom: pick = select_random(rs, mix_seed(config.seed, utt.id)); break;
      case Strategy::kLongest: pick = select_longest(rs); break;
      case Strategy::kBestWorker: pick = select_best_worker(rs, ranking); break;
      case Strategy::kOracle: pick = select_oracle(rs, utt.reference); break;
    }
    hyps[utt.id] = rs[pick].text;
  }
  if (output.empty()) {
    write_hypotheses(std::cout, hyps);
  } else {
    std::ofstream out(output);
    if (!out) throw DataError(output + ": cannot write");
    write_hypotheses(out, hyps);
  }
  return 0;
}

// cem-train / cem-score / tune-alpha ------------------------------------------

int cmd_cem_train(const PipelineConfig &config) {
  Corpus corpus = load_corpus(config);
  EvidenceSource evidence(config, std::cerr);
  TrainedPipeline tp = train_pipeline(corpus, config, evidence);
  save_models(config.out_dir, tp);
  std::cout << "threshold\t" << tp.threshold << "\nalpha\t" << tp.alpha << '\n';
  return 0;
}

int cmd_cem_score(const PipelineConfig &config, const std::string &model_dir,
                  const std::string &word_output) {
  Corpus corpus = load_corpus(config);
  EvidenceSource evidence(config, std::cerr);
  TrainedPipeline tp = load_models(model_dir.empty() ? config.out_dir : model_dir);
  double threshold = config.threshold.value_or(tp.threshold);
  auto scores = score_corpus(corpus, tp.cem, config, evidence);
  WordConfidenceTable table;
  std::cout << "utterance_id\tworker_id\tsubmit_order\tpredicted_errors\tdecision\n";
  for (const auto &sc : scores) {
    const Response &r = corpus.responses()[sc.response];
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", sc.predicted_errors);
    std::cout << r.utterance_id << '\t' << r.worker_id << '\t' << r.submit_order << '\t' << buf
              << '\t'
              << (decide(sc.predicted_errors, threshold) == Decision::kAccept ? "accept" : "reject")
              << '\n';
    table.try_emplace({r.utterance_id, r.worker_id}, sc.word_confidence);
  }
  if (!word_output.empty()) {
    std::ofstream out(word_output);
    if (!out) throw DataError(word_output + ": cannot write");
    write_word_confidences(out, table);
  }
  return 0;
}

int cmd_tune_alpha(const PipelineConfig &config, const std::string &confidence_path) {
  Corpus corpus = load_corpus(config);
  Corpus train = split(corpus, config.train_subsets);
  std::vector<VotingExample> examples;
  if (confidence_path.empty()) {
    EvidenceSource evidence(config, std::cerr);
    TrainingData data;
    train_cem(train, config, evidence, &data);
    examples = std::move(data.voting);
  } else {
    auto in = detail::open_input(confidence_path);
    WordConfidenceTable table = read_word_confidences(in, confidence_path);
    for (std::size_t u = 0; u < train.utterances().size(); ++u) {
      auto rs = train.responses_for(u);
      const auto &utt = train.utterances()[u];
      if (!utt.reference || rs.size() < 2) continue;
      VotingExample ex;
      ex.reference = *utt.reference;
      for (const auto &r : rs) ex.transcripts.push_back(r.text);
      ex.confidences = confidences_for(rs, table, std::nullopt);
      examples.push_back(std::move(ex));
    }
  }
  if (examples.empty())
    throw DataError("tune-alpha: no training utterance with a reference and two responses");
  FusionConfig fc;
  fc.gap_confidence = config.gap_confidence;
  AlphaSearch search = tune_alpha(examples, fc, config.alpha_step);
  std::cout << "alpha\ttwer\n";
  for (const auto &[a, b] : search.grid) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f\t%.4f", a, 100.0 * b.twer());
    std::cout << buf << '\n';
  }
  std::cout << "# best alpha " << search.alpha << '\n';
  return 0;
}

// simulate / report -----------------------------------------------------------

int cmd_simulate(PipelineConfig config, const std::string &strategy) {
  if (!strategy.empty()) config.strategy = parse_strategy(strategy);
  EndToEndResult r = end_to_end(config, std::cerr);
  write_report_markdown(std::cout, r.report);
  return 0;
}

int cmd_report(const std::string &input, const std::string &format) {
  auto in = detail::open_input(input);
  SimulationReport r = parse_report_tsv(in, input);
  run_report(std::cout, r, parse_format(format));
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"crowdqc: quality control for crowdsourced speech transcription"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config, "key = value configuration file");
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--emissions-dir", g.emissions_dir, "directory of <utterance>.emit files");
  app.add_option("--wav-dir", g.wav_dir, "directory of <utterance>.wav files");
  app.add_option("--out-dir", g.out_dir, "output directory");
  app.add_option("--responses", g.responses, "response TSV");
  app.add_option("--references", g.references, "reference TSV");
  app.add_option("--meta", g.meta, "utterance_id / emission_ref TSV");

  std::string format = "markdown";
  auto *twer = app.add_subcommand("twer", "raw TWER per subset");
  twer->add_option("--format", format, "tsv or markdown");

  std::string confidences, strategy, output, model_dir, word_output, input;
  std::optional<double> alpha;
  auto *aggregate = app.add_subcommand("aggregate", "fuse or select one transcript per utterance");
  aggregate->add_option("--confidences", confidences, "per-word confidence TSV");
  aggregate->add_option("--alpha", alpha, "frequency weight in [0, 1]");
  aggregate->add_option("--strategy", strategy, "ecm, rover, random, longest, best-worker, oracle");
  aggregate->add_option("--output", output, "hypothesis TSV (default stdout)");

  auto *cem_train = app.add_subcommand("cem-train", "train word and utterance confidence models");
  auto *cem_score = app.add_subcommand("cem-score", "score responses with trained models");
  cem_score->add_option("--models", model_dir, "directory written by cem-train (default --out-dir)");
  cem_score->add_option("--word-confidences", word_output, "write per-word confidence TSV");

  auto *tune = app.add_subcommand("tune-alpha", "grid search of alpha on the training subsets");
  tune->add_option("--confidences", confidences, "per-word confidence TSV");

  auto *simulate_cmd = app.add_subcommand("simulate", "train, gate, fuse and report");
  simulate_cmd->add_option("--strategy", strategy, "final selection strategy");

  auto *report = app.add_subcommand("report", "re-render a report.tsv");
  report->add_option("--input", input, "report.tsv")->required();
  report->add_option("--format", format, "tsv or markdown");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*report) return cmd_report(input, format);
    PipelineConfig config = resolve_config(g);
    if (*twer) return cmd_twer(config, format);
    if (*aggregate) return cmd_aggregate(config, confidences, alpha, strategy, output);
    if (*cem_train) return cmd_cem_train(config);
    if (*cem_score) return cmd_cem_score(config, model_dir, word_output);
    if (*tune) return cmd_tune_alpha(config, confidences);
    if (*simulate_cmd) return cmd_simulate(config, strategy);
  } catch (const UsageError &e) {
    std::cerr << "crowdqc: " << e.what() << '\n';
    return 1;
  } catch (const DataError &e) {
    std::cerr << "crowdqc: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error &e) {
    std::cerr << "crowdqc: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "crowdqc: internal error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
