// Command-line front end: dataset validation and statistics, prompt
// realization, evaluation runs, report rendering, run comparison, template
// diversity, and a fixture-backed model server for local testing.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lmprobe/config.hpp"
#include "lmprobe/dataset.hpp"
#include "lmprobe/diversity.hpp"
#include "lmprobe/fixture_server.hpp"
#include "lmprobe/gateway.hpp"
#include "lmprobe/report.hpp"
#include "lmprobe/runner.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitBackend = 3;
constexpr int kExitMetricUndefined = 4;

int cmd_validate_dataset(const std::string& dataset_dir) {
  const auto ds = lmprobe::load_dataset(dataset_dir);
  std::cout << "ok: " << ds.templates.size() << " templates, "
            << ds.entities.size() << " entities, " << ds.triples.size()
            << " triples, vocab " << ds.vocab.size() << " tokens\n";
  return kExitOk;
}

int cmd_stats(const std::string& dataset_dir, bool as_json) {
  const auto ds = lmprobe::load_dataset(dataset_dir);
  const auto st = lmprobe::dataset_stats(ds);
  if (as_json) {
    std::cout << lmprobe::json{{"templates", st.templates},
                               {"unique_triples", st.unique_triples},
                               {"pairs", st.pairs},
                               {"derived_triples", st.derived_triples},
                               {"prompts", st.prompts}}
                     .dump(2)
              << "\n";
  } else {
    std::cout << "Relational templates     " << st.templates << "\n"
              << "Unique triples           " << st.unique_triples << "\n"
              << "Derived triples          " << st.derived_triples << "\n"
              << "Subject-relation pairs   " << st.pairs << "\n"
              << "Prompts                  " << st.prompts << "\n";
  }
  return kExitOk;
}

int cmd_realize(const std::string& dataset_dir, const std::string& subject,
                const std::string& relation, const std::string& style) {
  const auto ds = lmprobe::load_dataset(dataset_dir);
  const auto prompts = lmprobe::realize_prompts(
      ds, {subject, relation},
      style == "question-answer" ? lmprobe::TemplateStyle::kQuestionAnswer
                                 : lmprobe::TemplateStyle::kStatement);
  for (const auto& p : prompts) {
    std::cout << p.prompt_id << "\t" << p.text << "\n";
  }
  return kExitOk;
}

int cmd_report(const std::string& run_dir, const std::string& format) {
  const auto report = lmprobe::load_report(
      std::filesystem::path(run_dir) / "report.json");
  if (format == "bins-csv") {
    std::cout << lmprobe::render_bins_csv(report);
  } else {
    std::cout << lmprobe::render_table(report);
  }
  return kExitOk;
}

int cmd_compare(const std::vector<std::string>& run_dirs,
                const std::string& output) {
  std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
  const auto matrix = lmprobe::compare_runs(dirs);
  const std::string csv = lmprobe::render_comparison_csv(matrix);
  std::cout << csv;
  if (!output.empty()) {
    lmprobe::write_file(output, csv);
  }
  return kExitOk;
}

int cmd_diversity(const std::string& dataset_dir,
                  const std::string& embeddings) {
  const auto ds = lmprobe::load_dataset(dataset_dir);
  std::unique_ptr<lmprobe::FileEmbeddings> provider;
  if (!embeddings.empty()) {
    provider = std::make_unique<lmprobe::FileEmbeddings>(
        lmprobe::FileEmbeddings::load(embeddings));
  }
  const auto report =
      lmprobe::template_diversity(ds.templates, provider.get(), &ds);
  lmprobe::json doc;
  if (report.quantity) {
    doc["quantity"] = *report.quantity;
  }
  if (report.lexical) {
    doc["lexical"] = *report.lexical;
  }
  if (report.semantic) {
    doc["semantic"] = *report.semantic;
  } else if (!report.semantic_note.empty()) {
    doc["semantic_note"] = report.semantic_note;
  }
  doc["relations_compared"] = report.relations_compared;
  std::cout << doc.dump(2) << "\n";
  return kExitOk;
}

int cmd_serve(const std::string& fixture, const std::string& host, int port) {
  auto backend = std::make_shared<lmprobe::MockBackend>(
      lmprobe::MockBackend::load(fixture));
  lmprobe::FixtureServer server(backend);
  std::cerr << "serving " << fixture << " on http://" << host << ":" << port
            << "\n";
  server.serve_blocking(host, port);
  return kExitOk;
}

int cmd_run(const lmprobe::RunConfig& config) {
  const auto outcome = lmprobe::run_evaluation(config);
  std::cout << lmprobe::render_table(outcome.report);
  std::cout << "outputs: " << outcome.output_dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-prompt factual-knowledge probing harness"};
  app.require_subcommand(1);

  std::string dataset_dir;
  std::string run_dir;
  std::string format = "table";
  std::string subject;
  std::string relation;
  std::string style = "statement";
  std::string embeddings;
  std::string fixture;
  std::string host = "127.0.0.1";
  int port = 8080;
  bool stats_json = false;
  std::vector<std::string> compare_dirs;
  std::string compare_output;

  auto* validate = app.add_subcommand("validate-dataset",
                                      "load a dataset and check invariants");
  validate->add_option("--dataset", dataset_dir, "dataset directory")
      ->required();

  auto* stats = app.add_subcommand("stats", "dataset statistics");
  stats->add_option("--dataset", dataset_dir, "dataset directory")->required();
  stats->add_flag("--json", stats_json, "emit JSON");

  auto* realize = app.add_subcommand("realize", "print a pair's prompts");
  realize->add_option("--dataset", dataset_dir, "dataset directory")
      ->required();
  realize->add_option("--subject", subject, "subject entity id")->required();
  realize->add_option("--relation", relation, "relation id")->required();
  realize->add_option("--style", style, "statement|question-answer");

  auto* report = app.add_subcommand("report", "render a run's report");
  report->add_option("--run", run_dir, "run output directory")->required();
  report->add_option("--format", format, "table|bins-csv");

  auto* compare = app.add_subcommand("compare",
                                     "knowledge sharing-rate matrix of runs");
  compare->add_option("--run", compare_dirs, "run output directories")
      ->required()
      ->expected(-2);
  compare->add_option("--output", compare_output, "also write CSV here");

  auto* diversity = app.add_subcommand("diversity", "template diversity");
  diversity->add_option("--dataset", dataset_dir, "dataset directory")
      ->required();
  diversity->add_option("--embeddings", embeddings,
                        "JSONL of {template_id, vector} records");

  auto* serve = app.add_subcommand("serve",
                                   "serve a mock fixture over HTTP");
  serve->add_option("--fixture", fixture, "fixture file")->required();
  serve->add_option("--host", host, "bind host");
  serve->add_option("--port", port, "bind port");

  // run: a config file plus flag overrides mirroring RunConfig.
  auto* run = app.add_subcommand("run", "execute an evaluation");
  std::string config_file;
  lmprobe::RunConfig config;
  std::string mode;
  std::string icl_setting;
  std::string icl_style;
  std::string cache_path;
  std::string output_dir;
  std::string audit_file;
  std::string endpoint;
  std::string backend_id;
  std::vector<std::string> capabilities;
  std::string match_inclusion;
  bool no_bias = false;
  std::optional<std::uint64_t> seed_flag;
  run->add_option("--config", config_file, "run configuration JSON");
  run->add_option("--dataset", dataset_dir, "dataset directory");
  run->add_option("--endpoint", endpoint,
                  "backend endpoint (http://... or mock:<fixture>)");
  run->add_option("--backend-id", backend_id, "stable backend identifier");
  run->add_option("--capability", capabilities,
                  "declared capability (repeatable)");
  run->add_option("--mode", mode, "fill-mask|generate");
  run->add_option("--icl", icl_setting,
                  "zero-shot|X-random|X-relation|X-template");
  run->add_option("--icl-style", icl_style, "mask-prediction|question-answer");
  int resamples = -1;
  int bins = -1;
  int top_k = -1;
  int confidence_samples = -1;
  int confidence_subset = -1;
  int max_new_tokens = -1;
  int concurrency = -1;
  std::vector<std::string> stop;
  run->add_option("--resamples", resamples, "accuracy resample count N");
  run->add_option("--bins", bins, "calibration bin count M");
  std::uint64_t seed_value = 0;
  auto* seed_opt = run->add_option("--seed", seed_value, "run seed");
  run->add_option("--top-k", top_k, "fill-mask top-k");
  run->add_option("--confidence-samples", confidence_samples,
                  "multinomial samples per confidence probe");
  run->add_option("--confidence-subset", confidence_subset,
                  "pairs probed for sampled confidence (0 = all)");
  run->add_option("--max-new-tokens", max_new_tokens, "generation budget");
  run->add_option("--stop", stop, "stop string (repeatable)");
  run->add_option("--concurrency", concurrency, "in-flight request bound");
  run->add_option("--cache", cache_path, "record/replay cache file");
  run->add_option("--output", output_dir, "run output directory");
  run->add_option("--audit", audit_file, "ICL transcript file");
  run->add_option("--match-inclusion", match_inclusion, "contiguous|subset");
  run->add_flag("--literal-bin-weights", config.literal_bin_weights,
                "use |P(i)|/M bin weights instead of normalized weights");
  run->add_flag("--no-bias", no_bias, "skip per-relation bias levels");

  CLI11_PARSE(app, argc, argv);

  try {
    if (validate->parsed()) {
      return cmd_validate_dataset(dataset_dir);
    }
    if (stats->parsed()) {
      return cmd_stats(dataset_dir, stats_json);
    }
    if (realize->parsed()) {
      return cmd_realize(dataset_dir, subject, relation, style);
    }
    if (report->parsed()) {
      return cmd_report(run_dir, format);
    }
    if (compare->parsed()) {
      return cmd_compare(compare_dirs, compare_output);
    }
    if (diversity->parsed()) {
      return cmd_diversity(dataset_dir, embeddings);
    }
    if (serve->parsed()) {
      return cmd_serve(fixture, host, port);
    }
    if (run->parsed()) {
      if (!config_file.empty()) {
        const bool literal = config.literal_bin_weights;
        config = lmprobe::load_config(config_file);
        config.literal_bin_weights |= literal;
      }
      if (!dataset_dir.empty()) config.dataset_dir = dataset_dir;
      if (!endpoint.empty()) config.backend.endpoint = endpoint;
      if (!backend_id.empty()) config.backend.backend_id = backend_id;
      for (const auto& cap : capabilities) {
        config.backend.capabilities.insert(cap);
      }
      if (!mode.empty()) {
        config.mode = mode == "generate" ? lmprobe::ProbeMode::kGenerate
                                         : lmprobe::ProbeMode::kFillMask;
      }
      if (!icl_setting.empty()) {
        config.icl = lmprobe::ICLSetting::parse(icl_setting);
      }
      if (!icl_style.empty()) {
        config.icl_style = icl_style == "question-answer"
                               ? lmprobe::IclStyle::kQuestionAnswer
                               : lmprobe::IclStyle::kMaskPrediction;
      }
      if (resamples >= 0) config.resamples = resamples;
      if (bins >= 0) config.bins = bins;
      if (seed_opt->count() > 0) config.seed = seed_value;
      if (top_k >= 0) config.top_k = top_k;
      if (confidence_samples >= 0) config.confidence_samples = confidence_samples;
      if (confidence_subset >= 0) config.confidence_subset = confidence_subset;
      if (max_new_tokens >= 0) config.max_new_tokens = max_new_tokens;
      if (!stop.empty()) config.stop = stop;
      if (concurrency >= 0) config.concurrency = concurrency;
      if (!cache_path.empty()) config.cache_path = cache_path;
      if (!output_dir.empty()) config.output_dir = output_dir;
      if (!audit_file.empty()) config.audit_path = audit_file;
      if (!match_inclusion.empty()) {
        config.inclusion = match_inclusion == "subset"
                               ? lmprobe::MatchInclusion::kSubset
                               : lmprobe::MatchInclusion::kContiguous;
      }
      if (no_bias) config.compute_bias = false;
      lmprobe::apply_environment(config);
      return cmd_run(config);
    }
  } catch (const lmprobe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const lmprobe::UndefinedMetricError& e) {
    std::cerr << "metric undefined: " << e.what() << "\n";
    return kExitMetricUndefined;
  } catch (const lmprobe::UndefinedBiasError& e) {
    std::cerr << "metric undefined: " << e.what() << "\n";
    return kExitMetricUndefined;
  } catch (const lmprobe::GatewayError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
