#pragma once

#include <atomic>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "lmprobe/config.hpp"
#include "lmprobe/dataset.hpp"
#include "lmprobe/gateway.hpp"
#include "lmprobe/icl.hpp"
#include "lmprobe/matching.hpp"
#include "lmprobe/metrics.hpp"
#include "lmprobe/report.hpp"

namespace lmprobe {

// ============================================================================
// Gap accounting
// ============================================================================

/// Unevaluable work is recorded, never silently dropped: a pair-level entry
/// when the whole pair is skipped (empty answer set, exemplar pool too
/// small), a prompt-level entry when one request failed after retries.
struct GapEntry {
  std::string scope;  // "pair" or "prompt"
  std::string pair_key;
  std::string prompt_id;
  std::string reason;
  std::size_t prompts_lost = 0;
};

struct RunOutcome {
  PredictionTable table;
  MetricReport report;
  std::vector<GapEntry> gaps;
  std::filesystem::path output_dir;
};

namespace detail {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct PairResult {
  std::vector<PredictionRecord> records;
  std::vector<GapEntry> gaps;
  std::vector<AssembledPrompt> audit;
};

/// Evaluates one pair in fill-mask mode: every realized prompt is queried,
/// the top-1 token is scored against the single-token answer set, and o_max
/// becomes the confidence.
inline PairResult evaluate_pair_fillmask(const Dataset& ds,
                                         const SubjectRelationPair& pair,
                                         Gateway& gateway,
                                         const RunConfig& config) {
  PairResult out;
  AnswerSet answers;
  try {
    answers = answer_set(ds, pair, ProbeMode::kFillMask);
  } catch (const EmptyAnswerError& e) {
    const auto prompts =
        realize_prompts(ds, pair, TemplateStyle::kStatement);
    out.gaps.push_back(
        {"pair", pair.key(), "", e.what(), prompts.size()});
    return out;
  }
  const std::set<std::string> tokens(answers.tokens.begin(),
                                     answers.tokens.end());
  for (const auto& prompt :
       realize_prompts(ds, pair, TemplateStyle::kStatement)) {
    try {
      const FillMaskResponse resp =
          gateway.fill_mask(prompt.text, config.top_k);
      PredictionRecord rec;
      rec.prompt_id = prompt.prompt_id;
      rec.mode = ProbeMode::kFillMask;
      rec.prediction_key = resp.top().token;
      rec.correct = tokens.count(rec.prediction_key) > 0;
      rec.confidence = resp.top().probability;
      rec.template_id = prompt.template_id;
      rec.surface_index = prompt.surface_index;
      out.records.push_back(std::move(rec));
    } catch (const GatewayError& e) {
      out.gaps.push_back({"prompt", pair.key(), prompt.prompt_id, e.what(), 1});
    }
  }
  return out;
}

/// Evaluates one pair in generate mode: per prompt, exemplars are sampled
/// and assembled, the greedy completion is scored one-directionally against
/// the answer surfaces, and (for pairs in the confidence subset) one seeded
/// prompt also collects multinomial samples for the matching-rate
/// confidence.
inline PairResult evaluate_pair_generate(const Dataset& ds,
                                         const SubjectRelationPair& pair,
                                         Gateway& gateway,
                                         const RunConfig& config,
                                         bool in_confidence_subset) {
  PairResult out;
  const AnswerSet answers = answer_set(ds, pair, ProbeMode::kGenerate);
  const std::string instruction = build_instruction(config.icl_style);
  std::vector<Prompt> prompts;
  try {
    prompts = realize_prompts(ds, pair, template_style_for(config.icl_style));
  } catch (const DatasetError& e) {
    out.gaps.push_back({"pair", pair.key(), "", e.what(), 0});
    return out;
  }

  // One seeded prompt per pair carries the sampled confidence.
  std::size_t confidence_slot = prompts.size();
  if (in_confidence_subset && !prompts.empty()) {
    Rng rng(derive_seed(config.seed, pair.key() + "#confidence"));
    confidence_slot = static_cast<std::size_t>(rng.bounded(prompts.size()));
  }

  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const Prompt& prompt = prompts[i];
    std::vector<Exemplar> exemplars;
    try {
      exemplars = sample_exemplars(ds, prompt, config.icl, config.seed);
    } catch (const InsufficientPoolError& e) {
      out.gaps.push_back(
          {"pair", pair.key(), "", e.what(), prompts.size()});
      out.records.clear();
      out.audit.clear();
      return out;
    }
    const AssembledPrompt assembled =
        assemble_icl_prompt(instruction, exemplars, prompt, config.icl,
                            config.icl_style, config.seed);
    if (config.audit_path) {
      out.audit.push_back(assembled);
    }
    GenerateRequest greedy;
    greedy.prompt = assembled.text;
    greedy.mode = DecodeMode::kGreedy;
    greedy.num_samples = 1;
    greedy.max_new_tokens = config.max_new_tokens;
    greedy.seed = config.seed;
    greedy.stop = config.stop;
    try {
      const GenerateResponse resp = gateway.generate(greedy);
      PredictionRecord rec;
      rec.prompt_id = prompt.prompt_id;
      rec.mode = ProbeMode::kGenerate;
      rec.prediction_key = resp.texts.front();
      rec.token_count = resp.token_counts.front();
      rec.correct = false;
      for (const auto& surface : answers.surfaces) {
        if (match_answer(surface, rec.prediction_key, config.inclusion)) {
          rec.correct = true;
          break;
        }
      }
      if (i == confidence_slot) {
        GenerateRequest sampling = greedy;
        sampling.mode = DecodeMode::kMultinomial;
        sampling.num_samples = config.confidence_samples;
        sampling.seed = derive_seed(config.seed, prompt.prompt_id + "#samples");
        const GenerateResponse samples = gateway.generate(sampling);
        rec.confidence = generation_confidence(rec.prediction_key,
                                               samples.texts,
                                               config.inclusion);
      }
      rec.template_id = prompt.template_id;
      rec.surface_index = prompt.surface_index;
      out.records.push_back(std::move(rec));
    } catch (const GatewayError& e) {
      out.gaps.push_back({"prompt", pair.key(), prompt.prompt_id, e.what(), 1});
    }
  }
  return out;
}

/// Per-relation bias levels over content-free prompts. Candidates default to
/// the union of the relation's single-token gold objects.
inline std::map<std::string, double> compute_bias_levels(
    const Dataset& ds, Gateway& gateway, const RunConfig& config) {
  std::map<std::string, double> out;
  std::set<std::string> relations;
  for (const auto& t : ds.triples) {
    relations.insert(t.relation);
  }
  for (const auto& relation : relations) {
    std::set<std::string> candidate_set;
    for (const auto& pair : ds.relation_pairs(relation)) {
      try {
        const auto answers = answer_set(ds, pair, ProbeMode::kFillMask);
        candidate_set.insert(answers.tokens.begin(), answers.tokens.end());
      } catch (const EmptyAnswerError&) {
        // Pair already counted as a gap by the evaluation pass.
      }
    }
    if (candidate_set.size() < 2) {
      continue;
    }
    std::vector<std::string> candidates(candidate_set.begin(),
                                        candidate_set.end());
    std::vector<RelationalTemplate> templates;
    for (const auto* t :
         ds.relation_templates(relation, TemplateStyle::kStatement)) {
      templates.push_back(*t);
    }
    if (templates.empty()) {
      continue;
    }
    try {
      out[relation] =
          relation_bias_multi(gateway, templates, candidates, config.top_k);
    } catch (const UndefinedBiasError&) {
      // No candidate mass anywhere; the relation is reported without a bias.
    }
  }
  return out;
}

}  // namespace detail

// ============================================================================
// Evaluation run
// ============================================================================

/// Runs the full protocol: realize -> gateway -> predictions persisted ->
/// metrics. Every prompt in scope is evaluated exactly once or recorded as a
/// gap. Raw predictions land on disk before any metric is computed, so
/// metrics can be recomputed later without re-querying the backend.
inline RunOutcome run_evaluation(const RunConfig& config) {
  const auto issues = validate_config(config);
  if (!issues.empty()) {
    throw ConfigError(issues);
  }

  const Dataset ds = load_dataset(config.dataset_dir);
  std::shared_ptr<ResponseCache> cache;
  if (config.cache_path) {
    std::filesystem::create_directories(
        config.cache_path->parent_path().empty()
            ? "."
            : config.cache_path->parent_path());
    cache = std::make_shared<ResponseCache>(*config.cache_path);
  }
  Gateway gateway =
      Gateway::open(config.backend, cache, auth_token_from_environment());

  RunManifest manifest;
  manifest.config_snapshot = to_json(config);
  manifest.dataset_hash = dataset_manifest_hash(config.dataset_dir);
  manifest.backend_id = config.backend.backend_id;
  manifest.started_at = detail::utc_timestamp();

  const auto pairs = ds.pairs();

  // Confidence subset: a seeded sample of pairs (generate mode); 0 = all.
  std::set<std::size_t> confidence_pairs;
  if (config.mode == ProbeMode::kGenerate) {
    if (config.confidence_subset <= 0 ||
        static_cast<std::size_t>(config.confidence_subset) >= pairs.size()) {
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        confidence_pairs.insert(i);
      }
    } else {
      Rng rng(derive_seed(config.seed, "confidence-subset"));
      for (std::size_t i : rng.sample_indices(
               pairs.size(),
               static_cast<std::size_t>(config.confidence_subset))) {
        confidence_pairs.insert(i);
      }
    }
  }

  // Pair-level tasks; results keyed by pair index so completion order never
  // affects the merged table.
  std::vector<detail::PairResult> results(pairs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= pairs.size()) {
        return;
      }
      results[i] =
          config.mode == ProbeMode::kFillMask
              ? detail::evaluate_pair_fillmask(ds, pairs[i], gateway, config)
              : detail::evaluate_pair_generate(ds, pairs[i], gateway, config,
                                               confidence_pairs.count(i) > 0);
    }
  };
  const int threads =
      std::max(1, std::min(config.concurrency,
                           static_cast<int>(pairs.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back(worker);
    }
    for (auto& t : pool) {
      t.join();
    }
  }

  RunOutcome outcome;
  outcome.output_dir = config.output_dir;
  std::filesystem::create_directories(config.output_dir);

  std::ofstream audit;
  if (config.audit_path) {
    audit.open(*config.audit_path);
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto& result = results[i];
    for (auto& rec : result.records) {
      outcome.table.add(pairs[i], std::move(rec));
    }
    for (auto& gap : result.gaps) {
      outcome.gaps.push_back(std::move(gap));
    }
    if (audit.is_open()) {
      for (const auto& assembled : result.audit) {
        append_audit_record(audit, assembled);
      }
    }
  }

  // Raw predictions persist before metric computation.
  save_predictions(outcome.table, config.output_dir / "predictions.jsonl");
  {
    std::ofstream gaps_out(config.output_dir / "gaps.jsonl");
    for (const auto& gap : outcome.gaps) {
      gaps_out << json{{"scope", gap.scope},
                       {"pair", gap.pair_key},
                       {"prompt_id", gap.prompt_id},
                       {"reason", gap.reason},
                       {"prompts_lost", gap.prompts_lost}}
                      .dump()
               << '\n';
    }
  }

  MetricReport& report = outcome.report;
  for (const auto& gap : outcome.gaps) {
    report.gaps += gap.prompts_lost;
  }
  report.pairs = outcome.table.pair_count();
  report.prompts = outcome.table.record_count();

  if (!outcome.table.empty()) {
    const auto resample =
        resample_accuracy(outcome.table, config.resamples, config.seed);
    report.acc_mean = resample.mean;
    report.acc_range = resample.range;
    report.acc_sd = resample.sd;

    try {
      report.consist =
          consistency(outcome.table,
                      config.mode == ProbeMode::kFillMask
                          ? PredictionEquality::kToken
                          : PredictionEquality::kMutualMatch,
                      config.inclusion)
              .value;
    } catch (const UndefinedMetricError&) {
      // No pair has two or more predictions; the report omits Consist.
    }

    const auto conf_records = confidence_records(outcome.table);
    if (conf_records.size() >= static_cast<std::size_t>(config.bins)) {
      const auto ov = overconfidence(conf_records, config.bins,
                                     config.literal_bin_weights);
      report.ovconf = ov.value;
      report.bins = ov.bins;
    }

    report.coverage = coverage_rates(outcome.table);

    if (config.mode == ProbeMode::kGenerate) {
      std::vector<std::string> generations;
      for (const auto& [pair, recs] : outcome.table.rows()) {
        for (const auto& r : recs) {
          generations.push_back(r.prediction_key);
        }
      }
      report.one_word_ratio = one_word_ratio(generations);
      for (const auto& [bucket, ov] :
           overconfidence_by_token_count(outcome.table, config.bins)) {
        report.ovconf_by_token_count[bucket] = ov.value;
      }
    }

    if (config.mode == ProbeMode::kFillMask && config.compute_bias) {
      report.bias_level_per_relation =
          detail::compute_bias_levels(ds, gateway, config);
    }
  }

  manifest.finished_at = detail::utc_timestamp();
  manifest.gaps = report.gaps;

  save_report(report, config.output_dir / "report.json");
  write_file(config.output_dir / "bins.csv", render_bins_csv(report));
  write_file(config.output_dir / "report.txt", render_table(report));
  write_file(config.output_dir / "manifest.json",
             to_json(manifest).dump(2) + "\n");
  return outcome;
}

// ============================================================================
// Run comparison
// ============================================================================

struct ComparisonMatrix {
  std::vector<std::string> labels;  // backend ids in run order
  std::vector<std::vector<double>> sharing;  // sharing[left][top]
};

/// Sharing-rate matrix across runs over the same dataset. Entry (L, T) is
/// the fraction of L's covered facts that T also covers; the diagonal is
/// exactly 1.
inline ComparisonMatrix compare_runs(
    const std::vector<std::filesystem::path>& run_dirs) {
  if (run_dirs.size() < 2) {
    throw Error("compare needs at least two runs");
  }
  std::vector<RunManifest> manifests;
  std::vector<std::set<SubjectRelationPair>> covered;
  ComparisonMatrix out;
  for (const auto& dir : run_dirs) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path)) {
      throw Error("missing manifest: " + manifest_path.string());
    }
    manifests.push_back(
        manifest_from_json(json::parse(read_file(manifest_path))));
    covered.push_back(
        covered_facts(load_predictions(dir / "predictions.jsonl")));
    out.labels.push_back(manifests.back().backend_id);
  }
  for (std::size_t i = 1; i < manifests.size(); ++i) {
    if (manifests[i].dataset_hash != manifests[0].dataset_hash) {
      throw ManifestMismatchError(
          "runs cover different dataset versions: " + run_dirs[0].string() +
          " vs " + run_dirs[i].string());
    }
  }
  out.sharing.resize(run_dirs.size(),
                     std::vector<double>(run_dirs.size(), 0.0));
  for (std::size_t left = 0; left < covered.size(); ++left) {
    for (std::size_t top = 0; top < covered.size(); ++top) {
      out.sharing[left][top] =
          left == top ? 1.0 : sharing_rate(covered[left], covered[top]);
    }
  }
  return out;
}

inline std::string render_comparison_csv(const ComparisonMatrix& m) {
  std::string out = "model";
  for (const auto& label : m.labels) {
    out += "," + label;
  }
  out += "\n";
  for (std::size_t i = 0; i < m.labels.size(); ++i) {
    out += m.labels[i];
    for (double v : m.sharing[i]) {
      out += "," + std::to_string(v);
    }
    out += "\n";
  }
  return out;
}

}  // namespace lmprobe
