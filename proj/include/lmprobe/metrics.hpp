#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmprobe/dataset.hpp"
#include "lmprobe/errors.hpp"
#include "lmprobe/gateway.hpp"
#include "lmprobe/jsonl.hpp"
#include "lmprobe/matching.hpp"
#include "lmprobe/rng.hpp"

namespace lmprobe {

// ============================================================================
// Prediction records
// ============================================================================

/// One model output for one prompt. prediction_key is the top-1 token in
/// fill-mask mode and the greedy text in generate mode; template_id and
/// surface_index keep the record joinable to its prompt for the per-template
/// and partition analyses.
struct PredictionRecord {
  std::string prompt_id;
  ProbeMode mode = ProbeMode::kFillMask;
  std::string prediction_key;
  bool correct = false;
  std::optional<double> confidence;  // in [0,1] when present
  std::optional<int> token_count;
  std::string template_id;
  int surface_index = 0;

  bool operator==(const PredictionRecord&) const = default;
};

/// All records of a run, grouped by subject-relation pair. Iteration order
/// is the sorted pair order, so every metric downstream is deterministic.
class PredictionTable {
public:
  using Rows = std::map<SubjectRelationPair, std::vector<PredictionRecord>>;

  void add(const SubjectRelationPair& pair, PredictionRecord record) {
    rows_[pair].push_back(std::move(record));
  }

  const Rows& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }
  std::size_t pair_count() const { return rows_.size(); }

  std::size_t record_count() const {
    std::size_t n = 0;
    for (const auto& [pair, recs] : rows_) {
      n += recs.size();
    }
    return n;
  }

  bool operator==(const PredictionTable& other) const {
    return rows_ == other.rows_;
  }

private:
  Rows rows_;
};

inline void save_predictions(const PredictionTable& table,
                             const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw Error("cannot write " + path.string());
  }
  for (const auto& [pair, recs] : table.rows()) {
    auto sorted = recs;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      return a.prompt_id < b.prompt_id;
    });
    for (const auto& r : sorted) {
      json rec{{"prompt_id", r.prompt_id},
               {"subject", pair.subject},
               {"relation", pair.relation},
               {"template_id", r.template_id},
               {"surface_index", r.surface_index},
               {"mode", to_string(r.mode)},
               {"prediction_key", r.prediction_key},
               {"correct", r.correct}};
      if (r.confidence) {
        rec["confidence"] = *r.confidence;
      }
      if (r.token_count) {
        rec["token_count"] = *r.token_count;
      }
      out << rec.dump() << '\n';
    }
  }
}

inline PredictionTable load_predictions(const std::filesystem::path& path) {
  PredictionTable table;
  read_jsonl(path, [&](int line, const json& rec) {
    PredictionRecord r;
    r.prompt_id = require_field(rec, "prompt_id", path, line).get<std::string>();
    r.template_id =
        require_field(rec, "template_id", path, line).get<std::string>();
    r.surface_index = rec.value("surface_index", 0);
    r.mode = rec.value("mode", "fill-mask") == "generate"
                 ? ProbeMode::kGenerate
                 : ProbeMode::kFillMask;
    r.prediction_key =
        require_field(rec, "prediction_key", path, line).get<std::string>();
    r.correct = require_field(rec, "correct", path, line).get<bool>();
    if (rec.contains("confidence")) {
      r.confidence = rec["confidence"].get<double>();
    }
    if (rec.contains("token_count")) {
      r.token_count = rec["token_count"].get<int>();
    }
    SubjectRelationPair pair{
        require_field(rec, "subject", path, line).get<std::string>(),
        require_field(rec, "relation", path, line).get<std::string>()};
    table.add(pair, std::move(r));
  });
  return table;
}

// ============================================================================
// Accuracy resampling
// ============================================================================

/// The N resampled accuracy values: each draw picks one record per pair and
/// averages correctness.
struct AccSampleVector {
  std::vector<double> values;
  std::uint64_t seed = 0;
};

struct ResampleSummary {
  AccSampleVector samples;
  double mean = 0.0;
  double range = 0.0;
  double sd = 0.0;  // population standard deviation
};

inline ResampleSummary resample_accuracy(const PredictionTable& table,
                                         int n_samples, std::uint64_t seed) {
  if (table.empty()) {
    throw UndefinedMetricError("prediction table is empty");
  }
  if (n_samples < 1) {
    throw Error("resample count must be positive");
  }
  std::vector<std::vector<unsigned char>> correctness;
  correctness.reserve(table.pair_count());
  for (const auto& [pair, recs] : table.rows()) {
    std::vector<unsigned char> flags;
    flags.reserve(recs.size());
    for (const auto& r : recs) {
      flags.push_back(r.correct ? 1 : 0);
    }
    correctness.push_back(std::move(flags));
  }

  Rng rng(seed);
  ResampleSummary out;
  out.samples.seed = seed;
  out.samples.values.reserve(static_cast<std::size_t>(n_samples));
  const double inv_pairs = 1.0 / static_cast<double>(correctness.size());
  for (int i = 0; i < n_samples; ++i) {
    std::size_t hits = 0;
    for (const auto& flags : correctness) {
      hits += flags[rng.bounded(flags.size())];
    }
    out.samples.values.push_back(static_cast<double>(hits) * inv_pairs);
  }

  double sum = 0.0;
  double lo = out.samples.values.front();
  double hi = lo;
  for (double v : out.samples.values) {
    sum += v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  out.mean = sum / static_cast<double>(out.samples.values.size());
  out.range = hi - lo;
  double var = 0.0;
  for (double v : out.samples.values) {
    const double d = v - out.mean;
    var += d * d;
  }
  out.sd = std::sqrt(var / static_cast<double>(out.samples.values.size()));
  return out;
}

/// Closed-form expectation of a single resampling draw: the mean over pairs
/// of each pair's fraction of correct records. Independent of the sampler;
/// used to cross-check it.
inline double expected_accuracy_oracle(const PredictionTable& table) {
  if (table.empty()) {
    throw UndefinedMetricError("prediction table is empty");
  }
  double sum = 0.0;
  for (const auto& [pair, recs] : table.rows()) {
    std::size_t correct = 0;
    for (const auto& r : recs) {
      correct += r.correct ? 1 : 0;
    }
    sum += static_cast<double>(correct) / static_cast<double>(recs.size());
  }
  return sum / static_cast<double>(table.pair_count());
}

// ============================================================================
// Consistency
// ============================================================================

enum class PredictionEquality { kToken, kMutualMatch };

struct ConsistencyResult {
  double value = 0.0;
  std::size_t counted_pairs = 0;
  std::size_t excluded_pairs = 0;  // pairs with a single record
};

namespace detail {

inline bool predictions_equal(const std::string& a, const std::string& b,
                              PredictionEquality eq, MatchInclusion inclusion) {
  return eq == PredictionEquality::kToken ? a == b
                                          : match_mutual(a, b, inclusion);
}

}  // namespace detail

/// Per pair, the fraction of matching unordered prediction pairs among
/// |P_t|(|P_t|-1)/2, macro-averaged over pairs. Token equality for fill-mask
/// predictions, bi-directional matching for generations.
inline ConsistencyResult consistency(
    const PredictionTable& table, PredictionEquality eq,
    MatchInclusion inclusion = MatchInclusion::kContiguous) {
  ConsistencyResult out;
  double sum = 0.0;
  for (const auto& [pair, recs] : table.rows()) {
    if (recs.size() < 2) {
      ++out.excluded_pairs;
      continue;
    }
    std::size_t matched = 0;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      for (std::size_t j = i + 1; j < recs.size(); ++j) {
        if (detail::predictions_equal(recs[i].prediction_key,
                                      recs[j].prediction_key, eq, inclusion)) {
          ++matched;
        }
      }
    }
    const auto total = recs.size() * (recs.size() - 1) / 2;
    sum += static_cast<double>(matched) / static_cast<double>(total);
    ++out.counted_pairs;
  }
  if (out.counted_pairs == 0) {
    throw UndefinedMetricError("no pair has 2 or more predictions");
  }
  out.value = sum / static_cast<double>(out.counted_pairs);
  return out;
}

// ============================================================================
// Generation confidence
// ============================================================================

/// Matching rate between the greedy output and sampled outputs; stands in
/// for the mask-token max probability when probing by generation.
inline double generation_confidence(
    const std::string& greedy, const std::vector<std::string>& samples,
    MatchInclusion inclusion = MatchInclusion::kContiguous) {
  if (samples.empty()) {
    throw UndefinedMetricError("confidence needs at least one sample");
  }
  std::size_t matched = 0;
  for (const auto& s : samples) {
    if (match_mutual(greedy, s, inclusion)) {
      ++matched;
    }
  }
  return static_cast<double>(matched) / static_cast<double>(samples.size());
}

// ============================================================================
// Overconfidence
// ============================================================================

struct ConfidenceRecord {
  std::string prompt_id;
  double confidence = 0.0;
  bool correct = false;
};

struct CalibrationBin {
  std::vector<std::string> prompt_ids;
  double mean_confidence = 0.0;
  double mean_accuracy = 0.0;
};

struct CalibrationBins {
  std::vector<CalibrationBin> bins;
};

struct OvconfResult {
  double value = 0.0;
  CalibrationBins bins;
};

/// Sorts records by descending confidence (stable, so ties keep prompt
/// order), segments them into `num_bins` equal-mass bins (sizes differ by at
/// most one, remainder to the earliest bins), and averages the per-bin gap
/// between mean confidence and mean accuracy. Bin weights are
/// |P^(i)|/sum|P^(j)| by default; `literal_bin_weights` switches to the
/// |P^(i)|/M form for audit.
inline OvconfResult overconfidence(std::vector<ConfidenceRecord> records,
                                   int num_bins = 10,
                                   bool literal_bin_weights = false) {
  if (num_bins < 1) {
    throw Error("bin count must be positive");
  }
  if (records.size() < static_cast<std::size_t>(num_bins)) {
    throw UndefinedMetricError(
        "need at least " + std::to_string(num_bins) + " records, got " +
        std::to_string(records.size()));
  }
  std::stable_sort(records.begin(), records.end(),
                   [](const auto& a, const auto& b) {
                     return a.confidence > b.confidence;
                   });
  const std::size_t n = records.size();
  const std::size_t base = n / static_cast<std::size_t>(num_bins);
  const std::size_t remainder = n % static_cast<std::size_t>(num_bins);

  OvconfResult out;
  std::size_t offset = 0;
  for (int b = 0; b < num_bins; ++b) {
    const std::size_t size =
        base + (static_cast<std::size_t>(b) < remainder ? 1 : 0);
    CalibrationBin bin;
    double conf = 0.0;
    double acc = 0.0;
    for (std::size_t i = offset; i < offset + size; ++i) {
      bin.prompt_ids.push_back(records[i].prompt_id);
      conf += records[i].confidence;
      acc += records[i].correct ? 1.0 : 0.0;
    }
    bin.mean_confidence = conf / static_cast<double>(size);
    bin.mean_accuracy = acc / static_cast<double>(size);
    const double weight =
        literal_bin_weights
            ? static_cast<double>(size) / static_cast<double>(num_bins)
            : static_cast<double>(size) / static_cast<double>(n);
    out.value += weight * (bin.mean_confidence - bin.mean_accuracy);
    out.bins.bins.push_back(std::move(bin));
    offset += size;
  }
  return out;
}

/// Confidence records of a table (entries lacking confidence are skipped).
inline std::vector<ConfidenceRecord> confidence_records(
    const PredictionTable& table) {
  std::vector<ConfidenceRecord> out;
  for (const auto& [pair, recs] : table.rows()) {
    for (const auto& r : recs) {
      if (r.confidence) {
        out.push_back({r.prompt_id, *r.confidence, r.correct});
      }
    }
  }
  return out;
}

/// Ovconf partitioned by generated token count: buckets 1..4 and 5+.
/// Buckets with fewer records than bins are omitted.
inline std::map<std::string, OvconfResult> overconfidence_by_token_count(
    const PredictionTable& table, int num_bins = 10) {
  std::map<std::string, std::vector<ConfidenceRecord>> buckets;
  for (const auto& [pair, recs] : table.rows()) {
    for (const auto& r : recs) {
      if (!r.confidence || !r.token_count) {
        continue;
      }
      const int c = *r.token_count;
      const std::string bucket = c >= 5 ? "5+" : std::to_string(c);
      buckets[bucket].push_back({r.prompt_id, *r.confidence, r.correct});
    }
  }
  std::map<std::string, OvconfResult> out;
  for (auto& [bucket, records] : buckets) {
    if (records.size() >= static_cast<std::size_t>(num_bins)) {
      out[bucket] = overconfidence(std::move(records), num_bins);
    }
  }
  return out;
}

// ============================================================================
// Bias level
// ============================================================================

inline constexpr std::array<const char*, 3> kContentFreeSubjects{"N/A", "",
                                                                 "?"};

/// 1 - H/H_max of a distribution over candidates (natural log; 0 log 0 = 0).
/// The input need not be normalized.
inline double bias_from_distribution(const std::vector<double>& dist) {
  if (dist.size() < 2) {
    throw Error("bias level needs at least 2 candidates");
  }
  double sum = 0.0;
  for (double p : dist) {
    sum += p;
  }
  if (sum <= 0.0) {
    throw UndefinedBiasError("all candidate probabilities are zero");
  }
  double entropy = 0.0;
  for (double p : dist) {
    const double q = p / sum;
    if (q > 0.0) {
      entropy -= q * std::log(q);
    }
  }
  return 1.0 - entropy / std::log(static_cast<double>(dist.size()));
}

/// Candidate-token distribution of one template under content-free
/// subjects: the template is realized with "N/A", "" and "?", each mask
/// distribution is restricted to the candidates and renormalized, and the
/// renormalized distributions are averaged. Prompts with zero candidate
/// mass are dropped from the average; all three zero raises
/// UndefinedBiasError.
inline std::vector<double> content_free_distribution(
    Gateway& gateway, const RelationalTemplate& tmpl,
    const std::vector<std::string>& candidates, int top_k = 100) {
  std::vector<double> averaged(candidates.size(), 0.0);
  int used = 0;
  for (const char* subject : kContentFreeSubjects) {
    const std::string text = detail::realize_statement(tmpl.pattern, subject);
    const FillMaskResponse resp = gateway.fill_mask(text, top_k);
    std::map<std::string, double> probs;
    for (const auto& e : resp.entries) {
      probs[e.token] = e.probability;
    }
    std::vector<double> restricted(candidates.size(), 0.0);
    double mass = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      auto it = probs.find(candidates[i]);
      if (it != probs.end()) {
        restricted[i] = it->second;
        mass += it->second;
      }
    }
    if (mass > 0.0) {
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        averaged[i] += restricted[i] / mass;
      }
      ++used;
    }
  }
  if (used == 0) {
    throw UndefinedBiasError(
        "no content-free prompt put mass on any candidate for template \"" +
        tmpl.template_id + "\"");
  }
  for (auto& v : averaged) {
    v /= static_cast<double>(used);
  }
  return averaged;
}

/// Bias level of a single template over a candidate set.
inline double bias_level(Gateway& gateway, const RelationalTemplate& tmpl,
                         const std::vector<std::string>& candidates,
                         int top_k = 100) {
  if (candidates.size() < 2) {
    throw Error("bias level needs at least 2 candidates");
  }
  return bias_from_distribution(
      content_free_distribution(gateway, tmpl, candidates, top_k));
}

/// Multi-prompt bias: per-template content-free distributions averaged
/// across templates, then the bias of the averaged distribution. Templates
/// with no candidate mass are skipped; all skipped raises
/// UndefinedBiasError.
inline double relation_bias_multi(
    Gateway& gateway, const std::vector<RelationalTemplate>& templates,
    const std::vector<std::string>& candidates, int top_k = 100) {
  if (templates.empty()) {
    throw Error("relation bias needs at least one template");
  }
  if (candidates.size() < 2) {
    throw Error("bias level needs at least 2 candidates");
  }
  std::vector<double> averaged(candidates.size(), 0.0);
  int used = 0;
  for (const auto& tmpl : templates) {
    try {
      const auto dist =
          content_free_distribution(gateway, tmpl, candidates, top_k);
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        averaged[i] += dist[i];
      }
      ++used;
    } catch (const UndefinedBiasError&) {
      // Template contributes nothing; fail only if every template does.
    }
  }
  if (used == 0) {
    throw UndefinedBiasError("no template put mass on any candidate");
  }
  for (auto& v : averaged) {
    v /= static_cast<double>(used);
  }
  return bias_from_distribution(averaged);
}

// ============================================================================
// Coverage
// ============================================================================

struct CoverageRates {
  double average = 0.0;  // micro over all prompts
  double maximum = 0.0;  // best template per relation, best surface per fact
  double oracle = 0.0;   // any prompt correct
};

inline CoverageRates coverage_rates(const PredictionTable& table) {
  if (table.empty()) {
    throw UndefinedMetricError("prediction table is empty");
  }
  std::size_t total_records = 0;
  std::size_t correct_records = 0;
  // For the maximum metric a template's accuracy takes, per fact, the best
  // subject surface: (relation, template) -> {covered pairs, pairs seen}.
  std::map<std::pair<std::string, std::string>, std::pair<std::size_t, std::size_t>>
      pair_coverage;
  for (const auto& [pair, recs] : table.rows()) {
    std::map<std::string, bool> any_by_template;
    for (const auto& r : recs) {
      ++total_records;
      correct_records += r.correct ? 1 : 0;
      any_by_template[r.template_id] |= r.correct;
    }
    for (const auto& [template_id, any] : any_by_template) {
      auto& cell = pair_coverage[{pair.relation, template_id}];
      ++cell.second;
      cell.first += any ? 1 : 0;
    }
  }

  // Best template of each relation; ties broken by template_id order.
  std::map<std::string, std::string> best_template;
  std::map<std::string, double> best_accuracy;
  for (const auto& [key, cell] : pair_coverage) {
    const auto& [relation, template_id] = key;
    const double acc =
        static_cast<double>(cell.first) / static_cast<double>(cell.second);
    auto it = best_accuracy.find(relation);
    if (it == best_accuracy.end() || acc > it->second) {
      best_accuracy[relation] = acc;
      best_template[relation] = template_id;
    }
  }

  std::size_t max_correct = 0;
  std::size_t oracle_correct = 0;
  for (const auto& [pair, recs] : table.rows()) {
    bool any_correct = false;
    bool best_correct = false;
    const auto& best = best_template[pair.relation];
    for (const auto& r : recs) {
      any_correct |= r.correct;
      if (r.correct && r.template_id == best) {
        best_correct = true;
      }
    }
    max_correct += best_correct ? 1 : 0;
    oracle_correct += any_correct ? 1 : 0;
  }

  CoverageRates out;
  out.average = static_cast<double>(correct_records) /
                static_cast<double>(total_records);
  out.maximum = static_cast<double>(max_correct) /
                static_cast<double>(table.pair_count());
  out.oracle = static_cast<double>(oracle_correct) /
               static_cast<double>(table.pair_count());
  return out;
}

/// Facts covered by a run: pairs with at least one correct prediction.
inline std::set<SubjectRelationPair> covered_facts(
    const PredictionTable& table) {
  std::set<SubjectRelationPair> out;
  for (const auto& [pair, recs] : table.rows()) {
    for (const auto& r : recs) {
      if (r.correct) {
        out.insert(pair);
        break;
      }
    }
  }
  return out;
}

/// Asymmetric knowledge sharing rate |A intersect B| / |A|.
inline double sharing_rate(const std::set<SubjectRelationPair>& covered_a,
                           const std::set<SubjectRelationPair>& covered_b) {
  if (covered_a.empty()) {
    throw UndefinedMetricError("sharing rate undefined for an empty base set");
  }
  std::size_t shared = 0;
  for (const auto& p : covered_a) {
    shared += covered_b.count(p);
  }
  return static_cast<double>(shared) / static_cast<double>(covered_a.size());
}

// ============================================================================
// Instruction following
// ============================================================================

inline double one_word_ratio(const std::vector<std::string>& generations) {
  if (generations.empty()) {
    throw UndefinedMetricError("one-word ratio of an empty list");
  }
  std::size_t hits = 0;
  for (const auto& g : generations) {
    if (is_one_word(g)) {
      ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(generations.size());
}

// ============================================================================
// Per-template breakdown
// ============================================================================

struct TemplateAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const {
    return total == 0 ? 0.0
                      : static_cast<double>(correct) /
                            static_cast<double>(total);
  }
};

struct RelationBreakdown {
  std::map<std::string, TemplateAccuracy> templates;
  std::string min_template;
  std::string max_template;
  double min_accuracy = 0.0;
  double max_accuracy = 0.0;
};

struct PerTemplateBreakdown {
  std::map<std::string, RelationBreakdown> relations;
  double dataset_min = 0.0;   // micro over per-relation worst templates
  double dataset_max = 0.0;   // micro over per-relation best templates
  double dataset_mean = 0.0;  // micro over all prompts
};

inline PerTemplateBreakdown per_template_breakdown(
    const PredictionTable& table) {
  if (table.empty()) {
    throw UndefinedMetricError("prediction table is empty");
  }
  PerTemplateBreakdown out;
  std::size_t all_correct = 0;
  std::size_t all_total = 0;
  for (const auto& [pair, recs] : table.rows()) {
    auto& rel = out.relations[pair.relation];
    for (const auto& r : recs) {
      auto& cell = rel.templates[r.template_id];
      ++cell.total;
      ++all_total;
      if (r.correct) {
        ++cell.correct;
        ++all_correct;
      }
    }
  }
  std::size_t min_correct = 0;
  std::size_t min_total = 0;
  std::size_t max_correct = 0;
  std::size_t max_total = 0;
  for (auto& [relation, rel] : out.relations) {
    const TemplateAccuracy* lo = nullptr;
    const TemplateAccuracy* hi = nullptr;
    for (const auto& [template_id, cell] : rel.templates) {
      if (!lo || cell.accuracy() < lo->accuracy()) {
        lo = &cell;
        rel.min_template = template_id;
      }
      if (!hi || cell.accuracy() > hi->accuracy()) {
        hi = &cell;
        rel.max_template = template_id;
      }
    }
    rel.min_accuracy = lo->accuracy();
    rel.max_accuracy = hi->accuracy();
    min_correct += lo->correct;
    min_total += lo->total;
    max_correct += hi->correct;
    max_total += hi->total;
  }
  out.dataset_min =
      static_cast<double>(min_correct) / static_cast<double>(min_total);
  out.dataset_max =
      static_cast<double>(max_correct) / static_cast<double>(max_total);
  out.dataset_mean =
      static_cast<double>(all_correct) / static_cast<double>(all_total);
  return out;
}

// ============================================================================
// Robustness partitions
// ============================================================================

enum class PartitionAxis { kSubject, kTemplate };

struct PartitionReport {
  double consist = 1.0;
  double acc_min = 0.0;
  double acc_max = 0.0;
  bool degenerate = false;  // axis carries no variation
  std::size_t groups = 0;   // record groups with >= 2 axis variants
};

/// Robustness along one variation axis. Subject axis: predictions vary only
/// by subject surface (template held fixed per group); units are subjects
/// and their expressions are surfaces. Template axis: predictions vary only
/// by template (surface held fixed per group); units are relations and
/// their expressions are templates. Consist is the Eq.-1-style match rate
/// over within-group record pairs, macro-averaged; acc_min/acc_max
/// micro-average each unit's worst/best expression records. An axis with no
/// variation anywhere is reported degenerate (consist 1, acc_min =
/// acc_max = overall accuracy), never fabricated.
inline PartitionReport robustness_partitions(
    const Dataset& /*ds*/, const PredictionTable& table, PartitionAxis axis,
    std::uint64_t seed, PredictionEquality eq = PredictionEquality::kToken,
    MatchInclusion inclusion = MatchInclusion::kContiguous) {
  if (table.empty()) {
    throw UndefinedMetricError("prediction table is empty");
  }

  // Group key fixes everything except the axis variable.
  using GroupKey = std::pair<std::string, std::string>;
  std::map<GroupKey, std::vector<const PredictionRecord*>> groups;
  // (unit, expression) -> correct/total.
  std::map<std::pair<std::string, std::string>, TemplateAccuracy> expressions;
  std::size_t overall_correct = 0;
  std::size_t overall_total = 0;

  for (const auto& [pair, recs] : table.rows()) {
    for (const auto& r : recs) {
      ++overall_total;
      overall_correct += r.correct ? 1 : 0;
      GroupKey group;
      std::string unit;
      std::string expression;
      if (axis == PartitionAxis::kSubject) {
        group = {pair.key(), r.template_id};
        unit = pair.subject;
        expression = std::to_string(r.surface_index);
      } else {
        group = {pair.key(), std::to_string(r.surface_index)};
        unit = pair.relation;
        expression = r.template_id;
      }
      groups[group].push_back(&r);
      auto& cell = expressions[{unit, expression}];
      ++cell.total;
      cell.correct += r.correct ? 1 : 0;
    }
  }

  PartitionReport out;
  double consist_sum = 0.0;
  for (const auto& [key, members] : groups) {
    if (members.size() < 2) {
      continue;
    }
    std::size_t matched = 0;
    for (std::size_t i = 0; i < members.size(); ++i) {
      for (std::size_t j = i + 1; j < members.size(); ++j) {
        if (detail::predictions_equal(members[i]->prediction_key,
                                      members[j]->prediction_key, eq,
                                      inclusion)) {
          ++matched;
        }
      }
    }
    const auto total = members.size() * (members.size() - 1) / 2;
    consist_sum += static_cast<double>(matched) / static_cast<double>(total);
    ++out.groups;
  }

  const double overall = static_cast<double>(overall_correct) /
                         static_cast<double>(overall_total);
  if (out.groups == 0) {
    out.degenerate = true;
    out.consist = 1.0;
    out.acc_min = overall;
    out.acc_max = overall;
    return out;
  }
  out.consist = consist_sum / static_cast<double>(out.groups);

  // Worst/best expression per unit; accuracy ties broken by a seeded hash so
  // the choice is deterministic for a given seed.
  std::map<std::string, std::pair<std::string, TemplateAccuracy>> unit_min;
  std::map<std::string, std::pair<std::string, TemplateAccuracy>> unit_max;
  auto tie_rank = [&](const std::string& unit, const std::string& expr) {
    return mix64(seed ^ fnv1a64(unit + "\x1f" + expr));
  };
  for (const auto& [key, cell] : expressions) {
    const auto& [unit, expr] = key;
    auto lo = unit_min.find(unit);
    if (lo == unit_min.end() ||
        cell.accuracy() < lo->second.second.accuracy() ||
        (cell.accuracy() == lo->second.second.accuracy() &&
         tie_rank(unit, expr) < tie_rank(unit, lo->second.first))) {
      unit_min[unit] = {expr, cell};
    }
    auto hi = unit_max.find(unit);
    if (hi == unit_max.end() ||
        cell.accuracy() > hi->second.second.accuracy() ||
        (cell.accuracy() == hi->second.second.accuracy() &&
         tie_rank(unit, expr) < tie_rank(unit, hi->second.first))) {
      unit_max[unit] = {expr, cell};
    }
  }
  std::size_t min_correct = 0;
  std::size_t min_total = 0;
  std::size_t max_correct = 0;
  std::size_t max_total = 0;
  for (const auto& [unit, pick] : unit_min) {
    min_correct += pick.second.correct;
    min_total += pick.second.total;
  }
  for (const auto& [unit, pick] : unit_max) {
    max_correct += pick.second.correct;
    max_total += pick.second.total;
  }
  out.acc_min =
      static_cast<double>(min_correct) / static_cast<double>(min_total);
  out.acc_max =
      static_cast<double>(max_correct) / static_cast<double>(max_total);
  return out;
}

// ============================================================================
// Group consistency (manual-seed template groups)
// ============================================================================

struct GroupConsistency {
  double inner = 0.0;  // prediction pairs whose templates share a group
  double inter = 0.0;  // prediction pairs from different groups
  std::size_t inner_pairs = 0;
  std::size_t inter_pairs = 0;
};

/// Eq.-1-style pairwise match rate, split by whether the two predictions'
/// templates share a manual-seed group; macro-averaged over pairs.
inline GroupConsistency group_consistency(
    const PredictionTable& table,
    const std::vector<RelationalTemplate>& templates,
    PredictionEquality eq = PredictionEquality::kToken,
    MatchInclusion inclusion = MatchInclusion::kContiguous) {
  std::map<std::pair<std::string, std::string>, int> group_of;
  std::map<int, std::set<std::string>> group_sizes;
  for (const auto& t : templates) {
    if (t.group_id) {
      group_of[{t.relation_id, t.template_id}] = *t.group_id;
      group_sizes[*t.group_id].insert(t.template_id);
    }
  }
  std::size_t usable_groups = 0;
  for (const auto& [gid, members] : group_sizes) {
    if (members.size() >= 2) {
      ++usable_groups;
    }
  }
  if (usable_groups < 2) {
    throw UndefinedMetricError(
        "group consistency needs at least 2 groups with 2 or more templates");
  }

  GroupConsistency out;
  double inner_sum = 0.0;
  double inter_sum = 0.0;
  for (const auto& [pair, recs] : table.rows()) {
    std::size_t inner_match = 0;
    std::size_t inner_total = 0;
    std::size_t inter_match = 0;
    std::size_t inter_total = 0;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      auto gi = group_of.find({pair.relation, recs[i].template_id});
      if (gi == group_of.end()) {
        continue;
      }
      for (std::size_t j = i + 1; j < recs.size(); ++j) {
        auto gj = group_of.find({pair.relation, recs[j].template_id});
        if (gj == group_of.end()) {
          continue;
        }
        const bool match = detail::predictions_equal(
            recs[i].prediction_key, recs[j].prediction_key, eq, inclusion);
        if (gi->second == gj->second) {
          ++inner_total;
          inner_match += match ? 1 : 0;
        } else {
          ++inter_total;
          inter_match += match ? 1 : 0;
        }
      }
    }
    if (inner_total > 0) {
      inner_sum += static_cast<double>(inner_match) /
                   static_cast<double>(inner_total);
      ++out.inner_pairs;
    }
    if (inter_total > 0) {
      inter_sum += static_cast<double>(inter_match) /
                   static_cast<double>(inter_total);
      ++out.inter_pairs;
    }
  }
  if (out.inner_pairs == 0 || out.inter_pairs == 0) {
    throw UndefinedMetricError(
        "no pair offers both inner- and inter-group prediction pairs");
  }
  out.inner = inner_sum / static_cast<double>(out.inner_pairs);
  out.inter = inter_sum / static_cast<double>(out.inter_pairs);
  return out;
}

// ============================================================================
// Alias rank gain
// ============================================================================

struct RankProbe {
  std::string text;   // masked prompt
  std::string token;  // token whose rank is probed
};

/// Original expression probe plus its extended-expression probes. Subject
/// extensions vary the text; object extensions vary the token.
struct RankGainItem {
  RankProbe original;
  std::vector<RankProbe> extended;
};

struct RankGainResult {
  double rate = 0.0;
  std::size_t evaluated = 0;
  std::size_t gaps = 0;  // items with an unavailable rank
};

/// Fraction of items where some extended expression ranks strictly better
/// (smaller) than the original. Items hitting a rank-unavailable condition
/// are excluded and counted as gaps.
inline RankGainResult alias_rank_gain(Gateway& gateway,
                                      const std::vector<RankGainItem>& items,
                                      int depth = 100) {
  bool any_extended = false;
  for (const auto& item : items) {
    if (!item.extended.empty()) {
      any_extended = true;
    }
  }
  if (items.empty() || !any_extended) {
    throw Error("alias rank gain needs items with extended expressions");
  }
  RankGainResult out;
  std::size_t gains = 0;
  for (const auto& item : items) {
    if (item.extended.empty()) {
      throw Error("item without extended expressions");
    }
    try {
      const int original =
          gateway.token_rank(item.original.text, item.original.token, depth);
      int best_extended = std::numeric_limits<int>::max();
      for (const auto& probe : item.extended) {
        best_extended = std::min(
            best_extended, gateway.token_rank(probe.text, probe.token, depth));
      }
      ++out.evaluated;
      gains += best_extended < original ? 1 : 0;
    } catch (const RankUnavailableError&) {
      ++out.gaps;
    }
  }
  if (out.evaluated == 0) {
    throw UndefinedMetricError("every rank-gain item was unavailable");
  }
  out.rate = static_cast<double>(gains) / static_cast<double>(out.evaluated);
  return out;
}

}  // namespace lmprobe
