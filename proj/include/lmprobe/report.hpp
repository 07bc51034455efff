#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "lmprobe/errors.hpp"
#include "lmprobe/jsonl.hpp"
#include "lmprobe/metrics.hpp"

namespace lmprobe {

// ============================================================================
// Metric report
// ============================================================================

/// All scalar results of a run plus the calibration-bin table for plotting.
struct MetricReport {
  double acc_mean = 0.0;
  double acc_range = 0.0;
  double acc_sd = 0.0;
  std::optional<double> consist;
  std::optional<double> ovconf;
  std::map<std::string, double> bias_level_per_relation;
  std::optional<CoverageRates> coverage;
  std::optional<double> one_word_ratio;
  CalibrationBins bins;
  std::map<std::string, double> ovconf_by_token_count;
  std::size_t gaps = 0;  // prompts that could not be evaluated
  std::size_t pairs = 0;
  std::size_t prompts = 0;
};

inline json to_json(const MetricReport& r) {
  json bins = json::array();
  for (const auto& b : r.bins.bins) {
    bins.push_back({{"size", b.prompt_ids.size()},
                    {"mean_confidence", b.mean_confidence},
                    {"mean_accuracy", b.mean_accuracy}});
  }
  json doc{{"acc_mean", r.acc_mean},
           {"acc_range", r.acc_range},
           {"acc_sd", r.acc_sd},
           {"gaps", r.gaps},
           {"pairs", r.pairs},
           {"prompts", r.prompts},
           {"bins", bins}};
  if (r.consist) {
    doc["consist"] = *r.consist;
  }
  if (r.ovconf) {
    doc["ovconf"] = *r.ovconf;
  }
  if (!r.bias_level_per_relation.empty()) {
    doc["bias_level"] = r.bias_level_per_relation;
  }
  if (r.coverage) {
    doc["coverage"] = {{"average", r.coverage->average},
                       {"maximum", r.coverage->maximum},
                       {"oracle", r.coverage->oracle}};
  }
  if (r.one_word_ratio) {
    doc["one_word_ratio"] = *r.one_word_ratio;
  }
  if (!r.ovconf_by_token_count.empty()) {
    doc["ovconf_by_token_count"] = r.ovconf_by_token_count;
  }
  return doc;
}

inline MetricReport report_from_json(const json& doc) {
  MetricReport r;
  r.acc_mean = doc.at("acc_mean").get<double>();
  r.acc_range = doc.at("acc_range").get<double>();
  r.acc_sd = doc.at("acc_sd").get<double>();
  r.gaps = doc.at("gaps").get<std::size_t>();
  r.pairs = doc.value("pairs", std::size_t{0});
  r.prompts = doc.value("prompts", std::size_t{0});
  if (doc.contains("consist")) {
    r.consist = doc["consist"].get<double>();
  }
  if (doc.contains("ovconf")) {
    r.ovconf = doc["ovconf"].get<double>();
  }
  if (doc.contains("bias_level")) {
    for (auto& [k, v] : doc["bias_level"].items()) {
      r.bias_level_per_relation[k] = v.get<double>();
    }
  }
  if (doc.contains("coverage")) {
    CoverageRates c;
    c.average = doc["coverage"].at("average").get<double>();
    c.maximum = doc["coverage"].at("maximum").get<double>();
    c.oracle = doc["coverage"].at("oracle").get<double>();
    r.coverage = c;
  }
  if (doc.contains("one_word_ratio")) {
    r.one_word_ratio = doc["one_word_ratio"].get<double>();
  }
  if (doc.contains("ovconf_by_token_count")) {
    for (auto& [k, v] : doc["ovconf_by_token_count"].items()) {
      r.ovconf_by_token_count[k] = v.get<double>();
    }
  }
  for (const auto& b : doc.at("bins")) {
    CalibrationBin bin;
    bin.prompt_ids.resize(b.at("size").get<std::size_t>());
    bin.mean_confidence = b.at("mean_confidence").get<double>();
    bin.mean_accuracy = b.at("mean_accuracy").get<double>();
    r.bins.bins.push_back(std::move(bin));
  }
  return r;
}

inline void save_report(const MetricReport& r,
                        const std::filesystem::path& path) {
  write_file(path, to_json(r).dump(2) + "\n");
}

inline MetricReport load_report(const std::filesystem::path& path) {
  return report_from_json(json::parse(read_file(path)));
}

// ============================================================================
// Rendering
// ============================================================================

namespace detail {

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace detail

/// Table rendering: one header row, one value row, leading with Acc@1 and
/// its fluctuation, then Consist and Ovconf.
inline std::string render_table(const MetricReport& r) {
  std::string header = "Acc@1\trange\tSD";
  std::string row = detail::fixed4(r.acc_mean) + "\t" +
                    detail::fixed4(r.acc_range) + "\t" +
                    detail::fixed4(r.acc_sd);
  if (r.consist) {
    header += "\tConsist";
    row += "\t" + detail::fixed4(*r.consist);
  }
  if (r.ovconf) {
    header += "\tOvconf";
    row += "\t" + detail::fixed4(*r.ovconf);
  }
  if (r.one_word_ratio) {
    header += "\t1-word";
    row += "\t" + detail::fixed4(*r.one_word_ratio);
  }
  if (r.coverage) {
    header += "\tCov.avg\tCov.max\tCov.oracle";
    row += "\t" + detail::fixed4(r.coverage->average) + "\t" +
           detail::fixed4(r.coverage->maximum) + "\t" +
           detail::fixed4(r.coverage->oracle);
  }
  header += "\tgaps";
  row += "\t" + std::to_string(r.gaps);
  return header + "\n" + row + "\n";
}

/// Calibration bins as CSV: one row per bin, the data behind the
/// confidence-vs-accuracy plots.
inline std::string render_bins_csv(const MetricReport& r) {
  std::string out = "bin,mean_confidence,mean_accuracy,size\n";
  int index = 1;
  for (const auto& b : r.bins.bins) {
    out += std::to_string(index++) + "," +
           std::to_string(b.mean_confidence) + "," +
           std::to_string(b.mean_accuracy) + "," +
           std::to_string(b.prompt_ids.size()) + "\n";
  }
  return out;
}

enum class ReportFormat { kTable, kBinsCsv };

/// Writes the requested rendering next to the report.
inline std::filesystem::path emit_report(const MetricReport& r,
                                         ReportFormat format,
                                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  if (format == ReportFormat::kTable) {
    const auto path = dir / "report.txt";
    write_file(path, render_table(r));
    return path;
  }
  const auto path = dir / "bins.csv";
  write_file(path, render_bins_csv(r));
  return path;
}

}  // namespace lmprobe
