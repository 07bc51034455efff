#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmprobe/dataset.hpp"
#include "lmprobe/errors.hpp"
#include "lmprobe/gateway.hpp"
#include "lmprobe/icl.hpp"
#include "lmprobe/jsonl.hpp"
#include "lmprobe/matching.hpp"
#include "lmprobe/rng.hpp"

namespace lmprobe {

// ============================================================================
// Run configuration
// ============================================================================

struct RunConfig {
  std::filesystem::path dataset_dir;
  BackendDescriptor backend;
  ProbeMode mode = ProbeMode::kFillMask;
  ICLSetting icl;  // generate mode only
  IclStyle icl_style = IclStyle::kMaskPrediction;
  int resamples = 50000;       // N accuracy resamples
  int bins = 10;               // M calibration bins
  std::uint64_t seed = 0;
  int confidence_samples = 100;  // multinomial samples per confidence probe
  int confidence_subset = 0;     // pairs probed for confidence; 0 = all
  int top_k = 100;
  int max_new_tokens = 16;
  std::vector<std::string> stop{"\n"};
  int concurrency = 1;
  std::optional<std::filesystem::path> cache_path;
  std::filesystem::path output_dir;
  bool literal_bin_weights = false;
  MatchInclusion inclusion = MatchInclusion::kContiguous;
  bool compute_bias = true;  // fill-mask runs only
  std::optional<std::filesystem::path> audit_path;
};

inline json to_json(const RunConfig& c) {
  json doc{{"dataset", c.dataset_dir.string()},
           {"backend",
            {{"backend_id", c.backend.backend_id},
             {"endpoint", c.backend.endpoint},
             {"capabilities", c.backend.capabilities}}},
           {"mode", to_string(c.mode)},
           {"resamples", c.resamples},
           {"bins", c.bins},
           {"seed", c.seed},
           {"confidence_samples", c.confidence_samples},
           {"confidence_subset", c.confidence_subset},
           {"top_k", c.top_k},
           {"max_new_tokens", c.max_new_tokens},
           {"stop", c.stop},
           {"concurrency", c.concurrency},
           {"output_dir", c.output_dir.string()},
           {"literal_bin_weights", c.literal_bin_weights},
           {"match_inclusion",
            c.inclusion == MatchInclusion::kContiguous ? "contiguous"
                                                       : "subset"},
           {"compute_bias", c.compute_bias}};
  if (c.mode == ProbeMode::kGenerate) {
    doc["icl"] = {{"setting", c.icl.to_string()},
                  {"style", to_string(c.icl_style)}};
  }
  if (c.cache_path) {
    doc["cache"] = c.cache_path->string();
  }
  if (c.audit_path) {
    doc["audit_file"] = c.audit_path->string();
  }
  return doc;
}

inline RunConfig config_from_json(const json& doc) {
  RunConfig c;
  c.dataset_dir = doc.value("dataset", "");
  if (doc.contains("backend")) {
    const auto& b = doc["backend"];
    c.backend.backend_id = b.value("backend_id", "");
    c.backend.endpoint = b.value("endpoint", "");
    if (b.contains("capabilities")) {
      for (const auto& cap : b["capabilities"]) {
        c.backend.capabilities.insert(cap.get<std::string>());
      }
    }
  }
  const std::string mode = doc.value("mode", "fill-mask");
  if (mode == "fill-mask") {
    c.mode = ProbeMode::kFillMask;
  } else if (mode == "generate") {
    c.mode = ProbeMode::kGenerate;
  } else {
    throw ConfigError({"unknown mode \"" + mode + "\""});
  }
  if (doc.contains("icl")) {
    c.icl = ICLSetting::parse(doc["icl"].value("setting", "zero-shot"));
    const std::string style = doc["icl"].value("style", "mask-prediction");
    if (style == "mask-prediction") {
      c.icl_style = IclStyle::kMaskPrediction;
    } else if (style == "question-answer") {
      c.icl_style = IclStyle::kQuestionAnswer;
    } else {
      throw ConfigError({"unknown icl style \"" + style + "\""});
    }
  }
  c.resamples = doc.value("resamples", 50000);
  c.bins = doc.value("bins", 10);
  c.seed = doc.value("seed", std::uint64_t{0});
  c.confidence_samples = doc.value("confidence_samples", 100);
  c.confidence_subset = doc.value("confidence_subset", 0);
  c.top_k = doc.value("top_k", 100);
  c.max_new_tokens = doc.value("max_new_tokens", 16);
  if (doc.contains("stop")) {
    c.stop = doc["stop"].get<std::vector<std::string>>();
  }
  c.concurrency = doc.value("concurrency", 1);
  if (doc.contains("cache")) {
    c.cache_path = doc["cache"].get<std::string>();
  }
  c.output_dir = doc.value("output_dir", "");
  c.literal_bin_weights = doc.value("literal_bin_weights", false);
  c.inclusion = doc.value("match_inclusion", "contiguous") == "subset"
                    ? MatchInclusion::kSubset
                    : MatchInclusion::kContiguous;
  c.compute_bias = doc.value("compute_bias", true);
  if (doc.contains("audit_file")) {
    c.audit_path = doc["audit_file"].get<std::string>();
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  }
  return config_from_json(doc);
}

/// Environment may supply the endpoint and auth token only.
inline void apply_environment(RunConfig& c) {
  if (const char* endpoint = std::getenv("LMPROBE_ENDPOINT")) {
    c.backend.endpoint = endpoint;
  }
}

inline std::string auth_token_from_environment() {
  const char* token = std::getenv("LMPROBE_AUTH_TOKEN");
  return token ? token : "";
}

/// Collects every configuration problem; callers fail with the full list
/// before touching the network.
inline std::vector<std::string> validate_config(const RunConfig& c) {
  std::vector<std::string> issues;
  if (c.dataset_dir.empty()) {
    issues.push_back("dataset path is required");
  } else if (!std::filesystem::exists(c.dataset_dir)) {
    issues.push_back("dataset path does not exist: " +
                     c.dataset_dir.string());
  }
  if (c.backend.backend_id.empty()) {
    issues.push_back("backend.backend_id is required");
  }
  if (c.backend.endpoint.empty()) {
    issues.push_back("backend.endpoint is required (flag, config, or "
                     "LMPROBE_ENDPOINT)");
  }
  if (c.mode == ProbeMode::kFillMask) {
    if (c.icl.kind != IclKind::kZeroShot || c.icl.shots != 0) {
      issues.push_back("fill-mask mode forbids ICL settings");
    }
    if (!c.backend.capabilities.empty() &&
        !c.backend.capabilities.count("fill-mask")) {
      issues.push_back("backend does not declare the fill-mask capability");
    }
  } else {
    if (!c.backend.capabilities.empty() &&
        !c.backend.capabilities.count("generate")) {
      issues.push_back("backend does not declare the generate capability");
    }
  }
  if (c.resamples < 1) {
    issues.push_back("resamples must be >= 1");
  }
  if (c.bins < 2) {
    issues.push_back("bins must be >= 2");
  }
  if (c.top_k < 1) {
    issues.push_back("top_k must be >= 1");
  }
  if (c.max_new_tokens < 1) {
    issues.push_back("max_new_tokens must be >= 1");
  }
  if (c.confidence_samples < 1) {
    issues.push_back("confidence_samples must be >= 1");
  }
  if (c.confidence_subset < 0) {
    issues.push_back("confidence_subset must be >= 0");
  }
  if (c.concurrency < 1) {
    issues.push_back("concurrency must be >= 1");
  }
  if (c.output_dir.empty()) {
    issues.push_back("output_dir is required");
  }
  return issues;
}

// ============================================================================
// Run manifest
// ============================================================================

/// Content hash over the dataset's five files; compare refuses to mix runs
/// whose hashes differ.
inline std::string dataset_manifest_hash(const std::filesystem::path& dir) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char* name :
       {"manifest.json", "templates.jsonl", "entities.jsonl", "triples.jsonl",
        "tokenizer_vocab.txt"}) {
    const auto path = dir / name;
    if (std::filesystem::exists(path)) {
      const std::string content = read_file(path);
      h = fnv1a64(content.data(), content.size(), h);
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

/// Immutable record of one run: config snapshot, dataset identity, timing,
/// and gap counts. Written once, next to the report.
struct RunManifest {
  json config_snapshot;
  std::string dataset_hash;
  std::string backend_id;
  std::string started_at;
  std::string finished_at;
  std::size_t gaps = 0;
};

inline json to_json(const RunManifest& m) {
  return json{{"config", m.config_snapshot},
              {"dataset_manifest_hash", m.dataset_hash},
              {"backend_id", m.backend_id},
              {"started_at", m.started_at},
              {"finished_at", m.finished_at},
              {"gaps", m.gaps}};
}

inline RunManifest manifest_from_json(const json& doc) {
  RunManifest m;
  m.config_snapshot = doc.at("config");
  m.dataset_hash = doc.at("dataset_manifest_hash").get<std::string>();
  m.backend_id = doc.at("backend_id").get<std::string>();
  m.started_at = doc.value("started_at", "");
  m.finished_at = doc.value("finished_at", "");
  m.gaps = doc.value("gaps", std::size_t{0});
  return m;
}

}  // namespace lmprobe
