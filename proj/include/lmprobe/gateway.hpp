#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "lmprobe/errors.hpp"
#include "lmprobe/jsonl.hpp"
#include "lmprobe/rng.hpp"

namespace lmprobe {

// ============================================================================
// Wire types
// ============================================================================

/// Top-k slice of a mask-token distribution, probabilities non-increasing.
struct FillMaskResponse {
  struct Entry {
    std::string token;
    double probability = 0.0;
    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> entries;
  int truncated_at = 0;

  const Entry& top() const { return entries.front(); }
};

enum class DecodeMode { kGreedy, kMultinomial };

inline std::string to_string(DecodeMode m) {
  return m == DecodeMode::kGreedy ? "greedy" : "multinomial";
}

struct GenerateRequest {
  std::string prompt;
  DecodeMode mode = DecodeMode::kGreedy;
  int num_samples = 1;  // must be 1 in greedy mode
  int max_new_tokens = 16;
  std::uint64_t seed = 0;
  std::vector<std::string> stop;
};

struct GenerateResponse {
  std::vector<std::string> texts;   // stop-trimmed
  std::vector<int> token_counts;    // aligned with texts
};

struct BackendDescriptor {
  std::string backend_id;
  std::string endpoint;  // "http://host:port" or "mock:<fixture path>"
  std::set<std::string> capabilities;  // {"fill-mask", "generate", "token-rank"}
};

namespace detail {

inline json fillmask_request_json(const std::string& text, int top_k) {
  return json{{"text", text}, {"top_k", top_k}};
}

inline json generate_request_json(const GenerateRequest& req) {
  return json{{"prompt", req.prompt},       {"mode", to_string(req.mode)},
              {"n", req.num_samples},       {"max_new_tokens", req.max_new_tokens},
              {"seed", req.seed},           {"stop", req.stop}};
}

inline std::size_t count_mask_slots(const std::string& text) {
  std::size_t n = 0;
  for (std::size_t pos = text.find("[MASK]"); pos != std::string::npos;
       pos = text.find("[MASK]", pos + 6)) {
    ++n;
  }
  return n;
}

inline int whitespace_token_count(const std::string& text) {
  int n = 0;
  bool in_token = false;
  for (char c : text) {
    const bool ws = c == ' ' || c == '\t' || c == '\n' || c == '\r';
    if (!ws && !in_token) {
      ++n;
    }
    in_token = !ws;
  }
  return n;
}

/// Cuts at the earliest stop-string occurrence, then at the new-token budget
/// (whitespace tokens).
inline std::string trim_generation(std::string text,
                                   const std::vector<std::string>& stop,
                                   int max_new_tokens) {
  std::size_t cut = text.size();
  for (const auto& s : stop) {
    if (s.empty()) {
      continue;
    }
    const auto pos = text.find(s);
    if (pos != std::string::npos && pos < cut) {
      cut = pos;
    }
  }
  text.resize(cut);
  if (max_new_tokens > 0 &&
      whitespace_token_count(text) > max_new_tokens) {
    int seen = 0;
    bool in_token = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
      const char c = text[i];
      const bool ws = c == ' ' || c == '\t' || c == '\n' || c == '\r';
      if (!ws && !in_token) {
        ++seen;
        if (seen > max_new_tokens) {
          text.resize(i);
          break;
        }
      }
      in_token = !ws;
    }
    while (!text.empty() &&
           (text.back() == ' ' || text.back() == '\t' ||
            text.back() == '\n' || text.back() == '\r')) {
      text.pop_back();
    }
  }
  return text;
}

}  // namespace detail

// ============================================================================
// Backend interface
// ============================================================================

/// Raw JSON in/out; the Gateway owns validation, canonical ordering, caching
/// and retries, so mock and HTTP backends share one downstream path.
class Backend {
public:
  virtual ~Backend() = default;
  virtual json fill_mask_raw(const std::string& text, int top_k) = 0;
  virtual json generate_raw(const GenerateRequest& req) = 0;
};

// ============================================================================
// Mock backend (fixture-file driven)
// ============================================================================

/// Table-driven stand-in for a model server. A fixture file declares
/// matching rules mapping prompt texts to mask distributions or answer
/// distributions:
///
/// {
///   "fixture_id": "demo",
///   "temperature": 1.0,
///   "fillmask": [
///     {"text": "Tokyo is the capital of [MASK].",
///      "entries": [["japan", 0.6], ["china", 0.3], ["asia", 0.1]]}
///   ],
///   "generate": [
///     {"ends_with": "Q: [MASK] is the capital of Japan.\nA:",
///      "answers": [["Tokyo", 0.8], ["Kyoto", 0.2]]}
///   ]
/// }
///
/// A rule carries exactly one matcher: "text" (exact), "contains",
/// "ends_with", or "default": true. Rules are tried in order; the first
/// match wins. Greedy decoding returns the argmax answer (ties broken by
/// token order); multinomial sampling draws from the declared distribution,
/// deterministically for a given request seed.
class MockBackend : public Backend {
public:
  static MockBackend load(const std::filesystem::path& fixture_path) {
    json doc;
    try {
      doc = json::parse(read_file(fixture_path));
    } catch (const json::parse_error& e) {
      throw FixtureError(fixture_path.string() + ": " + e.what());
    }
    return MockBackend(doc);
  }

  explicit MockBackend(const json& doc) {
    temperature_ = doc.value("temperature", 1.0);
    if (doc.contains("fillmask")) {
      for (const auto& rule : doc["fillmask"]) {
        fillmask_rules_.push_back(parse_rule(rule, "entries"));
      }
    }
    if (doc.contains("generate")) {
      for (const auto& rule : doc["generate"]) {
        generate_rules_.push_back(parse_rule(rule, "answers"));
      }
    }
  }

  json fill_mask_raw(const std::string& text, int /*top_k*/) override {
    const Rule* rule = match(fillmask_rules_, text);
    if (!rule) {
      throw FixtureError("no fillmask fixture rule matches: \"" + text + "\"");
    }
    json entries = json::array();
    for (const auto& [token, prob] : rule->distribution) {
      entries.push_back({{"token", token}, {"prob", prob}});
    }
    return json{{"entries", entries}};
  }

  json generate_raw(const GenerateRequest& req) override {
    const Rule* rule = match(generate_rules_, req.prompt);
    if (!rule) {
      throw FixtureError("no generate fixture rule matches: \"" + req.prompt +
                         "\"");
    }
    std::vector<std::string> texts;
    if (req.mode == DecodeMode::kGreedy) {
      texts.push_back(argmax_answer(*rule));
    } else {
      const auto weights = tempered_weights(*rule);
      Rng rng(req.seed);
      for (int i = 0; i < req.num_samples; ++i) {
        texts.push_back(sample_answer(*rule, weights, rng));
      }
    }
    json out{{"texts", texts}};
    if (!rule->token_counts.empty()) {
      json counts = json::array();
      for (const auto& text : texts) {
        counts.push_back(rule->declared_count(text));
      }
      out["token_counts"] = counts;
    }
    return out;
  }

private:
  struct Rule {
    enum class Matcher { kExact, kContains, kEndsWith, kDefault };
    Matcher matcher = Matcher::kDefault;
    std::string pattern;
    std::vector<std::pair<std::string, double>> distribution;
    std::map<std::string, int> token_counts;  // optional, keyed by answer

    bool matches(const std::string& text) const {
      switch (matcher) {
        case Matcher::kExact: return text == pattern;
        case Matcher::kContains: return text.find(pattern) != std::string::npos;
        case Matcher::kEndsWith:
          return text.size() >= pattern.size() &&
                 text.compare(text.size() - pattern.size(), pattern.size(),
                              pattern) == 0;
        default: return true;
      }
    }

    int declared_count(const std::string& answer) const {
      auto it = token_counts.find(answer);
      return it != token_counts.end()
                 ? it->second
                 : detail::whitespace_token_count(answer);
    }
  };

  static Rule parse_rule(const json& rec, const char* dist_key) {
    Rule rule;
    int matchers = 0;
    if (rec.contains("text")) {
      rule.matcher = Rule::Matcher::kExact;
      rule.pattern = rec["text"].get<std::string>();
      ++matchers;
    }
    if (rec.contains("contains")) {
      rule.matcher = Rule::Matcher::kContains;
      rule.pattern = rec["contains"].get<std::string>();
      ++matchers;
    }
    if (rec.contains("ends_with")) {
      rule.matcher = Rule::Matcher::kEndsWith;
      rule.pattern = rec["ends_with"].get<std::string>();
      ++matchers;
    }
    if (rec.contains("default")) {
      rule.matcher = Rule::Matcher::kDefault;
      ++matchers;
    }
    if (matchers != 1) {
      throw FixtureError(
          "fixture rule needs exactly one of text/contains/ends_with/default");
    }
    if (!rec.contains(dist_key)) {
      throw FixtureError(std::string("fixture rule missing \"") + dist_key +
                         "\"");
    }
    for (const auto& pair : rec[dist_key]) {
      rule.distribution.emplace_back(pair.at(0).get<std::string>(),
                                     pair.at(1).get<double>());
    }
    if (rule.distribution.empty()) {
      throw FixtureError("fixture rule has an empty distribution");
    }
    if (rec.contains("token_counts")) {
      std::size_t i = 0;
      for (const auto& c : rec["token_counts"]) {
        rule.token_counts[rule.distribution.at(i++).first] = c.get<int>();
      }
    }
    return rule;
  }

  static const Rule* match(const std::vector<Rule>& rules,
                           const std::string& text) {
    for (const auto& r : rules) {
      if (r.matches(text)) {
        return &r;
      }
    }
    return nullptr;
  }

  static std::string argmax_answer(const Rule& rule) {
    const auto* best = &rule.distribution.front();
    for (const auto& cand : rule.distribution) {
      if (cand.second > best->second ||
          (cand.second == best->second && cand.first < best->first)) {
        best = &cand;
      }
    }
    return best->first;
  }

  std::vector<double> tempered_weights(const Rule& rule) const {
    std::vector<double> w;
    w.reserve(rule.distribution.size());
    double sum = 0.0;
    for (const auto& [token, prob] : rule.distribution) {
      const double v =
          temperature_ == 1.0 ? prob : std::pow(prob, 1.0 / temperature_);
      w.push_back(v);
      sum += v;
    }
    for (auto& v : w) {
      v /= sum;
    }
    return w;
  }

  static std::string sample_answer(const Rule& rule,
                                   const std::vector<double>& weights,
                                   Rng& rng) {
    const double u = rng.uniform01();
    double cum = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      cum += weights[i];
      if (u < cum) {
        return rule.distribution[i].first;
      }
    }
    return rule.distribution.back().first;
  }

  double temperature_ = 1.0;
  std::vector<Rule> fillmask_rules_;
  std::vector<Rule> generate_rules_;
};

// ============================================================================
// HTTP backend
// ============================================================================

/// Client for the two-endpoint protocol:
///   POST /v1/fillmask  {"text", "top_k"}            -> {"entries":[{"token","prob"}]}
///   POST /v1/generate  {"prompt","mode","n",
///                       "max_new_tokens","seed","stop"} -> {"texts", "token_counts"}
class HttpBackend : public Backend {
public:
  explicit HttpBackend(std::string endpoint, std::string auth_token = "")
      : endpoint_(std::move(endpoint)), auth_token_(std::move(auth_token)) {}

  json fill_mask_raw(const std::string& text, int top_k) override {
    return post("/v1/fillmask", detail::fillmask_request_json(text, top_k));
  }

  json generate_raw(const GenerateRequest& req) override {
    return post("/v1/generate", detail::generate_request_json(req));
  }

private:
  json post(const std::string& path, const json& body) {
    httplib::Client client(endpoint_);
    client.set_connection_timeout(10);
    client.set_read_timeout(120);
    httplib::Headers headers;
    if (!auth_token_.empty()) {
      headers.emplace("Authorization", "Bearer " + auth_token_);
    }
    auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res) {
      throw TransportError("no response from " + endpoint_ + path + " (" +
                           httplib::to_string(res.error()) + ")");
    }
    if (res->status == 413 || res->status == 422) {
      throw PromptRejectedError("backend rejected the prompt (" +
                                std::to_string(res->status) + "): " +
                                res->body);
    }
    if (res->status != 200) {
      throw TransportError("HTTP " + std::to_string(res->status) + " from " +
                           endpoint_ + path);
    }
    try {
      return json::parse(res->body);
    } catch (const json::parse_error& e) {
      throw MalformedResponseError("unparsable response body: " +
                                   std::string(e.what()));
    }
  }

  std::string endpoint_;
  std::string auth_token_;
};

// ============================================================================
// Response cache
// ============================================================================

/// Append-only record/replay store: one JSONL record per (key, request,
/// response). Concurrent readers share the in-memory index; appends are
/// serialized.
class ResponseCache {
public:
  explicit ResponseCache(std::filesystem::path path) : path_(std::move(path)) {
    if (std::filesystem::exists(path_)) {
      read_jsonl(path_, [&](int, const json& rec) {
        entries_[rec.at("key").get<std::string>()] = rec.at("response");
      });
    }
    out_.open(path_, std::ios::app);
    if (!out_) {
      throw Error("cannot open cache for append: " + path_.string());
    }
  }

  std::optional<json> lookup(const std::string& key) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = entries_.find(key);
    if (it == entries_.end()) {
      return std::nullopt;
    }
    return it->second;
  }

  void record(const std::string& key, const std::string& backend_id,
              const json& request, const json& response) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (entries_.count(key)) {
      return;
    }
    entries_[key] = response;
    out_ << json{{"key", key},
                 {"backend_id", backend_id},
                 {"request", request},
                 {"response", response}}
                .dump()
         << '\n';
    out_.flush();
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return entries_.size();
  }

private:
  std::filesystem::path path_;
  std::map<std::string, json> entries_;
  std::ofstream out_;
  mutable std::mutex mutex_;
};

// ============================================================================
// Gateway
// ============================================================================

/// Uniform model access: capability checks, request canonicalization,
/// record/replay caching, bounded retries, and response validation. Every
/// response is keyed by a content hash of (backend_id, canonical request),
/// so cache lookups never cross backends.
class Gateway {
public:
  Gateway(BackendDescriptor descriptor, std::shared_ptr<Backend> backend,
          std::shared_ptr<ResponseCache> cache = nullptr)
      : descriptor_(std::move(descriptor)),
        backend_(std::move(backend)),
        cache_(std::move(cache)) {}

  /// Builds the backend implied by the descriptor's endpoint.
  static Gateway open(const BackendDescriptor& descriptor,
                      std::shared_ptr<ResponseCache> cache = nullptr,
                      const std::string& auth_token = "") {
    std::shared_ptr<Backend> backend;
    if (descriptor.endpoint.rfind("mock:", 0) == 0) {
      backend = std::make_shared<MockBackend>(
          MockBackend::load(descriptor.endpoint.substr(5)));
    } else {
      backend =
          std::make_shared<HttpBackend>(descriptor.endpoint, auth_token);
    }
    return Gateway(descriptor, std::move(backend), std::move(cache));
  }

  const BackendDescriptor& descriptor() const { return descriptor_; }

  /// Observer invoked with every canonical request (after cache lookup
  /// decisions, before or instead of transport). Used by tests to assert on
  /// the exact texts sent.
  std::function<void(const json&)> on_request;

  int max_attempts = 3;
  int backoff_ms = 250;

  FillMaskResponse fill_mask(const std::string& text, int top_k) {
    require_capability("fill-mask");
    if (detail::count_mask_slots(text) != 1) {
      throw Error("fill_mask input must contain exactly one [MASK]: \"" +
                  text + "\"");
    }
    if (top_k < 1) {
      throw Error("top_k must be positive");
    }
    json request = detail::fillmask_request_json(text, top_k);
    request["op"] = "fillmask";
    const json raw = dispatch(request, [&](Backend& b) {
      return b.fill_mask_raw(text, top_k);
    });
    return validate_fillmask(raw, top_k);
  }

  GenerateResponse generate(const GenerateRequest& req) {
    require_capability("generate");
    if (req.mode == DecodeMode::kGreedy && req.num_samples != 1) {
      throw Error("greedy decoding requires num_samples = 1");
    }
    if (req.num_samples < 1 || req.max_new_tokens < 1) {
      throw Error("num_samples and max_new_tokens must be positive");
    }
    json request = detail::generate_request_json(req);
    request["op"] = "generate";
    const json raw =
        dispatch(request, [&](Backend& b) { return b.generate_raw(req); });
    return validate_generate(raw, req);
  }

  /// 1-based rank of a token in the mask distribution, ties broken by
  /// lexicographic token order. Tokens beyond the truncation depth raise
  /// RankUnavailableError.
  int token_rank(const std::string& text, const std::string& token,
                 int depth = 100) {
    if (!descriptor_.capabilities.count("token-rank") &&
        !descriptor_.capabilities.count("fill-mask")) {
      throw CapabilityError("backend \"" + descriptor_.backend_id +
                            "\" supports neither token-rank nor fill-mask");
    }
    const auto resp = fill_mask_for_rank(text, depth);
    for (std::size_t i = 0; i < resp.entries.size(); ++i) {
      if (resp.entries[i].token == token) {
        return static_cast<int>(i) + 1;
      }
    }
    throw RankUnavailableError(token, depth);
  }

private:
  // token_rank may be used when only fill-mask capability is declared.
  FillMaskResponse fill_mask_for_rank(const std::string& text, int depth) {
    if (detail::count_mask_slots(text) != 1) {
      throw Error("token_rank input must contain exactly one [MASK]");
    }
    json request = detail::fillmask_request_json(text, depth);
    request["op"] = "fillmask";
    const json raw = dispatch(request, [&](Backend& b) {
      return b.fill_mask_raw(text, depth);
    });
    return validate_fillmask(raw, depth);
  }

  void require_capability(const std::string& cap) const {
    if (!descriptor_.capabilities.count(cap)) {
      throw CapabilityError("backend \"" + descriptor_.backend_id +
                            "\" does not support " + cap);
    }
  }

  std::string cache_key(const json& request) const {
    const std::string canonical = descriptor_.backend_id + "\n" + request.dump();
    std::ostringstream hex;
    hex << std::hex << fnv1a64(canonical);
    return hex.str();
  }

  json dispatch(const json& request,
                const std::function<json(Backend&)>& call) {
    const std::string key = cache_key(request);
    if (cache_) {
      if (auto hit = cache_->lookup(key)) {
        return *hit;
      }
    }
    {
      std::lock_guard<std::mutex> lock(*observer_mutex_);
      if (on_request) {
        on_request(request);
      }
    }
    json raw;
    for (int attempt = 1;; ++attempt) {
      try {
        raw = call(*backend_);
        break;
      } catch (const TransportError&) {
        if (attempt >= max_attempts) {
          throw;
        }
        std::this_thread::sleep_for(
            std::chrono::milliseconds(backoff_ms * (1 << (attempt - 1))));
      }
    }
    if (cache_) {
      cache_->record(key, descriptor_.backend_id, request, raw);
    }
    return raw;
  }

  static FillMaskResponse validate_fillmask(const json& raw, int top_k) {
    if (!raw.is_object() || !raw.contains("entries") ||
        !raw["entries"].is_array()) {
      throw MalformedResponseError("fillmask response missing entries array");
    }
    std::vector<FillMaskResponse::Entry> entries;
    double sum = 0.0;
    std::set<std::string> seen;
    for (const auto& e : raw["entries"]) {
      FillMaskResponse::Entry entry;
      try {
        entry.token = e.at("token").get<std::string>();
        entry.probability = e.at("prob").get<double>();
      } catch (const json::exception& ex) {
        throw MalformedResponseError(std::string("bad fillmask entry: ") +
                                     ex.what());
      }
      if (!(entry.probability >= 0.0) || entry.probability > 1.0) {
        throw MalformedResponseError("probability out of [0,1]: " +
                                     std::to_string(entry.probability));
      }
      if (!seen.insert(entry.token).second) {
        throw MalformedResponseError("duplicate token in distribution: \"" +
                                     entry.token + "\"");
      }
      sum += entry.probability;
      entries.push_back(std::move(entry));
    }
    if (entries.empty()) {
      throw MalformedResponseError("empty fillmask distribution");
    }
    if (sum > 1.0 + 1e-6) {
      throw MalformedResponseError("probabilities sum to " +
                                   std::to_string(sum) + " > 1");
    }
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) {
                if (a.probability != b.probability) {
                  return a.probability > b.probability;
                }
                return a.token < b.token;
              });
    if (entries.size() > static_cast<std::size_t>(top_k)) {
      entries.resize(static_cast<std::size_t>(top_k));
    }
    FillMaskResponse out;
    out.entries = std::move(entries);
    out.truncated_at = top_k;
    return out;
  }

  static GenerateResponse validate_generate(const json& raw,
                                            const GenerateRequest& req) {
    if (!raw.is_object() || !raw.contains("texts") ||
        !raw["texts"].is_array()) {
      throw MalformedResponseError("generate response missing texts array");
    }
    GenerateResponse out;
    for (const auto& t : raw["texts"]) {
      out.texts.push_back(detail::trim_generation(
          t.get<std::string>(), req.stop, req.max_new_tokens));
    }
    if (out.texts.size() != static_cast<std::size_t>(req.num_samples)) {
      throw MalformedResponseError(
          "expected " + std::to_string(req.num_samples) + " texts, got " +
          std::to_string(out.texts.size()));
    }
    if (raw.contains("token_counts") && raw["token_counts"].is_array() &&
        raw["token_counts"].size() == out.texts.size()) {
      for (const auto& c : raw["token_counts"]) {
        out.token_counts.push_back(c.get<int>());
      }
    } else {
      for (const auto& t : out.texts) {
        out.token_counts.push_back(detail::whitespace_token_count(t));
      }
    }
    return out;
  }

  BackendDescriptor descriptor_;
  std::shared_ptr<Backend> backend_;
  std::shared_ptr<ResponseCache> cache_;
  // Heap-held so the Gateway stays movable.
  std::unique_ptr<std::mutex> observer_mutex_ =
      std::make_unique<std::mutex>();
};

}  // namespace lmprobe
