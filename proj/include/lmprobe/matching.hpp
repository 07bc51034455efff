#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmprobe/errors.hpp"
#include "lmprobe/jsonl.hpp"

namespace lmprobe {

// ============================================================================
// Lemmatizer
// ============================================================================

/// Rule-table lemmatizer for the noun-heavy answer vocabulary. The table is
/// plain data (see data/lemma_rules.json) so matching behavior stays
/// auditable and reproducible; a full morphological lemmatizer can be dropped
/// in by loading a richer table.
class Lemmatizer {
public:
  struct SuffixRule {
    std::string suffix;
    std::string replacement;
    std::size_t min_length = 0;
    bool operator==(const SuffixRule&) const = default;
  };

  std::map<std::string, std::string> irregular;
  std::set<std::string> keep;                    // never altered
  std::vector<std::string> protected_suffixes;   // block the generic rules
  std::vector<SuffixRule> suffix_rules;          // tried in order, first wins

  bool operator==(const Lemmatizer&) const = default;

  std::string lemma(const std::string& token) const {
    if (auto it = irregular.find(token); it != irregular.end()) {
      return it->second;
    }
    if (keep.count(token)) {
      return token;
    }
    for (const auto& suf : protected_suffixes) {
      if (ends_with(token, suf)) {
        return token;
      }
    }
    for (const auto& rule : suffix_rules) {
      if (token.size() >= rule.min_length && ends_with(token, rule.suffix)) {
        return token.substr(0, token.size() - rule.suffix.size()) +
               rule.replacement;
      }
    }
    return token;
  }

  /// Default table used when no override is loaded.
  static const Lemmatizer& builtin() {
    static const Lemmatizer table = make_builtin();
    return table;
  }

  static Lemmatizer load(const std::filesystem::path& path) {
    json doc;
    try {
      doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
      throw Error(path.string() + ": " + e.what());
    }
    Lemmatizer t;
    for (auto& [k, v] : doc.at("irregular").items()) {
      t.irregular[k] = v.get<std::string>();
    }
    for (auto& v : doc.at("keep")) {
      t.keep.insert(v.get<std::string>());
    }
    for (auto& v : doc.at("protected_suffixes")) {
      t.protected_suffixes.push_back(v.get<std::string>());
    }
    for (auto& v : doc.at("suffix_rules")) {
      t.suffix_rules.push_back({v.at(0).get<std::string>(),
                                v.at(1).get<std::string>(),
                                v.at(2).get<std::size_t>()});
    }
    return t;
  }

private:
  static bool ends_with(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() &&
           s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  }

  static Lemmatizer make_builtin() {
    Lemmatizer t;
    t.irregular = {
        {"men", "man"},           {"women", "woman"},
        {"children", "child"},    {"people", "person"},
        {"feet", "foot"},         {"teeth", "tooth"},
        {"geese", "goose"},       {"mice", "mouse"},
        {"oxen", "ox"},           {"wolves", "wolf"},
        {"knives", "knife"},      {"wives", "wife"},
        {"lives", "life"},        {"leaves", "leaf"},
        {"halves", "half"},       {"shelves", "shelf"},
        {"thieves", "thief"},     {"calves", "calf"},
        {"loaves", "loaf"},       {"scarves", "scarf"},
        {"shoes", "shoe"},        {"canoes", "canoe"},
        {"oboes", "oboe"},        {"buses", "bus"},
        {"gases", "gas"},         {"lenses", "lens"},
        {"viruses", "virus"},     {"campuses", "campus"},
        {"statuses", "status"},   {"censuses", "census"},
        {"bonuses", "bonus"},     {"geniuses", "genius"},
        {"aliases", "alias"},     {"biases", "bias"},
        {"atlases", "atlas"},     {"canvases", "canvas"},
        {"walruses", "walrus"},   {"circuses", "circus"},
    };
    t.keep = {
        "paris",     "texas",        "wales",       "athens",
        "naples",    "mars",         "venus",       "series",
        "species",   "news",         "physics",     "mathematics",
        "politics",  "economics",    "athletics",   "chess",
        "swiss",     "tennis",       "christmas",   "honduras",
        "bahamas",   "philippines",  "netherlands", "kansas",
        "arkansas",  "massachusetts", "cyprus",     "belarus",
        "vilnius",   "brussels",     "vegas",       "dallas",
        "memphis",   "minneapolis",  "indianapolis", "annapolis",
        "tunis",     "damascus",     "lagos",       "carlos",
        "crisis",    "basis",        "analysis",    "thesis",
        "axis",      "iris",         "pelvis",      "davis",
        "lewis",     "curtis",       "francis",     "lucas",
        "nicholas",  "thomas",       "douglas",     "jonas",
        "judas",     "midas",        "hans",        "klaus",
        "jesus",     "moses",        "socrates",    "aries",
    };
    t.protected_suffixes = {"ss", "us", "is"};
    t.suffix_rules = {
        {"ies", "y", 6},    // cities -> city (short -ies words fall to -s)
        {"sses", "ss", 6},  // classes -> class
        {"ches", "ch", 6},  // churches -> church
        {"shes", "sh", 6},  // dishes -> dish
        {"xes", "x", 5},    // boxes -> box
        {"oes", "o", 5},    // heroes -> hero
        {"s", "", 4},       // guitars -> guitar
    };
    return t;
  }
};

// ============================================================================
// Normalization
// ============================================================================

/// Lowercased, punctuation-free, lemmatized token sequence for a string.
struct NormalizedAnswer {
  std::vector<std::string> tokens;
  std::string source;
};

namespace detail {

inline bool is_token_char(unsigned char c) {
  return std::isalnum(c) != 0 || c >= 0x80;  // non-ASCII bytes kept verbatim
}

}  // namespace detail

/// Lowercases, splits on whitespace/punctuation, and lemmatizes each token.
/// Empty input yields an empty token list.
inline NormalizedAnswer normalize(const std::string& text,
                                  const Lemmatizer& lemmatizer =
                                      Lemmatizer::builtin()) {
  NormalizedAnswer out;
  out.source = text;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      out.tokens.push_back(lemmatizer.lemma(current));
      current.clear();
    }
  };
  for (unsigned char c : text) {
    if (detail::is_token_char(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

// ============================================================================
// Matching judgments
// ============================================================================

/// How "included in the other" is interpreted for normalized token lists.
enum class MatchInclusion {
  kContiguous,  // answer tokens appear as a contiguous run (default)
  kSubset,      // answer tokens appear as a multiset subset
};

namespace detail {

inline bool contiguous_subsequence(const std::vector<std::string>& needle,
                                   const std::vector<std::string>& haystack) {
  if (needle.empty() || needle.size() > haystack.size()) {
    return false;
  }
  for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
    if (std::equal(needle.begin(), needle.end(), haystack.begin() + i)) {
      return true;
    }
  }
  return false;
}

inline bool multiset_subset(const std::vector<std::string>& needle,
                            const std::vector<std::string>& haystack) {
  if (needle.empty()) {
    return false;
  }
  std::map<std::string, int> counts;
  for (const auto& t : haystack) {
    ++counts[t];
  }
  for (const auto& t : needle) {
    if (--counts[t] < 0) {
      return false;
    }
  }
  return true;
}

}  // namespace detail

/// One-directional judgment: the correct answer is included in the generated
/// string. Empty answers never match.
inline bool match_answer(const std::string& answer,
                         const std::string& generated,
                         MatchInclusion inclusion = MatchInclusion::kContiguous,
                         const Lemmatizer& lemmatizer =
                             Lemmatizer::builtin()) {
  const auto a = normalize(answer, lemmatizer);
  const auto g = normalize(generated, lemmatizer);
  return inclusion == MatchInclusion::kContiguous
             ? detail::contiguous_subsequence(a.tokens, g.tokens)
             : detail::multiset_subset(a.tokens, g.tokens);
}

/// Bi-directional judgment used for consistency and confidence matching.
inline bool match_mutual(const std::string& a, const std::string& b,
                         MatchInclusion inclusion = MatchInclusion::kContiguous,
                         const Lemmatizer& lemmatizer =
                             Lemmatizer::builtin()) {
  return match_answer(a, b, inclusion, lemmatizer) ||
         match_answer(b, a, inclusion, lemmatizer);
}

/// True when the generation is a single word once surrounding whitespace and
/// one trailing sentence-final punctuation mark are trimmed.
inline bool is_one_word(const std::string& text,
                        const Lemmatizer& lemmatizer = Lemmatizer::builtin()) {
  std::size_t begin = text.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) {
    return false;
  }
  std::size_t end = text.find_last_not_of(" \t\r\n") + 1;
  std::string trimmed = text.substr(begin, end - begin);
  if (!trimmed.empty() &&
      (trimmed.back() == '.' || trimmed.back() == '?' ||
       trimmed.back() == '!')) {
    trimmed.pop_back();
  }
  return normalize(trimmed, lemmatizer).tokens.size() == 1;
}

}  // namespace lmprobe
