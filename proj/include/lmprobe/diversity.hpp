#pragma once

#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lmprobe/dataset.hpp"
#include "lmprobe/errors.hpp"

namespace lmprobe {

// ============================================================================
// Embedding provider
// ============================================================================

/// Source of sentence embeddings for the semantic diversity component.
/// Implementations: FileEmbeddings (precomputed vectors keyed by template id)
/// and test stubs.
class EmbeddingProvider {
public:
  virtual ~EmbeddingProvider() = default;
  virtual std::vector<double> embed(const RelationalTemplate& t) const = 0;
};

/// Embeddings precomputed offline, loaded from a JSONL file of
/// {"template_id": ..., "vector": [...]} records.
class FileEmbeddings : public EmbeddingProvider {
public:
  static FileEmbeddings load(const std::filesystem::path& path) {
    FileEmbeddings out;
    read_jsonl(path, [&](int line, const json& rec) {
      out.vectors_[require_field(rec, "template_id", path, line)
                       .get<std::string>()] =
          require_field(rec, "vector", path, line).get<std::vector<double>>();
    });
    return out;
  }

  std::vector<double> embed(const RelationalTemplate& t) const override {
    auto it = vectors_.find(t.template_id);
    if (it == vectors_.end()) {
      throw Error("no embedding for template \"" + t.template_id + "\"");
    }
    return it->second;
  }

private:
  std::map<std::string, std::vector<double>> vectors_;
};

// ============================================================================
// Diversity metrics
// ============================================================================

struct DiversityReport {
  std::optional<double> lexical;   // mean pairwise Jaccard distance
  std::optional<double> semantic;  // mean pairwise embedding L2 distance
  std::optional<double> quantity;  // mean prompts per pair
  std::size_t relations_compared = 0;
  std::string semantic_note;  // populated when the embedder failed
};

/// Word set of a template pattern: placeholders removed, lowercased,
/// punctuation stripped.
inline std::set<std::string> template_word_set(const std::string& pattern) {
  std::string text = pattern;
  for (const char* ph : {"[X]", "[Y]"}) {
    for (auto pos = text.find(ph); pos != std::string::npos;
         pos = text.find(ph)) {
      text.erase(pos, 3);
    }
  }
  std::set<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      words.insert(current);
      current.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isalnum(c) != 0 || c >= 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return words;
}

/// Jaccard distance between word sets; zero iff the sets are equal
/// (including both empty).
inline double jaccard_distance(const std::set<std::string>& a,
                               const std::set<std::string>& b) {
  if (a.empty() && b.empty()) {
    return 0.0;
  }
  std::size_t inter = 0;
  for (const auto& w : a) {
    inter += b.count(w);
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

inline double l2_distance(const std::vector<double>& a,
                          const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw Error("embedding dimensions differ");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

/// Template diversity: lexical and semantic components are mean pairwise
/// distances within each relation, macro-averaged over relations with at
/// least two templates; quantity is mean prompts per pair when a dataset is
/// supplied. Embedder failures downgrade to a partial result with the
/// semantic component omitted.
inline DiversityReport template_diversity(
    const std::vector<RelationalTemplate>& templates,
    const EmbeddingProvider* embedder = nullptr,
    const Dataset* dataset = nullptr) {
  if (templates.size() < 2) {
    throw Error("template diversity requires at least 2 templates");
  }

  std::map<std::string, std::vector<const RelationalTemplate*>> by_relation;
  for (const auto& t : templates) {
    by_relation[t.relation_id].push_back(&t);
  }

  DiversityReport report;
  double lexical_sum = 0.0;
  double semantic_sum = 0.0;
  std::size_t semantic_relations = 0;
  bool semantic_failed = false;

  for (const auto& [relation, group] : by_relation) {
    if (group.size() < 2) {
      continue;
    }
    ++report.relations_compared;

    std::vector<std::set<std::string>> words;
    words.reserve(group.size());
    for (const auto* t : group) {
      words.push_back(template_word_set(t->pattern));
    }
    double lex = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < group.size(); ++i) {
      for (std::size_t j = i + 1; j < group.size(); ++j) {
        lex += jaccard_distance(words[i], words[j]);
        ++pairs;
      }
    }
    lexical_sum += lex / static_cast<double>(pairs);

    if (embedder && !semantic_failed) {
      try {
        std::vector<std::vector<double>> vecs;
        vecs.reserve(group.size());
        for (const auto* t : group) {
          vecs.push_back(embedder->embed(*t));
        }
        double sem = 0.0;
        for (std::size_t i = 0; i < group.size(); ++i) {
          for (std::size_t j = i + 1; j < group.size(); ++j) {
            sem += l2_distance(vecs[i], vecs[j]);
          }
        }
        semantic_sum += sem / static_cast<double>(pairs);
        ++semantic_relations;
      } catch (const std::exception& e) {
        semantic_failed = true;
        report.semantic_note = e.what();
      }
    }
  }

  if (report.relations_compared == 0) {
    throw Error("no relation has 2 or more templates to compare");
  }
  report.lexical =
      lexical_sum / static_cast<double>(report.relations_compared);
  if (embedder && !semantic_failed && semantic_relations > 0) {
    report.semantic = semantic_sum / static_cast<double>(semantic_relations);
  }
  if (dataset) {
    const auto st = dataset_stats(*dataset);
    if (st.pairs > 0) {
      report.quantity =
          static_cast<double>(st.prompts) / static_cast<double>(st.pairs);
    }
  }
  return report;
}

}  // namespace lmprobe
