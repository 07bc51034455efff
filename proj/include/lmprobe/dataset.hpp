#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmprobe/errors.hpp"
#include "lmprobe/jsonl.hpp"

namespace lmprobe {

// ============================================================================
// Domain types
// ============================================================================

enum class TemplateStyle { kStatement, kQuestionAnswer };
enum class TemplateOrigin { kOriginal, kManual, kAutoParaphrase };

inline std::string to_string(TemplateStyle s) {
  return s == TemplateStyle::kStatement ? "statement" : "question-answer";
}

inline std::string to_string(TemplateOrigin o) {
  switch (o) {
    case TemplateOrigin::kOriginal: return "original";
    case TemplateOrigin::kManual: return "manual";
    default: return "auto-paraphrase";
  }
}

/// One pattern expressing a relation, with [X] (subject) and [Y]
/// (object/mask) slots.
struct RelationalTemplate {
  std::string relation_id;
  std::string template_id;
  std::string pattern;
  TemplateStyle style = TemplateStyle::kStatement;
  TemplateOrigin origin = TemplateOrigin::kOriginal;
  std::optional<int> group_id;  // manual-seed group; auto templates inherit it

  bool operator==(const RelationalTemplate&) const = default;
};

struct Entity {
  std::string entity_id;
  std::string canonical;
  std::vector<std::string> aliases;
  // Pre-declared single-token forms, keyed by tokenizer family. When absent
  // for the configured family, single-token admission falls back to the
  // dataset's vocabulary file.
  std::map<std::string, std::vector<std::string>> single_token_forms;

  bool operator==(const Entity&) const = default;

  /// Canonical form first, aliases in declared order.
  std::vector<std::string> surfaces() const {
    std::vector<std::string> out;
    out.reserve(1 + aliases.size());
    out.push_back(canonical);
    out.insert(out.end(), aliases.begin(), aliases.end());
    return out;
  }
};

/// Fact abstracted from surface expressions: subject and relation identify
/// it, objects collect every acceptable answer entity.
struct UniqueTriple {
  std::string subject;
  std::string relation;
  std::vector<std::string> objects;

  bool operator==(const UniqueTriple&) const = default;
};

/// The probe unit: one (subject, relation) key of a unique triple.
struct SubjectRelationPair {
  std::string subject;
  std::string relation;

  auto operator<=>(const SubjectRelationPair&) const = default;

  std::string key() const { return subject + "|" + relation; }
};

/// One realized probe text. Statement style carries a single [MASK] slot;
/// question-answer style is a question with a trailing (empty) answer slot.
struct Prompt {
  std::string prompt_id;
  SubjectRelationPair pair;
  std::string template_id;
  std::string subject_surface;
  int surface_index = 0;
  TemplateStyle style = TemplateStyle::kStatement;
  std::string text;

  bool operator==(const Prompt&) const = default;
};

/// Acceptable answers for a pair: every object surface form, plus the
/// single-token subset when probing in fill-mask mode.
struct AnswerSet {
  SubjectRelationPair pair;
  std::vector<std::string> surfaces;
  std::vector<std::string> tokens;    // fill-mask mode only
  std::vector<std::string> excluded;  // multi-token surfaces left out
};

enum class ProbeMode { kFillMask, kGenerate };

inline std::string to_string(ProbeMode m) {
  return m == ProbeMode::kFillMask ? "fill-mask" : "generate";
}

struct DatasetManifest {
  std::string name;
  std::string version;
  std::string tokenizer_family;

  bool operator==(const DatasetManifest&) const = default;
};

struct DatasetStats {
  std::size_t templates = 0;
  std::size_t unique_triples = 0;
  std::size_t pairs = 0;
  std::uint64_t derived_triples = 0;
  std::uint64_t prompts = 0;
};

// ============================================================================
// Dataset
// ============================================================================

/// Immutable probe universe: templates, entities, unique triples, and the
/// tokenizer vocabulary used for single-token admission. Safe to share
/// across threads once loaded.
class Dataset {
public:
  DatasetManifest manifest;
  std::vector<RelationalTemplate> templates;  // sorted (relation, template_id)
  std::vector<Entity> entities;               // sorted by entity_id
  std::vector<UniqueTriple> triples;          // sorted (subject, relation)
  std::set<std::string> vocab;                // one token per line

  bool operator==(const Dataset& other) const {
    return manifest == other.manifest && templates == other.templates &&
           entities == other.entities && triples == other.triples &&
           vocab == other.vocab;
  }

  void build_index() {
    entity_index_.clear();
    triple_index_.clear();
    templates_by_relation_.clear();
    std::sort(templates.begin(), templates.end(),
              [](const auto& a, const auto& b) {
                return std::tie(a.relation_id, a.template_id) <
                       std::tie(b.relation_id, b.template_id);
              });
    std::sort(entities.begin(), entities.end(),
              [](const auto& a, const auto& b) {
                return a.entity_id < b.entity_id;
              });
    std::sort(triples.begin(), triples.end(),
              [](const auto& a, const auto& b) {
                return std::tie(a.subject, a.relation) <
                       std::tie(b.subject, b.relation);
              });
    for (std::size_t i = 0; i < entities.size(); ++i) {
      entity_index_[entities[i].entity_id] = i;
    }
    for (std::size_t i = 0; i < triples.size(); ++i) {
      triple_index_[{triples[i].subject, triples[i].relation}] = i;
    }
    for (std::size_t i = 0; i < templates.size(); ++i) {
      templates_by_relation_[templates[i].relation_id].push_back(i);
    }
  }

  const Entity* find_entity(const std::string& id) const {
    auto it = entity_index_.find(id);
    return it == entity_index_.end() ? nullptr : &entities[it->second];
  }

  const UniqueTriple* find_triple(const SubjectRelationPair& pair) const {
    auto it = triple_index_.find(pair);
    return it == triple_index_.end() ? nullptr : &triples[it->second];
  }

  /// Templates of a relation (already sorted by template_id), optionally
  /// restricted to one style.
  std::vector<const RelationalTemplate*> relation_templates(
      const std::string& relation,
      std::optional<TemplateStyle> style = std::nullopt) const {
    std::vector<const RelationalTemplate*> out;
    auto it = templates_by_relation_.find(relation);
    if (it == templates_by_relation_.end()) {
      return out;
    }
    for (std::size_t i : it->second) {
      if (!style || templates[i].style == *style) {
        out.push_back(&templates[i]);
      }
    }
    return out;
  }

  const RelationalTemplate* find_template(const std::string& relation,
                                          const std::string& template_id) const {
    for (const auto* t : relation_templates(relation)) {
      if (t->template_id == template_id) {
        return t;
      }
    }
    return nullptr;
  }

  std::vector<SubjectRelationPair> pairs() const {
    std::vector<SubjectRelationPair> out;
    out.reserve(triples.size());
    for (const auto& t : triples) {
      out.push_back({t.subject, t.relation});
    }
    return out;
  }

  /// Pairs of one relation, in dataset order.
  std::vector<SubjectRelationPair> relation_pairs(
      const std::string& relation) const {
    std::vector<SubjectRelationPair> out;
    for (const auto& t : triples) {
      if (t.relation == relation) {
        out.push_back({t.subject, t.relation});
      }
    }
    return out;
  }

  bool is_single_token(const std::string& surface) const {
    return vocab.count(surface) > 0;
  }

private:
  std::map<std::string, std::size_t> entity_index_;
  std::map<SubjectRelationPair, std::size_t> triple_index_;
  std::map<std::string, std::vector<std::size_t>> templates_by_relation_;
};

// ============================================================================
// Validation helpers
// ============================================================================

namespace detail {

inline std::size_t count_occurrences(const std::string& s,
                                     const std::string& needle) {
  std::size_t n = 0;
  for (std::size_t pos = s.find(needle); pos != std::string::npos;
       pos = s.find(needle, pos + needle.size())) {
    ++n;
  }
  return n;
}

inline std::string location(const std::filesystem::path& file, int line) {
  return file.filename().string() + ":" + std::to_string(line) + ": ";
}

inline void validate_template(const RelationalTemplate& t,
                              const std::filesystem::path& file, int line) {
  if (count_occurrences(t.pattern, "[X]") != 1 ||
      count_occurrences(t.pattern, "[Y]") != 1) {
    throw DatasetError(location(file, line) + "template \"" + t.template_id +
                       "\" must contain exactly one [X] and one [Y]: \"" +
                       t.pattern + "\"");
  }
  std::string stripped = t.pattern;
  for (const char* ph : {"[X]", "[Y]"}) {
    auto pos = stripped.find(ph);
    stripped.erase(pos, 3);
  }
  if (stripped.find_first_not_of(" \t.?!,") == std::string::npos) {
    throw DatasetError(location(file, line) + "template \"" + t.template_id +
                       "\" is empty after placeholder removal");
  }
  const bool grouped = t.origin != TemplateOrigin::kOriginal;
  if (grouped != t.group_id.has_value()) {
    throw DatasetError(location(file, line) + "template \"" + t.template_id +
                       "\": group_id must be present exactly for "
                       "manual/auto-paraphrase templates");
  }
  if (t.group_id && (*t.group_id < 1 || *t.group_id > 5)) {
    throw DatasetError(location(file, line) + "template \"" + t.template_id +
                       "\": group_id out of range 1..5");
  }
}

inline void validate_entity(const Entity& e, const std::filesystem::path& file,
                            int line) {
  if (e.canonical.empty()) {
    throw DatasetError(location(file, line) + "entity \"" + e.entity_id +
                       "\": canonical surface must be non-empty");
  }
  std::set<std::string> seen{e.canonical};
  for (const auto& a : e.aliases) {
    if (!seen.insert(a).second) {
      throw DatasetError(location(file, line) + "entity \"" + e.entity_id +
                         "\": duplicate surface form \"" + a + "\"");
    }
  }
}

}  // namespace detail

// ============================================================================
// Loading and writing
// ============================================================================

/// Loads a dataset directory (templates.jsonl, entities.jsonl, triples.jsonl,
/// tokenizer_vocab.txt, manifest.json), validating every record and all
/// cross-references. Diagnostics carry file and line number.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir)) {
    throw DatasetError("dataset directory not found: " + dir.string());
  }

  Dataset ds;

  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw DatasetError("missing manifest.json in " + dir.string());
  }
  {
    json m;
    try {
      m = json::parse(read_file(manifest_path));
    } catch (const json::parse_error& e) {
      throw DatasetError("manifest.json: " + std::string(e.what()));
    }
    ds.manifest.name = m.value("name", "");
    ds.manifest.version = m.value("version", "");
    ds.manifest.tokenizer_family = m.value("tokenizer_family", "");
  }

  const fs::path templates_path = dir / "templates.jsonl";
  std::set<std::pair<std::string, std::string>> template_keys;
  read_jsonl(templates_path, [&](int line, const json& rec) {
    RelationalTemplate t;
    t.relation_id =
        require_field(rec, "relation_id", templates_path, line).get<std::string>();
    t.template_id =
        require_field(rec, "template_id", templates_path, line).get<std::string>();
    t.pattern =
        require_field(rec, "pattern", templates_path, line).get<std::string>();
    const std::string style =
        require_field(rec, "style", templates_path, line).get<std::string>();
    if (style == "statement") {
      t.style = TemplateStyle::kStatement;
    } else if (style == "question-answer") {
      t.style = TemplateStyle::kQuestionAnswer;
    } else {
      throw DatasetError(detail::location(templates_path, line) +
                         "unknown style \"" + style + "\"");
    }
    const std::string origin =
        require_field(rec, "origin", templates_path, line).get<std::string>();
    if (origin == "original") {
      t.origin = TemplateOrigin::kOriginal;
    } else if (origin == "manual") {
      t.origin = TemplateOrigin::kManual;
    } else if (origin == "auto-paraphrase") {
      t.origin = TemplateOrigin::kAutoParaphrase;
    } else {
      throw DatasetError(detail::location(templates_path, line) +
                         "unknown origin \"" + origin + "\"");
    }
    if (rec.contains("group_id") && !rec["group_id"].is_null()) {
      t.group_id = rec["group_id"].get<int>();
    }
    detail::validate_template(t, templates_path, line);
    if (!template_keys.insert({t.relation_id, t.template_id}).second) {
      throw DatasetError(detail::location(templates_path, line) +
                         "duplicate template id \"" + t.template_id +
                         "\" for relation \"" + t.relation_id + "\"");
    }
    ds.templates.push_back(std::move(t));
  });

  const fs::path entities_path = dir / "entities.jsonl";
  std::set<std::string> entity_ids;
  read_jsonl(entities_path, [&](int line, const json& rec) {
    Entity e;
    e.entity_id =
        require_field(rec, "entity_id", entities_path, line).get<std::string>();
    e.canonical =
        require_field(rec, "canonical", entities_path, line).get<std::string>();
    if (rec.contains("aliases")) {
      e.aliases = rec["aliases"].get<std::vector<std::string>>();
    }
    if (rec.contains("single_token_forms")) {
      for (auto& [family, forms] : rec["single_token_forms"].items()) {
        e.single_token_forms[family] = forms.get<std::vector<std::string>>();
      }
    }
    detail::validate_entity(e, entities_path, line);
    if (!entity_ids.insert(e.entity_id).second) {
      throw DatasetError(detail::location(entities_path, line) +
                         "duplicate entity id \"" + e.entity_id + "\"");
    }
    ds.entities.push_back(std::move(e));
  });

  const fs::path triples_path = dir / "triples.jsonl";
  std::set<std::pair<std::string, std::string>> pair_keys;
  std::vector<std::pair<int, UniqueTriple>> pending_triples;
  read_jsonl(triples_path, [&](int line, const json& rec) {
    UniqueTriple t;
    t.subject =
        require_field(rec, "subject", triples_path, line).get<std::string>();
    t.relation =
        require_field(rec, "relation", triples_path, line).get<std::string>();
    t.objects = require_field(rec, "objects", triples_path, line)
                    .get<std::vector<std::string>>();
    if (t.objects.empty()) {
      throw DatasetError(detail::location(triples_path, line) +
                         "triple must have at least one object");
    }
    std::set<std::string> distinct(t.objects.begin(), t.objects.end());
    if (distinct.size() != t.objects.size()) {
      throw DatasetError(detail::location(triples_path, line) +
                         "duplicate object id in triple");
    }
    if (!pair_keys.insert({t.subject, t.relation}).second) {
      throw DatasetError(detail::location(triples_path, line) +
                         "duplicate (subject, relation) pair: (" + t.subject +
                         ", " + t.relation + ")");
    }
    pending_triples.emplace_back(line, std::move(t));
  });

  const fs::path vocab_path = dir / "tokenizer_vocab.txt";
  {
    std::ifstream in(vocab_path);
    if (!in) {
      throw DatasetError("cannot open " + vocab_path.string());
    }
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') {
        line.pop_back();
      }
      if (!line.empty()) {
        ds.vocab.insert(line);
      }
    }
  }

  // Cross-reference checks against the id sets collected above.
  std::set<std::string> relations_with_templates;
  for (const auto& t : ds.templates) {
    relations_with_templates.insert(t.relation_id);
  }
  for (auto& [line, t] : pending_triples) {
    if (!entity_ids.count(t.subject)) {
      throw DatasetError(detail::location(triples_path, line) +
                         "dangling subject reference \"" + t.subject + "\"");
    }
    for (const auto& obj : t.objects) {
      if (!entity_ids.count(obj)) {
        throw DatasetError(detail::location(triples_path, line) +
                           "dangling object reference \"" + obj + "\"");
      }
    }
    if (!relations_with_templates.count(t.relation)) {
      throw DatasetError(detail::location(triples_path, line) +
                         "relation \"" + t.relation +
                         "\" has no template");
    }
    ds.triples.push_back(std::move(t));
  }

  ds.build_index();
  return ds;
}

/// Writes a dataset directory in the canonical layout. load_dataset of the
/// result reproduces an identical Dataset.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  {
    json m{{"name", ds.manifest.name},
           {"version", ds.manifest.version},
           {"tokenizer_family", ds.manifest.tokenizer_family}};
    write_file(dir / "manifest.json", m.dump(2) + "\n");
  }
  {
    std::ofstream out(dir / "templates.jsonl");
    auto sorted = ds.templates;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      return std::tie(a.relation_id, a.template_id) <
             std::tie(b.relation_id, b.template_id);
    });
    for (const auto& t : sorted) {
      json rec{{"relation_id", t.relation_id},
               {"template_id", t.template_id},
               {"pattern", t.pattern},
               {"style", to_string(t.style)},
               {"origin", to_string(t.origin)}};
      if (t.group_id) {
        rec["group_id"] = *t.group_id;
      }
      append_jsonl(out, rec);
    }
  }
  {
    std::ofstream out(dir / "entities.jsonl");
    auto sorted = ds.entities;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      return a.entity_id < b.entity_id;
    });
    for (const auto& e : sorted) {
      json rec{{"entity_id", e.entity_id},
               {"canonical", e.canonical},
               {"aliases", e.aliases}};
      if (!e.single_token_forms.empty()) {
        rec["single_token_forms"] = e.single_token_forms;
      }
      append_jsonl(out, rec);
    }
  }
  {
    std::ofstream out(dir / "triples.jsonl");
    auto sorted = ds.triples;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      return std::tie(a.subject, a.relation) <
             std::tie(b.subject, b.relation);
    });
    for (const auto& t : sorted) {
      append_jsonl(out, json{{"subject", t.subject},
                             {"relation", t.relation},
                             {"objects", t.objects}});
    }
  }
  {
    std::ofstream out(dir / "tokenizer_vocab.txt");
    for (const auto& tok : ds.vocab) {
      out << tok << '\n';
    }
  }
}

// ============================================================================
// Prompt realization
// ============================================================================

namespace detail {

inline std::string realize_statement(const std::string& pattern,
                                     const std::string& subject_surface) {
  std::string text = pattern;
  text.replace(text.find("[X]"), 3, subject_surface);
  text.replace(text.find("[Y]"), 3, "[MASK]");
  return text;
}

/// Question form: subject substituted, the trailing answer slot removed.
inline std::string realize_question(const std::string& pattern,
                                    const std::string& subject_surface) {
  std::string text = pattern;
  text.replace(text.find("[X]"), 3, subject_surface);
  const auto y = text.find("[Y]");
  text.erase(y, 3);
  if (y < text.size() && (text[y] == '.' || text[y] == '!')) {
    text.erase(y, 1);
  }
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t')) {
    text.pop_back();
  }
  return text;
}

}  // namespace detail

/// Realizes every prompt for a pair in the requested style: one prompt per
/// (template of that style, subject surface), ordered by template_id then
/// surface index.
inline std::vector<Prompt> realize_prompts(const Dataset& ds,
                                           const SubjectRelationPair& pair,
                                           TemplateStyle style) {
  const UniqueTriple* triple = ds.find_triple(pair);
  if (!triple) {
    throw DatasetError("unknown pair (" + pair.subject + ", " + pair.relation +
                       ")");
  }
  const auto templates = ds.relation_templates(pair.relation, style);
  if (templates.empty()) {
    throw DatasetError("relation \"" + pair.relation + "\" has no " +
                       to_string(style) + " template");
  }
  const Entity* subject = ds.find_entity(pair.subject);
  const auto surfaces = subject->surfaces();

  std::vector<Prompt> out;
  out.reserve(templates.size() * surfaces.size());
  for (const auto* t : templates) {
    for (std::size_t s = 0; s < surfaces.size(); ++s) {
      Prompt p;
      p.pair = pair;
      p.template_id = t->template_id;
      p.subject_surface = surfaces[s];
      p.surface_index = static_cast<int>(s);
      p.style = style;
      p.text = style == TemplateStyle::kStatement
                   ? detail::realize_statement(t->pattern, surfaces[s])
                   : detail::realize_question(t->pattern, surfaces[s]);
      p.prompt_id = pair.subject + "|" + pair.relation + "|" + t->template_id +
                    "|s" + std::to_string(s);
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ============================================================================
// Answer sets
// ============================================================================

/// Collects the acceptable answers for a pair. In generate mode this is
/// every surface form of every object; in fill-mask mode only forms that are
/// single tokens for the dataset's tokenizer family are admitted, with the
/// rest listed in the exclusion report. A pair with zero single-token forms
/// raises EmptyAnswerError: it must be skipped and counted, never scored.
inline AnswerSet answer_set(const Dataset& ds, const SubjectRelationPair& pair,
                            ProbeMode mode) {
  const UniqueTriple* triple = ds.find_triple(pair);
  if (!triple) {
    throw DatasetError("unknown pair (" + pair.subject + ", " + pair.relation +
                       ")");
  }
  AnswerSet out;
  out.pair = pair;
  std::set<std::string> seen_surfaces;
  std::set<std::string> seen_tokens;
  std::set<std::string> seen_excluded;
  for (const auto& obj_id : triple->objects) {
    const Entity* obj = ds.find_entity(obj_id);
    const auto declared = obj->single_token_forms.find(
        ds.manifest.tokenizer_family);
    const bool has_declared = declared != obj->single_token_forms.end();
    for (const auto& surface : obj->surfaces()) {
      if (seen_surfaces.insert(surface).second) {
        out.surfaces.push_back(surface);
      }
      if (mode == ProbeMode::kFillMask && !has_declared) {
        if (ds.is_single_token(surface)) {
          if (seen_tokens.insert(surface).second) {
            out.tokens.push_back(surface);
          }
        } else if (seen_excluded.insert(surface).second) {
          out.excluded.push_back(surface);
        }
      }
    }
    if (mode == ProbeMode::kFillMask && has_declared) {
      for (const auto& tok : declared->second) {
        if (seen_tokens.insert(tok).second) {
          out.tokens.push_back(tok);
        }
      }
    }
  }
  if (mode == ProbeMode::kFillMask && out.tokens.empty()) {
    throw EmptyAnswerError("pair (" + pair.subject + ", " + pair.relation +
                           ") has no single-token answer for tokenizer "
                           "family \"" +
                           ds.manifest.tokenizer_family + "\"");
  }
  return out;
}

// ============================================================================
// Statistics
// ============================================================================

/// Closed-form dataset counts: derived triples multiply subject surfaces,
/// object surfaces, and relation templates; prompts drop the object factor.
inline DatasetStats dataset_stats(const Dataset& ds) {
  DatasetStats st;
  st.templates = ds.templates.size();
  st.unique_triples = ds.triples.size();
  st.pairs = ds.triples.size();
  for (const auto& t : ds.triples) {
    const auto n_templates =
        static_cast<std::uint64_t>(ds.relation_templates(t.relation).size());
    const auto n_subject =
        static_cast<std::uint64_t>(ds.find_entity(t.subject)->surfaces().size());
    std::uint64_t n_object = 0;
    for (const auto& obj : t.objects) {
      n_object += ds.find_entity(obj)->surfaces().size();
    }
    st.derived_triples += n_subject * n_object * n_templates;
    st.prompts += n_subject * n_templates;
  }
  return st;
}

}  // namespace lmprobe
