#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmprobe/dataset.hpp"
#include "lmprobe/errors.hpp"
#include "lmprobe/rng.hpp"

namespace lmprobe {

// ============================================================================
// Settings
// ============================================================================

enum class IclKind { kZeroShot, kRandom, kRelation, kTemplate };

/// Context regime: zero-shot, or X exemplars drawn from all relations
/// (random), the target's relation (relation), or the target's relation and
/// template (template).
struct ICLSetting {
  IclKind kind = IclKind::kZeroShot;
  int shots = 0;

  bool operator==(const ICLSetting&) const = default;

  /// Accepts "zero-shot", "4-random", "4-relation", "4-template".
  static ICLSetting parse(const std::string& text) {
    if (text == "zero-shot" || text == "0-shot") {
      return {IclKind::kZeroShot, 0};
    }
    const auto dash = text.find('-');
    if (dash != std::string::npos && dash > 0) {
      int shots = 0;
      try {
        shots = std::stoi(text.substr(0, dash));
      } catch (...) {
        throw Error("cannot parse ICL setting \"" + text + "\"");
      }
      const std::string kind = text.substr(dash + 1);
      if (shots >= 1) {
        if (kind == "random") return {IclKind::kRandom, shots};
        if (kind == "relation") return {IclKind::kRelation, shots};
        if (kind == "template") return {IclKind::kTemplate, shots};
      }
    }
    throw Error("cannot parse ICL setting \"" + text + "\"");
  }

  std::string to_string() const {
    switch (kind) {
      case IclKind::kZeroShot: return "zero-shot";
      case IclKind::kRandom: return std::to_string(shots) + "-random";
      case IclKind::kRelation: return std::to_string(shots) + "-relation";
      default: return std::to_string(shots) + "-template";
    }
  }
};

enum class IclStyle { kMaskPrediction, kQuestionAnswer };

inline std::string to_string(IclStyle s) {
  return s == IclStyle::kMaskPrediction ? "mask-prediction" : "question-answer";
}

/// Template style matching an instruction style: mask prediction probes
/// statement templates, question answering probes question templates.
inline TemplateStyle template_style_for(IclStyle s) {
  return s == IclStyle::kMaskPrediction ? TemplateStyle::kStatement
                                        : TemplateStyle::kQuestionAnswer;
}

// ============================================================================
// Instructions
// ============================================================================

inline constexpr const char* kMaskPredictionInstruction =
    "Predict the [MASK] in each sentence in one word.";
inline constexpr const char* kQuestionAnswerInstruction =
    "Answer each question in one word.";

inline std::string build_instruction(IclStyle style) {
  return style == IclStyle::kMaskPrediction ? kMaskPredictionInstruction
                                            : kQuestionAnswerInstruction;
}

// ============================================================================
// Exemplars
// ============================================================================

/// One demonstration: a realized prompt plus its gold answer surface.
/// Never shares the target's subject-relation pair.
struct Exemplar {
  Prompt prompt;
  std::string gold;

  bool operator==(const Exemplar&) const = default;
};

/// Samples `setting.shots` exemplars for a target prompt, uniformly without
/// replacement from the eligible pool (all pairs for random, same-relation
/// pairs otherwise; the target's pair is always excluded). Deterministic for
/// a given (dataset, target, setting, seed): the caller seed is mixed with
/// the target prompt id, then draws happen in a fixed order (pair picks,
/// then per exemplar: template, subject surface, object, gold surface).
inline std::vector<Exemplar> sample_exemplars(const Dataset& ds,
                                              const Prompt& target,
                                              const ICLSetting& setting,
                                              std::uint64_t seed,
                                              bool with_replacement = false) {
  if (setting.kind == IclKind::kZeroShot) {
    return {};
  }
  const auto shots = static_cast<std::size_t>(setting.shots);

  std::vector<SubjectRelationPair> pool;
  if (setting.kind == IclKind::kRandom) {
    pool = ds.pairs();
  } else {
    pool = ds.relation_pairs(target.pair.relation);
  }
  std::erase(pool, target.pair);

  if (pool.size() < shots && !with_replacement) {
    throw InsufficientPoolError(
        "eligible pool has " + std::to_string(pool.size()) +
        " pairs but the setting needs " + std::to_string(shots));
  }
  if (pool.empty()) {
    throw InsufficientPoolError("eligible pool is empty");
  }

  const RelationalTemplate* target_template =
      ds.find_template(target.pair.relation, target.template_id);
  if (!target_template) {
    throw DatasetError("target template \"" + target.template_id +
                       "\" not present in dataset");
  }
  const TemplateStyle style = target_template->style;

  Rng rng(derive_seed(seed, target.prompt_id));
  std::vector<std::size_t> picks;
  if (with_replacement && pool.size() < shots) {
    for (std::size_t i = 0; i < shots; ++i) {
      picks.push_back(static_cast<std::size_t>(rng.bounded(pool.size())));
    }
  } else {
    picks = rng.sample_indices(pool.size(), shots);
  }

  std::vector<Exemplar> out;
  out.reserve(shots);
  for (const std::size_t pick : picks) {
    const SubjectRelationPair& pair = pool[pick];
    const UniqueTriple* triple = ds.find_triple(pair);

    const RelationalTemplate* tmpl = nullptr;
    if (setting.kind == IclKind::kTemplate) {
      tmpl = target_template;
    } else {
      const auto candidates = ds.relation_templates(pair.relation, style);
      if (candidates.empty()) {
        throw DatasetError("relation \"" + pair.relation + "\" has no " +
                           to_string(style) + " template for exemplars");
      }
      tmpl = candidates[rng.bounded(candidates.size())];
    }

    const auto subject_surfaces = ds.find_entity(pair.subject)->surfaces();
    const auto surface_idx =
        static_cast<std::size_t>(rng.bounded(subject_surfaces.size()));

    Exemplar ex;
    ex.prompt.pair = pair;
    ex.prompt.template_id = tmpl->template_id;
    ex.prompt.subject_surface = subject_surfaces[surface_idx];
    ex.prompt.surface_index = static_cast<int>(surface_idx);
    ex.prompt.style = style;
    ex.prompt.text =
        style == TemplateStyle::kStatement
            ? detail::realize_statement(tmpl->pattern, ex.prompt.subject_surface)
            : detail::realize_question(tmpl->pattern, ex.prompt.subject_surface);
    ex.prompt.prompt_id = pair.subject + "|" + pair.relation + "|" +
                          tmpl->template_id + "|s" +
                          std::to_string(surface_idx);

    const auto& obj_id =
        triple->objects[rng.bounded(triple->objects.size())];
    const auto gold_surfaces = ds.find_entity(obj_id)->surfaces();
    ex.gold = gold_surfaces[rng.bounded(gold_surfaces.size())];

    out.push_back(std::move(ex));
  }
  return out;
}

// ============================================================================
// Assembly
// ============================================================================

/// Full model input: instruction, Q/A exemplar block, and the target line
/// awaiting completion after "A:".
struct AssembledPrompt {
  std::string text;
  Prompt target;
  std::vector<Exemplar> exemplars;
  ICLSetting setting;
  IclStyle style = IclStyle::kMaskPrediction;
  std::uint64_t seed = 0;
};

/// Q/A layout: instruction line, each exemplar as "Q: <prompt>" / "A:
/// <gold>." lines, then the target question with an open "A:".
inline AssembledPrompt assemble_icl_prompt(
    const std::string& instruction, const std::vector<Exemplar>& exemplars,
    const Prompt& target, const ICLSetting& setting = {IclKind::kZeroShot, 0},
    IclStyle style = IclStyle::kMaskPrediction, std::uint64_t seed = 0) {
  AssembledPrompt out;
  out.target = target;
  out.exemplars = exemplars;
  out.setting = setting;
  out.style = style;
  out.seed = seed;

  std::string text = instruction;
  text += '\n';
  for (const auto& ex : exemplars) {
    text += "Q: ";
    text += ex.prompt.text;
    text += "\nA: ";
    text += ex.gold;
    text += ".\n";
  }
  text += "Q: ";
  text += target.text;
  text += "\nA:";
  out.text = std::move(text);
  return out;
}

/// Appends one assembled prompt to an audit transcript (JSONL) for manual
/// inspection.
inline void append_audit_record(std::ofstream& out,
                                const AssembledPrompt& assembled) {
  json exemplars = json::array();
  for (const auto& ex : assembled.exemplars) {
    exemplars.push_back({{"prompt_id", ex.prompt.prompt_id},
                         {"text", ex.prompt.text},
                         {"gold", ex.gold}});
  }
  json rec{{"target_prompt_id", assembled.target.prompt_id},
           {"setting", assembled.setting.to_string()},
           {"style", to_string(assembled.style)},
           {"seed", assembled.seed},
           {"exemplars", exemplars},
           {"text", assembled.text}};
  out << rec.dump() << '\n';
}

}  // namespace lmprobe
