#pragma once

// Instruction templates for the three question stages and the reference
// captions used for BertScore. Spacing, including the blank before '?', is
// part of the template: prompt text is a cache key and must stay byte-stable.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dfvqa/error.hpp"
#include "dfvqa/manifest.hpp"
#include "dfvqa/util.hpp"

namespace dfvqa {

enum class Stage { binary, multiple_choice, open_ended };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::binary: return "binary";
    case Stage::multiple_choice: return "multiple_choice";
    case Stage::open_ended: return "open_ended";
  }
  return "binary";
}

inline std::optional<Stage> parse_stage(std::string_view s) {
  if (s == "binary") return Stage::binary;
  if (s == "multiple_choice") return Stage::multiple_choice;
  if (s == "open_ended") return Stage::open_ended;
  return std::nullopt;
}

struct PromptTask {
  std::string sample_id;
  Stage stage = Stage::binary;
  std::string synonym;
  std::vector<std::string> classes;  // multiple_choice only
  std::string text;
};

namespace detail {
inline void require_synonym(std::string_view synonym) {
  if (synonym.empty()) throw Error(ErrorKind::config, "synonym must be non-empty");
}
}  // namespace detail

inline std::string binary_prompt(std::string_view synonym) {
  detail::require_synonym(synonym);
  return "Is this image " + std::string(synonym) + " ? a) Yes b) No";
}

inline std::string open_prompt(std::string_view synonym) {
  detail::require_synonym(synonym);
  return "What area of this image is " + std::string(synonym) + " ?";
}

inline std::string mc_prompt(const std::vector<std::string>& classes, std::string_view synonym) {
  detail::require_synonym(synonym);
  if (classes.empty()) throw Error(ErrorKind::config, "multiple-choice prompt needs at least one class");
  return "Of the areas in the list " + join(classes, ", ") + ", which ones are " + std::string(synonym) + " ?";
}

inline std::string reference_caption(std::string_view synonym, const std::vector<std::string>& labels) {
  detail::require_synonym(synonym);
  if (labels.empty()) throw Error(ErrorKind::data, "reference caption needs at least one label");
  return "The areas that are " + std::string(synonym) + " are " + join(labels, ", ");
}

/// Renders the prompt for one sample. Multiple-choice lists the schema classes in schema order.
inline PromptTask make_task(const Sample& sample, Stage stage, const std::string& synonym,
                            const ClassSchema& schema = {}) {
  PromptTask t{sample.id, stage, synonym, {}, {}};
  switch (stage) {
    case Stage::binary: t.text = binary_prompt(synonym); break;
    case Stage::open_ended: t.text = open_prompt(synonym); break;
    case Stage::multiple_choice:
      t.classes = schema.classes();
      t.text = mc_prompt(t.classes, synonym);
      break;
  }
  return t;
}

}  // namespace dfvqa
