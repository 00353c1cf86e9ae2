#pragma once

// Turns a free-text answer into per-class scores.
//
//  exact      binary stage only: the normalized answer must be "yes" or "no".
//  contains   a class fires when its name or a synonym occurs as a whole
//             token phrase; tokens are compared after naive plural stripping.
//  embedding  score = sigmoid(cos(answer, class) / t).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "dfvqa/embedding.hpp"
#include "dfvqa/error.hpp"
#include "dfvqa/manifest.hpp"

namespace dfvqa {

enum class MatchStrategy { exact, contains, embedding };

inline const char* to_string(MatchStrategy m) {
  switch (m) {
    case MatchStrategy::exact: return "exact";
    case MatchStrategy::contains: return "contains";
    case MatchStrategy::embedding: return "embedding";
  }
  return "exact";
}

inline std::optional<MatchStrategy> parse_match_strategy(std::string_view s) {
  if (s == "exact") return MatchStrategy::exact;
  if (s == "contains") return MatchStrategy::contains;
  if (s == "embedding") return MatchStrategy::embedding;
  return std::nullopt;
}

struct MatchConfig {
  MatchStrategy strategy = MatchStrategy::contains;
  double temperature = 0.5;
  double decision_threshold = 0.5;

  void validate() const {
    if (!(temperature > 0.0)) throw Error(ErrorKind::config, "temperature must be positive");
    if (!(decision_threshold > 0.0 && decision_threshold < 1.0))
      throw Error(ErrorKind::config, "decision_threshold must lie in (0, 1)");
  }
};

enum class MatchFlag { unparsed, all_of_them, none_of_them };

inline const char* to_string(MatchFlag f) {
  switch (f) {
    case MatchFlag::unparsed: return "unparsed";
    case MatchFlag::all_of_them: return "all_of_them";
    case MatchFlag::none_of_them: return "none_of_them";
  }
  return "unparsed";
}

/// Scores aligned with the schema class order; always covers every class.
struct ClassScoreVector {
  std::vector<std::string> classes;
  std::vector<double> scores;
  std::vector<int> decisions;
  std::set<MatchFlag> flags;

  double score(std::string_view cls) const { return scores.at(position(cls)); }
  int decision(std::string_view cls) const { return decisions.at(position(cls)); }
  bool has_flag(MatchFlag f) const { return flags.count(f) != 0; }

 private:
  std::size_t position(std::string_view cls) const {
    auto it = std::find(classes.begin(), classes.end(), cls);
    if (it == classes.end()) throw Error(ErrorKind::not_found, "no class '" + std::string(cls) + "'");
    return static_cast<std::size_t>(it - classes.begin());
  }
};

inline std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(std::tolower(c));
  }
  auto terminal = [](char c) { return c == '.' || c == ',' || c == '!' || c == '?' || c == ' '; };
  while (!out.empty() && terminal(out.back())) out.pop_back();
  return out;
}

enum class BinaryMatch { positive, negative, unparsed };

inline const char* to_string(BinaryMatch m) {
  switch (m) {
    case BinaryMatch::positive: return "positive";
    case BinaryMatch::negative: return "negative";
    case BinaryMatch::unparsed: return "unparsed";
  }
  return "unparsed";
}

inline BinaryMatch exact_match_binary(std::string_view response) {
  const std::string n = normalize_text(response);
  if (n == "yes") return BinaryMatch::positive;
  if (n == "no") return BinaryMatch::negative;
  return BinaryMatch::unparsed;
}

/// Unparsed answers count as negative.
inline double binary_score(BinaryMatch m) { return m == BinaryMatch::positive ? 1.0 : 0.0; }

// --- contains ---------------------------------------------------------------

namespace detail {

inline std::string stem_token(std::string tok) {
  if (tok.size() > 3 && tok.back() == 's' && tok[tok.size() - 2] != 's') tok.pop_back();
  return tok;
}

/// Lowercased alphanumeric runs ("face-swap" -> face, swap), each plural-stripped.
inline std::vector<std::string> match_tokens(std::string_view text) {
  std::vector<std::string> toks;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      toks.push_back(stem_token(std::move(cur)));
      cur.clear();
    }
  }
  if (!cur.empty()) toks.push_back(stem_token(std::move(cur)));
  return toks;
}

inline bool contains_phrase(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace detail

/// Precomputed token phrases for each schema class; build once per schema
/// and reuse across responses.
class ContainsMatcher {
 public:
  explicit ContainsMatcher(const ClassSchema& schema) : classes_(schema.classes()) {
    if (schema.empty()) throw Error(ErrorKind::config, "contains matching needs a non-empty schema");
    for (const auto& cls : classes_) {
      std::vector<std::vector<std::string>> forms;
      for (const auto& f : schema.surface_forms(cls)) forms.push_back(detail::match_tokens(f));
      phrases_.push_back(std::move(forms));
    }
  }

  ClassScoreVector operator()(std::string_view response) const {
    static const std::vector<std::string> kAll = detail::match_tokens("all of them");
    static const std::vector<std::string> kNone = detail::match_tokens("none of them");

    const auto toks = detail::match_tokens(normalize_text(response));
    ClassScoreVector out;
    out.classes = classes_;
    out.scores.assign(classes_.size(), 0.0);
    out.decisions.assign(classes_.size(), 0);

    for (std::size_t i = 0; i < classes_.size(); ++i)
      for (const auto& phrase : phrases_[i])
        if (detail::contains_phrase(toks, phrase)) {
          out.scores[i] = 1.0;
          break;
        }
    // "none of them" leaves explicitly named classes set, so appending text
    // to an answer can never clear a match.
    if (detail::contains_phrase(toks, kNone)) out.flags.insert(MatchFlag::none_of_them);
    if (detail::contains_phrase(toks, kAll)) {
      out.flags.insert(MatchFlag::all_of_them);
      std::fill(out.scores.begin(), out.scores.end(), 1.0);
    }
    for (std::size_t i = 0; i < classes_.size(); ++i) out.decisions[i] = out.scores[i] >= 0.5 ? 1 : 0;
    return out;
  }

 private:
  std::vector<std::string> classes_;
  std::vector<std::vector<std::vector<std::string>>> phrases_;
};

inline ClassScoreVector contains_match(std::string_view response, const ClassSchema& schema) {
  return ContainsMatcher(schema)(response);
}

// --- embedding --------------------------------------------------------------

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline ClassScoreVector embedding_match(const EmbeddingVector& response_vec,
                                        const std::vector<EmbeddingVector>& class_vecs,
                                        const std::vector<std::string>& class_names,
                                        const MatchConfig& config) {
  config.validate();
  if (class_vecs.size() != class_names.size())
    throw Error(ErrorKind::data, "class vector count does not match class names");
  require_unit(response_vec, "response embedding");
  ClassScoreVector out;
  out.classes = class_names;
  out.scores.reserve(class_vecs.size());
  for (const auto& cv : class_vecs) {
    require_unit(cv, "class embedding");
    if (cv.dim() != response_vec.dim())
      throw Error(ErrorKind::data, "embedding dimension mismatch: " + std::to_string(cv.dim()) + " vs " +
                                       std::to_string(response_vec.dim()));
    double s = sigmoid(dot(response_vec.values, cv.values) / config.temperature);
    out.scores.push_back(s);
    out.decisions.push_back(s >= config.decision_threshold ? 1 : 0);
  }
  return out;
}

}  // namespace dfvqa
