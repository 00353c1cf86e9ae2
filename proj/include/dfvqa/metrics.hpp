#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dfvqa/embedding.hpp"
#include "dfvqa/error.hpp"

namespace dfvqa {

struct BinaryOutcome {
  double score = 0.0;
  int label = 0;  // 1 = positive class
};

struct ConfusionMetrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

namespace detail {
inline void require_finite(const std::vector<BinaryOutcome>& outcomes) {
  for (const auto& o : outcomes)
    if (!std::isfinite(o.score)) throw Error(ErrorKind::data, "non-finite score");
}
}  // namespace detail

/// Positive-class confusion metrics; a score >= threshold predicts positive.
/// Precision, recall and F1 are 0 when their denominators vanish.
inline ConfusionMetrics confusion_metrics(const std::vector<BinaryOutcome>& outcomes, double threshold = 0.5) {
  if (outcomes.empty()) throw Error(ErrorKind::undefined, "confusion metrics of an empty set");
  detail::require_finite(outcomes);
  ConfusionMetrics m;
  for (const auto& o : outcomes) {
    const bool pred = o.score >= threshold;
    if (pred && o.label) ++m.tp;
    else if (pred) ++m.fp;
    else if (o.label) ++m.fn;
    else ++m.tn;
  }
  const double n = static_cast<double>(outcomes.size());
  m.accuracy = static_cast<double>(m.tp + m.tn) / n;
  m.precision = m.tp + m.fp ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  m.recall = m.tp + m.fn ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

/// Mann-Whitney AUC with midranks; a tied positive/negative pair counts 0.5.
/// Throws Error(undefined) unless both classes are present.
inline double roc_auc(const std::vector<BinaryOutcome>& outcomes) {
  detail::require_finite(outcomes);
  std::vector<std::pair<double, int>> v;
  v.reserve(outcomes.size());
  for (const auto& o : outcomes) v.emplace_back(o.score, o.label ? 1 : 0);
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  double pos = 0, neg = 0, pos_rank_sum = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    double group_pos = 0;
    while (j < v.size() && v[j].first == v[i].first) group_pos += v[j++].second;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    pos_rank_sum += group_pos * midrank;
    pos += group_pos;
    neg += static_cast<double>(j - i) - group_pos;
    i = j;
  }
  if (pos == 0 || neg == 0) throw Error(ErrorKind::undefined, "AUC undefined: labels contain a single class");
  return (pos_rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

inline std::optional<double> try_roc_auc(const std::vector<BinaryOutcome>& outcomes) {
  try {
    return roc_auc(outcomes);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::undefined) return std::nullopt;
    throw;
  }
}

/// Step-interpolated AP over the precision/recall curve taken at each
/// distinct score threshold: sum over thresholds of (R_n - R_{n-1}) * P_n.
/// Tied scores enter the curve together, so the value is order independent.
inline double average_precision(const std::vector<BinaryOutcome>& outcomes) {
  detail::require_finite(outcomes);
  std::vector<std::pair<double, int>> v;
  v.reserve(outcomes.size());
  double total_pos = 0;
  for (const auto& o : outcomes) {
    v.emplace_back(o.score, o.label ? 1 : 0);
    total_pos += o.label ? 1 : 0;
  }
  if (total_pos == 0) throw Error(ErrorKind::undefined, "AP undefined: no positive labels");
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  double tp = 0, seen = 0, ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j].first == v[i].first) tp += v[j++].second;
    seen += static_cast<double>(j - i);
    const double recall = tp / total_pos;
    ap += (recall - prev_recall) * (tp / seen);
    prev_recall = recall;
    i = j;
  }
  return ap;
}

struct MeanApResult {
  std::optional<double> value;                        // absent when no class has positives
  std::vector<std::optional<double>> per_class;       // absent for excluded classes
  std::vector<std::string> warnings;
};

/// Unweighted mean of per-class AP over classes with at least one positive.
inline MeanApResult mean_ap(const std::vector<std::vector<BinaryOutcome>>& per_class,
                            const std::vector<std::string>& class_names = {}) {
  MeanApResult r;
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const bool any_pos = std::any_of(per_class[c].begin(), per_class[c].end(),
                                     [](const BinaryOutcome& o) { return o.label != 0; });
    if (!any_pos) {
      const std::string name = c < class_names.size() ? class_names[c] : "#" + std::to_string(c);
      r.warnings.push_back("class '" + name + "' has no positives; excluded from mAP");
      r.per_class.emplace_back(std::nullopt);
      continue;
    }
    double ap = average_precision(per_class[c]);
    r.per_class.emplace_back(ap);
    sum += ap;
    ++used;
  }
  if (used) r.value = sum / static_cast<double>(used);
  return r;
}

// --- BertScore --------------------------------------------------------------

struct BertScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Greedy-matching BertScore over unit token embeddings, without IDF
/// weighting or baseline rescaling.
inline BertScore bertscore(const std::vector<EmbeddingVector>& candidate,
                           const std::vector<EmbeddingVector>& reference) {
  if (candidate.empty() || reference.empty()) throw Error(ErrorKind::data, "bertscore needs non-empty token lists");
  for (const auto& v : candidate) require_unit(v, "candidate token embedding");
  for (const auto& v : reference) require_unit(v, "reference token embedding");

  std::vector<double> best_ref(reference.size(), -2.0);
  double p_sum = 0.0;
  for (const auto& c : candidate) {
    double best = -2.0;
    for (std::size_t j = 0; j < reference.size(); ++j) {
      const double s = dot(c.values, reference[j].values);
      best = std::max(best, s);
      best_ref[j] = std::max(best_ref[j], s);
    }
    p_sum += best;
  }
  BertScore b;
  b.precision = p_sum / static_cast<double>(candidate.size());
  b.recall = std::accumulate(best_ref.begin(), best_ref.end(), 0.0) / static_cast<double>(reference.size());
  const double denom = b.precision + b.recall;
  b.f1 = denom != 0.0 ? 2.0 * b.precision * b.recall / denom : 0.0;
  return b;
}

// --- human ratings ----------------------------------------------------------

inline constexpr int kMinRating = 1;
inline constexpr int kMaxRating = 5;

/// Sparse (annotator, item) -> rating in 1..5.
class RatingMatrix {
 public:
  void add(const std::string& annotator, const std::string& item, int value) {
    if (value < kMinRating || value > kMaxRating)
      throw Error(ErrorKind::validation, "rating " + std::to_string(value) + " outside 1..5");
    if (!cells_.emplace(std::make_pair(annotator, item), value).second)
      throw Error(ErrorKind::conflict, "annotator '" + annotator + "' already rated '" + item + "'");
  }

  const std::map<std::pair<std::string, std::string>, int>& cells() const noexcept { return cells_; }
  bool empty() const noexcept { return cells_.empty(); }

  std::set<std::string> annotators() const {
    std::set<std::string> out;
    for (const auto& [k, v] : cells_) out.insert(k.first);
    return out;
  }

  /// item -> ratings, ordered by annotator id.
  std::map<std::string, std::vector<int>> by_item() const {
    std::map<std::string, std::vector<int>> out;
    for (const auto& [k, v] : cells_) out[k.second].push_back(v);
    return out;
  }

 private:
  std::map<std::pair<std::string, std::string>, int> cells_;
};

enum class MeasurementLevel { interval };

/// Krippendorff's alpha, 1 - D_o / D_e, with squared-difference distance.
/// Items with fewer than two ratings are not pairable and drop out. Returns
/// 1.0 when the pooled ratings show no disagreement at all.
inline double krippendorff_alpha(const RatingMatrix& m, MeasurementLevel = MeasurementLevel::interval) {
  if (m.annotators().size() < 2) throw Error(ErrorKind::undefined, "alpha needs at least two annotators");

  std::vector<std::vector<int>> units;
  for (auto& [item, values] : m.by_item())
    if (values.size() >= 2) units.push_back(values);
  if (units.empty()) throw Error(ErrorKind::undefined, "alpha needs an item rated by at least two annotators");

  // Observed: within-unit pair distances, each unit weighted by 1/(m_u - 1).
  double n = 0, observed = 0;
  std::vector<double> pooled;
  for (const auto& u : units) {
    double within = 0;
    for (std::size_t i = 0; i < u.size(); ++i)
      for (std::size_t j = 0; j < u.size(); ++j) {
        const double d = u[i] - u[j];
        within += d * d;
      }
    observed += within / static_cast<double>(u.size() - 1);
    n += static_cast<double>(u.size());
    pooled.insert(pooled.end(), u.begin(), u.end());
  }
  // Expected: all pairs of pooled pairable values.
  double expected = 0;
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (std::size_t j = 0; j < pooled.size(); ++j) {
      const double d = pooled[i] - pooled[j];
      expected += d * d;
    }
  const double d_o = observed / n;
  const double d_e = expected / (n * (n - 1));
  if (d_e == 0.0) return 1.0;
  return 1.0 - d_o / d_e;
}

struct HumanScores {
  std::map<std::string, double> per_model;
  std::map<std::string, double> per_sample;  // mean standardised rating
  std::vector<std::string> excluded;
  std::vector<std::string> warnings;
};

inline double standardise_rating(int r) {
  return static_cast<double>(r - kMinRating) / static_cast<double>(kMaxRating - kMinRating);
}

/// Per-sample score = mean over annotators of (r - 1) / 4; per-model score =
/// mean over that model's rated samples.
inline HumanScores human_score_aggregate(const RatingMatrix& m, const std::map<std::string, std::string>& sample_model) {
  HumanScores out;
  const auto items = m.by_item();
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& [sample, model] : sample_model) {
    auto it = items.find(sample);
    if (it == items.end() || it->second.empty()) {
      out.excluded.push_back(sample);
      out.warnings.push_back("sample '" + sample + "' has no ratings; excluded");
      continue;
    }
    double s = 0;
    for (int r : it->second) s += standardise_rating(r);
    s /= static_cast<double>(it->second.size());
    out.per_sample[sample] = s;
    acc[model].first += s;
    acc[model].second += 1;
  }
  for (const auto& [model, sum_n] : acc) out.per_model[model] = sum_n.first / static_cast<double>(sum_n.second);
  return out;
}

}  // namespace dfvqa
