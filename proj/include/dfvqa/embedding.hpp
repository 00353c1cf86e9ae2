#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "dfvqa/error.hpp"

namespace dfvqa {

enum class NormKind { raw, unit };

inline constexpr double kUnitNormTolerance = 1e-6;

struct EmbeddingVector {
  std::vector<double> values;
  NormKind norm_kind = NormKind::raw;

  std::size_t dim() const noexcept { return values.size(); }
  bool operator==(const EmbeddingVector&) const = default;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw Error(ErrorKind::data, "dimension mismatch: " + std::to_string(a.size()) + " vs " +
                                     std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline bool is_unit(const EmbeddingVector& v, double tol = kUnitNormTolerance) {
  return std::abs(l2_norm(v.values) - 1.0) <= tol;
}

inline EmbeddingVector normalized(std::vector<double> values) {
  double n = l2_norm(values);
  if (!(n > 0.0) || !std::isfinite(n)) throw Error(ErrorKind::data, "cannot normalize a zero or non-finite vector");
  for (double& x : values) x /= n;
  return {std::move(values), NormKind::unit};
}

inline void require_unit(const EmbeddingVector& v, const char* what) {
  if (!is_unit(v))
    throw Error(ErrorKind::data, std::string(what) + " is not unit-normalized (norm " +
                                     std::to_string(l2_norm(v.values)) + ")");
}

/// Cosine of two unit vectors, i.e. their dot product after validation.
inline double unit_cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  require_unit(a, "left vector");
  require_unit(b, "right vector");
  return dot(a.values, b.values);
}

/// Cosine of arbitrary non-zero vectors.
inline double cosine(std::span<const double> a, std::span<const double> b) {
  double d = dot(a, b);
  double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw Error(ErrorKind::data, "cosine of a zero vector");
  return d / (na * nb);
}

}  // namespace dfvqa
