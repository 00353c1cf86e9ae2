#pragma once

#include <cmath>
#include <string>

#include "dfvqa/error.hpp"

namespace dfvqa {

inline constexpr double kFusionThreshold = 0.5;

struct FusedScore {
  double score = 0.0;
  int decision = 0;
  bool agreed = false;  // both members decided the same way
  bool tie = false;     // fused score sits exactly on the threshold
};

/// Two-model score fusion with majority voting. When the members agree the
/// mean stays on their side of the threshold; when they disagree the mean
/// decides, and an exact 0.5 resolves to positive with the tie flag set.
inline FusedScore fuse(double score_a, double score_b) {
  auto check = [](double s) {
    if (!std::isfinite(s) || s < 0.0 || s > 1.0)
      throw Error(ErrorKind::data, "fusion score " + std::to_string(s) + " outside [0, 1]");
  };
  check(score_a);
  check(score_b);
  FusedScore f;
  const bool a = score_a >= kFusionThreshold;
  const bool b = score_b >= kFusionThreshold;
  f.agreed = a == b;
  // a/2 + b/2 is symmetric in its arguments bit for bit.
  f.score = score_a / 2.0 + score_b / 2.0;
  f.decision = f.score >= kFusionThreshold ? 1 : 0;
  f.tie = f.score == kFusionThreshold;
  return f;
}

}  // namespace dfvqa
