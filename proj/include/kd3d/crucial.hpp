#pragma once

#include <cstdint>
#include <vector>

namespace kd3d {

/// Per-detection-head sets of BEV heatmap cells (flat y*W + x indices,
/// ascending) classifying where the student's peak response agrees with the
/// ground truth (tp), fires spuriously (fp), or misses (fn). Cells where
/// either response sits exactly on the threshold belong to none of the three.
struct CrucialSets {
  std::vector<std::vector<std::int64_t>> tp;
  std::vector<std::vector<std::int64_t>> fp;
  std::vector<std::vector<std::int64_t>> fn;

  std::size_t n_heads() const { return tp.size(); }
};

}  // namespace kd3d
