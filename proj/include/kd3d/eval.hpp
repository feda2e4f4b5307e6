#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kd3d/detector.hpp"
#include "kd3d/scene.hpp"
#include "kd3d/voxel.hpp"

namespace kd3d {

/// One decoded box hypothesis.
struct Detection {
  Box3D box;
  double score = 0.0;  // in [0,1]
  int head = 0;        // which detection head produced it
};

/// Aggregate detection metrics over an evaluation split.
struct MetricsReport {
  std::vector<double> thresholds;            // center-distance thresholds, ascending
  std::map<int, std::vector<double>> ap;     // class id -> AP per threshold
  double map_lite = 0.0;                     // mean AP over classes-with-GT x thresholds
  double translation_err = 0.0;              // mean matched center distance, scene units
  double scale_err = 0.0;                    // mean 1 - IoU of axis-aligned extents
  double orientation_err = 0.0;              // mean minimal yaw difference, radians
  double nds_lite = 0.0;                     // 0.5*mAP + 0.5*(1 - mean normalized errors)

  std::string to_json() const;  // stable key order
  std::string to_csv() const;   // flat metric,value rows
};

/// Distance thresholds matched to the desk-scale scene range.
std::vector<double> default_thresholds();

/// Extract box hypotheses from heatmap peaks. A peak is a cell whose score
/// exceeds every 3x3 neighbor (ties keep both) and score_thresh (strictly);
/// the shared regression map is read at the peak cell. Results are sorted by
/// descending score (ties: class, then cell) and truncated to top_n.
std::vector<Detection> decode(const DetectorOutputs& out, const HeadSpec& heads,
                              const GridSpec& spec, std::int64_t top_n,
                              double score_thresh);

/// Exact intersection-over-union of two oriented boxes in the ground plane,
/// via convex polygon clipping.
double rotated_iou_bev(const Box3D& a, const Box3D& b);

/// Greedy non-maximum suppression: walk detections by descending score
/// (ties: earlier index first) and drop any whose BEV IoU with a survivor
/// exceeds iou_thresh. Survivors come back in that walk order.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh);

/// Center-distance matched detection metrics. preds[i] and gts[i] describe
/// the same scene; matching is greedy by score against the nearest unmatched
/// ground truth of the same class within each threshold. True-positive errors
/// are measured at the second-largest threshold.
MetricsReport evaluate(const std::vector<std::vector<Detection>>& preds,
                       const std::vector<std::vector<Box3D>>& gts,
                       std::vector<double> thresholds = default_thresholds());

/// Analytical cost of the voxel-level distillation terms.
struct FlopsCount {
  std::int64_t cons = 0;  // feature consistency: one FLOP per compared element
  std::int64_t rel = 0;   // pairwise relations: three 2C-FLOP dot products per pair
};

/// cons = V*C; rel = 6*C*V^2 (0 when the relation term is disabled).
FlopsCount flops_voxel_distill(std::int64_t v, std::int64_t c, bool with_relation);

}  // namespace kd3d
