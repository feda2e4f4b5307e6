#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "kd3d/crucial.hpp"
#include "kd3d/scene.hpp"
#include "kd3d/tensor.hpp"
#include "kd3d/voxel.hpp"

namespace kd3d {

/// Hyper-parameters of the four distillation levels. Attribute weight order:
/// x, y, z, w, l, h, vx, vy, sin yaw, cos yaw.
struct DistillConfig {
  double tau = 0.1;
  double w_r1 = 1.0;
  double w_r2 = 5.0;
  std::array<double, 10> w_attr = {0, 0, 0, 0.1, 0.1, 0.1, 0.1, 0.1, 0, 0};
  double w_v1 = 2.0;
  double w_v2 = 8.0;
  double w_pf = 2.0;
  double w_I = 8.0;
  double lambda = 0.25;
  double mu = 0.5;
  std::int64_t point_cap = 4500;
  int roi_grid = 5;
  double nms_iou = 0.2;
  bool enable_rsp = true;
  bool enable_vxl = true;
  bool enable_pts = true;
  bool enable_ins = true;

  void validate() const;
};

/// Per-step loss values for logging. `total` always satisfies
/// total = l_cls + lambda*l_reg + mu*(sum of the seven distillation terms).
struct LossBreakdown {
  double l_cls = 0;
  double l_reg = 0;
  double l_rsp_cls = 0;
  double l_rsp_loc = 0;
  double l_vxl_fea = 0;
  double l_vxl_rel = 0;
  double l_pts_fea = 0;
  double l_pts_rel = 0;
  double l_ins = 0;
  double total = 0;
};

/// Classifies each BEV cell of each head by comparing the per-cell class
/// maxima of the student and ground-truth heatmaps against tau, strictly:
/// TP both > tau; FP student only; FN ground truth only. Cells at exactly
/// tau join no set. Returned cell lists are ascending.
CrucialSets mine_crucial_responses(const std::vector<Tensor>& h_s,
                                   const std::vector<Tensor>& h_g, double tau);

/// Heatmap imitation on crucial cells: w_r1-weighted mean over TP plus
/// w_r2-weighted mean over FP and FN, each cell contributing its smooth-L1
/// error averaged over the head's classes. Empty sets contribute 0.
Tensor response_cls_loss(const std::vector<Tensor>& h_s, const std::vector<Tensor>& h_m,
                         const CrucialSets& sets, const DistillConfig& cfg);

/// Box-attribute imitation on TP and FN cells (the ones with associated
/// objects): mean over samples of the attribute-weighted smooth-L1 error.
Tensor response_reg_loss(const Tensor& reg_s, const Tensor& reg_m, const CrucialSets& sets,
                         const DistillConfig& cfg);

/// Voxel-wise feature imitation on crucial voxels; fv_s must already be
/// mapped into the teacher's feature space (see AdaptationLayer).
Tensor voxel_feature_loss(const Tensor& fv_s, const Tensor& fv_m,
                          const CrucialVoxelSets& vsets, const DistillConfig& cfg);

/// Pairwise cosine-similarity structure imitation over all crucial voxels
/// (TP, FP, and FN together), diagonal included. Operates on the raw
/// features of each branch; 0 if no voxel is crucial.
Tensor voxel_relation_loss(const Tensor& fv_s, const Tensor& fv_m,
                           const CrucialVoxelSets& vsets, const DistillConfig& cfg);

/// Feature and relation imitation at the foreground points (point_to_box
/// >= 0), using inverse-distance interpolation of each branch's voxel
/// features. The relation term runs on min(M, point_cap) points sampled
/// without replacement from the given seed. Returns (feature, relation).
std::pair<Tensor, Tensor> point_losses(const SparseVoxelGrid& grid_s,
                                       const SparseVoxelGrid& grid_m, const Scene& scene,
                                       const GridSpec& spec, const DistillConfig& cfg,
                                       std::uint64_t seed);

/// BEV feature imitation inside predicted boxes: a roi_grid x roi_grid
/// lattice per box, placed in the box frame and rotated by its yaw, sampled
/// bilinearly from both maps. 0 when no boxes are given.
Tensor instance_loss(const Tensor& bev_s, const Tensor& bev_m,
                     const std::vector<Box3D>& boxes, const GridSpec& spec,
                     const DistillConfig& cfg);

/// The component tensors of one training step. Leave a member undefined (or
/// disable its level) to contribute an exact zero.
struct DistillTerms {
  Tensor l_cls;
  Tensor l_reg;
  Tensor l_rsp_cls;
  Tensor l_rsp_loc;
  Tensor l_vxl_fea;
  Tensor l_vxl_rel;
  Tensor l_pts_fea;
  Tensor l_pts_rel;
  Tensor l_ins;
};

/// Combines the terms into the training objective
/// l_cls + lambda*l_reg + mu*(distillation terms), honoring the enable
/// flags: a disabled level is replaced by a constant 0, removing both its
/// value and its gradient. Returns the scalar objective and its numbers.
std::pair<Tensor, LossBreakdown> total_loss(const DistillTerms& terms,
                                            const DistillConfig& cfg);

}  // namespace kd3d
