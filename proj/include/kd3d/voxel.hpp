#pragma once

#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "kd3d/crucial.hpp"
#include "kd3d/scene.hpp"
#include "kd3d/tensor.hpp"

namespace kd3d {

struct GridSpec {
  std::array<double, 3> origin{-8.0, -8.0, -1.0};
  std::array<double, 3> voxel_size{0.1, 0.1, 0.2};
  std::array<std::int64_t, 3> dims{160, 160, 10};  // nx, ny, nz
  std::int64_t bev_stride = 4;

  void validate() const;  // throws std::invalid_argument
  std::int64_t bev_h() const { return dims[1] / bev_stride; }  // rows follow y
  std::int64_t bev_w() const { return dims[0] / bev_stride; }  // cols follow x
  double center(int axis, std::int64_t i) const {
    return origin[axis] + (static_cast<double>(i) + 0.5) * voxel_size[axis];
  }
};

/// Occupied-voxel set with one feature row per voxel. Coordinates are unique
/// and lexicographically sorted, which fixes the row order all downstream
/// reductions rely on.
struct SparseVoxelGrid {
  std::vector<std::array<std::int32_t, 3>> coords;  // (ix, iy, iz)
  Tensor features;                                  // [rows, width] leaf
  std::unordered_map<std::int64_t, std::int64_t> index;  // key(coord) -> row
  std::array<std::int64_t, 3> dims{0, 0, 0};
  std::int64_t skipped_points = 0;

  std::int64_t rows() const { return static_cast<std::int64_t>(coords.size()); }
  std::int64_t width() const { return rows() == 0 ? 0 : features.dim(1); }
  std::int64_t key(std::int64_t ix, std::int64_t iy, std::int64_t iz) const {
    return (ix * dims[1] + iy) * dims[2] + iz;
  }
  /// Row index of a coordinate, or -1 when the voxel is empty.
  std::int64_t find_row(std::int64_t ix, std::int64_t iy, std::int64_t iz) const;
};

/// Row-index sets of voxels under crucial BEV cells, disjoint by the
/// priority fn > fp > tp.
struct CrucialVoxelSets {
  std::vector<std::int64_t> tp_v, fp_v, fn_v;  // ascending rows
};

/// Discretize a scene. Every occupied voxel gets the feature row
/// [mean point offset from the voxel center (3), log1p(point count) (1),
/// mean per-point semantics (n_classes, zeroed when use_semantics is
/// false so both modalities share a width)]. Out-of-grid points are counted
/// in skipped_points, never an error.
SparseVoxelGrid voxelize(const Scene& scene, const GridSpec& spec, bool use_semantics);

/// Collect voxel rows lying in the pillar footprints (bev_stride x
/// bev_stride columns, full height) of the crucial response cells, over all
/// heads. A column claimed by several sets resolves by fn > fp > tp.
CrucialVoxelSets mine_crucial_voxels(const CrucialSets& crucial, const SparseVoxelGrid& grid,
                                     const GridSpec& spec);

/// Inverse-distance interpolation plan from the k nearest voxel centers to
/// each query point. Weights are normalized to sum to 1 per row; a query
/// sitting on a voxel center (distance < 1e-9) copies that voxel exactly.
struct InterpPlan {
  std::vector<std::int64_t> idx;  // [m x kn] rows into the grid
  std::vector<double> w;          // [m x kn], rows sum to 1
  std::int64_t kn = 0;
};
InterpPlan interpolation_plan(const SparseVoxelGrid& grid,
                              const std::vector<double>& queries_xyz, const GridSpec& spec,
                              int k);

/// f_p = sum_j w_ij f_vj with the plan's weights; differentiable in
/// grid.features, weights held constant. Output [m, width].
Tensor interpolate_to_points(const SparseVoxelGrid& grid,
                             const std::vector<double>& queries_xyz, const GridSpec& spec,
                             int k);

}  // namespace kd3d
