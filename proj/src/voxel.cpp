#include "kd3d/voxel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "kd3d/kernels.hpp"

namespace kd3d {

void GridSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (!(voxel_size[a] > 0.0))
      throw std::invalid_argument("GridSpec: voxel_size must be positive");
    if (dims[a] <= 0) throw std::invalid_argument("GridSpec: dims must be positive");
  }
  if (bev_stride <= 0) throw std::invalid_argument("GridSpec: bev_stride must be positive");
  if (dims[0] % bev_stride != 0 || dims[1] % bev_stride != 0)
    throw std::invalid_argument("GridSpec: dims must be divisible by bev_stride");
}

std::int64_t SparseVoxelGrid::find_row(std::int64_t ix, std::int64_t iy,
                                       std::int64_t iz) const {
  const auto it = index.find(key(ix, iy, iz));
  return it == index.end() ? -1 : it->second;
}

SparseVoxelGrid voxelize(const Scene& scene, const GridSpec& spec, bool use_semantics) {
  spec.validate();
  const int k = scene.n_classes;
  const std::int64_t width = 4 + k;

  SparseVoxelGrid grid;
  grid.dims = spec.dims;

  // Bin points, then accumulate each voxel in a value-sorted order so the
  // result is bit-identical under any permutation of the input points.
  std::vector<std::pair<std::int64_t, std::int64_t>> members;  // (key, point)
  const auto n = scene.num_points();
  members.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t c[3];
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      c[a] = static_cast<std::int64_t>(
          std::floor((scene.points[3 * i + a] - spec.origin[a]) / spec.voxel_size[a]));
      if (c[a] < 0 || c[a] >= spec.dims[a]) inside = false;
    }
    if (!inside) {
      ++grid.skipped_points;
      continue;
    }
    members.emplace_back(grid.key(c[0], c[1], c[2]), i);
  }
  std::sort(members.begin(), members.end(),
            [&](const std::pair<std::int64_t, std::int64_t>& a,
                const std::pair<std::int64_t, std::int64_t>& b) {
              if (a.first != b.first) return a.first < b.first;
              for (int j = 0; j < 3; ++j) {
                const double x = scene.points[3 * a.second + j];
                const double y = scene.points[3 * b.second + j];
                if (x != y) return x < y;
              }
              for (int j = 0; j < k; ++j) {
                const double x = scene.semantics[a.second * k + j];
                const double y = scene.semantics[b.second * k + j];
                if (x != y) return x < y;
              }
              return false;
            });

  std::vector<double> feats;
  std::vector<double> sem(static_cast<std::size_t>(k));
  std::size_t i = 0;
  while (i < members.size()) {
    const auto key = members[i].first;
    const auto iz = key % spec.dims[2];
    const auto iy = (key / spec.dims[2]) % spec.dims[1];
    const auto ix = key / (spec.dims[2] * spec.dims[1]);
    double off[3] = {0, 0, 0};
    std::fill(sem.begin(), sem.end(), 0.0);
    std::size_t j = i;
    for (; j < members.size() && members[j].first == key; ++j) {
      const auto p = members[j].second;
      off[0] += scene.points[3 * p] - spec.center(0, ix);
      off[1] += scene.points[3 * p + 1] - spec.center(1, iy);
      off[2] += scene.points[3 * p + 2] - spec.center(2, iz);
      if (use_semantics)
        for (int q = 0; q < k; ++q) sem[static_cast<std::size_t>(q)] += scene.semantics[p * k + q];
    }
    const auto count = static_cast<std::int64_t>(j - i);
    const double inv = 1.0 / static_cast<double>(count);
    grid.index.emplace(key, static_cast<std::int64_t>(grid.coords.size()));
    grid.coords.push_back({static_cast<std::int32_t>(ix), static_cast<std::int32_t>(iy),
                           static_cast<std::int32_t>(iz)});
    for (int a = 0; a < 3; ++a) feats.push_back(off[a] * inv);
    feats.push_back(std::log1p(static_cast<double>(count)));
    for (int q = 0; q < k; ++q)
      feats.push_back(use_semantics ? sem[static_cast<std::size_t>(q)] * inv : 0.0);
    i = j;
  }
  const auto rows = static_cast<std::int64_t>(grid.coords.size());
  grid.features = Tensor::from_data({rows, width}, std::move(feats));
  return grid;
}

CrucialVoxelSets mine_crucial_voxels(const CrucialSets& crucial, const SparseVoxelGrid& grid,
                                     const GridSpec& spec) {
  spec.validate();
  if (crucial.fp.size() != crucial.tp.size() || crucial.fn.size() != crucial.tp.size())
    throw std::invalid_argument("mine_crucial_voxels: ragged crucial sets");

  // Label every BEV column, letting fn > fp > tp win conflicts across heads.
  constexpr int kTp = 1, kFp = 2, kFn = 3;
  const auto bw = spec.bev_w(), bh = spec.bev_h();
  std::vector<int> label(static_cast<std::size_t>(spec.dims[0] * spec.dims[1]), 0);
  const auto mark = [&](const std::vector<std::int64_t>& cells, int lab) {
    for (const auto cell : cells) {
      if (cell < 0 || cell >= bh * bw)
        throw std::invalid_argument("mine_crucial_voxels: BEV cell out of range");
      const auto by = cell / bw, bx = cell % bw;
      for (std::int64_t ix = bx * spec.bev_stride; ix < (bx + 1) * spec.bev_stride; ++ix)
        for (std::int64_t iy = by * spec.bev_stride; iy < (by + 1) * spec.bev_stride; ++iy) {
          auto& slot = label[static_cast<std::size_t>(ix * spec.dims[1] + iy)];
          slot = std::max(slot, lab);
        }
    }
  };
  for (std::size_t head = 0; head < crucial.n_heads(); ++head) {
    mark(crucial.tp[head], kTp);
    mark(crucial.fp[head], kFp);
    mark(crucial.fn[head], kFn);
  }

  CrucialVoxelSets out;
  for (std::int64_t r = 0; r < grid.rows(); ++r) {
    const auto& c = grid.coords[static_cast<std::size_t>(r)];
    switch (label[static_cast<std::size_t>(static_cast<std::int64_t>(c[0]) * spec.dims[1] +
                                           c[1])]) {
      case kTp: out.tp_v.push_back(r); break;
      case kFp: out.fp_v.push_back(r); break;
      case kFn: out.fn_v.push_back(r); break;
      default: break;
    }
  }
  return out;  // rows scanned in ascending order, so the sets are sorted
}

InterpPlan interpolation_plan(const SparseVoxelGrid& grid,
                              const std::vector<double>& queries_xyz, const GridSpec& spec,
                              int k) {
  spec.validate();
  if (k < 1) throw std::invalid_argument("interpolation_plan: k must be at least 1");
  const auto v = grid.rows();
  if (v == 0) throw std::invalid_argument("interpolation_plan: empty voxel grid");
  if (queries_xyz.size() % 3 != 0)
    throw std::invalid_argument("interpolation_plan: queries must be xyz triples");
  const auto m = static_cast<std::int64_t>(queries_xyz.size() / 3);
  const auto kn = std::min<std::int64_t>(k, v);

  std::vector<double> centers(static_cast<std::size_t>(v * 3));
  for (std::int64_t r = 0; r < v; ++r)
    for (int a = 0; a < 3; ++a)
      centers[r * 3 + a] = spec.center(a, grid.coords[static_cast<std::size_t>(r)][a]);

  InterpPlan plan;
  plan.kn = kn;
  plan.idx.resize(static_cast<std::size_t>(m * kn));
  plan.w.resize(static_cast<std::size_t>(m * kn));
  std::vector<double> dist(static_cast<std::size_t>(m * kn));
  kernels::knn(queries_xyz.data(), m, centers.data(), v, kn, plan.idx.data(), dist.data());

  for (std::int64_t i = 0; i < m; ++i) {
    double* w = plan.w.data() + i * kn;
    const double* d = dist.data() + i * kn;
    if (d[0] < 1e-9) {
      // On-center query: copy that voxel, ignore the other neighbors.
      w[0] = 1.0;
      for (std::int64_t j = 1; j < kn; ++j) {
        w[j] = 0.0;
        plan.idx[i * kn + j] = plan.idx[i * kn];
      }
      continue;
    }
    double total = 0.0;
    for (std::int64_t j = 0; j < kn; ++j) {
      w[j] = 1.0 / d[j];
      total += w[j];
    }
    for (std::int64_t j = 0; j < kn; ++j) w[j] /= total;
  }
  return plan;
}

Tensor interpolate_to_points(const SparseVoxelGrid& grid,
                             const std::vector<double>& queries_xyz, const GridSpec& spec,
                             int k) {
  auto plan = interpolation_plan(grid, queries_xyz, spec, k);
  return weighted_gather_rows(grid.features, std::move(plan.idx), std::move(plan.w),
                              plan.kn);
}

}  // namespace kd3d
