#include "kd3d/distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "kd3d/rng.hpp"

namespace kd3d {

void DistillConfig::validate() const {
  if (!(tau > 0.0 && tau < 1.0))
    throw std::invalid_argument("DistillConfig: tau must lie in (0, 1)");
  const double weights[] = {w_r1, w_r2, w_v1, w_v2, w_pf, w_I, lambda, mu};
  for (const double w : weights)
    if (!(w >= 0.0)) throw std::invalid_argument("DistillConfig: weights must be >= 0");
  for (const double w : w_attr)
    if (!(w >= 0.0))
      throw std::invalid_argument("DistillConfig: attribute weights must be >= 0");
  if (point_cap < 1) throw std::invalid_argument("DistillConfig: point_cap must be >= 1");
  if (roi_grid < 1) throw std::invalid_argument("DistillConfig: roi_grid must be >= 1");
  if (!(nms_iou > 0.0 && nms_iou < 1.0))
    throw std::invalid_argument("DistillConfig: nms_iou must lie in (0, 1)");
}

CrucialSets mine_crucial_responses(const std::vector<Tensor>& h_s,
                                   const std::vector<Tensor>& h_g, double tau) {
  if (!(tau > 0.0 && tau < 1.0))
    throw std::invalid_argument("mine_crucial_responses: tau must lie in (0, 1)");
  if (h_s.size() != h_g.size())
    throw std::invalid_argument("mine_crucial_responses: head count mismatch");
  CrucialSets sets;
  for (std::size_t head = 0; head < h_s.size(); ++head) {
    const auto& s = h_s[head];
    const auto& g = h_g[head];
    if (s.shape() != g.shape())
      throw std::invalid_argument("mine_crucial_responses: heatmap shape mismatch");
    const auto k = s.dim(0);
    const auto cells = s.dim(1);
    const auto sv = s.data();
    const auto gv = g.data();
    std::vector<std::int64_t> tp, fp, fn;
    for (std::int64_t cell = 0; cell < cells; ++cell) {
      double ms = 0.0, mg = 0.0;
      for (std::int64_t c = 0; c < k; ++c) {
        ms = std::max(ms, sv[static_cast<std::size_t>(c * cells + cell)]);
        mg = std::max(mg, gv[static_cast<std::size_t>(c * cells + cell)]);
      }
      const bool s_hot = ms > tau, g_hot = mg > tau;
      const bool s_cold = ms < tau, g_cold = mg < tau;
      if (s_hot && g_hot)
        tp.push_back(cell);
      else if (s_hot && g_cold)
        fp.push_back(cell);
      else if (s_cold && g_hot)
        fn.push_back(cell);
      // A max exactly at tau joins no set; both below tau is background.
    }
    sets.tp.push_back(std::move(tp));
    sets.fp.push_back(std::move(fp));
    sets.fn.push_back(std::move(fn));
  }
  return sets;
}

namespace {

void check_sets_heads(const CrucialSets& sets, std::size_t n_heads, const char* op) {
  if (sets.tp.size() != n_heads || sets.fp.size() != n_heads || sets.fn.size() != n_heads)
    throw std::invalid_argument(std::string(op) + ": crucial sets do not match head count");
}

/// Smooth-L1 between matching entries of two maps, gathered per head at the
/// given cells with every class row included, scaled per head by 1/K and
/// summed; plus the total sample count.
struct GatheredTerm {
  Tensor sum;  // undefined if no samples
  std::int64_t samples = 0;
};

GatheredTerm class_mean_term(const std::vector<Tensor>& h_s, const std::vector<Tensor>& h_m,
                             const std::vector<const std::vector<std::int64_t>*>& cells) {
  GatheredTerm term;
  for (std::size_t head = 0; head < h_s.size(); ++head) {
    const auto& list = *cells[head];
    if (list.empty()) continue;
    const auto k = h_s[head].dim(0);
    const auto n_cells = h_s[head].dim(1);
    std::vector<std::int64_t> idx;
    idx.reserve(list.size() * static_cast<std::size_t>(k));
    for (const auto cell : list) {
      if (cell < 0 || cell >= n_cells)
        throw std::invalid_argument("response loss: crucial cell out of range");
      for (std::int64_t c = 0; c < k; ++c) idx.push_back(c * n_cells + cell);
    }
    const Tensor pred = gather(h_s[head], idx);
    const Tensor want = gather(h_m[head], std::move(idx));
    const Tensor head_sum =
        scale(sum(smooth_l1(pred, want)), 1.0 / static_cast<double>(k));
    term.sum = term.sum.defined() ? add(term.sum, head_sum) : head_sum;
    term.samples += static_cast<std::int64_t>(list.size());
  }
  return term;
}

}  // namespace

Tensor response_cls_loss(const std::vector<Tensor>& h_s, const std::vector<Tensor>& h_m,
                         const CrucialSets& sets, const DistillConfig& cfg) {
  if (h_s.size() != h_m.size())
    throw std::invalid_argument("response_cls_loss: head count mismatch");
  check_sets_heads(sets, h_s.size(), "response_cls_loss");
  for (std::size_t head = 0; head < h_s.size(); ++head)
    if (h_s[head].shape() != h_m[head].shape())
      throw std::invalid_argument("response_cls_loss: heatmap shape mismatch");

  std::vector<const std::vector<std::int64_t>*> tp_cells, err_cells;
  std::vector<std::vector<std::int64_t>> merged(h_s.size());
  for (std::size_t head = 0; head < h_s.size(); ++head) {
    tp_cells.push_back(&sets.tp[head]);
    merged[head].reserve(sets.fp[head].size() + sets.fn[head].size());
    std::merge(sets.fp[head].begin(), sets.fp[head].end(), sets.fn[head].begin(),
               sets.fn[head].end(), std::back_inserter(merged[head]));
    err_cells.push_back(&merged[head]);
  }

  Tensor loss = Tensor::scalar(0.0);
  const auto tp = class_mean_term(h_s, h_m, tp_cells);
  if (tp.samples > 0)
    loss = add(loss, scale(tp.sum, cfg.w_r1 / static_cast<double>(tp.samples)));
  const auto err = class_mean_term(h_s, h_m, err_cells);
  if (err.samples > 0)
    loss = add(loss, scale(err.sum, cfg.w_r2 / static_cast<double>(err.samples)));
  return loss;
}

Tensor response_reg_loss(const Tensor& reg_s, const Tensor& reg_m, const CrucialSets& sets,
                         const DistillConfig& cfg) {
  if (reg_s.shape() != reg_m.shape())
    throw std::invalid_argument("response_reg_loss: regression shape mismatch");
  if (reg_s.dim(0) != 10)
    throw std::invalid_argument("response_reg_loss: expected 10 attribute rows");
  const auto cells = reg_s.dim(1);

  // Samples are (head, cell) pairs over TP and FN; FP cells carry no object.
  std::vector<std::int64_t> idx;
  std::vector<double> wt;
  std::int64_t samples = 0;
  const auto take = [&](const std::vector<std::int64_t>& list) {
    for (const auto cell : list) {
      if (cell < 0 || cell >= cells)
        throw std::invalid_argument("response_reg_loss: crucial cell out of range");
      for (std::int64_t e = 0; e < 10; ++e) {
        idx.push_back(e * cells + cell);
        wt.push_back(cfg.w_attr[static_cast<std::size_t>(e)]);
      }
      ++samples;
    }
  };
  if (sets.fn.size() != sets.tp.size())
    throw std::invalid_argument("response_reg_loss: ragged crucial sets");
  for (std::size_t head = 0; head < sets.tp.size(); ++head) {
    take(sets.tp[head]);
    take(sets.fn[head]);
  }
  if (samples == 0) return Tensor::scalar(0.0);

  const Tensor pred = gather(reg_s, idx);
  const Tensor want = gather(reg_m, std::move(idx));
  const auto n_wt = static_cast<std::int64_t>(wt.size());
  const Tensor weights = Tensor::from_data({n_wt}, std::move(wt));
  return scale(sum(mul(smooth_l1(pred, want), weights)),
               1.0 / static_cast<double>(samples));
}

namespace {

Tensor channel_mean_rows_term(const Tensor& fv_s, const Tensor& fv_m,
                              const std::vector<std::int64_t>& rows, double weight) {
  const auto c = fv_s.dim(1);
  const Tensor pred = gather_rows(fv_s, rows);
  const Tensor want = gather_rows(fv_m, rows);
  return scale(sum(smooth_l1(pred, want)),
               weight / (static_cast<double>(rows.size()) * static_cast<double>(c)));
}

}  // namespace

Tensor voxel_feature_loss(const Tensor& fv_s, const Tensor& fv_m,
                          const CrucialVoxelSets& vsets, const DistillConfig& cfg) {
  if (fv_s.shape() != fv_m.shape())
    throw std::invalid_argument(
        "voxel_feature_loss: feature shape mismatch (adaptation output must match the "
        "teacher width)");
  Tensor loss = Tensor::scalar(0.0);
  if (!vsets.tp_v.empty())
    loss = add(loss, channel_mean_rows_term(fv_s, fv_m, vsets.tp_v, cfg.w_v1));
  std::vector<std::int64_t> err;
  err.reserve(vsets.fp_v.size() + vsets.fn_v.size());
  std::merge(vsets.fp_v.begin(), vsets.fp_v.end(), vsets.fn_v.begin(), vsets.fn_v.end(),
             std::back_inserter(err));
  if (!err.empty()) loss = add(loss, channel_mean_rows_term(fv_s, fv_m, err, cfg.w_v2));
  return loss;
}

namespace {

Tensor relation_gap(const Tensor& rows_s, const Tensor& rows_m) {
  const Tensor ns = normalize_rows(rows_s);
  const Tensor nm = normalize_rows(rows_m);
  const Tensor r_s = matmul_nt(ns, ns);
  const Tensor r_m = matmul_nt(nm, nm);
  const auto n = static_cast<double>(rows_s.dim(0));
  return scale(sum(square(sub(r_s, r_m))), 1.0 / (n * n));
}

}  // namespace

Tensor voxel_relation_loss(const Tensor& fv_s, const Tensor& fv_m,
                           const CrucialVoxelSets& vsets, const DistillConfig& cfg) {
  (void)cfg;
  if (fv_s.dim(0) != fv_m.dim(0))
    throw std::invalid_argument("voxel_relation_loss: voxel count mismatch");
  // All crucial voxels participate, regardless of their set.
  std::vector<std::int64_t> rows;
  rows.reserve(vsets.tp_v.size() + vsets.fp_v.size() + vsets.fn_v.size());
  rows.insert(rows.end(), vsets.tp_v.begin(), vsets.tp_v.end());
  rows.insert(rows.end(), vsets.fp_v.begin(), vsets.fp_v.end());
  rows.insert(rows.end(), vsets.fn_v.begin(), vsets.fn_v.end());
  std::sort(rows.begin(), rows.end());
  if (rows.empty()) return Tensor::scalar(0.0);
  return relation_gap(gather_rows(fv_s, rows), gather_rows(fv_m, rows));
}

std::pair<Tensor, Tensor> point_losses(const SparseVoxelGrid& grid_s,
                                       const SparseVoxelGrid& grid_m, const Scene& scene,
                                       const GridSpec& spec, const DistillConfig& cfg,
                                       std::uint64_t seed) {
  cfg.validate();
  if (grid_s.width() != grid_m.width())
    throw std::invalid_argument(
        "point_losses: feature width mismatch (adaptation output must match the teacher "
        "width)");

  std::vector<double> queries;
  for (std::int64_t i = 0; i < scene.num_points(); ++i) {
    if (scene.point_to_box[static_cast<std::size_t>(i)] < 0) continue;
    queries.push_back(scene.points[3 * i]);
    queries.push_back(scene.points[3 * i + 1]);
    queries.push_back(scene.points[3 * i + 2]);
  }
  const auto m = static_cast<std::int64_t>(queries.size() / 3);
  if (m == 0) return {Tensor::scalar(0.0), Tensor::scalar(0.0)};

  constexpr int kNeighbors = 3;
  const Tensor f_s = interpolate_to_points(grid_s, queries, spec, kNeighbors);
  const Tensor f_m = interpolate_to_points(grid_m, queries, spec, kNeighbors);
  const auto c = static_cast<double>(f_s.dim(1));
  const Tensor l_fea =
      scale(sum(smooth_l1(f_s, f_m)), cfg.w_pf / (static_cast<double>(m) * c));

  Rng rng(seed);
  std::vector<std::int64_t> chosen;
  if (m <= cfg.point_cap) {
    chosen.resize(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) chosen[static_cast<std::size_t>(i)] = i;
  } else {
    chosen = rng.sample_without_replacement(m, cfg.point_cap);
  }
  const Tensor l_rel = relation_gap(gather_rows(f_s, chosen), gather_rows(f_m, chosen));
  return {l_fea, l_rel};
}

Tensor instance_loss(const Tensor& bev_s, const Tensor& bev_m,
                     const std::vector<Box3D>& boxes, const GridSpec& spec,
                     const DistillConfig& cfg) {
  cfg.validate();
  spec.validate();
  if (bev_s.shape() != bev_m.shape())
    throw std::invalid_argument("instance_loss: BEV shape mismatch");
  if (boxes.empty()) return Tensor::scalar(0.0);

  const auto bh = spec.bev_h(), bw = spec.bev_w();
  if (bev_s.dim(1) != bh * bw)
    throw std::invalid_argument("instance_loss: BEV extent does not match the grid");
  const double cell_x = spec.voxel_size[0] * spec.bev_stride;
  const double cell_y = spec.voxel_size[1] * spec.bev_stride;

  // Box-frame lattice at fractions (2u+1)/(2g) of length/width, rotated by
  // yaw, expressed in cell units (cell centers at integer coordinates).
  const int g = cfg.roi_grid;
  std::vector<double> pts;
  pts.reserve(boxes.size() * static_cast<std::size_t>(2 * g * g));
  for (const auto& box : boxes) {
    const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
    for (int u = 0; u < g; ++u) {
      const double a = ((2.0 * u + 1.0) / (2.0 * g) - 0.5) * box.l;  // along heading
      for (int v = 0; v < g; ++v) {
        const double b = ((2.0 * v + 1.0) / (2.0 * g) - 0.5) * box.w;  // lateral
        const double x = box.x + cy * a - sy * b;
        const double y = box.y + sy * a + cy * b;
        pts.push_back((x - spec.origin[0]) / cell_x - 0.5);
        pts.push_back((y - spec.origin[1]) / cell_y - 0.5);
      }
    }
  }
  const Tensor f_s = bilinear_gather(bev_s, bh, bw, pts);
  const Tensor f_m = bilinear_gather(bev_m, bh, bw, pts);
  const auto n_boxes = static_cast<double>(boxes.size());
  const auto grid_pts = static_cast<double>(g) * static_cast<double>(g);
  return scale(sum(smooth_l1(f_s, f_m)), cfg.w_I / (n_boxes * grid_pts));
}

std::pair<Tensor, LossBreakdown> total_loss(const DistillTerms& terms,
                                            const DistillConfig& cfg) {
  cfg.validate();
  const auto pick = [](const Tensor& t, bool enabled) {
    return (enabled && t.defined()) ? t : Tensor::scalar(0.0);
  };
  const Tensor l_cls = pick(terms.l_cls, true);
  const Tensor l_reg = pick(terms.l_reg, true);
  const Tensor l_rsp_cls = pick(terms.l_rsp_cls, cfg.enable_rsp);
  const Tensor l_rsp_loc = pick(terms.l_rsp_loc, cfg.enable_rsp);
  const Tensor l_vxl_fea = pick(terms.l_vxl_fea, cfg.enable_vxl);
  const Tensor l_vxl_rel = pick(terms.l_vxl_rel, cfg.enable_vxl);
  const Tensor l_pts_fea = pick(terms.l_pts_fea, cfg.enable_pts);
  const Tensor l_pts_rel = pick(terms.l_pts_rel, cfg.enable_pts);
  const Tensor l_ins = pick(terms.l_ins, cfg.enable_ins);

  Tensor distill = l_rsp_cls;
  for (const Tensor* t : {&l_rsp_loc, &l_vxl_fea, &l_vxl_rel, &l_pts_fea, &l_pts_rel, &l_ins})
    distill = add(distill, *t);
  const Tensor total =
      add(add(l_cls, scale(l_reg, cfg.lambda)), scale(distill, cfg.mu));

  LossBreakdown out;
  out.l_cls = l_cls.item();
  out.l_reg = l_reg.item();
  out.l_rsp_cls = l_rsp_cls.item();
  out.l_rsp_loc = l_rsp_loc.item();
  out.l_vxl_fea = l_vxl_fea.item();
  out.l_vxl_rel = l_vxl_rel.item();
  out.l_pts_fea = l_pts_fea.item();
  out.l_pts_rel = l_pts_rel.item();
  out.l_ins = l_ins.item();
  out.total = total.item();
  return {total, out};
}

}  // namespace kd3d
