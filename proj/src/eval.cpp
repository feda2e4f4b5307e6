#include "kd3d/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace kd3d {

std::vector<double> default_thresholds() { return {0.08, 0.16, 0.31, 0.63}; }

std::vector<Detection> decode(const DetectorOutputs& out, const HeadSpec& heads,
                              const GridSpec& spec, std::int64_t top_n,
                              double score_thresh) {
  if (top_n < 1) throw std::invalid_argument("decode: top_n must be positive");
  if (!out.regression.defined())
    throw std::invalid_argument("decode: regression map missing");
  if (out.heatmaps.size() != heads.groups.size())
    throw std::invalid_argument("decode: head count mismatch");
  const auto bh = out.h;
  const auto bw = out.w;
  const auto cells = bh * bw;
  const double cell_x = spec.voxel_size[0] * static_cast<double>(spec.bev_stride);
  const double cell_y = spec.voxel_size[1] * static_cast<double>(spec.bev_stride);
  const auto reg = out.regression.data();

  struct Cand {
    Detection d;
    std::int64_t cell = 0;
  };
  std::vector<Cand> cands;
  for (std::size_t head = 0; head < out.heatmaps.size(); ++head) {
    const auto& group = heads.groups[head];
    if (out.heatmaps[head].dim(0) != static_cast<std::int64_t>(group.size()))
      throw std::invalid_argument("decode: heatmap rows disagree with head classes");
    const auto hm = out.heatmaps[head].data();
    for (std::size_t k = 0; k < group.size(); ++k) {
      const auto base = static_cast<std::int64_t>(k) * cells;
      for (std::int64_t cy = 0; cy < bh; ++cy)
        for (std::int64_t cx = 0; cx < bw; ++cx) {
          const double s = hm[static_cast<std::size_t>(base + cy * bw + cx)];
          if (!(s > score_thresh)) continue;
          bool peak = true;
          for (std::int64_t dy = -1; dy <= 1 && peak; ++dy)
            for (std::int64_t dx = -1; dx <= 1 && peak; ++dx) {
              const auto ny = cy + dy;
              const auto nx = cx + dx;
              if (ny < 0 || ny >= bh || nx < 0 || nx >= bw) continue;
              if (hm[static_cast<std::size_t>(base + ny * bw + nx)] > s) peak = false;
            }
          if (!peak) continue;
          const auto cell = cy * bw + cx;
          Cand c;
          c.cell = cell;
          c.d.head = static_cast<int>(head);
          c.d.score = s;
          c.d.box.class_id = group[k];
          c.d.box.x = spec.origin[0] + (static_cast<double>(cx) + 0.5) * cell_x +
                      reg[static_cast<std::size_t>(0 * cells + cell)];
          c.d.box.y = spec.origin[1] + (static_cast<double>(cy) + 0.5) * cell_y +
                      reg[static_cast<std::size_t>(1 * cells + cell)];
          c.d.box.z = reg[static_cast<std::size_t>(2 * cells + cell)];
          c.d.box.w = std::exp(reg[static_cast<std::size_t>(3 * cells + cell)]);
          c.d.box.l = std::exp(reg[static_cast<std::size_t>(4 * cells + cell)]);
          c.d.box.h = std::exp(reg[static_cast<std::size_t>(5 * cells + cell)]);
          c.d.box.vx = reg[static_cast<std::size_t>(6 * cells + cell)];
          c.d.box.vy = reg[static_cast<std::size_t>(7 * cells + cell)];
          c.d.box.yaw = std::atan2(reg[static_cast<std::size_t>(8 * cells + cell)],
                                   reg[static_cast<std::size_t>(9 * cells + cell)]);
          cands.push_back(std::move(c));
        }
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.d.score != b.d.score) return a.d.score > b.d.score;
    if (a.d.box.class_id != b.d.box.class_id) return a.d.box.class_id < b.d.box.class_id;
    return a.cell < b.cell;
  });
  if (static_cast<std::int64_t>(cands.size()) > top_n)
    cands.resize(static_cast<std::size_t>(top_n));
  std::vector<Detection> dets;
  dets.reserve(cands.size());
  for (auto& c : cands) dets.push_back(std::move(c.d));
  return dets;
}

namespace {

struct P2 {
  double x = 0.0, y = 0.0;
};

// Ground-plane corners, counter-clockwise; length runs along the heading.
std::array<P2, 4> box_corners(const Box3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.l, hw = 0.5 * b.w;
  const double ax[4] = {hl, hl, -hl, -hl};
  const double ay[4] = {-hw, hw, hw, -hw};
  std::array<P2, 4> out;
  for (int i = 0; i < 4; ++i)
    out[i] = {b.x + c * ax[i] - s * ay[i], b.y + s * ax[i] + c * ay[i]};
  return out;
}

double polygon_area(const std::vector<P2>& p) {
  double twice = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& a = p[i];
    const auto& b = p[(i + 1) % p.size()];
    twice += a.x * b.y - b.x * a.y;
  }
  return 0.5 * std::abs(twice);
}

P2 line_intersection(P2 p, P2 q, P2 a, P2 b) {
  const double a1 = q.y - p.y, b1 = p.x - q.x, c1 = a1 * p.x + b1 * p.y;
  const double a2 = b.y - a.y, b2 = a.x - b.x, c2 = a2 * a.x + b2 * a.y;
  const double det = a1 * b2 - a2 * b1;
  return {(b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det};
}

// Keep the part of a convex polygon on the left of the directed edge a->b.
std::vector<P2> clip_edge(const std::vector<P2>& poly, P2 a, P2 b) {
  const auto side = [&](const P2& p) {
    return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
  };
  std::vector<P2> out;
  out.reserve(poly.size() + 1);
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const P2& cur = poly[i];
    const P2& prev = poly[(i + poly.size() - 1) % poly.size()];
    const double sc = side(cur), sp = side(prev);
    if (sc >= 0.0) {
      if (sp < 0.0) out.push_back(line_intersection(prev, cur, a, b));
      out.push_back(cur);
    } else if (sp >= 0.0) {
      out.push_back(line_intersection(prev, cur, a, b));
    }
  }
  return out;
}

}  // namespace

double rotated_iou_bev(const Box3D& a, const Box3D& b) {
  const auto ca = box_corners(a);
  const auto cb = box_corners(b);
  std::vector<P2> poly(ca.begin(), ca.end());
  for (int e = 0; e < 4 && !poly.empty(); ++e)
    poly = clip_edge(poly, cb[static_cast<std::size_t>(e)],
                     cb[static_cast<std::size_t>((e + 1) % 4)]);
  const double inter = poly.size() >= 3 ? polygon_area(poly) : 0.0;
  const double uni = a.w * a.l + b.w * b.l - inter;
  if (!(uni > 0.0)) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0))
    throw std::invalid_argument("nms: iou_thresh must lie in (0,1)");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });
  std::vector<Detection> kept;
  for (const auto i : order) {
    bool survive = true;
    for (const auto& k : kept)
      if (rotated_iou_bev(dets[i].box, k.box) > iou_thresh) {
        survive = false;
        break;
      }
    if (survive) kept.push_back(dets[i]);
  }
  return kept;
}

namespace {

// Mean of the precision envelope sampled at 101 recall levels.
double ap_101(const std::vector<char>& is_tp, std::int64_t n_gt) {
  if (n_gt <= 0 || is_tp.empty()) return 0.0;
  std::vector<double> prec(is_tp.size()), rec(is_tp.size());
  std::int64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < is_tp.size(); ++i) {
    (is_tp[i] ? tp : fp) += 1;
    prec[i] = static_cast<double>(tp) / static_cast<double>(tp + fp);
    rec[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }
  std::vector<double> env(prec.size());
  double best = 0.0;
  for (std::size_t i = prec.size(); i-- > 0;) {
    best = std::max(best, prec[i]);
    env[i] = best;
  }
  double sum = 0.0;
  for (int j = 0; j <= 100; ++j) {
    const double r = static_cast<double>(j) / 100.0;
    const auto it = std::lower_bound(rec.begin(), rec.end(), r);
    if (it != rec.end()) sum += env[static_cast<std::size_t>(it - rec.begin())];
  }
  return sum / 101.0;
}

double wrapped_yaw_diff(double a, double b) {
  double d = std::fmod(a - b, 2.0 * std::numbers::pi);
  if (d > std::numbers::pi) d -= 2.0 * std::numbers::pi;
  if (d < -std::numbers::pi) d += 2.0 * std::numbers::pi;
  return std::abs(d);
}

// IoU of the two extent triples as co-centered axis-aligned boxes.
double aligned_extent_iou(const Box3D& a, const Box3D& b) {
  const double inter =
      std::min(a.w, b.w) * std::min(a.l, b.l) * std::min(a.h, b.h);
  const double uni = a.w * a.l * a.h + b.w * b.l * b.h - inter;
  if (!(uni > 0.0)) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

}  // namespace

MetricsReport evaluate(const std::vector<std::vector<Detection>>& preds,
                       const std::vector<std::vector<Box3D>>& gts,
                       std::vector<double> thresholds) {
  if (preds.size() != gts.size())
    throw std::invalid_argument("evaluate: prediction/ground-truth scene count mismatch");
  if (thresholds.empty()) throw std::invalid_argument("evaluate: no thresholds");
  for (std::size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] > thresholds[i - 1]))
      throw std::invalid_argument("evaluate: thresholds must be strictly ascending");

  MetricsReport rep;
  rep.thresholds = thresholds;

  std::map<int, std::int64_t> n_gt;
  for (const auto& scene : gts)
    for (const auto& b : scene) ++n_gt[b.class_id];

  struct Ranked {
    double score = 0.0;
    std::size_t scene = 0;
    std::size_t idx = 0;
  };
  std::map<int, std::vector<Ranked>> by_class;
  for (std::size_t s = 0; s < preds.size(); ++s)
    for (std::size_t i = 0; i < preds[s].size(); ++i)
      by_class[preds[s][i].box.class_id].push_back({preds[s][i].score, s, i});
  for (auto& [cls, list] : by_class)
    std::sort(list.begin(), list.end(), [](const Ranked& a, const Ranked& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.scene != b.scene) return a.scene < b.scene;
      return a.idx < b.idx;
    });

  const std::size_t ref_ti =
      thresholds.size() >= 2 ? thresholds.size() - 2 : thresholds.size() - 1;
  double ap_sum = 0.0;
  std::int64_t ap_n = 0;
  double tr_sum = 0.0, sc_sum = 0.0, or_sum = 0.0;
  std::int64_t matches = 0;

  // Classes with no ground truth anywhere are left out of the mean.
  for (const auto& [cls, total] : n_gt) {
    const auto& list = by_class[cls];
    auto& aps = rep.ap[cls];
    aps.assign(thresholds.size(), 0.0);
    for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
      const double t = thresholds[ti];
      std::vector<std::vector<char>> used(gts.size());
      for (std::size_t s = 0; s < gts.size(); ++s) used[s].assign(gts[s].size(), 0);
      std::vector<char> is_tp(list.size(), 0);
      for (std::size_t p = 0; p < list.size(); ++p) {
        const auto& det = preds[list[p].scene][list[p].idx];
        const auto& scene_gt = gts[list[p].scene];
        std::size_t best = scene_gt.size();
        double best_d = t;  // distance exactly at the threshold still matches
        for (std::size_t g = 0; g < scene_gt.size(); ++g) {
          if (scene_gt[g].class_id != cls || used[list[p].scene][g]) continue;
          const double dx = det.box.x - scene_gt[g].x;
          const double dy = det.box.y - scene_gt[g].y;
          const double d = std::hypot(dx, dy);
          if (d > best_d) continue;
          if (best != scene_gt.size() && d == best_d) continue;  // earlier index keeps ties
          best = g;
          best_d = d;
        }
        if (best == scene_gt.size()) continue;
        is_tp[p] = 1;
        used[list[p].scene][best] = 1;
        if (ti == ref_ti) {
          const auto& g = scene_gt[best];
          tr_sum += best_d;
          sc_sum += 1.0 - aligned_extent_iou(det.box, g);
          or_sum += wrapped_yaw_diff(det.box.yaw, g.yaw);
          ++matches;
        }
      }
      aps[ti] = ap_101(is_tp, total);
      ap_sum += aps[ti];
      ++ap_n;
    }
  }

  rep.map_lite = ap_n > 0 ? ap_sum / static_cast<double>(ap_n) : 0.0;
  if (matches > 0) {
    rep.translation_err = tr_sum / static_cast<double>(matches);
    rep.scale_err = sc_sum / static_cast<double>(matches);
    rep.orientation_err = or_sum / static_cast<double>(matches);
  } else {
    rep.translation_err = thresholds.back();
    rep.scale_err = 1.0;
    rep.orientation_err = std::numbers::pi;
  }
  const double tn = std::min(1.0, rep.translation_err / thresholds.back());
  const double sn = std::clamp(rep.scale_err, 0.0, 1.0);
  const double on = std::min(1.0, rep.orientation_err / std::numbers::pi);
  rep.nds_lite = 0.5 * rep.map_lite + 0.5 * (1.0 - (tn + sn + on) / 3.0);
  return rep;
}

FlopsCount flops_voxel_distill(std::int64_t v, std::int64_t c, bool with_relation) {
  if (v < 0) throw std::invalid_argument("flops_voxel_distill: V must be nonnegative");
  if (c < 1) throw std::invalid_argument("flops_voxel_distill: C must be positive");
  FlopsCount f;
  f.cons = v * c;
  f.rel = with_relation ? 6 * c * v * v : 0;
  return f;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["thresholds"] = thresholds;
  auto apj = nlohmann::ordered_json::object();
  for (const auto& [cls, v] : ap) apj[std::to_string(cls)] = v;
  j["ap"] = apj;
  j["map_lite"] = map_lite;
  auto tpj = nlohmann::ordered_json::object();
  tpj["translation"] = translation_err;
  tpj["scale"] = scale_err;
  tpj["orientation"] = orientation_err;
  j["tp_errors"] = tpj;
  j["nds_lite"] = nds_lite;
  return j.dump(2) + "\n";
}

std::string MetricsReport::to_csv() const {
  // Shortest round-trip number text, so 0.08 prints as "0.08".
  const auto fmt = [](double v) { return nlohmann::json(v).dump(); };
  std::ostringstream os;
  os << "metric,class,threshold,value\n";
  os << "map_lite,,," << fmt(map_lite) << "\n";
  os << "nds_lite,,," << fmt(nds_lite) << "\n";
  os << "translation_err,,," << fmt(translation_err) << "\n";
  os << "scale_err,,," << fmt(scale_err) << "\n";
  os << "orientation_err,,," << fmt(orientation_err) << "\n";
  for (const auto& [cls, v] : ap)
    for (std::size_t ti = 0; ti < v.size(); ++ti)
      os << "ap," << cls << "," << fmt(thresholds[ti]) << "," << fmt(v[ti]) << "\n";
  return os.str();
}

}  // namespace kd3d
