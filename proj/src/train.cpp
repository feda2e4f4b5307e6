#include "kd3d/train.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <sstream>

#include "json.hpp"
#include "kd3d/rng.hpp"
#include "kd3d/voxel.hpp"

namespace kd3d {

void SgdOptimizer::step(ParamStore& params) {
  for (const auto& name : params.names()) {
    auto& p = params.at(name);
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto& v = velocity_[name];
    if (v.empty()) v.assign(g.size(), 0.0);
    auto raw = p.raw();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      raw[i] -= lr_ * v[i];
    }
  }
}

Dataset make_dataset(const RunConfig& cfg) {
  Dataset data;
  data.train.resize(static_cast<std::size_t>(cfg.train.train_scenes));
  data.eval.resize(static_cast<std::size_t>(cfg.train.eval_scenes));
  std::exception_ptr err = nullptr;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < cfg.train.train_scenes + cfg.train.eval_scenes; ++i) {
    try {
      auto scene = generate_scene(cfg.scene, static_cast<std::uint64_t>(i));
      if (i < cfg.train.train_scenes)
        data.train[static_cast<std::size_t>(i)] = std::move(scene);
      else
        data.eval[static_cast<std::size_t>(i - cfg.train.train_scenes)] =
            std::move(scene);
    } catch (...) {
#pragma omp critical
      err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return data;
}

namespace {

void accumulate(LossBreakdown& into, const LossBreakdown& bd, double w) {
  into.l_cls += w * bd.l_cls;
  into.l_reg += w * bd.l_reg;
  into.l_rsp_cls += w * bd.l_rsp_cls;
  into.l_rsp_loc += w * bd.l_rsp_loc;
  into.l_vxl_fea += w * bd.l_vxl_fea;
  into.l_vxl_rel += w * bd.l_vxl_rel;
  into.l_pts_fea += w * bd.l_pts_fea;
  into.l_pts_rel += w * bd.l_pts_rel;
  into.l_ins += w * bd.l_ins;
  into.total += w * bd.total;
}

// The teacher's width can differ from the student's; everything else must
// line up with the run configuration.
DetectorArch teacher_arch_for(const RunConfig& cfg, const ParamStore& teacher) {
  DetectorArch arch = cfg.arch;
  if (!teacher.has("mlp1.weight"))
    throw std::invalid_argument("teacher parameters lack mlp1.weight");
  const auto& w1 = teacher.at("mlp1.weight");
  if (w1.dim(0) != arch.in_width())
    throw std::invalid_argument("teacher input width disagrees with the configuration");
  arch.channels = static_cast<int>(w1.dim(1));
  for (std::size_t h = 0; h < cfg.heads.groups.size(); ++h) {
    const auto name = "head" + std::to_string(h) + ".cls.weight";
    if (!teacher.has(name))
      throw std::invalid_argument("teacher parameters lack " + name);
    if (teacher.at(name).dim(0) !=
        static_cast<std::int64_t>(cfg.heads.groups[h].size()))
      throw std::invalid_argument("teacher head sizes disagree with the configuration");
  }
  if (!teacher.has("reg.weight") || teacher.at("reg.weight").dim(1) != arch.channels)
    throw std::invalid_argument("teacher regression head is malformed");
  return arch;
}

}  // namespace

TrainResult train_teacher(const RunConfig& cfg, const std::vector<Scene>& scenes) {
  if (scenes.empty()) throw std::invalid_argument("train_teacher: no scenes");
  auto params = init_detector_params(cfg.arch, cfg.train.seed);
  params.set_requires_grad(true);
  SgdOptimizer opt(cfg.train.lr, cfg.train.momentum);
  TrainResult res;
  const auto n = scenes.size();
  const double inv_batch = 1.0 / static_cast<double>(cfg.train.batch_scenes);
  for (int step = 0; step < cfg.train.steps; ++step) {
    params.zero_grad();
    LossBreakdown bd{};
    for (int b = 0; b < cfg.train.batch_scenes; ++b) {
      const auto si = static_cast<std::size_t>(
                          step * static_cast<std::int64_t>(cfg.train.batch_scenes) + b) %
                      n;
      const auto out = forward(scenes[si], Modality::teacher, params, cfg.grid, cfg.arch);
      const auto targets = make_gt_targets(scenes[si], cfg.heads, cfg.grid);
      const auto [l_cls, l_reg] = supervised_loss(out, targets);
      const auto loss =
          scale(add(l_cls, scale(l_reg, cfg.distill.lambda)), inv_batch);
      if (!std::isfinite(loss.item())) throw NumericError(step);
      backward(loss);
      LossBreakdown one{};
      one.l_cls = l_cls.item();
      one.l_reg = l_reg.item();
      one.total = one.l_cls + cfg.distill.lambda * one.l_reg;
      accumulate(bd, one, inv_batch);
    }
    opt.step(params);
    res.log.push_back({step, bd});
  }
  res.params = std::move(params);
  return res;
}

TrainResult train_student(const RunConfig& cfg, const std::vector<Scene>& scenes,
                          const ParamStore& teacher) {
  if (scenes.empty()) throw std::invalid_argument("train_student: no scenes");
  const auto t_arch = teacher_arch_for(cfg, teacher);
  const bool any_distill = cfg.distill.enable_rsp || cfg.distill.enable_vxl ||
                           cfg.distill.enable_pts || cfg.distill.enable_ins;

  auto params = init_detector_params(cfg.arch, cfg.train.seed);
  {
    Rng rng(cfg.train.seed ^ 0x9e3779b97f4a7c15ULL);
    auto adapt =
        add_adaptation_layer(params, "adapt", cfg.arch.channels, t_arch.channels, rng);
    if (cfg.arch.channels == t_arch.channels) {
      // Identity start: rectified features pass through unchanged, so equal
      // widths begin at the self-distillation fixed point.
      auto w = adapt.weight.raw();
      std::fill(w.begin(), w.end(), 0.0);
      for (int i = 0; i < cfg.arch.channels; ++i)
        w[static_cast<std::size_t>(i * cfg.arch.channels + i)] = 1.0;
      auto b = adapt.bias.raw();
      std::fill(b.begin(), b.end(), 0.0);
    }
  }
  params.set_requires_grad(true);

  SgdOptimizer opt(cfg.train.lr, cfg.train.momentum);
  TrainResult res;
  const auto n = scenes.size();
  const double inv_batch = 1.0 / static_cast<double>(cfg.train.batch_scenes);
  for (int step = 0; step < cfg.train.steps; ++step) {
    params.zero_grad();
    LossBreakdown bd{};
    for (int b = 0; b < cfg.train.batch_scenes; ++b) {
      const auto si = static_cast<std::size_t>(
                          step * static_cast<std::int64_t>(cfg.train.batch_scenes) + b) %
                      n;
      const auto& scene = scenes[si];
      const auto targets = make_gt_targets(scene, cfg.heads, cfg.grid);
      const auto student = forward(scene, Modality::student, params, cfg.grid, cfg.arch);
      DistillTerms terms;
      std::tie(terms.l_cls, terms.l_reg) = supervised_loss(student, targets);
      if (any_distill) {
        const auto teacher_out =
            forward(scene, Modality::teacher, teacher, cfg.grid, t_arch);
        const auto sets =
            mine_crucial_responses(student.heatmaps, targets.heatmaps, cfg.distill.tau);
        if (cfg.distill.enable_rsp) {
          terms.l_rsp_cls = response_cls_loss(student.heatmaps, teacher_out.heatmaps,
                                              sets, cfg.distill);
          terms.l_rsp_loc = response_reg_loss(student.regression, teacher_out.regression,
                                              sets, cfg.distill);
        }
        if (cfg.distill.enable_vxl || cfg.distill.enable_pts) {
          const auto adapt = adaptation_layer(params, "adapt");
          const auto adapted = adapt.apply(student.voxel_features.features);
          if (cfg.distill.enable_vxl) {
            const auto vsets =
                mine_crucial_voxels(sets, student.voxel_features, cfg.grid);
            terms.l_vxl_fea = voxel_feature_loss(
                adapted, teacher_out.voxel_features.features, vsets, cfg.distill);
            terms.l_vxl_rel =
                voxel_relation_loss(student.voxel_features.features,
                                    teacher_out.voxel_features.features, vsets,
                                    cfg.distill);
          }
          if (cfg.distill.enable_pts) {
            auto adapted_grid = student.voxel_features;
            adapted_grid.features = adapted;
            std::tie(terms.l_pts_fea, terms.l_pts_rel) = point_losses(
                adapted_grid, teacher_out.voxel_features, scene, cfg.grid, cfg.distill,
                cfg.train.seed ^ static_cast<std::uint64_t>(si));
          }
        }
        if (cfg.distill.enable_ins) {
          const auto dets = decode(teacher_out, cfg.heads, cfg.grid, cfg.eval.top_n,
                                   cfg.eval.score_thresh);
          const auto kept = nms(dets, cfg.distill.nms_iou);
          std::vector<Box3D> boxes;
          boxes.reserve(kept.size());
          for (const auto& d : kept) boxes.push_back(d.box);
          terms.l_ins = instance_loss(student.bev_features, teacher_out.bev_features,
                                      boxes, cfg.grid, cfg.distill);
        }
      }
      const auto [total, one] = total_loss(terms, cfg.distill);
      const auto loss = scale(total, inv_batch);
      if (!std::isfinite(loss.item())) throw NumericError(step);
      backward(loss);
      accumulate(bd, one, inv_batch);
    }
    opt.step(params);
    res.log.push_back({step, bd});
  }
  res.params = std::move(params);
  return res;
}

std::string loss_trace_csv(const std::vector<StepRecord>& log) {
  const auto fmt = [](double v) { return nlohmann::json(v).dump(); };
  std::ostringstream os;
  os << "step,loss_component,value\n";
  for (const auto& rec : log) {
    const std::pair<const char*, double> rows[] = {
        {"total", rec.losses.total},         {"l_cls", rec.losses.l_cls},
        {"l_reg", rec.losses.l_reg},         {"l_rsp_cls", rec.losses.l_rsp_cls},
        {"l_rsp_loc", rec.losses.l_rsp_loc}, {"l_vxl_fea", rec.losses.l_vxl_fea},
        {"l_vxl_rel", rec.losses.l_vxl_rel}, {"l_pts_fea", rec.losses.l_pts_fea},
        {"l_pts_rel", rec.losses.l_pts_rel}, {"l_ins", rec.losses.l_ins},
    };
    for (const auto& [name, value] : rows)
      os << rec.step << "," << name << "," << fmt(value) << "\n";
  }
  return os.str();
}

MetricsReport evaluate_detector(const RunConfig& cfg, const ParamStore& params,
                                Modality modality, const std::vector<Scene>& scenes) {
  DetectorArch arch = cfg.arch;
  if (params.has("mlp1.weight"))
    arch.channels = static_cast<int>(params.at("mlp1.weight").dim(1));
  std::vector<std::vector<Detection>> preds(scenes.size());
  std::vector<std::vector<Box3D>> gts(scenes.size());
  std::exception_ptr err = nullptr;
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(scenes.size()); ++i) {
    try {
      const auto& scene = scenes[static_cast<std::size_t>(i)];
      const auto out = forward(scene, modality, params, cfg.grid, arch);
      const auto dets =
          decode(out, cfg.heads, cfg.grid, cfg.eval.top_n, cfg.eval.score_thresh);
      preds[static_cast<std::size_t>(i)] = nms(dets, cfg.eval.nms_iou);
      gts[static_cast<std::size_t>(i)] = scene.boxes;
    } catch (...) {
#pragma omp critical
      err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return evaluate(preds, gts, cfg.eval.thresholds);
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const Dataset& data,
                                      const std::vector<std::array<bool, 4>>& combos) {
  if (combos.empty()) throw std::invalid_argument("run_ablation: no combinations");
  const auto teacher = train_teacher(cfg, data.train);
  std::vector<AblationRow> rows;
  rows.reserve(combos.size());
  for (const auto& combo : combos) {
    RunConfig c = cfg;
    c.distill.enable_rsp = combo[0];
    c.distill.enable_vxl = combo[1];
    c.distill.enable_pts = combo[2];
    c.distill.enable_ins = combo[3];
    const auto student = train_student(c, data.train, teacher.params);
    const auto rep = evaluate_detector(c, student.params, Modality::student, data.eval);
    AblationRow row;
    row.rsp = combo[0];
    row.vxl = combo[1];
    row.pts = combo[2];
    row.ins = combo[3];
    row.map_lite = rep.map_lite;
    row.nds_lite = rep.nds_lite;
    row.seed = cfg.train.seed;
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  const auto fmt = [](double v) { return nlohmann::json(v).dump(); };
  std::ostringstream os;
  os << "rsp,vxl,pts,ins,map_lite,nds_lite,seed\n";
  for (const auto& r : rows)
    os << (r.rsp ? 1 : 0) << "," << (r.vxl ? 1 : 0) << "," << (r.pts ? 1 : 0) << ","
       << (r.ins ? 1 : 0) << "," << fmt(r.map_lite) << "," << fmt(r.nds_lite) << ","
       << r.seed << "\n";
  return os.str();
}

std::string flops_report_csv(const std::vector<std::int64_t>& v_list, std::int64_t c) {
  std::ostringstream os;
  os << "V,C,flops_cons,flops_rel,flops_cons_sci,flops_rel_sci\n";
  for (const auto v : v_list) {
    const auto f = flops_voxel_distill(v, c, true);
    char cons_sci[32], rel_sci[32];
    std::snprintf(cons_sci, sizeof cons_sci, "%.2e", static_cast<double>(f.cons));
    std::snprintf(rel_sci, sizeof rel_sci, "%.2e", static_cast<double>(f.rel));
    os << v << "," << c << "," << f.cons << "," << f.rel << "," << cons_sci << ","
       << rel_sci << "\n";
  }
  return os.str();
}

}  // namespace kd3d
