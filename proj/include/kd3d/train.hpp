#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kd3d/config.hpp"
#include "kd3d/detector.hpp"
#include "kd3d/distill.hpp"
#include "kd3d/eval.hpp"
#include "kd3d/scene.hpp"

namespace kd3d {

/// Training aborted because a loss stopped being finite.
struct NumericError : std::runtime_error {
  int step;
  explicit NumericError(int s)
      : std::runtime_error("non-finite loss at step " + std::to_string(s)), step(s) {}
};

/// Momentum SGD: v <- momentum*v + g; p <- p - lr*v. Parameters without an
/// accumulated gradient are left untouched.
class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  void step(ParamStore& params);

 private:
  double lr_;
  double momentum_;
  std::map<std::string, std::vector<double>> velocity_;
};

/// Benchmark splits. Scene i is generated from seed i; the eval split
/// continues the seed sequence after the train split.
struct Dataset {
  std::vector<Scene> train;
  std::vector<Scene> eval;
};
Dataset make_dataset(const RunConfig& cfg);

struct StepRecord {
  int step = 0;
  LossBreakdown losses;
};

struct TrainResult {
  ParamStore params;
  std::vector<StepRecord> log;
};

/// Supervised pre-training of the semantics-consuming branch.
TrainResult train_teacher(const RunConfig& cfg, const std::vector<Scene>& scenes);

/// Distillation training: the frozen teacher scores each scene alongside the
/// student, and the four transfer levels join the supervised objective per
/// the enable flags. The result holds the student plus its adaptation layer.
TrainResult train_student(const RunConfig& cfg, const std::vector<Scene>& scenes,
                          const ParamStore& teacher);

/// step,loss_component,value rows for external plotting.
std::string loss_trace_csv(const std::vector<StepRecord>& log);

/// Forward + decode + NMS over scenes, matched against their boxes.
MetricsReport evaluate_detector(const RunConfig& cfg, const ParamStore& params,
                                Modality modality, const std::vector<Scene>& scenes);

struct AblationRow {
  bool rsp = false, vxl = false, pts = false, ins = false;
  double map_lite = 0.0;
  double nds_lite = 0.0;
  std::uint64_t seed = 0;
};

/// One student per flag combination from identical initialization, each
/// scored on the held-out split. The teacher is trained once and shared.
std::vector<AblationRow> run_ablation(const RunConfig& cfg, const Dataset& data,
                                      const std::vector<std::array<bool, 4>>& combos);

std::string ablation_csv(const std::vector<AblationRow>& rows);

/// V,C -> analytical FLOPs rows, exact and in 3-significant-figure form.
std::string flops_report_csv(const std::vector<std::int64_t>& v_list, std::int64_t c);

}  // namespace kd3d
