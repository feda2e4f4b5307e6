#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kd3d/detector.hpp"
#include "kd3d/distill.hpp"
#include "kd3d/eval.hpp"
#include "kd3d/scene.hpp"
#include "kd3d/voxel.hpp"

namespace kd3d {

/// Optimization schedule and benchmark split sizes.
struct TrainConfig {
  int steps = 200;
  double lr = 0.01;
  int batch_scenes = 2;     // scenes averaged into each step
  std::uint64_t seed = 0;
  double momentum = 0.9;
  int train_scenes = 200;   // generation seeds 0..train_scenes-1
  int eval_scenes = 50;     // generation seeds continue after the train split

  void validate() const;
};

/// Decoding and matching parameters for evaluation runs.
struct EvalConfig {
  std::vector<double> thresholds = default_thresholds();
  double nms_iou = 0.2;
  std::int64_t top_n = 64;
  double score_thresh = 0.1;

  void validate() const;
};

/// Everything one run needs. Text format: `[section]` headers with
/// `key = value` lines; `#` starts a comment; unknown sections or keys are
/// errors. Omitted keys keep these defaults.
struct RunConfig {
  SceneConfig scene;
  GridSpec grid;
  HeadSpec heads = HeadSpec::pairs(4);  // consecutive pairs over scene.n_classes
  DetectorArch arch;
  DistillConfig distill;
  TrainConfig train;
  EvalConfig eval;
  std::string out_dir = "out";

  void validate() const;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

/// Full emission of every section and key; parseable by parse_config.
std::string dump_config(const RunConfig& cfg);

}  // namespace kd3d
