#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kd3d/rng.hpp"
#include "kd3d/scene.hpp"
#include "kd3d/tensor.hpp"
#include "kd3d/voxel.hpp"

namespace kd3d {

/// Assignment of class ids to detection heads. Groups must partition
/// [0, n_classes).
struct HeadSpec {
  std::vector<std::vector<int>> groups;

  /// Consecutive pairs: {0,1}, {2,3}, ... (n_classes must be even unless 1).
  static HeadSpec pairs(int n_classes);
  void validate(int n_classes) const;
  std::size_t n_heads() const { return groups.size(); }
};

enum class Modality { student, teacher };

/// Everything the detector exposes for supervision, distillation, and decode.
/// BEV maps are channel-major [C, H*W] with cell index y*W + x.
struct DetectorOutputs {
  SparseVoxelGrid voxel_features;  // per-voxel features after the point MLP
  Tensor bev_features;             // [C, H*W], post-convolution trunk output
  std::vector<Tensor> heatmaps;    // per head [K_head, H*W], sigmoid-activated
  Tensor regression;               // [10, H*W]: x,y,z off; log w,l,h; vx,vy; sin,cos
  std::int64_t h = 0;
  std::int64_t w = 0;
};

/// Network widths. `channels` is both the per-voxel feature width and the BEV
/// trunk width; the voxel-encoder input width is fixed by the scene (4 +
/// n_classes).
struct DetectorArch {
  int channels = 32;
  int n_classes = 4;
  HeadSpec heads = HeadSpec::pairs(4);

  int in_width() const { return 4 + n_classes; }
  void validate() const;
};

/// Named parameter tensors in a stable insertion order, with a versioned
/// binary checkpoint format that round-trips bit-exactly.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  std::vector<Tensor> tensors() const;
  std::int64_t total_elements() const;
  void set_requires_grad(bool on);
  void zero_grad();

  void save(const std::string& path) const;
  static ParamStore load(const std::string& path);

 private:
  std::vector<std::string> order_;
  std::vector<Tensor> values_;
  std::int64_t find(const std::string& name) const;
};

/// Per-row linear + rectifier used to map student features into the teacher's
/// feature space. Applies to [N, C_in] rows, yielding [N, C_out].
struct AdaptationLayer {
  Tensor weight;  // [C_in, C_out]
  Tensor bias;    // [C_out]
  Tensor apply(const Tensor& rows) const;
};

/// Fresh detector parameters, uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
ParamStore init_detector_params(const DetectorArch& arch, std::uint64_t seed);

/// Adds "<prefix>.weight"/"<prefix>.bias" for an adaptation layer and returns
/// a view of them.
AdaptationLayer add_adaptation_layer(ParamStore& params, const std::string& prefix,
                                     int c_in, int c_out, Rng& rng);
AdaptationLayer adaptation_layer(const ParamStore& params, const std::string& prefix);

/// Full pipeline: voxelize (teacher keeps semantic channels, student zeroes
/// them) -> two-layer per-voxel MLP -> column max-collapse to BEV -> two 3x3
/// convolutions -> per-head 1x1 heatmap heads and one shared regression head.
DetectorOutputs forward(const Scene& scene, Modality modality, const ParamStore& params,
                        const GridSpec& spec, const DetectorArch& arch);

/// Ground-truth rendering: per-class Gaussian peaks on the BEV heatmaps and
/// per-attribute regression targets at box-center cells.
struct GtTargets {
  std::vector<Tensor> heatmaps;    // per head [K_head, H*W], constants in [0,1]
  Tensor regression;               // [10, H*W], zero off-mask
  std::vector<std::uint8_t> mask;  // H*W, 1 at box-center cells
  std::int64_t n_skipped = 0;      // boxes whose center fell outside the grid
};

GtTargets make_gt_targets(const Scene& scene, const HeadSpec& heads, const GridSpec& spec);

/// Supervised objective: penalty-reduced focal loss averaged over heads, and
/// mean smooth-L1 over the 10 attributes at masked cells (0 if no positives).
std::pair<Tensor, Tensor> supervised_loss(const DetectorOutputs& out,
                                          const GtTargets& targets);

}  // namespace kd3d
