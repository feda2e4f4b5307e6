#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kd3d {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);

/// One node of the dynamic autodiff graph. The tape is the DAG itself: each
/// non-leaf node carries a closure that propagates its grad buffer into its
/// parents. A graph is confined to one thread; distinct graphs may live on
/// distinct threads.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, writes parents' grads
  const char* op = "leaf";

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
  void accumulate(const double* g, std::int64_t n);
};

/// Dense f64 tensor participating in reverse-mode autodiff. Value semantics:
/// copying a Tensor copies the handle, not the buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  std::int64_t dim(int i) const { return node_->shape.at(i); }

  std::span<const double> data() const { return node_->value; }
  /// Mutable access to a leaf's buffer (parameter init / in-place updates).
  std::span<double> raw() {
    if (!node_->parents.empty())
      throw std::logic_error("Tensor::raw: only leaf buffers are mutable");
    return node_->value;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) {
    if (!node_->parents.empty())
      throw std::logic_error("set_requires_grad: only valid on leaves");
    node_->requires_grad = v;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const {
    if (node_->grad.empty()) throw std::logic_error("Tensor::grad: no gradient present");
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy, cut loose from the graph. Never requires grad.
  Tensor detach() const;

  double item() const {
    if (numel() != 1) throw std::logic_error("Tensor::item: tensor is not scalar");
    return node_->value[0];
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse pass from a scalar loss. Gradients ACCUMULATE into every
/// requires-grad leaf reachable from `loss`; repeated calls without zeroing
/// add up.
void backward(const Tensor& loss);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp_elem(const Tensor& a);
Tensor log_elem(const Tensor& a);  // input must stay positive

/// Elementwise smooth-L1 with transition point beta:
/// 0.5*d^2/beta for |d| < beta, |d| - 0.5*beta otherwise, d = pred - target.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta = 1.0);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reduce_max(const Tensor& a);  // subgradient to the first argmax

// ---- linear algebra (kernel-backed) ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T
Tensor add_rowvec(const Tensor& a, const Tensor& v); // a[r,c] + v[c] per row
Tensor add_colvec(const Tensor& a, const Tensor& v); // a[r,c] + v[r] per col
Tensor transpose(const Tensor& a);                   // [r,c] -> [c,r]

// ---- structure ----
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor gather(const Tensor& a, std::vector<std::int64_t> flat_idx);       // -> [n]
Tensor gather_rows(const Tensor& a, std::vector<std::int64_t> rows);      // 2-D -> [n,c]
/// out[i] = sum_j w[i][j] * a[idx[i][j]], idx/w are [m x kn] row-major.
Tensor weighted_gather_rows(const Tensor& a, std::vector<std::int64_t> idx,
                            std::vector<double> w, std::int64_t kn);

/// Column-wise max of the rows of a [r,c] tensor grouped by segment id;
/// seg[i] in [0, n_seg) assigns row i. Output [n_seg, c]; empty segments
/// yield 0. The subgradient routes to the lowest-index row attaining each
/// max.
Tensor segment_max(const Tensor& a, const std::vector<std::int64_t>& seg,
                   std::int64_t n_seg);

/// Row-wise L2 normalization with a clamped denominator max(|row|, eps).
/// Rows with |row| < eps normalize to zero and receive zero gradient.
Tensor normalize_rows(const Tensor& a, double eps = 1e-12);

/// Cosine similarity of two equal-length 1-D tensors. If either norm is
/// below eps the result is 0 with zero gradient (dead-feature rule).
Tensor cosine_sim(const Tensor& a, const Tensor& b, double eps = 1e-12);

/// Penalty-reduced focal loss on a post-sigmoid heatmap vs a Gaussian target,
/// normalized by max(1, #cells with target == 1).
Tensor focal_loss(const Tensor& pred, const Tensor& target, double alpha = 2.0,
                  double beta = 4.0);

/// 3x3 same-padding convolution. in is [ci, h*w] channel-major, w is
/// [co, ci*9], b is [co]. Output [co, h*w].
Tensor conv3x3(const Tensor& in, const Tensor& w, const Tensor& b, std::int64_t h,
               std::int64_t wd);

/// Bilinear sample of a channel-major map [c, h*w] at m continuous points
/// given in cell units (cell centers at integer coordinates); points are
/// clamped to the border. Output [m, c]; differentiable in the map.
Tensor bilinear_gather(const Tensor& map, std::int64_t h, std::int64_t wd,
                       const std::vector<double>& pts_xy);

// ---- gradient checking ----
struct GradReport {
  struct Entry {
    std::int64_t index;
    double analytic;
    double numeric;
  };
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  std::vector<Entry> entries;
};

/// Central-difference check of backward() for scalar f at leaf x. When
/// `indices` is empty every element is perturbed. Relative error per element
/// is |a-n| / max(|a|,|n|), taken as 0 when both magnitudes are below 1e-6.
GradReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                             double eps, const std::vector<std::int64_t>& indices = {});

}  // namespace kd3d
