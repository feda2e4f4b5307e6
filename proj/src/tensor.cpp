#include "kd3d/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>
#include <utility>

#include "kd3d/kernels.hpp"

namespace kd3d {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (const auto d : s) {
    if (d < 0) throw std::invalid_argument("shape_numel: negative dimension");
    n *= d;
  }
  return n;
}

void Node::accumulate(const double* g, std::int64_t n) {
  ensure_grad();
  for (std::int64_t i = 0; i < n; ++i) grad[i] += g[i];
}

namespace {

[[noreturn]] void fail(const char* op, const char* what) {
  throw std::invalid_argument(std::string(op) + ": " + what);
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) fail(op, "undefined tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) fail(op, "shape mismatch");
}

void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) fail(op, "expected a 2-D tensor");
}

void require_1d(const Tensor& t, const char* op) {
  if (t.shape().size() != 1) fail(op, "expected a 1-D tensor");
}

// Assemble an op node. Parent handles and the closure are retained only when
// some parent requires grad; otherwise the result decays to a constant and
// the upstream graph is released immediately.
Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<std::shared_ptr<Node>> parents,
               std::function<void(Node&)> backprop, const char* op) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  for (const auto& p : parents)
    if (p && p->requires_grad) rg = true;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor(std::move(n));
}

Tensor unary_elemwise(const Tensor& a, const char* op, double (*fwd)(double),
                      double (*deriv)(double /*x*/, double /*y*/)) {
  require_defined(a, op);
  const auto n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto av = a.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  return make_op(a.shape(), std::move(out), {a.node()},
                 [deriv](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (!pa.requires_grad) return;
                   pa.ensure_grad();
                   const auto m = nd.numel();
                   for (std::int64_t i = 0; i < m; ++i)
                     pa.grad[i] += nd.grad[i] * deriv(pa.value[i], nd.value[i]);
                 },
                 op);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---- construction ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  auto nd = std::make_shared<Node>();
  nd->shape = std::move(shape);
  nd->value.assign(static_cast<std::size_t>(n), 0.0);
  nd->requires_grad = requires_grad;
  return Tensor(std::move(nd));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const auto n = shape_numel(shape);
  auto nd = std::make_shared<Node>();
  nd->shape = std::move(shape);
  nd->value.assign(static_cast<std::size_t>(n), v);
  nd->requires_grad = requires_grad;
  return Tensor(std::move(nd));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
    throw std::invalid_argument("Tensor::from_data: data size does not match shape");
  auto nd = std::make_shared<Node>();
  nd->shape = std::move(shape);
  nd->value = std::move(data);
  nd->requires_grad = requires_grad;
  return Tensor(std::move(nd));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({}, {v}, requires_grad);
}

Tensor Tensor::detach() const {
  auto nd = std::make_shared<Node>();
  nd->shape = node_->shape;
  nd->value = node_->value;
  nd->requires_grad = false;
  return Tensor(std::move(nd));
}

// ---- reverse pass ----

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  Node* root = loss.node().get();
  if (!root->requires_grad)
    throw std::logic_error("backward: loss does not require grad");

  // Iterative postorder over the requires-grad subgraph: producers end up
  // before their consumers, so the reversed order is a valid schedule.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  visited.insert(root);
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& top = stack.back();
    Node* nd = top.first;
    if (top.second < nd->parents.size()) {
      Node* p = nd->parents[top.second].get();
      ++top.second;
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(nd);
      stack.pop_back();
    }
  }

  // Interior grads are scratch for this pass only; leaves accumulate across
  // passes. Clearing interiors keeps a repeated backward() from re-seeding
  // with last pass's values.
  for (Node* nd : order)
    if (nd->backprop && !nd->grad.empty()) std::fill(nd->grad.begin(), nd->grad.end(), 0.0);

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* nd = *it;
    if (nd->backprop) {
      nd->ensure_grad();
      nd->backprop(*nd);
    }
  }
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  require_same_shape(a, b, "add");
  const auto n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto av = a.data();
  const auto bv = b.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
  return make_op(a.shape(), std::move(out), {a.node(), b.node()},
                 [](Node& nd) {
                   const auto m = nd.numel();
                   for (int side = 0; side < 2; ++side) {
                     Node& p = *nd.parents[side];
                     if (p.requires_grad) p.accumulate(nd.grad.data(), m);
                   }
                 },
                 "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_same_shape(a, b, "sub");
  const auto n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto av = a.data();
  const auto bv = b.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
  return make_op(a.shape(), std::move(out), {a.node(), b.node()},
                 [](Node& nd) {
                   const auto m = nd.numel();
                   Node& pa = *nd.parents[0];
                   Node& pb = *nd.parents[1];
                   if (pa.requires_grad) pa.accumulate(nd.grad.data(), m);
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     for (std::int64_t i = 0; i < m; ++i) pb.grad[i] -= nd.grad[i];
                   }
                 },
                 "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  require_same_shape(a, b, "mul");
  const auto n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto av = a.data();
  const auto bv = b.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
  return make_op(a.shape(), std::move(out), {a.node(), b.node()},
                 [](Node& nd) {
                   const auto m = nd.numel();
                   Node& pa = *nd.parents[0];
                   Node& pb = *nd.parents[1];
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     for (std::int64_t i = 0; i < m; ++i)
                       pa.grad[i] += nd.grad[i] * pb.value[i];
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     for (std::int64_t i = 0; i < m; ++i)
                       pb.grad[i] += nd.grad[i] * pa.value[i];
                   }
                 },
                 "mul");
}

Tensor neg(const Tensor& a) {
  return unary_elemwise(
      a, "neg", [](double x) { return -x; },
      [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
  require_defined(a, "scale");
  const auto n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto av = a.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] * c;
  return make_op(a.shape(), std::move(out), {a.node()},
                 [c](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (!pa.requires_grad) return;
                   pa.ensure_grad();
                   const auto m = nd.numel();
                   for (std::int64_t i = 0; i < m; ++i) pa.grad[i] += c * nd.grad[i];
                 },
                 "scale");
}

Tensor add_scalar(const Tensor& a, double c) {
  require_defined(a, "add_scalar");
  const auto n = a.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto av = a.data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = av[i] + c;
  return make_op(a.shape(), std::move(out), {a.node()},
                 [](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (pa.requires_grad) pa.accumulate(nd.grad.data(), nd.numel());
                 },
                 "add_scalar");
}

Tensor square(const Tensor& a) {
  return unary_elemwise(
      a, "square", [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  // Subgradient 0 at the kink.
  return unary_elemwise(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_elemwise(
      a, "sigmoid", &stable_sigmoid,
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp_elem(const Tensor& a) {
  return unary_elemwise(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log_elem(const Tensor& a) {
  return unary_elemwise(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta) {
  require_defined(pred, "smooth_l1");
  require_defined(target, "smooth_l1");
  require_same_shape(pred, target, "smooth_l1");
  if (!(beta > 0.0)) fail("smooth_l1", "beta must be positive");
  const auto n = pred.numel();
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto pv = pred.data();
  const auto tv = target.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = pv[i] - tv[i];
    const double ad = std::abs(d);
    out[i] = ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
  }
  return make_op(pred.shape(), std::move(out), {pred.node(), target.node()},
                 [beta](Node& nd) {
                   Node& pp = *nd.parents[0];
                   Node& pt = *nd.parents[1];
                   if (!pp.requires_grad && !pt.requires_grad) return;
                   if (pp.requires_grad) pp.ensure_grad();
                   if (pt.requires_grad) pt.ensure_grad();
                   const auto m = nd.numel();
                   for (std::int64_t i = 0; i < m; ++i) {
                     const double d = pp.value[i] - pt.value[i];
                     const double gd =
                         std::abs(d) < beta ? d / beta : (d > 0.0 ? 1.0 : -1.0);
                     const double g = nd.grad[i] * gd;
                     if (pp.requires_grad) pp.grad[i] += g;
                     if (pt.requires_grad) pt.grad[i] -= g;
                   }
                 },
                 "smooth_l1");
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  const auto n = a.numel();
  const auto av = a.data();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += av[i];
  return make_op({}, {s}, {a.node()},
                 [](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (!pa.requires_grad) return;
                   pa.ensure_grad();
                   const double g = nd.grad[0];
                   const auto m = pa.numel();
                   for (std::int64_t i = 0; i < m; ++i) pa.grad[i] += g;
                 },
                 "sum");
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  const auto n = a.numel();
  if (n == 0) fail("mean", "empty tensor");
  const auto av = a.data();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += av[i];
  const double inv = 1.0 / static_cast<double>(n);
  return make_op({}, {s * inv}, {a.node()},
                 [inv](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (!pa.requires_grad) return;
                   pa.ensure_grad();
                   const double g = nd.grad[0] * inv;
                   const auto m = pa.numel();
                   for (std::int64_t i = 0; i < m; ++i) pa.grad[i] += g;
                 },
                 "mean");
}

Tensor reduce_max(const Tensor& a) {
  require_defined(a, "reduce_max");
  const auto n = a.numel();
  if (n == 0) fail("reduce_max", "empty tensor");
  const auto av = a.data();
  std::int64_t arg = 0;
  for (std::int64_t i = 1; i < n; ++i)
    if (av[i] > av[arg]) arg = i;
  return make_op({}, {av[arg]}, {a.node()},
                 [arg](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (!pa.requires_grad) return;
                   pa.ensure_grad();
                   pa.grad[arg] += nd.grad[0];
                 },
                 "reduce_max");
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) fail("matmul", "inner dimensions differ");
  std::vector<double> out(static_cast<std::size_t>(m * n));
  kernels::matmul(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_op({m, n}, std::move(out), {a.node(), b.node()},
                 [m, k, n](Node& nd) {
                   Node& pa = *nd.parents[0];
                   Node& pb = *nd.parents[1];
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     kernels::matmul_nt(nd.grad.data(), pb.value.data(), pa.grad.data(),
                                        m, n, k, /*acc=*/true);
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     kernels::matmul_tn(pa.value.data(), nd.grad.data(), pb.grad.data(),
                                        k, m, n, /*acc=*/true);
                   }
                 },
                 "matmul");
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul_nt");
  require_defined(b, "matmul_nt");
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) fail("matmul_nt", "inner dimensions differ");
  std::vector<double> out(static_cast<std::size_t>(m * n));
  kernels::matmul_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_op({m, n}, std::move(out), {a.node(), b.node()},
                 [m, k, n](Node& nd) {
                   Node& pa = *nd.parents[0];
                   Node& pb = *nd.parents[1];
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     kernels::matmul(nd.grad.data(), pb.value.data(), pa.grad.data(),
                                     m, n, k, /*acc=*/true);
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     kernels::matmul_tn(nd.grad.data(), pa.value.data(), pb.grad.data(),
                                        n, m, k, /*acc=*/true);
                   }
                 },
                 "matmul_nt");
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require_defined(a, "add_rowvec");
  require_defined(v, "add_rowvec");
  require_2d(a, "add_rowvec");
  require_1d(v, "add_rowvec");
  const auto r = a.dim(0), c = a.dim(1);
  if (v.dim(0) != c) fail("add_rowvec", "vector length does not match columns");
  std::vector<double> out(static_cast<std::size_t>(r * c));
  const auto av = a.data();
  const auto vv = v.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] + vv[j];
  return make_op({r, c}, std::move(out), {a.node(), v.node()},
                 [r, c](Node& nd) {
                   Node& pa = *nd.parents[0];
                   Node& pv = *nd.parents[1];
                   if (pa.requires_grad) pa.accumulate(nd.grad.data(), r * c);
                   if (pv.requires_grad) {
                     pv.ensure_grad();
                     for (std::int64_t i = 0; i < r; ++i)
                       for (std::int64_t j = 0; j < c; ++j)
                         pv.grad[j] += nd.grad[i * c + j];
                   }
                 },
                 "add_rowvec");
}

Tensor add_colvec(const Tensor& a, const Tensor& v) {
  require_defined(a, "add_colvec");
  require_defined(v, "add_colvec");
  require_2d(a, "add_colvec");
  require_1d(v, "add_colvec");
  const auto r = a.dim(0), c = a.dim(1);
  if (v.dim(0) != r) fail("add_colvec", "vector length does not match rows");
  std::vector<double> out(static_cast<std::size_t>(r * c));
  const auto av = a.data();
  const auto vv = v.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] + vv[i];
  return make_op({r, c}, std::move(out), {a.node(), v.node()},
                 [r, c](Node& nd) {
                   Node& pa = *nd.parents[0];
                   Node& pv = *nd.parents[1];
                   if (pa.requires_grad) pa.accumulate(nd.grad.data(), r * c);
                   if (pv.requires_grad) {
                     pv.ensure_grad();
                     for (std::int64_t i = 0; i < r; ++i) {
                       double s = 0.0;
                       for (std::int64_t j = 0; j < c; ++j) s += nd.grad[i * c + j];
                       pv.grad[i] += s;
                     }
                   }
                 },
                 "add_colvec");
}

Tensor transpose(const Tensor& a) {
  require_defined(a, "transpose");
  require_2d(a, "transpose");
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(r * c));
  const auto av = a.data();
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return make_op({c, r}, std::move(out), {a.node()},
                 [r, c](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (!pa.requires_grad) return;
                   pa.ensure_grad();
                   for (std::int64_t i = 0; i < r; ++i)
                     for (std::int64_t j = 0; j < c; ++j)
                       pa.grad[i * c + j] += nd.grad[j * r + i];
                 },
                 "transpose");
}

// ---- structure ----

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat_rows", "no parts");
  std::int64_t rows = 0;
  const std::int64_t c = [&] {
    require_defined(parts[0], "concat_rows");
    require_2d(parts[0], "concat_rows");
    return parts[0].dim(1);
  }();
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(parts.size());
  for (const auto& p : parts) {
    require_defined(p, "concat_rows");
    require_2d(p, "concat_rows");
    if (p.dim(1) != c) fail("concat_rows", "column counts differ");
    rows += p.dim(0);
    parents.push_back(p.node());
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(rows * c));
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_op({rows, c}, std::move(out), std::move(parents),
                 [](Node& nd) {
                   std::int64_t off = 0;
                   for (auto& pp : nd.parents) {
                     const auto m = pp->numel();
                     if (pp->requires_grad) pp->accumulate(nd.grad.data() + off, m);
                     off += m;
                   }
                 },
                 "concat_rows");
}

Tensor gather(const Tensor& a, std::vector<std::int64_t> flat_idx) {
  require_defined(a, "gather");
  const auto n = a.numel();
  for (const auto i : flat_idx)
    if (i < 0 || i >= n) fail("gather", "index out of range");
  std::vector<double> out(flat_idx.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < flat_idx.size(); ++i) out[i] = av[flat_idx[i]];
  const auto m = static_cast<std::int64_t>(flat_idx.size());
  return make_op({m}, std::move(out), {a.node()},
                 [idx = std::move(flat_idx)](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (!pa.requires_grad) return;
                   pa.ensure_grad();
                   for (std::size_t i = 0; i < idx.size(); ++i)
                     pa.grad[idx[i]] += nd.grad[i];
                 },
                 "gather");
}

Tensor gather_rows(const Tensor& a, std::vector<std::int64_t> rows) {
  require_defined(a, "gather_rows");
  require_2d(a, "gather_rows");
  const auto r = a.dim(0), c = a.dim(1);
  for (const auto i : rows)
    if (i < 0 || i >= r) fail("gather_rows", "row index out of range");
  const auto m = static_cast<std::int64_t>(rows.size());
  std::vector<double> out(static_cast<std::size_t>(m * c));
  const auto av = a.data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < c; ++j) out[i * c + j] = av[rows[i] * c + j];
  return make_op({m, c}, std::move(out), {a.node()},
                 [rows = std::move(rows), c](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (!pa.requires_grad) return;
                   pa.ensure_grad();
                   const auto m2 = static_cast<std::int64_t>(rows.size());
                   for (std::int64_t i = 0; i < m2; ++i)
                     for (std::int64_t j = 0; j < c; ++j)
                       pa.grad[rows[i] * c + j] += nd.grad[i * c + j];
                 },
                 "gather_rows");
}

Tensor weighted_gather_rows(const Tensor& a, std::vector<std::int64_t> idx,
                            std::vector<double> w, std::int64_t kn) {
  require_defined(a, "weighted_gather_rows");
  require_2d(a, "weighted_gather_rows");
  if (kn <= 0) fail("weighted_gather_rows", "kn must be positive");
  if (idx.size() != w.size()) fail("weighted_gather_rows", "idx/w size mismatch");
  if (idx.size() % static_cast<std::size_t>(kn) != 0)
    fail("weighted_gather_rows", "idx size not a multiple of kn");
  const auto r = a.dim(0), c = a.dim(1);
  for (const auto i : idx)
    if (i < 0 || i >= r) fail("weighted_gather_rows", "row index out of range");
  const auto m = static_cast<std::int64_t>(idx.size()) / kn;
  std::vector<double> out(static_cast<std::size_t>(m * c), 0.0);
  const auto av = a.data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t t = 0; t < kn; ++t) {
      const auto row = idx[i * kn + t];
      const double wt = w[i * kn + t];
      for (std::int64_t j = 0; j < c; ++j) out[i * c + j] += wt * av[row * c + j];
    }
  return make_op({m, c}, std::move(out), {a.node()},
                 [idx = std::move(idx), w = std::move(w), kn, c](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (!pa.requires_grad) return;
                   pa.ensure_grad();
                   const auto m2 = static_cast<std::int64_t>(idx.size()) / kn;
                   for (std::int64_t i = 0; i < m2; ++i)
                     for (std::int64_t t = 0; t < kn; ++t) {
                       const auto row = idx[i * kn + t];
                       const double wt = w[i * kn + t];
                       for (std::int64_t j = 0; j < c; ++j)
                         pa.grad[row * c + j] += wt * nd.grad[i * c + j];
                     }
                 },
                 "weighted_gather_rows");
}

Tensor segment_max(const Tensor& a, const std::vector<std::int64_t>& seg,
                   std::int64_t n_seg) {
  require_defined(a, "segment_max");
  require_2d(a, "segment_max");
  if (n_seg < 0) fail("segment_max", "negative segment count");
  const auto r = a.dim(0), c = a.dim(1);
  if (static_cast<std::int64_t>(seg.size()) != r)
    fail("segment_max", "segment id count does not match rows");
  for (const auto s : seg)
    if (s < 0 || s >= n_seg) fail("segment_max", "segment id out of range");
  std::vector<double> out(static_cast<std::size_t>(n_seg * c), 0.0);
  std::vector<std::int64_t> arg(static_cast<std::size_t>(n_seg * c), -1);
  const auto av = a.data();
  for (std::int64_t i = 0; i < r; ++i) {
    const auto s = seg[i];
    for (std::int64_t j = 0; j < c; ++j) {
      const double v = av[i * c + j];
      auto& am = arg[s * c + j];
      if (am < 0 || v > out[s * c + j]) {
        out[s * c + j] = v;
        am = i;
      }
    }
  }
  return make_op({n_seg, c}, std::move(out), {a.node()},
                 [arg = std::move(arg), c](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (!pa.requires_grad) return;
                   pa.ensure_grad();
                   const auto cells = static_cast<std::int64_t>(arg.size());
                   for (std::int64_t q = 0; q < cells; ++q) {
                     const auto i = arg[q];
                     if (i >= 0) pa.grad[i * c + q % c] += nd.grad[q];
                   }
                 },
                 "segment_max");
}

Tensor normalize_rows(const Tensor& a, double eps) {
  require_defined(a, "normalize_rows");
  require_2d(a, "normalize_rows");
  const auto r = a.dim(0), c = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(r * c), 0.0);
  const auto av = a.data();
  for (std::int64_t i = 0; i < r; ++i) {
    double sq = 0.0;
    for (std::int64_t j = 0; j < c; ++j) sq += av[i * c + j] * av[i * c + j];
    const double nm = std::sqrt(sq);
    if (nm < eps) continue;  // dead row: zero output, zero gradient
    for (std::int64_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] / nm;
  }
  return make_op({r, c}, std::move(out), {a.node()},
                 [r, c, eps](Node& nd) {
                   Node& pa = *nd.parents[0];
                   if (!pa.requires_grad) return;
                   pa.ensure_grad();
                   for (std::int64_t i = 0; i < r; ++i) {
                     double sq = 0.0;
                     for (std::int64_t j = 0; j < c; ++j)
                       sq += pa.value[i * c + j] * pa.value[i * c + j];
                     const double nm = std::sqrt(sq);
                     if (nm < eps) continue;
                     double dot = 0.0;
                     for (std::int64_t j = 0; j < c; ++j)
                       dot += nd.grad[i * c + j] * pa.value[i * c + j];
                     const double inv = 1.0 / nm;
                     const double inv3 = inv * inv * inv;
                     for (std::int64_t j = 0; j < c; ++j)
                       pa.grad[i * c + j] +=
                           nd.grad[i * c + j] * inv - pa.value[i * c + j] * dot * inv3;
                   }
                 },
                 "normalize_rows");
}

Tensor cosine_sim(const Tensor& a, const Tensor& b, double eps) {
  require_defined(a, "cosine_sim");
  require_defined(b, "cosine_sim");
  require_1d(a, "cosine_sim");
  require_1d(b, "cosine_sim");
  require_same_shape(a, b, "cosine_sim");
  const auto n = a.numel();
  const auto av = a.data();
  const auto bv = b.data();
  double dot = 0.0, sa = 0.0, sb = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    dot += av[i] * bv[i];
    sa += av[i] * av[i];
    sb += bv[i] * bv[i];
  }
  const double na = std::sqrt(sa), nb = std::sqrt(sb);
  const bool dead = na < eps || nb < eps;
  const double val = dead ? 0.0 : dot / (na * nb);
  return make_op({}, {val}, {a.node(), b.node()},
                 [eps](Node& nd) {
                   Node& pa = *nd.parents[0];
                   Node& pb = *nd.parents[1];
                   if (!pa.requires_grad && !pb.requires_grad) return;
                   const auto m = pa.numel();
                   double dot2 = 0.0, sa2 = 0.0, sb2 = 0.0;
                   for (std::int64_t i = 0; i < m; ++i) {
                     dot2 += pa.value[i] * pb.value[i];
                     sa2 += pa.value[i] * pa.value[i];
                     sb2 += pb.value[i] * pb.value[i];
                   }
                   const double na2 = std::sqrt(sa2), nb2 = std::sqrt(sb2);
                   if (na2 < eps || nb2 < eps) return;
                   const double cs = dot2 / (na2 * nb2);
                   const double g = nd.grad[0];
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     for (std::int64_t i = 0; i < m; ++i)
                       pa.grad[i] += g * (pb.value[i] / (na2 * nb2) -
                                          cs * pa.value[i] / (na2 * na2));
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     for (std::int64_t i = 0; i < m; ++i)
                       pb.grad[i] += g * (pa.value[i] / (na2 * nb2) -
                                          cs * pb.value[i] / (nb2 * nb2));
                   }
                 },
                 "cosine_sim");
}

Tensor focal_loss(const Tensor& pred, const Tensor& target, double alpha, double beta) {
  require_defined(pred, "focal_loss");
  require_defined(target, "focal_loss");
  require_same_shape(pred, target, "focal_loss");
  if (target.requires_grad()) fail("focal_loss", "target must not require grad");
  constexpr double kLo = 1e-12, kHi = 1.0 - 1e-12;
  const auto n = pred.numel();
  const auto pv = pred.data();
  const auto tv = target.data();
  std::int64_t n_pos = 0;
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double p = std::clamp(pv[i], kLo, kHi);
    if (tv[i] == 1.0) {
      ++n_pos;
      acc += std::pow(1.0 - p, alpha) * std::log(p);
    } else {
      acc += std::pow(1.0 - tv[i], beta) * std::pow(p, alpha) * std::log(1.0 - p);
    }
  }
  const double norm = static_cast<double>(std::max<std::int64_t>(1, n_pos));
  return make_op({}, {-acc / norm}, {pred.node(), target.node()},
                 [alpha, beta, norm](Node& nd) {
                   Node& pp = *nd.parents[0];
                   Node& pt = *nd.parents[1];
                   if (!pp.requires_grad) return;
                   pp.ensure_grad();
                   const double g = nd.grad[0] / norm;
                   const auto m = nd.parents[0]->numel();
                   for (std::int64_t i = 0; i < m; ++i) {
                     const double p = pp.value[i];
                     if (p <= kLo || p >= kHi) continue;  // clamped: flat
                     double dterm;
                     if (pt.value[i] == 1.0) {
                       dterm = -alpha * std::pow(1.0 - p, alpha - 1.0) * std::log(p) +
                               std::pow(1.0 - p, alpha) / p;
                     } else {
                       dterm = std::pow(1.0 - pt.value[i], beta) *
                               (alpha * std::pow(p, alpha - 1.0) * std::log(1.0 - p) -
                                std::pow(p, alpha) / (1.0 - p));
                     }
                     pp.grad[i] -= g * dterm;
                   }
                 },
                 "focal_loss");
}

Tensor conv3x3(const Tensor& in, const Tensor& w, const Tensor& b, std::int64_t h,
               std::int64_t wd) {
  require_defined(in, "conv3x3");
  require_defined(w, "conv3x3");
  require_defined(b, "conv3x3");
  require_2d(in, "conv3x3");
  require_2d(w, "conv3x3");
  require_1d(b, "conv3x3");
  const auto ci = in.dim(0), co = w.dim(0);
  if (in.dim(1) != h * wd) fail("conv3x3", "input cells do not match h*w");
  if (w.dim(1) != ci * 9) fail("conv3x3", "weight shape does not match input channels");
  if (b.dim(0) != co) fail("conv3x3", "bias length does not match output channels");
  std::vector<double> out(static_cast<std::size_t>(co * h * wd));
  kernels::conv3x3(in.data().data(), w.data().data(), b.data().data(), out.data(), ci, co,
                   h, wd);
  return make_op({co, h * wd}, std::move(out), {in.node(), w.node(), b.node()},
                 [ci, co, h, wd](Node& nd) {
                   Node& pin = *nd.parents[0];
                   Node& pw = *nd.parents[1];
                   Node& pb = *nd.parents[2];
                   if (pin.requires_grad) {
                     pin.ensure_grad();
                     kernels::conv3x3_grad_input(nd.grad.data(), pw.value.data(),
                                                 pin.grad.data(), ci, co, h, wd,
                                                 /*acc=*/true);
                   }
                   if (pw.requires_grad || pb.requires_grad) {
                     double* gw = nullptr;
                     std::vector<double> scratch;
                     if (pw.requires_grad) {
                       pw.ensure_grad();
                       gw = pw.grad.data();
                     } else {
                       scratch.assign(static_cast<std::size_t>(co * ci * 9), 0.0);
                       gw = scratch.data();
                     }
                     double* gb = nullptr;
                     if (pb.requires_grad) {
                       pb.ensure_grad();
                       gb = pb.grad.data();
                     }
                     kernels::conv3x3_grad_weights(nd.grad.data(), pin.value.data(), gw,
                                                   gb, ci, co, h, wd, /*acc=*/true);
                   }
                 },
                 "conv3x3");
}

Tensor bilinear_gather(const Tensor& map, std::int64_t h, std::int64_t wd,
                       const std::vector<double>& pts_xy) {
  require_defined(map, "bilinear_gather");
  require_2d(map, "bilinear_gather");
  if (h <= 0 || wd <= 0) fail("bilinear_gather", "empty map extent");
  const auto c = map.dim(0);
  if (map.dim(1) != h * wd) fail("bilinear_gather", "map cells do not match h*w");
  if (pts_xy.size() % 2 != 0) fail("bilinear_gather", "points must be (x, y) pairs");
  const auto m = static_cast<std::int64_t>(pts_xy.size() / 2);

  // Resolve each point to four taps once; forward and backward share them.
  std::vector<std::int64_t> cells(static_cast<std::size_t>(4 * m));
  std::vector<double> wts(static_cast<std::size_t>(4 * m));
  for (std::int64_t i = 0; i < m; ++i) {
    double x = std::clamp(pts_xy[2 * i], 0.0, static_cast<double>(wd - 1));
    double y = std::clamp(pts_xy[2 * i + 1], 0.0, static_cast<double>(h - 1));
    std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
    std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
    if (x0 >= wd - 1) x0 = wd - 1;
    if (y0 >= h - 1) y0 = h - 1;
    const std::int64_t x1 = std::min(x0 + 1, wd - 1);
    const std::int64_t y1 = std::min(y0 + 1, h - 1);
    const double fx = x - static_cast<double>(x0);
    const double fy = y - static_cast<double>(y0);
    cells[4 * i + 0] = y0 * wd + x0;
    cells[4 * i + 1] = y0 * wd + x1;
    cells[4 * i + 2] = y1 * wd + x0;
    cells[4 * i + 3] = y1 * wd + x1;
    wts[4 * i + 0] = (1.0 - fx) * (1.0 - fy);
    wts[4 * i + 1] = fx * (1.0 - fy);
    wts[4 * i + 2] = (1.0 - fx) * fy;
    wts[4 * i + 3] = fx * fy;
  }

  std::vector<double> out(static_cast<std::size_t>(m * c), 0.0);
  const auto mv = map.data();
  for (std::int64_t i = 0; i < m; ++i)
    for (int t = 0; t < 4; ++t) {
      const auto cell = cells[4 * i + t];
      const double wt = wts[4 * i + t];
      for (std::int64_t ch = 0; ch < c; ++ch)
        out[i * c + ch] += wt * mv[ch * h * wd + cell];
    }
  return make_op({m, c}, std::move(out), {map.node()},
                 [cells = std::move(cells), wts = std::move(wts), c, h, wd](Node& nd) {
                   Node& pm = *nd.parents[0];
                   if (!pm.requires_grad) return;
                   pm.ensure_grad();
                   const auto m2 = static_cast<std::int64_t>(cells.size() / 4);
                   for (std::int64_t i = 0; i < m2; ++i)
                     for (int t = 0; t < 4; ++t) {
                       const auto cell = cells[4 * i + t];
                       const double wt = wts[4 * i + t];
                       for (std::int64_t ch = 0; ch < c; ++ch)
                         pm.grad[ch * h * wd + cell] += wt * nd.grad[i * c + ch];
                     }
                 },
                 "bilinear_gather");
}

// ---- gradient checking ----

GradReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                             double eps, const std::vector<std::int64_t>& indices) {
  require_defined(x, "finite_diff_check");
  if (!(eps > 0.0)) fail("finite_diff_check", "eps must be positive");
  Tensor xt = x;
  if (!xt.requires_grad()) fail("finite_diff_check", "x must require grad");

  xt.zero_grad();
  Tensor y = f(xt);
  if (!y.defined() || y.numel() != 1) fail("finite_diff_check", "f must return a scalar");
  backward(y);
  std::vector<double> analytic(static_cast<std::size_t>(xt.numel()), 0.0);
  if (xt.has_grad()) {
    const auto g = xt.grad();
    std::copy(g.begin(), g.end(), analytic.begin());
  }

  std::vector<std::int64_t> idx = indices;
  if (idx.empty()) {
    idx.resize(static_cast<std::size_t>(xt.numel()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  }

  GradReport rep;
  auto buf = xt.raw();
  for (const auto i : idx) {
    if (i < 0 || i >= xt.numel()) fail("finite_diff_check", "index out of range");
    const double v = buf[i];
    buf[i] = v + eps;
    const double fp = f(xt).item();
    buf[i] = v - eps;
    const double fm = f(xt).item();
    buf[i] = v;
    const double num = (fp - fm) / (2.0 * eps);
    const double a = analytic[static_cast<std::size_t>(i)];
    const double abs_err = std::abs(a - num);
    double rel = 0.0;
    if (std::abs(a) >= 1e-6 || std::abs(num) >= 1e-6)
      rel = abs_err / std::max(std::abs(a), std::abs(num));
    rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
    rep.entries.push_back({i, a, num});
  }
  return rep;
}

}  // namespace kd3d
