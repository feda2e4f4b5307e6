#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "kd3d/detector.hpp"
#include "kd3d/distill.hpp"
#include "kd3d/rng.hpp"
#include "kd3d/scene.hpp"
#include "kd3d/tensor.hpp"
#include "kd3d/voxel.hpp"

using namespace kd3d;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double lo, double hi) {
  std::int64_t n = 1;
  for (const auto d : shape) n *= d;
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v));
}

double sml1(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

// Reference mining: direct per-cell evaluation of the threshold rules.
CrucialSets brute_mine(const std::vector<Tensor>& h_s, const std::vector<Tensor>& h_g,
                       double tau) {
  CrucialSets sets;
  for (std::size_t head = 0; head < h_s.size(); ++head) {
    const auto k = h_s[head].dim(0);
    const auto cells = h_s[head].dim(1);
    std::vector<std::int64_t> tp, fp, fn;
    for (std::int64_t cell = 0; cell < cells; ++cell) {
      double ms = -1e300, mg = -1e300;
      for (std::int64_t c = 0; c < k; ++c) {
        ms = std::max(ms, h_s[head].data()[static_cast<std::size_t>(c * cells + cell)]);
        mg = std::max(mg, h_g[head].data()[static_cast<std::size_t>(c * cells + cell)]);
      }
      if (ms > tau && mg > tau) tp.push_back(cell);
      if (ms > tau && mg < tau) fp.push_back(cell);
      if (ms < tau && mg > tau) fn.push_back(cell);
    }
    sets.tp.push_back(tp);
    sets.fp.push_back(fp);
    sets.fn.push_back(fn);
  }
  return sets;
}

double brute_cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Relation gap between two row sets, by the O(n^2) definition.
double brute_relation(const Tensor& a, const Tensor& b,
                      const std::vector<std::int64_t>& rows) {
  const auto ca = a.dim(1), cb = b.dim(1);
  double total = 0.0;
  for (const auto i : rows)
    for (const auto j : rows) {
      const double rs = brute_cosine(a.data().subspan(static_cast<std::size_t>(i * ca),
                                                      static_cast<std::size_t>(ca)),
                                     a.data().subspan(static_cast<std::size_t>(j * ca),
                                                      static_cast<std::size_t>(ca)));
      const double rm = brute_cosine(b.data().subspan(static_cast<std::size_t>(i * cb),
                                                      static_cast<std::size_t>(cb)),
                                     b.data().subspan(static_cast<std::size_t>(j * cb),
                                                      static_cast<std::size_t>(cb)));
      total += (rs - rm) * (rs - rm);
    }
  const auto n = static_cast<double>(rows.size());
  return total / (n * n);
}

}  // namespace

TEST_SUITE("distill") {

TEST_CASE("mining on silent heatmaps yields empty sets") {
  const std::vector<Tensor> zero = {Tensor::zeros({2, 16}), Tensor::zeros({2, 16})};
  const auto sets = mine_crucial_responses(zero, zero, 0.1);
  REQUIRE(sets.n_heads() == 2);
  for (std::size_t h = 0; h < 2; ++h) {
    CHECK(sets.tp[h].empty());
    CHECK(sets.fp[h].empty());
    CHECK(sets.fn[h].empty());
  }
}

TEST_CASE("mining classifies hand-built cells") {
  // One head, two classes, four cells: TP, FP, FN, background.
  const auto h_s = Tensor::from_data({2, 4}, {0.9, 0.9, 0.05, 0.02,   // class 0
                                              0.1, 0.02, 0.03, 0.04});  // class 1
  const auto h_g = Tensor::from_data({2, 4}, {0.8, 0.05, 0.9, 0.03,
                                              0.1, 0.02, 0.2, 0.05});
  const auto sets = mine_crucial_responses({h_s}, {h_g}, 0.1);
  CHECK(sets.tp[0] == std::vector<std::int64_t>{0});
  CHECK(sets.fp[0] == std::vector<std::int64_t>{1});
  CHECK(sets.fn[0] == std::vector<std::int64_t>{2});
}

TEST_CASE("mining takes the max across the head's classes") {
  // Class 0 stays cold; class 1 carries the response.
  const auto h_s = Tensor::from_data({2, 1}, {0.01, 0.7});
  const auto h_g = Tensor::from_data({2, 1}, {0.02, 0.6});
  const auto sets = mine_crucial_responses({h_s}, {h_g}, 0.1);
  CHECK(sets.tp[0] == std::vector<std::int64_t>{0});
}

TEST_CASE("a max exactly at tau joins no set") {
  const auto at_tau = Tensor::from_data({1, 1}, {0.1});
  const auto hot = Tensor::from_data({1, 1}, {0.9});
  const auto cold = Tensor::from_data({1, 1}, {0.01});
  auto sets = mine_crucial_responses({at_tau}, {hot}, 0.1);
  CHECK((sets.tp[0].empty() && sets.fp[0].empty() && sets.fn[0].empty()));
  sets = mine_crucial_responses({hot}, {at_tau}, 0.1);
  CHECK((sets.tp[0].empty() && sets.fp[0].empty() && sets.fn[0].empty()));
  sets = mine_crucial_responses({hot}, {cold}, 0.1);
  CHECK(sets.fp[0] == std::vector<std::int64_t>{0});
}

TEST_CASE("mining matches brute force on random instances") {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const auto h = rng.uniform_int(2, 16), w = rng.uniform_int(2, 16);
    std::vector<Tensor> h_s, h_g;
    for (int head = 0; head < 2; ++head) {
      h_s.push_back(rand_tensor({2, h * w}, rng, 0.0, 1.0));
      h_g.push_back(rand_tensor({2, h * w}, rng, 0.0, 1.0));
    }
    const double tau = rng.uniform(0.05, 0.6);
    const auto got = mine_crucial_responses(h_s, h_g, tau);
    const auto want = brute_mine(h_s, h_g, tau);
    for (std::size_t head = 0; head < 2; ++head) {
      CHECK(got.tp[head] == want.tp[head]);
      CHECK(got.fp[head] == want.fp[head]);
      CHECK(got.fn[head] == want.fn[head]);
      // Partition: pairwise disjoint within a head.
      std::vector<std::int64_t> all;
      all.insert(all.end(), got.tp[head].begin(), got.tp[head].end());
      all.insert(all.end(), got.fp[head].begin(), got.fp[head].end());
      all.insert(all.end(), got.fn[head].begin(), got.fn[head].end());
      std::sort(all.begin(), all.end());
      CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
    }
  }
}

TEST_CASE("raising tau never enlarges the mined union") {
  Rng rng(7);
  const std::vector<Tensor> h_s = {rand_tensor({2, 64}, rng, 0.0, 1.0)};
  const std::vector<Tensor> h_g = {rand_tensor({2, 64}, rng, 0.0, 1.0)};
  const auto count = [&](double tau) {
    const auto sets = mine_crucial_responses(h_s, h_g, tau);
    return sets.tp[0].size() + sets.fp[0].size() + sets.fn[0].size();
  };
  std::size_t prev = count(0.05);
  for (const double tau : {0.1, 0.2, 0.35, 0.5, 0.8}) {
    const auto cur = count(tau);
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("response cls loss is zero at the teacher and weighs sets apart") {
  DistillConfig cfg;
  CrucialSets sets;
  sets.tp = {{0}};
  sets.fp = {{}};
  sets.fn = {{}};
  // Single class so the per-cell class mean is the raw smooth-L1 value.
  const auto h_m = Tensor::from_data({1, 2}, {0.3, 0.4});
  CHECK(response_cls_loss({h_m}, {h_m}, sets, cfg).item() == 0.0);

  const auto h_s = Tensor::from_data({1, 2}, {0.8, 0.4});
  CHECK(response_cls_loss({h_s}, {h_m}, sets, cfg).item() ==
        doctest::Approx(1.0 * 0.125).epsilon(1e-12));
  // The same mismatch, mined as FP, is weighted w_r2 = 5 instead.
  sets.tp = {{}};
  sets.fp = {{0}};
  CHECK(response_cls_loss({h_s}, {h_m}, sets, cfg).item() ==
        doctest::Approx(5.0 * 0.125).epsilon(1e-12));
}

TEST_CASE("response cls loss averages over the head's classes") {
  DistillConfig cfg;
  CrucialSets sets;
  sets.tp = {{1}};
  sets.fp = {{}};
  sets.fn = {{}};
  const auto h_s = Tensor::from_data({2, 2}, {0.0, 0.8, 0.0, 0.5});
  const auto h_m = Tensor::from_data({2, 2}, {0.0, 0.3, 0.0, 0.2});
  // Cell 1 diffs: 0.5 and 0.3 -> mean of the two smooth-L1 values.
  const double want = (sml1(0.5) + sml1(0.3)) / 2.0;
  CHECK(response_cls_loss({h_s}, {h_m}, sets, cfg).item() ==
        doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("response cls loss with empty sets is a constant zero") {
  DistillConfig cfg;
  CrucialSets sets;
  sets.tp = {{}};
  sets.fp = {{}};
  sets.fn = {{}};
  auto h_s = Tensor::from_data({1, 4}, {0.5, 0.5, 0.5, 0.5});
  h_s.set_requires_grad(true);
  const auto loss = response_cls_loss({h_s}, {Tensor::zeros({1, 4})}, sets, cfg);
  CHECK(loss.item() == 0.0);
  CHECK_FALSE(loss.requires_grad());
}

TEST_CASE("response cls loss and normalization over two heads") {
  DistillConfig cfg;
  CrucialSets sets;
  sets.tp = {{0}, {1}};  // one TP sample per head -> |TP| = 2
  sets.fp = {{}, {}};
  sets.fn = {{}, {}};
  const auto s0 = Tensor::from_data({1, 2}, {0.6, 0.0});
  const auto m0 = Tensor::from_data({1, 2}, {0.2, 0.0});
  const auto s1 = Tensor::from_data({1, 2}, {0.0, 0.9});
  const auto m1 = Tensor::from_data({1, 2}, {0.0, 0.5});
  const double want = (sml1(0.4) + sml1(0.4)) / 2.0;
  CHECK(response_cls_loss({s0, s1}, {m0, m1}, sets, cfg).item() ==
        doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("response cls loss gradient matches finite differences") {
  Rng rng(17);
  DistillConfig cfg;
  std::vector<Tensor> h_s, h_m;
  for (int head = 0; head < 2; ++head) {
    auto t = rand_tensor({2, 64}, rng, 0.02, 0.98);
    t.set_requires_grad(true);
    h_s.push_back(t);
    h_m.push_back(rand_tensor({2, 64}, rng, 0.02, 0.98));
  }
  std::vector<Tensor> h_g = {rand_tensor({2, 64}, rng, 0.0, 1.0),
                             rand_tensor({2, 64}, rng, 0.0, 1.0)};
  const auto sets = mine_crucial_responses(h_s, h_g, cfg.tau);
  REQUIRE((sets.tp[0].size() + sets.fp[0].size() + sets.fn[0].size()) > 0);
  for (int head = 0; head < 2; ++head) {
    const auto rep = finite_diff_check(
        [&](const Tensor&) { return response_cls_loss(h_s, h_m, sets, cfg); },
        h_s[static_cast<std::size_t>(head)], 1e-6);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("response reg loss vanishes for zero-weight attributes") {
  DistillConfig cfg;
  CrucialSets sets;
  sets.tp = {{0, 2}};
  sets.fp = {{}};
  sets.fn = {{1}};
  std::vector<double> s(40, 0.0), m(40, 0.0);
  // Differ only in x, y, z, sin, cos (attributes 0, 1, 2, 8, 9).
  for (const int e : {0, 1, 2, 8, 9})
    for (int cell = 0; cell < 4; ++cell) s[static_cast<std::size_t>(e * 4 + cell)] = 0.9;
  auto reg_s = Tensor::from_data({10, 4}, std::move(s));
  reg_s.set_requires_grad(true);
  const auto reg_m = Tensor::from_data({10, 4}, std::move(m));
  const auto loss = response_reg_loss(reg_s, reg_m, sets, cfg);
  CHECK(loss.item() == 0.0);
  backward(loss);
  for (const double g : reg_s.grad()) CHECK(g == 0.0);
}

TEST_CASE("response reg loss weighs one differing attribute") {
  DistillConfig cfg;
  CrucialSets sets;
  sets.tp = {{1}};
  sets.fp = {{}};
  sets.fn = {{}};
  std::vector<double> s(20, 0.0);
  s[3 * 2 + 1] = 0.5;  // attribute 3 (width), cell 1
  const auto reg_s = Tensor::from_data({10, 2}, std::move(s));
  const auto reg_m = Tensor::zeros({10, 2});
  CHECK(response_reg_loss(reg_s, reg_m, sets, cfg).item() ==
        doctest::Approx(0.1 * 0.125).epsilon(1e-12));
}

TEST_CASE("response reg loss ignores false positives") {
  DistillConfig cfg;
  CrucialSets sets;
  sets.tp = {{0}};
  sets.fp = {{1}};
  sets.fn = {{}};
  std::vector<double> s(20, 0.0);
  s[3 * 2 + 0] = 0.5;   // attribute 3 at the TP cell
  s[3 * 2 + 1] = 77.0;  // huge error at the FP cell, must not count
  const auto reg_s = Tensor::from_data({10, 2}, std::move(s));
  const auto loss = response_reg_loss(reg_s, Tensor::zeros({10, 2}), sets, cfg);
  CHECK(loss.item() == doctest::Approx(0.1 * 0.125).epsilon(1e-12));
  // No TP or FN at all -> constant zero.
  sets.tp = {{}};
  const auto empty = response_reg_loss(reg_s, Tensor::zeros({10, 2}), sets, cfg);
  CHECK(empty.item() == 0.0);
  CHECK_FALSE(empty.requires_grad());
}

TEST_CASE("response reg loss gradient matches finite differences") {
  Rng rng(23);
  DistillConfig cfg;
  cfg.w_attr = {0.3, 0, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0, 0.4};
  CrucialSets sets;
  sets.tp = {{0, 3, 7}};
  sets.fp = {{2}};
  sets.fn = {{5, 6}};
  auto reg_s = rand_tensor({10, 8}, rng, -0.8, 0.8);
  reg_s.set_requires_grad(true);
  const auto reg_m = rand_tensor({10, 8}, rng, -0.8, 0.8);
  const auto rep = finite_diff_check(
      [&](const Tensor&) { return response_reg_loss(reg_s, reg_m, sets, cfg); }, reg_s,
      1e-6);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("voxel feature loss reproduces the closed-form toy values") {
  DistillConfig cfg;
  CrucialVoxelSets vsets;
  vsets.tp_v = {1};
  const auto fv_m = Tensor::zeros({3, 4});
  std::vector<double> s(12, 0.0);
  for (int c = 0; c < 4; ++c) s[static_cast<std::size_t>(4 + c)] = 1.0;  // row 1
  const auto fv_s = Tensor::from_data({3, 4}, std::move(s));
  // w_v1 * (1/C) * sum of four smooth-L1(1.0) = 2 * (1/4) * 2 = 1.
  CHECK(voxel_feature_loss(fv_s, fv_m, vsets, cfg).item() ==
        doctest::Approx(1.0).epsilon(1e-12));
  // The same voxel mined as FN weighs w_v2 = 8 instead.
  vsets.tp_v = {};
  vsets.fn_v = {1};
  CHECK(voxel_feature_loss(fv_s, fv_m, vsets, cfg).item() ==
        doctest::Approx(4.0).epsilon(1e-12));
  // Identical branches or no crucial voxels -> zero.
  vsets.tp_v = {0, 2};
  CHECK(voxel_feature_loss(fv_m, fv_m, vsets, cfg).item() == 0.0);
  CHECK(voxel_feature_loss(fv_s, fv_m, CrucialVoxelSets{}, cfg).item() == 0.0);
  CHECK_THROWS_AS(voxel_feature_loss(Tensor::zeros({3, 5}), fv_m, vsets, cfg),
                  std::invalid_argument);
}

TEST_CASE("voxel feature loss leaves the teacher detached") {
  DistillConfig cfg;
  CrucialVoxelSets vsets;
  vsets.tp_v = {0};
  vsets.fp_v = {1};
  Rng rng(31);
  auto fv_s = rand_tensor({2, 4}, rng, -0.5, 0.5);
  fv_s.set_requires_grad(true);
  const auto fv_m = rand_tensor({2, 4}, rng, -0.5, 0.5);
  const auto loss = voxel_feature_loss(fv_s, fv_m, vsets, cfg);
  backward(loss);
  CHECK(fv_s.has_grad());
  CHECK_FALSE(fv_m.has_grad());
  const auto rep = finite_diff_check(
      [&](const Tensor&) { return voxel_feature_loss(fv_s, fv_m, vsets, cfg); }, fv_s,
      1e-6);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("voxel relation loss reproduces the two-voxel toy value") {
  DistillConfig cfg;
  CrucialVoxelSets vsets;
  vsets.tp_v = {0};
  vsets.fn_v = {1};
  // Orthogonal student rows vs parallel teacher rows.
  const auto fv_s = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
  const auto fv_m = Tensor::from_data({2, 2}, {1.0, 0.0, 2.0, 0.0});
  CHECK(voxel_relation_loss(fv_s, fv_m, vsets, cfg).item() ==
        doctest::Approx(0.5).epsilon(1e-12));
  CHECK(voxel_relation_loss(fv_s, fv_s, vsets, cfg).item() == 0.0);
  CHECK(voxel_relation_loss(fv_s, fv_m, CrucialVoxelSets{}, cfg).item() == 0.0);
}

TEST_CASE("voxel relation loss is invariant to per-branch scaling") {
  Rng rng(41);
  DistillConfig cfg;
  CrucialVoxelSets vsets;
  for (std::int64_t i = 0; i < 10; ++i) vsets.tp_v.push_back(i);
  const auto fv_s = rand_tensor({10, 6}, rng, 0.2, 1.0);
  const auto fv_m = rand_tensor({10, 6}, rng, 0.2, 1.0);
  const double base = voxel_relation_loss(fv_s, fv_m, vsets, cfg).item();
  std::vector<double> scaled(fv_s.data().begin(), fv_s.data().end());
  for (auto& x : scaled) x *= 3.0;
  const auto fv_s3 = Tensor::from_data({10, 6}, std::move(scaled));
  CHECK(std::abs(voxel_relation_loss(fv_s3, fv_m, vsets, cfg).item() - base) <= 1e-9);
}

TEST_CASE("voxel relation loss equals the brute-force double loop") {
  Rng rng(43);
  DistillConfig cfg;
  CrucialVoxelSets vsets;
  // 64 crucial voxels out of 80, spread across the three sets.
  std::vector<std::int64_t> all(80);
  std::iota(all.begin(), all.end(), 0);
  const auto pick = rng.sample_without_replacement(80, 64);
  for (std::size_t i = 0; i < pick.size(); ++i) {
    if (i % 3 == 0) vsets.tp_v.push_back(pick[i]);
    else if (i % 3 == 1) vsets.fp_v.push_back(pick[i]);
    else vsets.fn_v.push_back(pick[i]);
  }
  const auto fv_s = rand_tensor({80, 5}, rng, -1.0, 1.0);
  const auto fv_m = rand_tensor({80, 5}, rng, -1.0, 1.0);
  const double got = voxel_relation_loss(fv_s, fv_m, vsets, cfg).item();
  CHECK(got == doctest::Approx(brute_relation(fv_s, fv_m, pick)).epsilon(1e-9));
}

TEST_CASE("voxel relation loss gradient matches finite differences") {
  Rng rng(47);
  DistillConfig cfg;
  CrucialVoxelSets vsets;
  vsets.tp_v = {0, 2};
  vsets.fp_v = {3};
  vsets.fn_v = {5};
  auto fv_s = rand_tensor({6, 4}, rng, 0.2, 1.0);  // away from the zero-norm pole
  fv_s.set_requires_grad(true);
  const auto fv_m = rand_tensor({6, 4}, rng, 0.2, 1.0);
  const auto rep = finite_diff_check(
      [&](const Tensor&) { return voxel_relation_loss(fv_s, fv_m, vsets, cfg); }, fv_s,
      1e-6);
  CHECK(rep.max_rel_err < 1e-4);
}

// ---- voxel-to-point ----

namespace {

// A small two-box scene with labeled foreground points, plus aligned student
// and teacher grids that differ only in features.
struct PointFixture {
  Scene scene;
  GridSpec spec;
  SparseVoxelGrid grid_s;
  SparseVoxelGrid grid_m;
};

PointFixture make_point_fixture(std::uint64_t seed, int n_fg) {
  PointFixture fx;
  fx.spec.origin = {-1.6, -1.6, -0.4};
  fx.spec.voxel_size = {0.2, 0.2, 0.2};
  fx.spec.dims = {16, 16, 4};
  fx.spec.bev_stride = 2;
  Rng rng(seed);
  fx.scene.n_classes = 2;
  Box3D box;
  box.x = -0.4;
  box.y = 0.3;
  box.w = box.l = box.h = 0.6;
  fx.scene.boxes = {box};
  for (int i = 0; i < n_fg; ++i) {
    fx.scene.points.push_back(box.x + rng.uniform(-0.29, 0.29));
    fx.scene.points.push_back(box.y + rng.uniform(-0.29, 0.29));
    fx.scene.points.push_back(rng.uniform(-0.29, 0.29));
    fx.scene.point_to_box.push_back(0);
  }
  for (int i = 0; i < 30; ++i) {
    fx.scene.points.push_back(rng.uniform(1.0, 1.5));  // clutter far from the box
    fx.scene.points.push_back(rng.uniform(-1.5, 1.5));
    fx.scene.points.push_back(rng.uniform(-0.3, 0.3));
    fx.scene.point_to_box.push_back(-1);
  }
  fx.scene.semantics.assign(
      static_cast<std::size_t>(fx.scene.num_points() * fx.scene.n_classes), 0.0);
  fx.grid_s = voxelize(fx.scene, fx.spec, false);
  fx.grid_m = fx.grid_s;
  const auto v = fx.grid_s.rows();
  const auto c = fx.grid_s.width();
  std::vector<double> fs(static_cast<std::size_t>(v * c)), fm(fs.size());
  for (auto& x : fs) x = rng.uniform(0.1, 1.0);
  for (auto& x : fm) x = rng.uniform(0.1, 1.0);
  fx.grid_s.features = Tensor::from_data({v, c}, std::move(fs));
  fx.grid_m.features = Tensor::from_data({v, c}, std::move(fm));
  return fx;
}

// Brute-force inverse-distance interpolation of one grid at one point.
std::vector<double> brute_interp(const SparseVoxelGrid& grid, const GridSpec& spec,
                                 const double* p, int k) {
  std::vector<std::pair<double, std::int64_t>> byd;
  for (std::int64_t r = 0; r < grid.rows(); ++r) {
    double sq = 0;
    for (int a = 0; a < 3; ++a) {
      const double d = p[a] - spec.center(a, grid.coords[static_cast<std::size_t>(r)][a]);
      sq += d * d;
    }
    byd.emplace_back(std::sqrt(sq), r);
  }
  std::sort(byd.begin(), byd.end());
  const auto kn = std::min<std::int64_t>(k, grid.rows());
  std::vector<double> out(static_cast<std::size_t>(grid.width()), 0.0);
  double wsum = 0;
  for (std::int64_t j = 0; j < kn; ++j) {
    const double w = 1.0 / byd[static_cast<std::size_t>(j)].first;
    wsum += w;
    for (std::int64_t q = 0; q < grid.width(); ++q)
      out[static_cast<std::size_t>(q)] +=
          w * grid.features.data()[byd[static_cast<std::size_t>(j)].second * grid.width() + q];
  }
  for (auto& x : out) x /= wsum;
  return out;
}

}  // namespace

TEST_CASE("point losses vanish without foreground or without a gap") {
  auto fx = make_point_fixture(51, 8);
  DistillConfig cfg;
  // Identical branches -> exactly zero both.
  const auto [same_fea, same_rel] =
      point_losses(fx.grid_s, fx.grid_s, fx.scene, fx.spec, cfg, 1);
  CHECK(same_fea.item() == 0.0);
  CHECK(same_rel.item() == 0.0);
  // No labeled foreground -> exactly zero both.
  std::fill(fx.scene.point_to_box.begin(), fx.scene.point_to_box.end(), -1);
  const auto [fea, rel] = point_losses(fx.grid_s, fx.grid_m, fx.scene, fx.spec, cfg, 1);
  CHECK(fea.item() == 0.0);
  CHECK(rel.item() == 0.0);
  CHECK_FALSE(fea.requires_grad());
}

TEST_CASE("point losses match brute force below the cap") {
  const auto fx = make_point_fixture(53, 10);
  DistillConfig cfg;
  const auto [fea, rel] = point_losses(fx.grid_s, fx.grid_m, fx.scene, fx.spec, cfg, 9);

  // Oracle: interpolate every foreground point on both branches by brute
  // force, then apply the two formulas directly.
  std::vector<std::vector<double>> fs, fm;
  for (std::int64_t i = 0; i < fx.scene.num_points(); ++i) {
    if (fx.scene.point_to_box[static_cast<std::size_t>(i)] < 0) continue;
    fs.push_back(brute_interp(fx.grid_s, fx.spec, &fx.scene.points[3 * i], 3));
    fm.push_back(brute_interp(fx.grid_m, fx.spec, &fx.scene.points[3 * i], 3));
  }
  const auto m = fs.size();
  REQUIRE(m == 10);
  const auto c = fs[0].size();
  double fea_want = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t q = 0; q < c; ++q) fea_want += sml1(fs[i][q] - fm[i][q]);
  fea_want *= cfg.w_pf / (static_cast<double>(m) * static_cast<double>(c));
  CHECK(fea.item() == doctest::Approx(fea_want).epsilon(1e-9));

  // Below the cap, P' is all of P: the all-pairs loop over 100 pairs.
  double rel_want = 0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double rs = brute_cosine(fs[i], fs[j]);
      const double rm = brute_cosine(fm[i], fm[j]);
      rel_want += (rs - rm) * (rs - rm);
    }
  rel_want /= static_cast<double>(m * m);
  CHECK(rel.item() == doctest::Approx(rel_want).epsilon(1e-9));
}

TEST_CASE("point relation sampling honors the cap and the seed") {
  const auto fx = make_point_fixture(57, 12);
  DistillConfig cfg;
  cfg.point_cap = 4;
  const auto [fea_a, rel_a] = point_losses(fx.grid_s, fx.grid_m, fx.scene, fx.spec, cfg, 5);
  const auto [fea_b, rel_b] = point_losses(fx.grid_s, fx.grid_m, fx.scene, fx.spec, cfg, 5);
  CHECK(rel_a.item() == rel_b.item());  // same seed, same subset
  const auto [fea_c, rel_c] = point_losses(fx.grid_s, fx.grid_m, fx.scene, fx.spec, cfg, 6);
  CHECK(fea_a.item() == fea_c.item());  // the feature term uses every point
  CHECK(rel_a.item() != rel_c.item());  // another seed picks another subset
}

TEST_CASE("point losses gradient matches finite differences") {
  auto fx = make_point_fixture(59, 6);
  DistillConfig cfg;
  fx.grid_s.features.set_requires_grad(true);
  const auto rep = finite_diff_check(
      [&](const Tensor&) {
        const auto [fea, rel] =
            point_losses(fx.grid_s, fx.grid_m, fx.scene, fx.spec, cfg, 3);
        return add(fea, rel);
      },
      fx.grid_s.features, 1e-6);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("point losses reject mismatched feature widths") {
  const auto fx = make_point_fixture(61, 5);
  DistillConfig cfg;
  auto narrow = fx.grid_m;
  narrow.features = Tensor::zeros({fx.grid_m.rows(), 3});
  CHECK_THROWS_AS(point_losses(fx.grid_s, narrow, fx.scene, fx.spec, cfg, 1),
                  std::invalid_argument);
}

// ---- instance ----

TEST_CASE("instance loss closed forms") {
  DistillConfig cfg;
  GridSpec spec;
  spec.origin = {-1.6, -1.6, -0.4};
  spec.voxel_size = {0.2, 0.2, 0.2};
  spec.dims = {16, 16, 4};
  spec.bev_stride = 2;
  const auto ones = Tensor::full({1, 64}, 1.0);
  const auto zeros = Tensor::zeros({1, 64});
  Box3D box;
  box.x = 0.2;
  box.y = -0.1;
  box.w = 0.5;
  box.l = 0.7;
  // Constant unit gap: every grid sample contributes smooth-L1(1) = 0.5.
  CHECK(instance_loss(ones, zeros, {box}, spec, cfg).item() ==
        doctest::Approx(cfg.w_I * 0.5).epsilon(1e-12));
  // Identical maps and the empty box list are exact zeros.
  CHECK(instance_loss(ones, ones, {box}, spec, cfg).item() == 0.0);
  CHECK(instance_loss(ones, zeros, {}, spec, cfg).item() == 0.0);
  // A box hanging past the border still samples 25 clamped points.
  Box3D outside = box;
  outside.x = 1.55;
  CHECK(instance_loss(ones, zeros, {outside}, spec, cfg).item() ==
        doctest::Approx(cfg.w_I * 0.5).epsilon(1e-12));
}

TEST_CASE("instance loss is invariant to quarter turns of a square box") {
  DistillConfig cfg;
  GridSpec spec;
  spec.origin = {-1.6, -1.6, -0.4};
  spec.voxel_size = {0.2, 0.2, 0.2};
  spec.dims = {16, 16, 4};
  spec.bev_stride = 2;
  Rng rng(63);
  const auto bev_s = rand_tensor({3, 64}, rng, -1.0, 1.0);
  const auto bev_m = rand_tensor({3, 64}, rng, -1.0, 1.0);
  Box3D box;
  box.x = 0.15;
  box.y = -0.25;
  box.w = box.l = 0.9;
  box.yaw = 0.0;
  const double base = instance_loss(bev_s, bev_m, {box}, spec, cfg).item();
  box.yaw = std::acos(-1.0) / 2.0;
  CHECK(instance_loss(bev_s, bev_m, {box}, spec, cfg).item() ==
        doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("instance loss gradient matches finite differences") {
  DistillConfig cfg;
  GridSpec spec;
  spec.origin = {-1.6, -1.6, -0.4};
  spec.voxel_size = {0.2, 0.2, 0.2};
  spec.dims = {16, 16, 4};
  spec.bev_stride = 2;
  Rng rng(67);
  auto bev_s = rand_tensor({2, 64}, rng, -0.8, 0.8);
  bev_s.set_requires_grad(true);
  const auto bev_m = rand_tensor({2, 64}, rng, -0.8, 0.8);
  Box3D a;
  a.x = 0.3;
  a.y = 0.2;
  a.w = 0.6;
  a.l = 0.9;
  a.yaw = 0.37;
  Box3D b = a;
  b.x = -0.7;
  b.yaw = -1.1;
  const auto rep = finite_diff_check(
      [&](const Tensor&) { return instance_loss(bev_s, bev_m, {a, b}, spec, cfg); },
      bev_s, 1e-6);
  CHECK(rep.max_rel_err < 1e-4);
}

// ---- total ----

TEST_CASE("total loss arithmetic and enable flags") {
  DistillConfig cfg;
  DistillTerms terms;
  terms.l_cls = Tensor::scalar(0.8);
  terms.l_reg = Tensor::scalar(0.4);
  terms.l_rsp_cls = Tensor::scalar(2.0);
  SUBCASE("supervised only") {
    cfg.enable_rsp = cfg.enable_vxl = cfg.enable_pts = cfg.enable_ins = false;
    const auto [total, bd] = total_loss(terms, cfg);
    CHECK(total.item() == doctest::Approx(0.8 + 0.25 * 0.4).epsilon(1e-12));
    CHECK(bd.l_rsp_cls == 0.0);
  }
  SUBCASE("a lone response term") {
    terms.l_cls = Tensor::scalar(0.0);
    terms.l_reg = Tensor::scalar(0.0);
    const auto [total, bd] = total_loss(terms, cfg);
    CHECK(total.item() == doctest::Approx(1.0).epsilon(1e-12));  // mu * 2
    CHECK(bd.l_rsp_cls == 2.0);
  }
  SUBCASE("doubling mu doubles the distillation share") {
    const auto [t1, bd1] = total_loss(terms, cfg);
    cfg.mu = 1.0;
    const auto [t2, bd2] = total_loss(terms, cfg);
    const double sup = bd1.l_cls + cfg.lambda * bd1.l_reg;
    CHECK(t2.item() - sup == doctest::Approx(2.0 * (t1.item() - sup)).epsilon(1e-12));
    (void)bd2;
  }
}

TEST_CASE("total loss breakdown satisfies its invariant on random terms") {
  Rng rng(71);
  DistillConfig cfg;
  cfg.lambda = 0.37;
  cfg.mu = 0.81;
  DistillTerms terms;
  Tensor* slots[] = {&terms.l_cls,     &terms.l_reg,     &terms.l_rsp_cls,
                     &terms.l_rsp_loc, &terms.l_vxl_fea, &terms.l_vxl_rel,
                     &terms.l_pts_fea, &terms.l_pts_rel, &terms.l_ins};
  for (auto* slot : slots) *slot = Tensor::scalar(rng.uniform(0.0, 3.0));
  const auto [total, bd] = total_loss(terms, cfg);
  const double distill = bd.l_rsp_cls + bd.l_rsp_loc + bd.l_vxl_fea + bd.l_vxl_rel +
                         bd.l_pts_fea + bd.l_pts_rel + bd.l_ins;
  CHECK(std::abs(bd.total - (bd.l_cls + cfg.lambda * bd.l_reg + cfg.mu * distill)) <=
        1e-9);
  CHECK(total.item() == bd.total);
}

TEST_CASE("disabling a level removes its gradient path") {
  DistillConfig cfg;
  cfg.enable_ins = false;
  auto a = Tensor::scalar(1.5);
  a.set_requires_grad(true);
  auto b = Tensor::scalar(0.7);
  b.set_requires_grad(true);
  DistillTerms terms;
  terms.l_cls = scale(b, 2.0);
  terms.l_ins = scale(a, 3.0);  // disabled: must not reach the total
  const auto [total, bd] = total_loss(terms, cfg);
  CHECK(bd.l_ins == 0.0);
  backward(total);
  CHECK(b.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK_FALSE(a.has_grad());
}

TEST_CASE("undefined terms read as zero") {
  DistillConfig cfg;
  DistillTerms terms;
  terms.l_cls = Tensor::scalar(0.3);
  terms.l_reg = Tensor::scalar(0.0);
  const auto [total, bd] = total_loss(terms, cfg);
  CHECK(total.item() == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(bd.l_vxl_fea == 0.0);
  CHECK(bd.l_pts_rel == 0.0);
}

TEST_CASE("self-distillation fixed point zeroes every level and every gradient") {
  // Same parameters on both branches, zeroed semantics, identity adaptation:
  // the four levels must vanish exactly and add nothing to the gradient.
  GridSpec spec;
  spec.origin = {-1.6, -1.6, -0.4};
  spec.voxel_size = {0.2, 0.2, 0.2};
  spec.dims = {16, 16, 4};
  spec.bev_stride = 2;
  DetectorArch arch;
  arch.channels = 6;
  arch.n_classes = 2;
  arch.heads = HeadSpec::pairs(2);
  DistillConfig cfg;

  Scene scene;
  scene.n_classes = 2;
  Rng rng(73);
  Box3D box;
  box.x = 0.3;
  box.y = -0.5;
  box.w = 0.5;
  box.l = 0.8;
  box.h = 0.5;
  box.yaw = 0.4;
  box.class_id = 1;
  scene.boxes = {box};
  for (int i = 0; i < 40; ++i) {
    scene.points.push_back(rng.uniform(-1.5, 1.5));
    scene.points.push_back(rng.uniform(-1.5, 1.5));
    scene.points.push_back(rng.uniform(-0.35, 0.35));
    scene.point_to_box.push_back(
        scene.boxes[0].contains(scene.points[3 * i], scene.points[3 * i + 1],
                                scene.points[3 * i + 2])
            ? 0
            : -1);
  }
  scene.semantics.assign(static_cast<std::size_t>(scene.num_points() * 2), 0.0);

  auto params = init_detector_params(arch, 5);
  params.set_requires_grad(true);
  // Identity adaptation: relu(x I + 0) = x for the rectified MLP features.
  std::vector<double> eye(36, 0.0);
  for (int i = 0; i < 6; ++i) eye[static_cast<std::size_t>(i * 6 + i)] = 1.0;
  AdaptationLayer adapt{Tensor::from_data({6, 6}, std::move(eye)), Tensor::zeros({6})};
  adapt.weight.set_requires_grad(true);
  adapt.bias.set_requires_grad(true);

  const auto targets = make_gt_targets(scene, arch.heads, spec);

  const auto run = [&](bool distill_on) {
    cfg.enable_rsp = cfg.enable_vxl = cfg.enable_pts = cfg.enable_ins = distill_on;
    const auto student = forward(scene, Modality::student, params, spec, arch);
    DistillTerms terms;
    std::tie(terms.l_cls, terms.l_reg) = supervised_loss(student, targets);
    if (distill_on) {
      // The teacher shares the parameters; detach it by value.
      ParamStore frozen = ParamStore::load("fixed_point_params.bin");
      const auto teacher = forward(scene, Modality::teacher, frozen, spec, arch);
      const auto sets = mine_crucial_responses(student.heatmaps, targets.heatmaps, cfg.tau);
      terms.l_rsp_cls = response_cls_loss(student.heatmaps, teacher.heatmaps, sets, cfg);
      terms.l_rsp_loc = response_reg_loss(student.regression, teacher.regression, sets, cfg);
      const auto vsets = mine_crucial_voxels(sets, student.voxel_features, spec);
      const auto adapted = adapt.apply(student.voxel_features.features);
      terms.l_vxl_fea =
          voxel_feature_loss(adapted, teacher.voxel_features.features, vsets, cfg);
      terms.l_vxl_rel = voxel_relation_loss(student.voxel_features.features,
                                            teacher.voxel_features.features, vsets, cfg);
      auto adapted_grid = student.voxel_features;
      adapted_grid.features = adapted;
      std::tie(terms.l_pts_fea, terms.l_pts_rel) =
          point_losses(adapted_grid, teacher.voxel_features, scene, spec, cfg, 11);
      terms.l_ins =
          instance_loss(student.bev_features, teacher.bev_features, {box}, spec, cfg);
    }
    return total_loss(terms, cfg);
  };

  params.save("fixed_point_params.bin");
  const auto [full_total, bd] = run(true);
  CHECK(bd.l_rsp_cls == 0.0);
  CHECK(bd.l_rsp_loc == 0.0);
  CHECK(bd.l_vxl_fea == 0.0);
  CHECK(bd.l_vxl_rel == 0.0);
  CHECK(bd.l_pts_fea == 0.0);
  CHECK(bd.l_pts_rel == 0.0);
  CHECK(bd.l_ins == 0.0);
  CHECK(bd.total == doctest::Approx(bd.l_cls + cfg.lambda * bd.l_reg).epsilon(1e-12));

  params.zero_grad();
  backward(full_total);
  std::vector<std::vector<double>> grads_full;
  for (const auto& name : params.names()) {
    const auto g = params.at(name).grad();
    grads_full.emplace_back(g.begin(), g.end());
  }
  // Adaptation parameters sit on a vanished branch: zero gradient.
  for (const double g : adapt.weight.grad()) CHECK(g == 0.0);
  for (const double g : adapt.bias.grad()) CHECK(g == 0.0);

  params.zero_grad();
  const auto [plain_total, bd2] = run(false);
  (void)bd2;
  backward(plain_total);
  std::size_t i = 0;
  for (const auto& name : params.names()) {
    const auto g = params.at(name).grad();
    const auto& want = grads_full[i++];
    REQUIRE(g.size() == want.size());
    for (std::size_t j = 0; j < want.size(); ++j) CHECK(g[j] == want[j]);
  }
  std::remove("fixed_point_params.bin");
}

TEST_CASE("distill config validation") {
  DistillConfig cfg;
  cfg.validate();
  cfg.tau = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = DistillConfig{};
  cfg.w_r2 = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = DistillConfig{};
  cfg.w_attr[4] = -0.1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = DistillConfig{};
  cfg.point_cap = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = DistillConfig{};
  cfg.roi_grid = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = DistillConfig{};
  cfg.nms_iou = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

}  // TEST_SUITE
