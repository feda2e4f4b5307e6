#include "kd3d/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace kd3d {

namespace {

[[noreturn]] void fail_ckpt(const std::string& path, const std::string& what,
                            std::size_t offset) {
  throw std::runtime_error("checkpoint " + path + ": " + what + " at byte offset " +
                           std::to_string(offset));
}

constexpr char kCkptMagic[4] = {'K', 'D', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;
constexpr std::uint32_t kMaxNameLen = 4096;
constexpr std::uint32_t kMaxRank = 8;
constexpr std::int64_t kMaxElements = std::int64_t{1} << 40;

struct ByteReader {
  const std::string& path;
  std::ifstream& in;
  std::size_t offset = 0;

  void read(void* dst, std::size_t n, const char* what) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in) fail_ckpt(path, std::string("truncated ") + what, offset);
    offset += n;
  }
  template <typename T>
  T pod(const char* what) {
    T v{};
    read(&v, sizeof(T), what);
    return v;
  }
};

}  // namespace

HeadSpec HeadSpec::pairs(int n_classes) {
  HeadSpec spec;
  for (int c = 0; c < n_classes; c += 2) {
    std::vector<int> group = {c};
    if (c + 1 < n_classes) group.push_back(c + 1);
    spec.groups.push_back(std::move(group));
  }
  return spec;
}

void HeadSpec::validate(int n_classes) const {
  std::vector<int> seen(static_cast<std::size_t>(n_classes), 0);
  for (const auto& group : groups) {
    if (group.empty()) throw std::invalid_argument("HeadSpec: empty head group");
    for (const int c : group) {
      if (c < 0 || c >= n_classes)
        throw std::invalid_argument("HeadSpec: class id out of range");
      ++seen[static_cast<std::size_t>(c)];
    }
  }
  for (const int count : seen)
    if (count != 1)
      throw std::invalid_argument("HeadSpec: groups must partition the class ids");
}

void DetectorArch::validate() const {
  if (channels < 1) throw std::invalid_argument("DetectorArch: channels must be >= 1");
  if (n_classes < 1) throw std::invalid_argument("DetectorArch: n_classes must be >= 1");
  heads.validate(n_classes);
}

std::int64_t ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < order_.size(); ++i)
    if (order_[i] == name) return static_cast<std::int64_t>(i);
  return -1;
}

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  if (name.empty()) throw std::invalid_argument("ParamStore: empty parameter name");
  if (find(name) >= 0)
    throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  order_.push_back(name);
  values_.push_back(std::move(t));
  return values_.back();
}

Tensor& ParamStore::at(const std::string& name) {
  const auto i = find(name);
  if (i < 0) throw std::runtime_error("ParamStore: unknown parameter " + name);
  return values_[static_cast<std::size_t>(i)];
}

const Tensor& ParamStore::at(const std::string& name) const {
  const auto i = find(name);
  if (i < 0) throw std::runtime_error("ParamStore: unknown parameter " + name);
  return values_[static_cast<std::size_t>(i)];
}

bool ParamStore::has(const std::string& name) const { return find(name) >= 0; }

std::vector<Tensor> ParamStore::tensors() const { return values_; }

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& t : values_) n += t.numel();
  return n;
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& t : values_) t.set_requires_grad(on);
}

void ParamStore::zero_grad() {
  for (auto& t : values_) t.zero_grad();
}

void ParamStore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint " + path + ": cannot open for writing");
  out.write(kCkptMagic, 4);
  const auto put = [&](const void* src, std::size_t n) {
    out.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
  };
  put(&kCkptVersion, sizeof(kCkptVersion));
  const std::uint64_t count = order_.size();
  put(&count, sizeof(count));
  for (std::size_t i = 0; i < order_.size(); ++i) {
    const auto name_len = static_cast<std::uint32_t>(order_[i].size());
    put(&name_len, sizeof(name_len));
    put(order_[i].data(), order_[i].size());
    const auto& shape = values_[i].shape();
    const auto rank = static_cast<std::uint32_t>(shape.size());
    put(&rank, sizeof(rank));
    for (const auto d : shape) put(&d, sizeof(d));
    const auto data = values_[i].data();
    put(data.data(), data.size() * sizeof(double));
  }
  if (!out) throw std::runtime_error("checkpoint " + path + ": write failed");
}

ParamStore ParamStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint " + path + ": cannot open");
  ByteReader r{path, in};
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kCkptMagic, 4) != 0) fail_ckpt(path, "bad magic", 0);
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kCkptVersion)
    fail_ckpt(path, "unsupported version " + std::to_string(version), 4);
  const auto count = r.pod<std::uint64_t>("tensor count");
  if (count > kMaxNameLen) fail_ckpt(path, "implausible tensor count", r.offset);
  ParamStore store;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.pod<std::uint32_t>("name length");
    if (name_len == 0 || name_len > kMaxNameLen)
      fail_ckpt(path, "implausible name length", r.offset);
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "name");
    const auto rank = r.pod<std::uint32_t>("rank");
    if (rank > kMaxRank) fail_ckpt(path, "implausible rank", r.offset);
    Shape shape(rank);
    std::int64_t numel = 1;
    for (auto& d : shape) {
      d = r.pod<std::int64_t>("dimension");
      if (d < 0 || (d > 0 && numel > kMaxElements / d))
        fail_ckpt(path, "implausible shape", r.offset);
      numel *= d;
    }
    std::vector<double> data(static_cast<std::size_t>(numel));
    r.read(data.data(), data.size() * sizeof(double), "tensor data");
    store.add(name, Tensor::from_data(shape, std::move(data)));
  }
  in.peek();
  if (!in.eof()) fail_ckpt(path, "trailing bytes", r.offset);
  return store;
}

namespace {

Tensor uniform_param(Shape shape, double bound, Rng& rng) {
  std::int64_t n = 1;
  for (const auto d : shape) n *= d;
  std::vector<double> data(static_cast<std::size_t>(n));
  for (auto& x : data) x = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace

ParamStore init_detector_params(const DetectorArch& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  ParamStore store;
  const std::int64_t c = arch.channels;
  const std::int64_t in = arch.in_width();
  // Per-voxel MLP: rows [V, in] -> [V, c] -> [V, c].
  const double b1 = 1.0 / std::sqrt(static_cast<double>(in));
  store.add("mlp1.weight", uniform_param({in, c}, b1, rng));
  store.add("mlp1.bias", uniform_param({c}, b1, rng));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(c));
  store.add("mlp2.weight", uniform_param({c, c}, b2, rng));
  store.add("mlp2.bias", uniform_param({c}, b2, rng));
  // BEV trunk: two 3x3 convolutions.
  const double bc = 1.0 / std::sqrt(static_cast<double>(c * 9));
  store.add("bev1.weight", uniform_param({c, c * 9}, bc, rng));
  store.add("bev1.bias", uniform_param({c}, bc, rng));
  store.add("bev2.weight", uniform_param({c, c * 9}, bc, rng));
  store.add("bev2.bias", uniform_param({c}, bc, rng));
  // Heads: per-group 1x1 heatmap heads and one shared regression head.
  const double bh = 1.0 / std::sqrt(static_cast<double>(c));
  for (std::size_t i = 0; i < arch.heads.n_heads(); ++i) {
    const auto kh = static_cast<std::int64_t>(arch.heads.groups[i].size());
    const auto prefix = "head" + std::to_string(i) + ".cls";
    store.add(prefix + ".weight", uniform_param({kh, c}, bh, rng));
    store.add(prefix + ".bias", uniform_param({kh}, bh, rng));
  }
  store.add("reg.weight", uniform_param({10, c}, bh, rng));
  store.add("reg.bias", uniform_param({10}, bh, rng));
  return store;
}

AdaptationLayer add_adaptation_layer(ParamStore& params, const std::string& prefix,
                                     int c_in, int c_out, Rng& rng) {
  if (c_in < 1 || c_out < 1)
    throw std::invalid_argument("add_adaptation_layer: widths must be >= 1");
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_in));
  params.add(prefix + ".weight", uniform_param({c_in, c_out}, bound, rng));
  params.add(prefix + ".bias", uniform_param({c_out}, bound, rng));
  return adaptation_layer(params, prefix);
}

AdaptationLayer adaptation_layer(const ParamStore& params, const std::string& prefix) {
  return AdaptationLayer{params.at(prefix + ".weight"), params.at(prefix + ".bias")};
}

Tensor AdaptationLayer::apply(const Tensor& rows) const {
  return relu(add_rowvec(matmul(rows, weight), bias));
}

DetectorOutputs forward(const Scene& scene, Modality modality, const ParamStore& params,
                        const GridSpec& spec, const DetectorArch& arch) {
  arch.validate();
  spec.validate();
  if (scene.n_classes != arch.n_classes)
    throw std::invalid_argument("forward: scene/arch class count mismatch");

  auto grid = voxelize(scene, spec, modality == Modality::teacher);
  const auto bh = spec.bev_h(), bw = spec.bev_w();

  Tensor x = grid.features;  // [V, 4+K], constant input
  x = relu(add_rowvec(matmul(x, params.at("mlp1.weight")), params.at("mlp1.bias")));
  x = relu(add_rowvec(matmul(x, params.at("mlp2.weight")), params.at("mlp2.bias")));

  DetectorOutputs out;
  out.h = bh;
  out.w = bw;
  out.voxel_features = grid;
  out.voxel_features.features = x;

  // Collapse each bev_stride x bev_stride column (all z) by max.
  std::vector<std::int64_t> seg(static_cast<std::size_t>(grid.rows()));
  for (std::int64_t r = 0; r < grid.rows(); ++r) {
    const auto& c = grid.coords[static_cast<std::size_t>(r)];
    seg[static_cast<std::size_t>(r)] =
        (c[1] / spec.bev_stride) * bw + (c[0] / spec.bev_stride);
  }
  Tensor bev = transpose(segment_max(x, seg, bh * bw));  // [C, H*W]
  bev = relu(conv3x3(bev, params.at("bev1.weight"), params.at("bev1.bias"), bh, bw));
  bev = relu(conv3x3(bev, params.at("bev2.weight"), params.at("bev2.bias"), bh, bw));
  out.bev_features = bev;

  for (std::size_t i = 0; i < arch.heads.n_heads(); ++i) {
    const auto prefix = "head" + std::to_string(i) + ".cls";
    out.heatmaps.push_back(sigmoid(
        add_colvec(matmul(params.at(prefix + ".weight"), bev), params.at(prefix + ".bias"))));
  }
  out.regression = add_colvec(matmul(params.at("reg.weight"), bev), params.at("reg.bias"));
  return out;
}

GtTargets make_gt_targets(const Scene& scene, const HeadSpec& heads, const GridSpec& spec) {
  spec.validate();
  heads.validate(scene.n_classes);
  const auto bh = spec.bev_h(), bw = spec.bev_w();
  const auto cells = bh * bw;
  const double cell_x = spec.voxel_size[0] * spec.bev_stride;
  const double cell_y = spec.voxel_size[1] * spec.bev_stride;

  // class id -> (head index, slot within the head's heatmap)
  std::vector<std::pair<std::size_t, std::int64_t>> slot_of(
      static_cast<std::size_t>(scene.n_classes));
  for (std::size_t h = 0; h < heads.n_heads(); ++h)
    for (std::size_t j = 0; j < heads.groups[h].size(); ++j)
      slot_of[static_cast<std::size_t>(heads.groups[h][j])] = {h,
                                                               static_cast<std::int64_t>(j)};

  std::vector<std::vector<double>> hm(heads.n_heads());
  for (std::size_t h = 0; h < heads.n_heads(); ++h)
    hm[h].assign(static_cast<std::size_t>(heads.groups[h].size()) *
                     static_cast<std::size_t>(cells),
                 0.0);
  std::vector<double> reg(static_cast<std::size_t>(10 * cells), 0.0);

  GtTargets t;
  t.mask.assign(static_cast<std::size_t>(cells), 0);

  for (const auto& box : scene.boxes) {
    const double fx = (box.x - spec.origin[0]) / cell_x;
    const double fy = (box.y - spec.origin[1]) / cell_y;
    const auto cx = static_cast<std::int64_t>(std::floor(fx));
    const auto cy = static_cast<std::int64_t>(std::floor(fy));
    if (cx < 0 || cx >= bw || cy < 0 || cy >= bh) {
      ++t.n_skipped;
      continue;
    }
    // Gaussian splat sized from the box footprint (square-cell convention).
    const double radius = std::max(1.0, std::min(box.w, box.l) / (3.0 * cell_x));
    const double sigma = (2.0 * radius + 1.0) / 6.0;
    const auto win = static_cast<std::int64_t>(std::ceil(radius));
    const auto [head, slot] = slot_of[static_cast<std::size_t>(box.class_id)];
    for (std::int64_t dy = -win; dy <= win; ++dy) {
      for (std::int64_t dx = -win; dx <= win; ++dx) {
        const auto x = cx + dx, y = cy + dy;
        if (x < 0 || x >= bw || y < 0 || y >= bh) continue;
        const double v = std::exp(-static_cast<double>(dx * dx + dy * dy) /
                                  (2.0 * sigma * sigma));
        auto& cell = hm[head][static_cast<std::size_t>(slot * cells + y * bw + x)];
        cell = std::max(cell, v);
      }
    }
    // Regression target at the center cell; a later box overwrites.
    const auto cell = cy * bw + cx;
    t.mask[static_cast<std::size_t>(cell)] = 1;
    const double center_x = spec.origin[0] + (static_cast<double>(cx) + 0.5) * cell_x;
    const double center_y = spec.origin[1] + (static_cast<double>(cy) + 0.5) * cell_y;
    const double vals[10] = {box.x - center_x, box.y - center_y, box.z,
                             std::log(box.w),  std::log(box.l),  std::log(box.h),
                             box.vx,           box.vy,           std::sin(box.yaw),
                             std::cos(box.yaw)};
    for (int e = 0; e < 10; ++e) reg[static_cast<std::size_t>(e * cells + cell)] = vals[e];
  }

  for (std::size_t h = 0; h < heads.n_heads(); ++h)
    t.heatmaps.push_back(Tensor::from_data(
        {static_cast<std::int64_t>(heads.groups[h].size()), cells}, std::move(hm[h])));
  t.regression = Tensor::from_data({10, cells}, std::move(reg));
  return t;
}

std::pair<Tensor, Tensor> supervised_loss(const DetectorOutputs& out,
                                          const GtTargets& targets) {
  if (out.heatmaps.size() != targets.heatmaps.size())
    throw std::invalid_argument("supervised_loss: head count mismatch");
  if (out.heatmaps.empty()) throw std::invalid_argument("supervised_loss: no heads");
  if (!out.regression.defined() || !targets.regression.defined())
    throw std::invalid_argument("supervised_loss: regression map missing");

  Tensor l_cls = focal_loss(out.heatmaps[0], targets.heatmaps[0]);
  for (std::size_t h = 1; h < out.heatmaps.size(); ++h)
    l_cls = add(l_cls, focal_loss(out.heatmaps[h], targets.heatmaps[h]));
  l_cls = scale(l_cls, 1.0 / static_cast<double>(out.heatmaps.size()));

  const auto cells = static_cast<std::int64_t>(targets.mask.size());
  if (out.regression.dim(1) != cells)
    throw std::invalid_argument("supervised_loss: regression extent mismatch");
  std::vector<std::int64_t> idx;
  for (std::int64_t cell = 0; cell < cells; ++cell) {
    if (!targets.mask[static_cast<std::size_t>(cell)]) continue;
    for (std::int64_t e = 0; e < 10; ++e) idx.push_back(e * cells + cell);
  }
  Tensor l_reg = Tensor::scalar(0.0);
  if (!idx.empty()) {
    const Tensor pred = gather(out.regression, idx);
    const Tensor want = gather(targets.regression, std::move(idx));
    l_reg = mean(smooth_l1(pred, want));
  }
  return {l_cls, l_reg};
}

}  // namespace kd3d
