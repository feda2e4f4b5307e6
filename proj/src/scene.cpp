#include "kd3d/scene.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "kd3d/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "dataset container assumes a little-endian host");

namespace kd3d {

namespace {

constexpr char kMagic[4] = {'S', '2', 'M', '2'};
constexpr std::uint32_t kVersion = 1;
constexpr double kPi = 3.14159265358979323846;

// Interior points are sampled slightly inside the box so containment tests
// never sit on the boundary.
constexpr double kInteriorScale = 0.999;

constexpr int kBoxPlacementAttempts = 100;
constexpr int kBackgroundAttempts = 1000;

// Class-conditional BEV footprints overlap between adjacent classes, so
// geometry alone cannot always identify the class.
void class_size_bounds(int cls, double& w_lo, double& w_hi, double& l_lo, double& l_hi) {
  w_lo = 0.55 + 0.12 * cls;
  w_hi = 0.95 + 0.12 * cls;
  l_lo = 1.0 + 0.3 * cls;
  l_hi = 1.6 + 0.3 * cls;
}

}  // namespace

double Box3D::bev_circumradius() const {
  return std::sqrt(0.25 * (l * l + w * w));
}

bool Box3D::contains(double px, double py, double pz) const {
  const double dx = px - x, dy = py - y;
  const double c = std::cos(yaw), s = std::sin(yaw);
  const double bx = c * dx + s * dy;   // along heading
  const double by = -s * dx + c * dy;  // lateral
  return std::abs(bx) <= 0.5 * l && std::abs(by) <= 0.5 * w && std::abs(pz - z) <= 0.5 * h;
}

bool bev_overlap(const Box3D& a, const Box3D& b) {
  // Separating axis theorem on the two rectangles' edge normals.
  const auto corners = [](const Box3D& bx, double out[8]) {
    const double c = std::cos(bx.yaw), s = std::sin(bx.yaw);
    const double hl = 0.5 * bx.l, hw = 0.5 * bx.w;
    const double ex[4] = {hl, hl, -hl, -hl};
    const double ey[4] = {hw, -hw, -hw, hw};
    for (int i = 0; i < 4; ++i) {
      out[2 * i] = bx.x + c * ex[i] - s * ey[i];
      out[2 * i + 1] = bx.y + s * ex[i] + c * ey[i];
    }
  };
  double ca[8], cb[8];
  corners(a, ca);
  corners(b, cb);
  const double axes[4][2] = {
      {std::cos(a.yaw), std::sin(a.yaw)},
      {-std::sin(a.yaw), std::cos(a.yaw)},
      {std::cos(b.yaw), std::sin(b.yaw)},
      {-std::sin(b.yaw), std::cos(b.yaw)},
  };
  for (const auto& ax : axes) {
    double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
    for (int i = 0; i < 4; ++i) {
      const double pa = ca[2 * i] * ax[0] + ca[2 * i + 1] * ax[1];
      const double pb = cb[2 * i] * ax[0] + cb[2 * i + 1] * ax[1];
      amin = std::min(amin, pa);
      amax = std::max(amax, pa);
      bmin = std::min(bmin, pb);
      bmax = std::max(bmax, pb);
    }
    if (amax < bmin || bmax < amin) return false;
  }
  return true;
}

void SceneConfig::validate() const {
  if (!(range[0] < range[1]) || !(range[2] < range[3]) || !(range[4] < range[5]))
    throw std::invalid_argument("SceneConfig: range bounds must be ordered");
  if (n_classes < 1) throw std::invalid_argument("SceneConfig: need at least one class");
  if (boxes_per_scene[0] < 0 || boxes_per_scene[1] < boxes_per_scene[0])
    throw std::invalid_argument("SceneConfig: bad boxes_per_scene interval");
  if (points_per_box[0] < 0 || points_per_box[1] < points_per_box[0])
    throw std::invalid_argument("SceneConfig: bad points_per_box interval");
  if (background_points < 0)
    throw std::invalid_argument("SceneConfig: negative background_points");
  if (semantic_noise < 0.0 || semantic_noise > 1.0)
    throw std::invalid_argument("SceneConfig: semantic_noise outside [0, 1]");
}

int scaled_point_count(int base, double range_radius, double distance, double exponent,
                       int lo, int hi) {
  const double d = std::max(distance, 1e-6);
  const double raw = base * std::pow(range_radius / d, exponent);
  const auto n = static_cast<int>(std::llround(raw));
  return std::clamp(n, lo, hi);
}

Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Scene scene;
  scene.seed = seed;
  scene.n_classes = cfg.n_classes;

  const double x_lo = cfg.range[0], x_hi = cfg.range[1];
  const double y_lo = cfg.range[2], y_hi = cfg.range[3];
  const double z_lo = cfg.range[4], z_hi = cfg.range[5];
  const double range_radius = std::max(x_hi - x_lo, y_hi - y_lo) / 2.0;

  const int n_boxes = rng.uniform_int(cfg.boxes_per_scene[0], cfg.boxes_per_scene[1]);
  for (int b = 0; b < n_boxes; ++b) {
    Box3D box;
    box.class_id = rng.uniform_int(0, cfg.n_classes - 1);
    double w_lo, w_hi, l_lo, l_hi;
    class_size_bounds(box.class_id, w_lo, w_hi, l_lo, l_hi);
    box.w = rng.uniform(w_lo, w_hi);
    box.l = rng.uniform(l_lo, l_hi);
    box.h = rng.uniform(0.5, 1.1);
    box.yaw = kPi * (1.0 - 2.0 * rng.uniform());  // (-pi, pi]
    box.vx = rng.uniform(-2.0, 2.0);
    box.vy = rng.uniform(-2.0, 2.0);

    const double rc = box.bev_circumradius();
    const bool feasible = x_lo + rc < x_hi - rc && y_lo + rc < y_hi - rc &&
                          z_lo + box.h / 2 < z_hi - box.h / 2;
    bool placed = false;
    for (int attempt = 0; feasible && attempt < kBoxPlacementAttempts; ++attempt) {
      box.x = rng.uniform(x_lo + rc, x_hi - rc);
      box.y = rng.uniform(y_lo + rc, y_hi - rc);
      box.z = rng.uniform(z_lo + box.h / 2, z_hi - box.h / 2);
      bool clear = true;
      for (const auto& other : scene.boxes)
        if (bev_overlap(box, other)) {
          clear = false;
          break;
        }
      if (clear) {
        placed = true;
        break;
      }
    }
    if (!placed)
      throw std::runtime_error("generate_scene: could not place box " + std::to_string(b) +
                               " without overlap (seed " + std::to_string(seed) + ")");
    scene.boxes.push_back(box);
  }

  // Interior points, density falling off with BEV distance from the sensor.
  for (std::size_t b = 0; b < scene.boxes.size(); ++b) {
    const auto& box = scene.boxes[b];
    const double d = std::hypot(box.x, box.y);
    const int count =
        scaled_point_count(cfg.points_per_box[0], range_radius, d,
                           cfg.distance_sparsity_exponent, cfg.points_per_box[0],
                           cfg.points_per_box[1]);
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    for (int i = 0; i < count; ++i) {
      const double bx = rng.uniform(-0.5, 0.5) * box.l * kInteriorScale;
      const double by = rng.uniform(-0.5, 0.5) * box.w * kInteriorScale;
      const double bz = rng.uniform(-0.5, 0.5) * box.h * kInteriorScale;
      scene.points.push_back(box.x + c * bx - s * by);
      scene.points.push_back(box.y + s * bx + c * by);
      scene.points.push_back(box.z + bz);
      scene.point_to_box.push_back(static_cast<std::int32_t>(b));
    }
  }

  // Background clutter rejection-sampled outside every box.
  for (int i = 0; i < cfg.background_points; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kBackgroundAttempts; ++attempt) {
      const double px = rng.uniform(x_lo, x_hi);
      const double py = rng.uniform(y_lo, y_hi);
      const double pz = rng.uniform(z_lo, z_hi);
      bool inside = false;
      for (const auto& box : scene.boxes)
        if (box.contains(px, py, pz)) {
          inside = true;
          break;
        }
      if (!inside) {
        scene.points.push_back(px);
        scene.points.push_back(py);
        scene.points.push_back(pz);
        scene.point_to_box.push_back(-1);
        placed = true;
        break;
      }
    }
    if (!placed)
      throw std::runtime_error(
          "generate_scene: could not place a background point outside all boxes (seed " +
          std::to_string(seed) + ")");
  }

  // Semantic scores come from a derived stream so geometry and painting stay
  // independently reproducible.
  scene.semantics = paint_points(scene, cfg.semantic_noise, seed ^ 0x53454D53u);
  return scene;
}

std::vector<double> paint_points(const Scene& scene, double noise, std::uint64_t seed) {
  if (noise < 0.0 || noise > 1.0)
    throw std::invalid_argument("paint_points: noise outside [0, 1]");
  const auto n = scene.num_points();
  const int k = scene.n_classes;
  if (k < 1) throw std::invalid_argument("paint_points: scene has no classes");
  Rng rng(seed);
  std::vector<double> sem(static_cast<std::size_t>(n * k), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto b = scene.point_to_box[i];
    double* row = sem.data() + i * k;
    if (b >= 0) {
      const int cls = scene.boxes[static_cast<std::size_t>(b)].class_id;
      const double u = rng.uniform();
      const double peak = 1.0 - noise * u;
      const double rest = k > 1 ? (1.0 - peak) / (k - 1) : 0.0;
      for (int j = 0; j < k; ++j) row[j] = j == cls ? peak : rest;
    } else {
      // Low near-uniform scores; the missing mass reads as "background".
      for (int j = 0; j < k; ++j)
        row[j] = (0.5 / k) * (1.0 + noise * (2.0 * rng.uniform() - 1.0));
    }
  }
  return sem;
}

// ---- dataset container ----

namespace {

struct ByteWriter {
  std::ofstream out;
  explicit ByteWriter(const std::string& path) : out(path, std::ios::binary) {
    if (!out) throw std::runtime_error("save_dataset: cannot open " + path);
  }
  void raw(const void* src, std::size_t n) {
    out.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
    if (!out) throw std::runtime_error("save_dataset: write failed");
  }
  template <class T>
  void scalar(T v) {
    raw(&v, sizeof v);
  }
};

struct ByteReader {
  std::ifstream in;
  std::uint64_t offset = 0;
  explicit ByteReader(const std::string& path) : in(path, std::ios::binary) {
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path);
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error("load_dataset: " + what + " at byte offset " +
                             std::to_string(offset));
  }
  void raw(void* dst, std::size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) fail("unexpected end of file");
    offset += n;
  }
  template <class T>
  T scalar() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  bool at_eof() {
    return in.peek() == std::ifstream::traits_type::eof();
  }
};

constexpr std::uint64_t kMaxPlausibleCount = 1ull << 32;

}  // namespace

void save_dataset(const std::vector<Scene>& scenes, const std::string& path) {
  ByteWriter w(path);
  w.raw(kMagic, 4);
  w.scalar(kVersion);
  w.scalar(static_cast<std::uint64_t>(scenes.size()));
  for (const auto& s : scenes) {
    const auto n = static_cast<std::uint64_t>(s.num_points());
    w.scalar(s.seed);
    w.scalar(static_cast<std::uint32_t>(s.n_classes));
    w.scalar(n);
    w.scalar(static_cast<std::uint64_t>(s.boxes.size()));
    if (!s.points.empty()) w.raw(s.points.data(), s.points.size() * sizeof(double));
    if (s.semantics.size() != n * static_cast<std::uint64_t>(s.n_classes))
      throw std::runtime_error("save_dataset: semantics size inconsistent with points");
    if (!s.semantics.empty()) w.raw(s.semantics.data(), s.semantics.size() * sizeof(double));
    if (!s.point_to_box.empty())
      w.raw(s.point_to_box.data(), s.point_to_box.size() * sizeof(std::int32_t));
    for (const auto& b : s.boxes) {
      const double fields[9] = {b.x, b.y, b.z, b.w, b.l, b.h, b.vx, b.vy, b.yaw};
      w.raw(fields, sizeof fields);
      w.scalar(static_cast<std::int32_t>(b.class_id));
    }
  }
}

std::vector<Scene> load_dataset(const std::string& path) {
  ByteReader r(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    r.offset = 0;
    r.fail("bad magic");
  }
  const auto version = r.scalar<std::uint32_t>();
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.scalar<std::uint64_t>();
  if (count > kMaxPlausibleCount) r.fail("implausible scene count");
  std::vector<Scene> scenes;
  scenes.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Scene s;
    s.seed = r.scalar<std::uint64_t>();
    s.n_classes = static_cast<int>(r.scalar<std::uint32_t>());
    const auto n = r.scalar<std::uint64_t>();
    const auto nb = r.scalar<std::uint64_t>();
    if (n > kMaxPlausibleCount || nb > kMaxPlausibleCount) r.fail("implausible count");
    if (s.n_classes < 0) r.fail("negative class count");
    s.points.resize(n * 3);
    if (n) r.raw(s.points.data(), s.points.size() * sizeof(double));
    s.semantics.resize(n * static_cast<std::uint64_t>(s.n_classes));
    if (!s.semantics.empty()) r.raw(s.semantics.data(), s.semantics.size() * sizeof(double));
    s.point_to_box.resize(n);
    if (n) r.raw(s.point_to_box.data(), s.point_to_box.size() * sizeof(std::int32_t));
    s.boxes.resize(nb);
    for (auto& b : s.boxes) {
      double fields[9];
      r.raw(fields, sizeof fields);
      b.x = fields[0];
      b.y = fields[1];
      b.z = fields[2];
      b.w = fields[3];
      b.l = fields[4];
      b.h = fields[5];
      b.vx = fields[6];
      b.vy = fields[7];
      b.yaw = fields[8];
      b.class_id = static_cast<int>(r.scalar<std::int32_t>());
    }
    scenes.push_back(std::move(s));
  }
  if (!r.at_eof()) r.fail("trailing bytes after last scene");
  return scenes;
}

void export_scenes_json(const std::vector<Scene>& scenes, const std::string& path) {
  nlohmann::ordered_json root = nlohmann::ordered_json::array();
  for (const auto& s : scenes) {
    nlohmann::ordered_json js;
    js["seed"] = s.seed;
    js["n_classes"] = s.n_classes;
    js["num_points"] = s.num_points();
    auto boxes = nlohmann::ordered_json::array();
    for (const auto& b : s.boxes)
      boxes.push_back({{"x", b.x},
                       {"y", b.y},
                       {"z", b.z},
                       {"w", b.w},
                       {"l", b.l},
                       {"h", b.h},
                       {"vx", b.vx},
                       {"vy", b.vy},
                       {"yaw", b.yaw},
                       {"class_id", b.class_id}});
    js["boxes"] = std::move(boxes);
    js["points"] = s.points;
    js["semantics"] = s.semantics;
    js["point_to_box"] = s.point_to_box;
    root.push_back(std::move(js));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_scenes_json: cannot open " + path);
  out << root.dump(2) << "\n";
}

}  // namespace kd3d
