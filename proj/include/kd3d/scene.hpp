#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace kd3d {

/// Oriented 3-D box. `l` runs along the heading (body x), `w` lateral
/// (body y), `yaw` in (-pi, pi].
struct Box3D {
  double x = 0, y = 0, z = 0;
  double w = 0, l = 0, h = 0;
  double vx = 0, vy = 0;
  double yaw = 0;
  int class_id = 0;

  /// Radius of the circumscribed circle of the BEV footprint.
  double bev_circumradius() const;
  /// Rotated-box containment test (boundaries inclusive).
  bool contains(double px, double py, double pz) const;
};

/// Separating-axis overlap test on the BEV footprints of two boxes.
bool bev_overlap(const Box3D& a, const Box3D& b);

struct Scene {
  std::vector<double> points;              // N x 3, row-major meters
  std::vector<double> semantics;           // N x n_classes, scores in [0, 1]
  std::vector<std::int32_t> point_to_box;  // N, -1 for background
  std::vector<Box3D> boxes;
  int n_classes = 0;
  std::uint64_t seed = 0;

  std::int64_t num_points() const { return static_cast<std::int64_t>(points.size() / 3); }
};

struct SceneConfig {
  // x_min, x_max, y_min, y_max, z_min, z_max
  std::array<double, 6> range{-8.0, 8.0, -8.0, 8.0, -1.0, 1.0};
  int n_classes = 4;
  std::array<int, 2> boxes_per_scene{2, 5};
  std::array<int, 2> points_per_box{24, 192};
  int background_points = 256;
  double distance_sparsity_exponent = 1.0;
  double semantic_noise = 0.2;

  void validate() const;  // throws std::invalid_argument on bad values
};

/// Points-per-box density law: base * (radius/d)^e, rounded and clamped to
/// [lo, hi]. Exposed so the falloff can be checked directly.
int scaled_point_count(int base, double range_radius, double distance, double exponent,
                       int lo, int hi);

/// Deterministic scene synthesis: boxes with non-overlapping BEV footprints
/// fully inside the range, interior points whose density falls off with
/// distance, uniform background clutter, and semantic scores from
/// paint_points. Identical (cfg, seed) pairs produce identical scenes.
Scene generate_scene(const SceneConfig& cfg, std::uint64_t seed);

/// Simulated per-point segmentation scores. Points inside a class-c box get
/// a row peaked at c (peak 1 - noise*u, the rest spread evenly over the
/// other classes); background points get near-uniform low scores. Rows sum
/// to at most 1.
std::vector<double> paint_points(const Scene& scene, double noise, std::uint64_t seed);

/// Binary dataset container; round-trips are bit-exact. Malformed input
/// fails with an error naming the byte offset.
void save_dataset(const std::vector<Scene>& scenes, const std::string& path);
std::vector<Scene> load_dataset(const std::string& path);

/// Human-readable dump for debugging; not meant to be read back.
void export_scenes_json(const std::vector<Scene>& scenes, const std::string& path);

}  // namespace kd3d
