#include "kd3d/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace kd3d {

void TrainConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("train: steps must be at least 1");
  if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (batch_scenes < 1)
    throw std::invalid_argument("train: batch_scenes must be at least 1");
  if (!(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("train: momentum must lie in [0,1)");
  if (train_scenes < 1)
    throw std::invalid_argument("train: train_scenes must be at least 1");
  if (eval_scenes < 1)
    throw std::invalid_argument("train: eval_scenes must be at least 1");
}

void EvalConfig::validate() const {
  if (thresholds.empty()) throw std::invalid_argument("eval: no thresholds");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0))
      throw std::invalid_argument("eval: thresholds must be positive");
    if (i > 0 && !(thresholds[i] > thresholds[i - 1]))
      throw std::invalid_argument("eval: thresholds must be strictly ascending");
  }
  if (!(nms_iou > 0.0 && nms_iou < 1.0))
    throw std::invalid_argument("eval: nms_iou must lie in (0,1)");
  if (top_n < 1) throw std::invalid_argument("eval: top_n must be at least 1");
  if (!(score_thresh >= 0.0 && score_thresh < 1.0))
    throw std::invalid_argument("eval: score_thresh must lie in [0,1)");
}

void RunConfig::validate() const {
  scene.validate();
  grid.validate();
  heads.validate(scene.n_classes);
  arch.validate();
  distill.validate();
  train.validate();
  eval.validate();
  if (arch.n_classes != scene.n_classes)
    throw std::invalid_argument("config: detector classes disagree with the scene");
  if (out_dir.empty()) throw std::invalid_argument("config: out_dir must not be empty");
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw std::invalid_argument("config: " + where + ": " + what);
}

double parse_double(const std::string& v, const std::string& where) {
  double d = 0.0;
  std::size_t pos = 0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::invalid_argument&) {
    fail(where, "not a number: '" + v + "'");
  } catch (const std::out_of_range&) {
    fail(where, "number out of range: '" + v + "'");
  }
  if (pos != v.size()) fail(where, "trailing characters in '" + v + "'");
  return d;
}

std::int64_t parse_int(const std::string& v, const std::string& where) {
  std::int64_t i = 0;
  std::size_t pos = 0;
  try {
    i = std::stoll(v, &pos);
  } catch (const std::invalid_argument&) {
    fail(where, "not an integer: '" + v + "'");
  } catch (const std::out_of_range&) {
    fail(where, "integer out of range: '" + v + "'");
  }
  if (pos != v.size()) fail(where, "trailing characters in '" + v + "'");
  return i;
}

std::uint64_t parse_uint(const std::string& v, const std::string& where) {
  std::uint64_t i = 0;
  std::size_t pos = 0;
  try {
    i = std::stoull(v, &pos);
  } catch (const std::invalid_argument&) {
    fail(where, "not an integer: '" + v + "'");
  } catch (const std::out_of_range&) {
    fail(where, "integer out of range: '" + v + "'");
  }
  if (pos != v.size() || v.find('-') != std::string::npos)
    fail(where, "expected a nonnegative integer, got '" + v + "'");
  return i;
}

bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(where, "expected true/false, got '" + v + "'");
}

std::vector<std::string> split_ws(const std::string& v) {
  std::istringstream in(v);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::vector<double> parse_doubles(const std::string& v, const std::string& where,
                                  std::size_t expect) {
  const auto toks = split_ws(v);
  if (expect != 0 && toks.size() != expect)
    fail(where, "expected " + std::to_string(expect) + " values, got " +
                    std::to_string(toks.size()));
  if (toks.empty()) fail(where, "expected at least one value");
  std::vector<double> out;
  out.reserve(toks.size());
  for (const auto& t : toks) out.push_back(parse_double(t, where));
  return out;
}

std::vector<std::int64_t> parse_ints(const std::string& v, const std::string& where,
                                     std::size_t expect) {
  const auto toks = split_ws(v);
  if (expect != 0 && toks.size() != expect)
    fail(where, "expected " + std::to_string(expect) + " values, got " +
                    std::to_string(toks.size()));
  if (toks.empty()) fail(where, "expected at least one value");
  std::vector<std::int64_t> out;
  out.reserve(toks.size());
  for (const auto& t : toks) out.push_back(parse_int(t, where));
  return out;
}

// "0 1 | 2 3" -> {{0,1},{2,3}}
std::vector<std::vector<int>> parse_groups(const std::string& v, const std::string& where) {
  std::vector<std::vector<int>> groups;
  std::string part;
  std::istringstream in(v);
  std::vector<std::string> parts;
  while (std::getline(in, part, '|')) parts.push_back(part);
  for (const auto& p : parts) {
    const auto ids = parse_ints(trim(p), where, 0);
    std::vector<int> g;
    g.reserve(ids.size());
    for (const auto id : ids) g.push_back(static_cast<int>(id));
    groups.push_back(std::move(g));
  }
  if (groups.empty()) fail(where, "expected at least one head");
  return groups;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  bool heads_given = false;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const auto line = trim(raw);
    if (line.empty()) continue;
    const auto at = "line " + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') fail(at, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section != "scene" && section != "grid" && section != "heads" &&
          section != "detector" && section != "distill" && section != "train" &&
          section != "eval" && section != "run")
        fail(at, "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(at, "expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto val = trim(line.substr(eq + 1));
    if (key.empty()) fail(at, "empty key");
    if (val.empty()) fail(at, "empty value for key '" + key + "'");
    if (section.empty()) fail(at, "key '" + key + "' appears before any [section]");
    const auto where = "[" + section + "] " + key;

    if (section == "scene") {
      if (key == "range") {
        const auto v = parse_doubles(val, where, 6);
        std::copy(v.begin(), v.end(), cfg.scene.range.begin());
      } else if (key == "n_classes") {
        cfg.scene.n_classes = static_cast<int>(parse_int(val, where));
      } else if (key == "boxes_per_scene") {
        const auto v = parse_ints(val, where, 2);
        cfg.scene.boxes_per_scene = {static_cast<int>(v[0]), static_cast<int>(v[1])};
      } else if (key == "points_per_box") {
        const auto v = parse_ints(val, where, 2);
        cfg.scene.points_per_box = {static_cast<int>(v[0]), static_cast<int>(v[1])};
      } else if (key == "background_points") {
        cfg.scene.background_points = static_cast<int>(parse_int(val, where));
      } else if (key == "distance_sparsity_exponent") {
        cfg.scene.distance_sparsity_exponent = parse_double(val, where);
      } else if (key == "semantic_noise") {
        cfg.scene.semantic_noise = parse_double(val, where);
      } else {
        fail(where, "unknown key");
      }
    } else if (section == "grid") {
      if (key == "origin") {
        const auto v = parse_doubles(val, where, 3);
        std::copy(v.begin(), v.end(), cfg.grid.origin.begin());
      } else if (key == "voxel_size") {
        const auto v = parse_doubles(val, where, 3);
        std::copy(v.begin(), v.end(), cfg.grid.voxel_size.begin());
      } else if (key == "dims") {
        const auto v = parse_ints(val, where, 3);
        std::copy(v.begin(), v.end(), cfg.grid.dims.begin());
      } else if (key == "bev_stride") {
        cfg.grid.bev_stride = parse_int(val, where);
      } else {
        fail(where, "unknown key");
      }
    } else if (section == "heads") {
      if (key == "groups") {
        cfg.heads.groups = parse_groups(val, where);
        heads_given = true;
      } else {
        fail(where, "unknown key");
      }
    } else if (section == "detector") {
      if (key == "channels") {
        cfg.arch.channels = static_cast<int>(parse_int(val, where));
      } else {
        fail(where, "unknown key");
      }
    } else if (section == "distill") {
      if (key == "tau") cfg.distill.tau = parse_double(val, where);
      else if (key == "w_r1") cfg.distill.w_r1 = parse_double(val, where);
      else if (key == "w_r2") cfg.distill.w_r2 = parse_double(val, where);
      else if (key == "w_attr") {
        const auto v = parse_doubles(val, where, 10);
        std::copy(v.begin(), v.end(), cfg.distill.w_attr.begin());
      } else if (key == "w_v1") cfg.distill.w_v1 = parse_double(val, where);
      else if (key == "w_v2") cfg.distill.w_v2 = parse_double(val, where);
      else if (key == "w_pf") cfg.distill.w_pf = parse_double(val, where);
      else if (key == "w_I") cfg.distill.w_I = parse_double(val, where);
      else if (key == "lambda") cfg.distill.lambda = parse_double(val, where);
      else if (key == "mu") cfg.distill.mu = parse_double(val, where);
      else if (key == "point_cap") cfg.distill.point_cap = parse_int(val, where);
      else if (key == "roi_grid") cfg.distill.roi_grid = static_cast<int>(parse_int(val, where));
      else if (key == "enable_rsp") cfg.distill.enable_rsp = parse_bool(val, where);
      else if (key == "enable_vxl") cfg.distill.enable_vxl = parse_bool(val, where);
      else if (key == "enable_pts") cfg.distill.enable_pts = parse_bool(val, where);
      else if (key == "enable_ins") cfg.distill.enable_ins = parse_bool(val, where);
      else fail(where, "unknown key");
    } else if (section == "train") {
      if (key == "steps") cfg.train.steps = static_cast<int>(parse_int(val, where));
      else if (key == "lr") cfg.train.lr = parse_double(val, where);
      else if (key == "batch_scenes") cfg.train.batch_scenes = static_cast<int>(parse_int(val, where));
      else if (key == "seed") cfg.train.seed = parse_uint(val, where);
      else if (key == "momentum") cfg.train.momentum = parse_double(val, where);
      else if (key == "train_scenes") cfg.train.train_scenes = static_cast<int>(parse_int(val, where));
      else if (key == "eval_scenes") cfg.train.eval_scenes = static_cast<int>(parse_int(val, where));
      else fail(where, "unknown key");
    } else if (section == "eval") {
      if (key == "thresholds") cfg.eval.thresholds = parse_doubles(val, where, 0);
      else if (key == "nms_iou") cfg.eval.nms_iou = parse_double(val, where);
      else if (key == "top_n") cfg.eval.top_n = parse_int(val, where);
      else if (key == "score_thresh") cfg.eval.score_thresh = parse_double(val, where);
      else fail(where, "unknown key");
    } else {  // run
      if (key == "out_dir") cfg.out_dir = val;
      else fail(where, "unknown key");
    }
  }
  if (!heads_given) cfg.heads = HeadSpec::pairs(cfg.scene.n_classes);
  cfg.arch.n_classes = cfg.scene.n_classes;
  cfg.arch.heads = cfg.heads;
  cfg.distill.nms_iou = cfg.eval.nms_iou;  // single knob, shared by training
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

namespace {

std::string fmt(double v) { return nlohmann::json(v).dump(); }

template <typename It>
std::string join(It begin, It end) {
  std::string out;
  for (auto it = begin; it != end; ++it) {
    if (!out.empty()) out += ' ';
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(*it)>>)
      out += fmt(*it);
    else
      out += std::to_string(*it);
  }
  return out;
}

}  // namespace

std::string dump_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "[scene]\n";
  os << "range = " << join(cfg.scene.range.begin(), cfg.scene.range.end()) << "\n";
  os << "n_classes = " << cfg.scene.n_classes << "\n";
  os << "boxes_per_scene = "
     << join(cfg.scene.boxes_per_scene.begin(), cfg.scene.boxes_per_scene.end()) << "\n";
  os << "points_per_box = "
     << join(cfg.scene.points_per_box.begin(), cfg.scene.points_per_box.end()) << "\n";
  os << "background_points = " << cfg.scene.background_points << "\n";
  os << "distance_sparsity_exponent = " << fmt(cfg.scene.distance_sparsity_exponent)
     << "\n";
  os << "semantic_noise = " << fmt(cfg.scene.semantic_noise) << "\n";
  os << "\n[grid]\n";
  os << "origin = " << join(cfg.grid.origin.begin(), cfg.grid.origin.end()) << "\n";
  os << "voxel_size = " << join(cfg.grid.voxel_size.begin(), cfg.grid.voxel_size.end())
     << "\n";
  os << "dims = " << join(cfg.grid.dims.begin(), cfg.grid.dims.end()) << "\n";
  os << "bev_stride = " << cfg.grid.bev_stride << "\n";
  os << "\n[heads]\n";
  os << "groups = ";
  for (std::size_t h = 0; h < cfg.heads.groups.size(); ++h) {
    if (h > 0) os << " | ";
    os << join(cfg.heads.groups[h].begin(), cfg.heads.groups[h].end());
  }
  os << "\n";
  os << "\n[detector]\n";
  os << "channels = " << cfg.arch.channels << "\n";
  os << "\n[distill]\n";
  os << "tau = " << fmt(cfg.distill.tau) << "\n";
  os << "w_r1 = " << fmt(cfg.distill.w_r1) << "\n";
  os << "w_r2 = " << fmt(cfg.distill.w_r2) << "\n";
  os << "w_attr = " << join(cfg.distill.w_attr.begin(), cfg.distill.w_attr.end()) << "\n";
  os << "w_v1 = " << fmt(cfg.distill.w_v1) << "\n";
  os << "w_v2 = " << fmt(cfg.distill.w_v2) << "\n";
  os << "w_pf = " << fmt(cfg.distill.w_pf) << "\n";
  os << "w_I = " << fmt(cfg.distill.w_I) << "\n";
  os << "lambda = " << fmt(cfg.distill.lambda) << "\n";
  os << "mu = " << fmt(cfg.distill.mu) << "\n";
  os << "point_cap = " << cfg.distill.point_cap << "\n";
  os << "roi_grid = " << cfg.distill.roi_grid << "\n";
  os << "enable_rsp = " << (cfg.distill.enable_rsp ? "true" : "false") << "\n";
  os << "enable_vxl = " << (cfg.distill.enable_vxl ? "true" : "false") << "\n";
  os << "enable_pts = " << (cfg.distill.enable_pts ? "true" : "false") << "\n";
  os << "enable_ins = " << (cfg.distill.enable_ins ? "true" : "false") << "\n";
  os << "\n[train]\n";
  os << "steps = " << cfg.train.steps << "\n";
  os << "lr = " << fmt(cfg.train.lr) << "\n";
  os << "batch_scenes = " << cfg.train.batch_scenes << "\n";
  os << "seed = " << cfg.train.seed << "\n";
  os << "momentum = " << fmt(cfg.train.momentum) << "\n";
  os << "train_scenes = " << cfg.train.train_scenes << "\n";
  os << "eval_scenes = " << cfg.train.eval_scenes << "\n";
  os << "\n[eval]\n";
  os << "thresholds = " << join(cfg.eval.thresholds.begin(), cfg.eval.thresholds.end())
     << "\n";
  os << "nms_iou = " << fmt(cfg.eval.nms_iou) << "\n";
  os << "top_n = " << cfg.eval.top_n << "\n";
  os << "score_thresh = " << fmt(cfg.eval.score_thresh) << "\n";
  os << "\n[run]\n";
  os << "out_dir = " << cfg.out_dir << "\n";
  return os.str();
}

}  // namespace kd3d
