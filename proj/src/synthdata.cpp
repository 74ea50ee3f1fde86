#include "mvdiff/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "mvdiff/errors.hpp"
#include "mvdiff/image_io.hpp"

namespace mvdiff::synthdata {

using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kAmbient = 0.25;

double deg(double d) { return d * std::numbers::pi / 180.0; }

struct Hit {
  double t = kInf;
  Vec3 normal = Vec3::Zero();
};

Hit hit_box(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
  double t0 = -kInf, t1 = kInf;
  int axis = -1;
  double sign = 0;
  for (int i = 0; i < 3; ++i) {
    if (std::abs(d[i]) < 1e-15) {
      if (o[i] < lo[i] || o[i] > hi[i]) return {};
      continue;
    }
    double a = (lo[i] - o[i]) / d[i], b = (hi[i] - o[i]) / d[i];
    const double enter_sign = d[i] > 0 ? -1.0 : 1.0;
    if (a > b) std::swap(a, b);
    if (a > t0) {
      t0 = a;
      axis = i;
      sign = enter_sign;
    }
    t1 = std::min(t1, b);
  }
  if (t0 > t1 || t0 <= 1e-9 || axis < 0) return {};
  Hit h;
  h.t = t0;
  h.normal[axis] = sign;
  return h;
}

Hit hit_sphere(const Vec3& o, const Vec3& d, const Vec3& c, double r) {
  const Vec3 oc = o - c;
  const double b = oc.dot(d);
  const double disc = b * b - (oc.squaredNorm() - r * r);
  if (disc < 0) return {};
  const double t = -b - std::sqrt(disc);
  if (t <= 1e-9) return {};
  Hit h;
  h.t = t;
  h.normal = (o + t * d - c).normalized();
  return h;
}

Hit hit_cylinder(const Vec3& o, const Vec3& d, const Vec3& c, double r, double half_h) {
  Hit best;
  // Side wall.
  const double a = d.x() * d.x() + d.z() * d.z();
  if (a > 1e-15) {
    const double ox = o.x() - c.x(), oz = o.z() - c.z();
    const double b = ox * d.x() + oz * d.z();
    const double disc = b * b - a * (ox * ox + oz * oz - r * r);
    if (disc >= 0) {
      const double t = (-b - std::sqrt(disc)) / a;
      const double y = o.y() + t * d.y();
      if (t > 1e-9 && std::abs(y - c.y()) <= half_h) {
        best.t = t;
        best.normal = Vec3(ox + t * d.x(), 0.0, oz + t * d.z()).normalized();
      }
    }
  }
  // Caps.
  if (std::abs(d.y()) > 1e-15) {
    for (double s : {-1.0, 1.0}) {
      const double t = (c.y() + s * half_h - o.y()) / d.y();
      if (t <= 1e-9 || t >= best.t) continue;
      const Vec3 p = o + t * d;
      if ((p.x() - c.x()) * (p.x() - c.x()) + (p.z() - c.z()) * (p.z() - c.z()) <= r * r) {
        best.t = t;
        best.normal = Vec3(0.0, s, 0.0);
      }
    }
  }
  return best;
}

Hit hit_object(const SceneSpec& s, const Vec3& o, const Vec3& d) {
  const double h = 0.5 * s.size;
  switch (s.object) {
    case Primitive::kCube:
      return hit_box(o, d, s.center - Vec3::Constant(h), s.center + Vec3::Constant(h));
    case Primitive::kSphere:
      return hit_sphere(o, d, s.center, h);
    case Primitive::kCylinder:
      return hit_cylinder(o, d, s.center, h, h);
  }
  return {};
}

Vec3 floor_albedo(int texture, double x, double z) {
  switch (texture) {
    case 0: {  // checker
      const long k = static_cast<long>(std::floor(x / 0.25)) + static_cast<long>(std::floor(z / 0.25));
      return (k & 1) ? Vec3(0.45, 0.45, 0.45) : Vec3(0.82, 0.82, 0.82);
    }
    case 1: {  // stripe
      const long k = static_cast<long>(std::floor(x / 0.2));
      return (k & 1) ? Vec3(0.55, 0.45, 0.35) : Vec3(0.85, 0.78, 0.65);
    }
    case 2:  // plain
      return Vec3(0.62, 0.6, 0.58);
    default: {  // dots
      const double fx = x / 0.3 - std::floor(x / 0.3) - 0.5, fz = z / 0.3 - std::floor(z / 0.3) - 0.5;
      return fx * fx + fz * fz < 0.09 ? Vec3(0.3, 0.35, 0.55) : Vec3(0.8, 0.8, 0.75);
    }
  }
}

Vec3 sky(const Vec3& d) {
  const double k = std::clamp(0.5 * (d.y() + 1.0), 0.0, 1.0);
  return (1.0 - k) * Vec3(0.92, 0.92, 0.9) + k * Vec3(0.6, 0.75, 0.95);
}

uint64_t mix(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

const std::vector<PaletteEntry>& palette() {
  static const std::vector<PaletteEntry> p = {
      {"red", {0.85, 0.15, 0.12}},    {"green", {0.2, 0.7, 0.25}},   {"blue", {0.15, 0.3, 0.85}},
      {"yellow", {0.92, 0.82, 0.15}}, {"cyan", {0.15, 0.78, 0.8}},   {"magenta", {0.8, 0.2, 0.7}},
      {"orange", {0.95, 0.5, 0.1}},   {"purple", {0.45, 0.2, 0.65}}, {"white", {0.95, 0.95, 0.95}},
      {"brown", {0.5, 0.3, 0.15}}};
  return p;
}

const std::vector<std::string>& floor_textures() {
  static const std::vector<std::string> t = {"checker", "stripe", "plain", "dotted"};
  return t;
}

std::string primitive_name(Primitive p) {
  switch (p) {
    case Primitive::kCube:
      return "cube";
    case Primitive::kSphere:
      return "sphere";
    case Primitive::kCylinder:
      return "cylinder";
  }
  return "?";
}

void SceneSpec::validate() const {
  MVD_REQUIRE(color_id >= 0 && color_id < static_cast<int>(palette().size()), "scene: color id out of range");
  MVD_REQUIRE(floor_texture >= 0 && floor_texture < static_cast<int>(floor_textures().size()),
              "scene: floor texture out of range");
  MVD_REQUIRE(size > 0, "scene: object size must be positive");
  const double h = 0.5 * size;
  for (int i = 0; i < 3; ++i)
    MVD_REQUIRE(center[i] - h >= -0.5 - 1e-9 && center[i] + h <= 0.5 + 1e-9, "scene: object leaves the unit cube");
  MVD_REQUIRE(std::abs(light.norm() - 1.0) < 1e-6, "scene: light direction must be a unit vector");
  MVD_REQUIRE(radius > 0, "scene: ring radius must be positive");
}

RenderedView render_scene(const SceneSpec& spec, const CameraView& view) {
  view.validate();
  const int h = view.height, w = view.width;
  RenderedView out{Tensor({3, h, w}), Tensor({h, w}), Tensor({h, w})};
  const Vec3 origin = view.center();
  const Vec3 axis = view.optical_axis();
  const Vec3 albedo(palette()[spec.color_id].rgb[0], palette()[spec.color_id].rgb[1], palette()[spec.color_id].rgb[2]);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Vec3 p = geometry::unproject_pixel(geometry::Vec2(x + 0.5, y + 0.5), 1.0, view);
      const Vec3 d = (p - origin).normalized();
      Vec3 color;
      double t_hit = kInf;
      const Hit obj = hit_object(spec, origin, d);
      const double t_floor = d.y() < -1e-12 ? (kFloorY - origin.y()) / d.y() : kInf;
      if (obj.t < kInf && obj.t <= t_floor) {
        t_hit = obj.t;
        color = albedo * (kAmbient + (1.0 - kAmbient) * std::max(0.0, obj.normal.dot(spec.light)));
        out.mask[static_cast<int64_t>(y) * w + x] = 1.0;
      } else if (t_floor > 1e-9 && t_floor < kInf) {
        t_hit = t_floor;
        const Vec3 q = origin + t_floor * d;
        double light = std::max(0.0, spec.light.y());
        if (hit_object(spec, q + 1e-6 * Vec3::UnitY(), spec.light).t < kInf) light = 0.0;
        color = floor_albedo(spec.floor_texture, q.x(), q.z()) * (kAmbient + (1.0 - kAmbient) * light);
      } else {
        color = sky(d);
      }
      if (t_hit < kInf) out.depth[static_cast<int64_t>(y) * w + x] = t_hit * d.dot(axis);
      for (int k = 0; k < 3; ++k) out.image[(static_cast<int64_t>(k) * h + y) * w + x] = std::clamp(color[k], 0.0, 1.0);
    }
  return out;
}

SceneSpec random_scene(Rng& rng, uint64_t seed) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SceneSpec s;
  s.seed = seed;
  s.object = static_cast<Primitive>(std::min(2, static_cast<int>(u(rng) * 3)));
  s.color_id = std::min(static_cast<int>(palette().size()) - 1, static_cast<int>(u(rng) * palette().size()));
  s.floor_texture =
      std::min(static_cast<int>(floor_textures().size()) - 1, static_cast<int>(u(rng) * floor_textures().size()));
  s.size = 0.45 + 0.35 * u(rng);
  const double slack = 0.5 - 0.5 * s.size;
  const double jitter = std::min(0.1, slack);
  s.center = Vec3(jitter * (2 * u(rng) - 1), kFloorY + 0.5 * s.size, jitter * (2 * u(rng) - 1));
  const double light_el = deg(40.0 + 40.0 * u(rng)), light_az = 2.0 * std::numbers::pi * u(rng);
  s.light = Vec3(std::cos(light_el) * std::sin(light_az), std::sin(light_el), std::cos(light_el) * std::cos(light_az));
  s.elevation = kMinElevation + (kMaxElevation - kMinElevation) * u(rng);
  s.radius = kMinRadius + (kMaxRadius - kMinRadius) * u(rng);
  s.azimuth_phase = 360.0 * u(rng);
  return s;
}

CameraView ring_camera(double azimuth_deg, double elevation_deg, double radius, int image_size) {
  const double az = deg(azimuth_deg), el = deg(elevation_deg);
  const Vec3 eye = radius * Vec3(std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az));
  const double f = image_size, c = 0.5 * image_size;
  return CameraView::look_at(eye, Vec3::Zero(), Vec3::UnitY(), f, f, c, c, image_size, image_size);
}

std::vector<CameraView> ring_views(const SceneSpec& spec, int image_size) {
  std::vector<CameraView> views;
  views.reserve(kRingSize);
  for (int k = 0; k < kRingSize; ++k)
    views.push_back(ring_camera(spec.azimuth_phase + 360.0 * k / kRingSize, spec.elevation, spec.radius, image_size));
  return views;
}

CameraView random_training_view(Rng& rng, int image_size) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double az = 360.0 * u(rng);
  const double el = kMinElevation + (kMaxElevation - kMinElevation) * u(rng);
  const double r = kMinRadius + (kMaxRadius - kMinRadius) * u(rng);
  return ring_camera(az, el, r, image_size);
}

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = [] {
    std::vector<std::string> words;
    for (const auto& p : palette()) words.push_back(p.name);
    for (int k = 0; k < 3; ++k) words.push_back(primitive_name(static_cast<Primitive>(k)));
    for (const auto& t : floor_textures()) words.push_back(t);
    words.push_back("on");
    words.push_back("floor");
    return words;
  }();
  return v;
}

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> ids;
  std::istringstream in(text);
  std::string word;
  const auto& vocab = vocabulary();
  while (in >> word) {
    auto it = std::find(vocab.begin(), vocab.end(), word);
    MVD_REQUIRE(it != vocab.end(), "caption word not in vocabulary: " + word);
    ids.push_back(static_cast<int>(it - vocab.begin()));
  }
  return ids;
}

std::string detokenize(const std::vector<int>& tokens) {
  const auto& vocab = vocabulary();
  std::string out;
  for (int id : tokens) {
    MVD_REQUIRE(id >= 0 && id < static_cast<int>(vocab.size()), "token id out of vocabulary");
    if (!out.empty()) out += ' ';
    out += vocab[id];
  }
  return out;
}

std::vector<int> caption_of(const SceneSpec& spec) {
  return tokenize(palette().at(spec.color_id).name + " " + primitive_name(spec.object) + " on " +
                  floor_textures().at(spec.floor_texture) + " floor");
}

std::vector<int> draw_caption(const SceneSpec& spec, Rng& rng, double p_empty) {
  std::bernoulli_distribution empty(p_empty);
  if (empty(rng)) return {};
  return caption_of(spec);
}

Scene make_scene(const SceneSpec& spec, int image_size) {
  spec.validate();
  Scene scene;
  scene.spec = spec;
  scene.views = ring_views(spec, image_size);
  scene.caption = detokenize(caption_of(spec));
  for (int k = 0; k < kRingSize; ++k) {
    RenderedView r = render_scene(spec, scene.views[k]);
    if (spec.brightness_jitter) {
      const double f = 0.8 + 0.4 * static_cast<double>(mix(spec.seed * 131 + k) >> 11) * 0x1.0p-53;
      for (auto& v : r.image.storage()) v = std::clamp(v * f, 0.0, 1.0);
    }
    scene.images.push_back(std::move(r.image));
    scene.depths.push_back(std::move(r.depth));
    scene.masks.push_back(std::move(r.mask));
  }
  return scene;
}

json camera_to_json(const CameraView& v) {
  std::vector<double> pose(16);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) pose[r * 4 + c] = v.pose(r, c);
  return json{{"pose", pose}, {"fx", v.fx}, {"fy", v.fy}, {"cx", v.cx},
              {"cy", v.cy},   {"H", v.height}, {"W", v.width}};
}

CameraView camera_from_json(const json& j) {
  CameraView v;
  try {
    const auto pose = j.at("pose").get<std::vector<double>>();
    MVD_REQUIRE(pose.size() == 16, "camera pose must have 16 entries");
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) v.pose(r, c) = pose[r * 4 + c];
    v.fx = j.at("fx");
    v.fy = j.at("fy");
    v.cx = j.at("cx");
    v.cy = j.at("cy");
    v.height = j.at("H");
    v.width = j.at("W");
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("camera json: ") + e.what());
  }
  v.validate();
  return v;
}

json scene_spec_to_json(const SceneSpec& s) {
  return json{{"object", primitive_name(s.object)},
              {"color_id", s.color_id},
              {"size", s.size},
              {"center", {s.center.x(), s.center.y(), s.center.z()}},
              {"floor_texture", s.floor_texture},
              {"light", {s.light.x(), s.light.y(), s.light.z()}},
              {"caption_template", s.caption_template},
              {"seed", s.seed},
              {"elevation", s.elevation},
              {"radius", s.radius},
              {"azimuth_phase", s.azimuth_phase},
              {"brightness_jitter", s.brightness_jitter}};
}

SceneSpec scene_spec_from_json(const json& j) {
  SceneSpec s;
  try {
    const std::string obj = j.at("object");
    bool found = false;
    for (int k = 0; k < 3; ++k)
      if (primitive_name(static_cast<Primitive>(k)) == obj) {
        s.object = static_cast<Primitive>(k);
        found = true;
      }
    MVD_REQUIRE(found, "unknown primitive " + obj);
    s.color_id = j.at("color_id");
    s.size = j.at("size");
    const auto c = j.at("center").get<std::vector<double>>();
    const auto l = j.at("light").get<std::vector<double>>();
    MVD_REQUIRE(c.size() == 3 && l.size() == 3, "scene json: center and light need 3 entries");
    s.center = Vec3(c[0], c[1], c[2]);
    s.light = Vec3(l[0], l[1], l[2]);
    s.floor_texture = j.at("floor_texture");
    s.caption_template = j.at("caption_template");
    s.seed = j.at("seed");
    s.elevation = j.at("elevation");
    s.radius = j.at("radius");
    s.azimuth_phase = j.at("azimuth_phase");
    s.brightness_jitter = j.at("brightness_jitter");
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("scene json: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

std::string indexed(const char* stem, int k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%02d.png", stem, k);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  MVD_REQUIRE(out.good(), "cannot write " + path.string());
  out << text;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  MVD_REQUIRE(in.good(), "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

}  // namespace

void write_scene(const std::filesystem::path& dir, const Scene& scene) {
  std::filesystem::create_directories(dir);
  json cams = json::array();
  for (size_t k = 0; k < scene.views.size(); ++k) {
    io::write_png(dir / indexed("frame", static_cast<int>(k)), scene.images[k]);
    Tensor levels = scene.depths[k];
    for (auto& v : levels.storage()) v *= kDepthScale;
    io::write_png16(dir / indexed("depth", static_cast<int>(k)), levels);
    io::write_png(dir / indexed("mask", static_cast<int>(k)),
                  scene.masks[k].reshaped({1, scene.masks[k].dim(0), scene.masks[k].dim(1)}));
    cams.push_back(camera_to_json(scene.views[k]));
  }
  write_text(dir / "cameras.json", cams.dump(1) + "\n");
  write_text(dir / "caption.txt", scene.caption + "\n");
  write_text(dir / "scene.json", scene_spec_to_json(scene.spec).dump(1) + "\n");
}

Scene read_scene(const std::filesystem::path& dir) {
  Scene scene;
  scene.name = dir.filename().string();
  scene.spec = scene_spec_from_json(read_json(dir / "scene.json"));
  for (const auto& c : read_json(dir / "cameras.json")) scene.views.push_back(camera_from_json(c));
  for (size_t k = 0; k < scene.views.size(); ++k) {
    Tensor img = io::read_png(dir / indexed("frame", static_cast<int>(k)));
    MVD_REQUIRE(img.dim(0) == 3, "scene frames must be RGB");
    scene.images.push_back(std::move(img));
    Tensor depth = io::read_png(dir / indexed("depth", static_cast<int>(k)));
    for (auto& v : depth.storage()) v /= kDepthScale;
    scene.depths.push_back(depth.reshaped({depth.dim(1), depth.dim(2)}));
    Tensor mask = io::read_png(dir / indexed("mask", static_cast<int>(k)));
    for (auto& v : mask.storage()) v = v > 0.5 ? 1.0 : 0.0;
    scene.masks.push_back(mask.reshaped({mask.dim(1), mask.dim(2)}));
  }
  std::ifstream in(dir / "caption.txt");
  std::getline(in, scene.caption);
  return scene;
}

int write_dataset(const std::filesystem::path& dir, int scenes, uint64_t seed, int image_size) {
  MVD_REQUIRE(scenes >= 0, "scene count must be non-negative");
  std::filesystem::create_directories(dir);
  for (int i = 0; i < scenes; ++i) {
    Rng rng(mix(seed) ^ mix(static_cast<uint64_t>(i) + 1));
    const SceneSpec spec = random_scene(rng, seed * 100003 + i);
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04d", i);
    write_scene(dir / name, make_scene(spec, image_size));
  }
  return scenes;
}

std::vector<Scene> read_dataset(const std::filesystem::path& dir) {
  MVD_REQUIRE(std::filesystem::is_directory(dir), "dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory() && std::filesystem::exists(e.path() / "scene.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<Scene> out;
  for (const auto& d : dirs) out.push_back(read_scene(d));
  return out;
}

std::vector<int> random_indices(int ring, int n, Rng& rng) {
  MVD_REQUIRE(n >= 1 && n <= ring, "cannot draw that many distinct frames");
  std::vector<int> all(ring);
  for (int i = 0; i < ring; ++i) all[i] = i;
  // Partial Fisher-Yates.
  for (int i = 0; i < n; ++i) {
    std::uniform_int_distribution<int> pick(i, ring - 1);
    std::swap(all[i], all[pick(rng)]);
  }
  all.resize(n);
  return all;
}

std::vector<int> consecutive_indices(int ring, int start, int n) {
  MVD_REQUIRE(n >= 1 && n <= ring && start >= 0 && start < ring, "bad consecutive window");
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) out[i] = (start + i) % ring;
  return out;
}

FrameSample sample_training_frames(const Scene& scene, int n, Rng& rng, double p_random, double p_empty) {
  const int ring = static_cast<int>(scene.views.size());
  MVD_REQUIRE(n >= 1 && n <= ring, "scene has fewer ring poses than requested frames");
  FrameSample s;
  std::bernoulli_distribution random_mode(p_random);
  if (random_mode(rng)) {
    s.indices = random_indices(ring, n, rng);
  } else {
    std::uniform_int_distribution<int> start(0, ring - 1);
    s.indices = consecutive_indices(ring, start(rng), n);
    s.consecutive = true;
  }
  const auto& first = scene.images[s.indices[0]];
  s.images = Tensor({n, first.dim(0), first.dim(1), first.dim(2)});
  const int64_t per = first.numel();
  for (int i = 0; i < n; ++i) {
    const Tensor& img = scene.images[s.indices[i]];
    std::copy(img.data(), img.data() + per, s.images.data() + i * per);
    s.views.push_back(scene.views[s.indices[i]]);
    s.conditions.push_back(conditioning::make_condition(s.views.back(), img, conditioning::IntensityMode::kTrain));
  }
  s.caption = draw_caption(scene.spec, rng, p_empty);
  return s;
}

}  // namespace mvdiff::synthdata
