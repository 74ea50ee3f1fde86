#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvdiff/conditioning.hpp"
#include "mvdiff/geometry.hpp"
#include "mvdiff/nn.hpp"

// Procedural multi-view scenes: one primitive resting on a textured floor,
// observed from a ring of cameras in the normalized (y-up, unit cube) frame.
namespace mvdiff::synthdata {

using geometry::CameraView;
using geometry::Vec3;

enum class Primitive { kCube = 0, kSphere = 1, kCylinder = 2 };

inline constexpr int kRingSize = 24;
inline constexpr double kFloorY = -0.5;

struct SceneSpec {
  Primitive object = Primitive::kCube;
  int color_id = 0;  // index into palette()
  double size = 0.6;  // cube side, sphere diameter, cylinder diameter and height
  Vec3 center{0.0, kFloorY + 0.3, 0.0};
  int floor_texture = 0;  // index into floor_textures()
  Vec3 light = Vec3(0.3, 0.9, 0.3).normalized();  // unit direction toward the light
  int caption_template = 0;
  uint64_t seed = 0;
  // Ring parameters (degrees / world units).
  double elevation = 25.0;
  double radius = 1.5;
  double azimuth_phase = 0.0;
  bool brightness_jitter = false;

  // Throws InvalidInput when the object leaves the unit cube or ids are out of range.
  void validate() const;
};

struct PaletteEntry {
  std::string name;
  std::array<double, 3> rgb;
};
const std::vector<PaletteEntry>& palette();
const std::vector<std::string>& floor_textures();
std::string primitive_name(Primitive p);

struct RenderedView {
  Tensor image;  // [3, H, W] in [0, 1]
  Tensor depth;  // [H, W] camera-space z of the first hit; 0 where nothing is hit
  Tensor mask;   // [H, W] 1 on object pixels
};

// Deterministic Lambertian ray cast (one ray through each pixel center).
RenderedView render_scene(const SceneSpec& spec, const CameraView& view);

// Random scene with its ring parameters.
SceneSpec random_scene(Rng& rng, uint64_t seed);

// The 24 ring cameras (32x32 by default, fx = W, principal point at the center).
std::vector<CameraView> ring_views(const SceneSpec& spec, int image_size = 32);
CameraView ring_camera(double azimuth_deg, double elevation_deg, double radius, int image_size);
// Camera with elevation and radius drawn from the training ring bounds.
CameraView random_training_view(Rng& rng, int image_size);
inline constexpr double kMinElevation = 10.0, kMaxElevation = 40.0;
inline constexpr double kMinRadius = 1.2, kMaxRadius = 1.8;

// Caption vocabulary and the "<color> <object> on <texture> floor" template.
const std::vector<std::string>& vocabulary();
std::vector<int> tokenize(const std::string& text);
std::string detokenize(const std::vector<int>& tokens);
std::vector<int> caption_of(const SceneSpec& spec);
// Training draw: the empty caption with probability p_empty, else caption_of.
std::vector<int> draw_caption(const SceneSpec& spec, Rng& rng, double p_empty = 0.1);

// A scene loaded in memory.
struct Scene {
  SceneSpec spec;
  std::vector<CameraView> views;
  std::vector<Tensor> images, depths, masks;
  std::string caption;
  std::string name;
};

Scene make_scene(const SceneSpec& spec, int image_size = 32);

// Directory layout per scene: frame_XX.png, depth_XX.png (16-bit, depth *
// kDepthScale), mask_XX.png, cameras.json, caption.txt, scene.json.
// Stored depth saturates at kMaxStoredDepth; only distant floor pixels reach it.
inline constexpr double kDepthScale = 10000.0;
inline constexpr double kMaxStoredDepth = 65535.0 / kDepthScale;
void write_scene(const std::filesystem::path& dir, const Scene& scene);
Scene read_scene(const std::filesystem::path& dir);
// Writes scene_0000 ... in dir; returns the number written.
int write_dataset(const std::filesystem::path& dir, int scenes, uint64_t seed, int image_size = 32);
std::vector<Scene> read_dataset(const std::filesystem::path& dir);

nlohmann::json camera_to_json(const CameraView& view);
CameraView camera_from_json(const nlohmann::json& j);
nlohmann::json scene_spec_to_json(const SceneSpec& spec);
SceneSpec scene_spec_from_json(const nlohmann::json& j);

// Inputs for one multi-view training item.
struct FrameSample {
  Tensor images;  // [N, 3, H, W] in [0, 1]
  std::vector<CameraView> views;
  std::vector<conditioning::ConditionVector> conditions;
  std::vector<int> caption;
  std::vector<int> indices;  // ring indices
  bool consecutive = false;
};

// With probability 0.5 N distinct ring indices uniformly at random, otherwise
// a consecutive (wrapping) window from a uniform start. Conditions use the
// training intensity encoding; the caption is empty with probability p_empty.
FrameSample sample_training_frames(const Scene& scene, int n, Rng& rng, double p_random = 0.5,
                                   double p_empty = 0.1);
std::vector<int> random_indices(int ring, int n, Rng& rng);
std::vector<int> consecutive_indices(int ring, int start, int n);

// Prior-preservation item (single image).
struct PriorItem {
  Tensor image;  // [3, H, W]
  CameraView view;
  std::vector<int> caption;
};

}  // namespace mvdiff::synthdata
