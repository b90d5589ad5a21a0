#pragma once

#include <Eigen/Core>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fi3det/errors.hpp"
#include "fi3det/geometry.hpp"
#include "fi3det/rng.hpp"
#include "fi3det/vlm_ingest.hpp"

namespace fi3det {

struct CategorySpec {
  std::string name;
  Eigen::Vector3d size_min{0.5, 0.5, 0.5};
  Eigen::Vector3d size_max{1.2, 1.2, 1.2};
  int count_min = 1;
  int count_max = 1;
};

struct WorldConfig {
  Eigen::Vector3d room{8.0, 8.0, 3.0};  // extents, centered on the origin in x/y
  std::vector<CategorySpec> categories;
  int points_per_object = 256;
  int floor_clutter_points = 200;
  int feat3_dim = 8;   // L
  int feat2_dim = 8;   // K
  double feature_noise = 0.0;
  double center_jitter = 0.0;  // detector corruption stds
  double size_jitter = 0.0;
  double clutter_rate = 0.0;  // expected false proposals per scene
  bool random_yaw = true;
  int max_placement_attempts = 200;
  // Rendering knobs.
  int image_width = 96;
  int image_height = 72;
  double focal = 80.0;
  int frames_per_scene = 3;
  double camera_ring_scale = 0.48;  // ring radius as a fraction of the room extent
  double mask_dropout = 0.0;  // per-pixel mask erasure probability
  int mask_bleed = 0;         // mask dilation radius in pixels
};

// The config must name at least one category, have positive extents and
// dims, non-negative noise, and feature dims no smaller than the category
// count (one orthonormal embedding axis per category).
void validate_config(const WorldConfig& cfg);

struct SceneObject {
  Box3 box;
  int category = -1;
};

struct Scene {
  std::string id;
  std::vector<SceneObject> objects;
  Eigen::MatrixXd points;         // N x 6: position and outward surface normal
  std::vector<int> point_object;  // owning object index, -1 for floor clutter
};

// Rejection-places every instance with pairwise-zero IoU, then samples
// points uniformly over box surfaces plus floor clutter. Deterministic in
// (cfg, seed). Throws PlacementFailure when a box cannot be placed within
// the attempt budget.
Scene generate_scene(const WorldConfig& cfg, std::uint64_t seed);

// Per-point features standing in for the frozen backbone: each category
// owns one axis of an orthonormal basis in both feature spaces; points get
// their category's embedding plus Gaussian noise, background points noise
// around zero.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> oracle_features(const Scene& scene,
                                                            const WorldConfig& cfg,
                                                            std::uint64_t seed);

// Abstract source of per-point features, so the pipeline never assumes the
// oracle specifically.
class FeatureProvider {
 public:
  virtual ~FeatureProvider() = default;
  // Returns (F3D: N x L, aligned F2D: N x K) for the scene's points.
  virtual std::pair<Eigen::MatrixXd, Eigen::MatrixXd> features(const Scene& scene) const = 0;
};

class OracleFeatureProvider : public FeatureProvider {
 public:
  OracleFeatureProvider(WorldConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)), seed_(seed) {}
  std::pair<Eigen::MatrixXd, Eigen::MatrixXd> features(const Scene& scene) const override {
    return oracle_features(scene, cfg_, seed_);
  }

 private:
  WorldConfig cfg_;
  std::uint64_t seed_;
};

struct Proposal {
  Box3 box;
  double objectness = 1.0;
};

// One jittered proposal per ground-truth box (objectness decays with the
// jitter magnitude), plus Poisson-distributed clutter proposals.
std::vector<Proposal> oracle_detector(const Scene& scene, const WorldConfig& cfg,
                                      std::uint64_t seed);

// Renders one frame by z-buffered point splatting: cameras sit on a ring
// around the room looking inward. Pixels inherit the depth, mask identity
// and aligned 2D feature of the nearest splatted point; mask bleed dilates
// instance masks into neighboring pixels and mask dropout erases mask
// pixels at random. Also reports which object each mask index came from.
VlmFrame render_frame(const Scene& scene, const Eigen::MatrixXd& feat2,
                      const WorldConfig& cfg, int frame_index, std::uint64_t seed,
                      std::vector<int>* mask_object = nullptr);

// Scene container I/O: blocks "points" (f32 N x 6), "gt_boxes" (f32 G x 7),
// "gt_labels" (u32 G), optional "feat3d" (f32 N x L) and "feat2d"
// (f32 N x K).
void write_scene_fi3d(const std::string& path, const Scene& scene,
                      const Eigen::MatrixXd* feat3 = nullptr,
                      const Eigen::MatrixXd* feat2 = nullptr);
struct LoadedScene {
  Scene scene;  // point_object is not persisted; loaded as all -1
  Eigen::MatrixXd feat3;  // 0 x 0 when absent
  Eigen::MatrixXd feat2;
};
LoadedScene read_scene_fi3d(const std::string& path);

}  // namespace fi3det
