#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <string>
#include <vector>

#include "fi3det/errors.hpp"
#include "fi3det/geometry.hpp"

namespace fi3det {

// Pinhole camera with a camera-to-world pose. The rotation block of the
// pose must be orthonormal with positive determinant (checked on load).
struct CameraModel {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  Eigen::Matrix4d pose = Eigen::Matrix4d::Identity();
};

// One RGB-D view with instance masks and open-vocabulary features produced
// by an image segmenter. Features come in one of two layouts: a dense
// per-pixel map (featmap, K x H x W) or one vector per mask (maskfeat,
// J x K). Depth of 0 marks invalid pixels.
struct VlmFrame {
  std::string id;
  int height = 0, width = 0;
  std::vector<float> depth;         // H*W, row-major
  CameraModel camera;
  int num_masks = 0;                // J
  std::vector<std::uint8_t> masks;  // J*H*W, nonzero = member pixel
  int feat_dim = 0;                 // K
  std::vector<float> featmap;       // K*H*W when dense, else empty
  Eigen::MatrixXd maskfeat;         // J x K when per-mask, else 0 x 0

  bool has_dense_features() const { return !featmap.empty(); }
  float depth_at(int u, int v) const { return depth[static_cast<std::size_t>(v) * width + u]; }
  bool mask_at(int j, int u, int v) const {
    return masks[(static_cast<std::size_t>(j) * height + v) * width + u] != 0;
  }
};

// Reads a frame from a container file holding blocks "depth" (f32 H x W),
// "intrinsics" (f32 [fx fy cx cy]), "pose" (f32 4x4 row-major), "masks"
// (u8 J x H x W) and exactly one of "featmap" (f32 K x H x W) or "maskfeat"
// (f32 J x K). Throws FormatError on missing/duplicate feature blocks,
// ShapeMismatch on inconsistent dims, NonOrthonormalPose on a bad rotation.
VlmFrame load_vlm_frame(const std::filesystem::path& path);

// Writes a frame in the same layout (used by the synthetic world and tests).
void write_vlm_frame(const std::filesystem::path& path, const VlmFrame& frame);

// Back-projects the valid-depth pixels of mask j to world space:
// X_cam = ((u - cx) d / fx, (v - cy) d / fy, d), then the camera pose.
// Throws InsufficientDepth when fewer than min_points pixels qualify.
std::vector<Eigen::Vector3d> lift_mask(const VlmFrame& frame, int j, int min_points);

// Mean feature over the mask's pixels (dense layout) or the mask's feature
// row (per-mask layout). Dense pooling averages over all mask pixels,
// depth-valid or not: the segmenter's features exist wherever the mask
// does. Throws EmptyMask when no pixel is set.
Eigen::VectorXd pool_instance_feature(const VlmFrame& frame, int j);

// A mined object hypothesis: fitted box, pooled feature, the number of
// lifted points supporting it, and the frame the surviving box came from.
struct PseudoObject {
  Box3 box;
  Eigen::VectorXd feature;
  int support_count = 0;
  std::string source_frame;
};

struct MiningConfig {
  int min_points = 20;            // lifted points needed per mask
  double merge_iou = 0.5;         // cross-frame duplicate threshold
  double gt_suppress_iou = 0.25;  // overlap with annotated boxes that drops a candidate
  FitMode fit_mode = FitMode::kMinAreaYaw;
  bool merge = true;              // cross-frame merging stage
  bool suppress_known = true;     // annotated-box suppression stage
};

struct MiningStats {
  int masks_seen = 0;
  int masks_skipped = 0;     // insufficient depth or degenerate footprint
  int merged_away = 0;       // candidates absorbed into a surviving box
  int suppressed_known = 0;  // candidates dropped against annotated boxes
};

// Turns per-frame masks into a deduplicated set of unknown-object
// hypotheses:
//   1. per mask: lift, fit a box, pool a feature (failures skip the mask);
//   2. greedy cross-frame merge, highest support first (ties by candidate
//      order), absorbing candidates with IoU > merge_iou; the survivor
//      keeps its box, its feature becomes the support-weighted mean of the
//      group rescaled to unit norm, and its support the group total;
//   3. candidates overlapping any annotated box with IoU > gt_suppress_iou
//      are dropped.
// All frames must share the feature dimension (ShapeMismatch otherwise).
std::vector<PseudoObject> mine_unknown_objects(const std::vector<VlmFrame>& frames,
                                               const std::vector<Box3>& known_boxes,
                                               const MiningConfig& cfg,
                                               MiningStats* stats = nullptr);

}  // namespace fi3det
