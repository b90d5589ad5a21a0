#include "fi3det/vlm_ingest.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fi3det/fi3d_format.hpp"

namespace fi3det {

namespace {

void check_pose(const Eigen::Matrix4d& pose) {
  const Eigen::Matrix3d r = pose.topLeftCorner<3, 3>();
  const Eigen::Matrix3d gram = r.transpose() * r;
  if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6)
    throw NonOrthonormalPose("pose rotation block is not orthonormal");
  if (r.determinant() < 0.0)
    throw NonOrthonormalPose("pose rotation block is reflected");
  if (pose.row(3) != Eigen::RowVector4d(0, 0, 0, 1))
    throw NonOrthonormalPose("pose last row must be [0 0 0 1]");
}

}  // namespace

VlmFrame load_vlm_frame(const std::filesystem::path& path) {
  const Fi3dFile file = read_fi3d(path);
  VlmFrame frame;
  frame.id = path.stem().string();

  const Fi3dBlock& depth = file.at("depth");
  if (depth.dtype() != Fi3dDtype::kF32 || depth.dims.size() != 2)
    throw ShapeMismatch("depth must be f32 H x W");
  frame.height = static_cast<int>(depth.dims[0]);
  frame.width = static_cast<int>(depth.dims[1]);
  frame.depth = depth.f32();

  const Fi3dBlock& intr = file.at("intrinsics");
  if (intr.dtype() != Fi3dDtype::kF32 || intr.element_count() != 4)
    throw ShapeMismatch("intrinsics must be f32 [fx fy cx cy]");
  frame.camera.fx = intr.f32()[0];
  frame.camera.fy = intr.f32()[1];
  frame.camera.cx = intr.f32()[2];
  frame.camera.cy = intr.f32()[3];
  if (frame.camera.fx == 0.0 || frame.camera.fy == 0.0)
    throw ShapeMismatch("focal lengths must be nonzero");

  const Fi3dBlock& pose = file.at("pose");
  if (pose.dtype() != Fi3dDtype::kF32 || pose.dims != std::vector<std::uint64_t>{4, 4})
    throw ShapeMismatch("pose must be f32 4 x 4");
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      frame.camera.pose(r, c) = static_cast<double>(pose.f32()[r * 4 + c]);
  check_pose(frame.camera.pose);

  const Fi3dBlock& masks = file.at("masks");
  if (masks.dtype() != Fi3dDtype::kU8 || masks.dims.size() != 3)
    throw ShapeMismatch("masks must be u8 J x H x W");
  if (masks.dims[1] != depth.dims[0] || masks.dims[2] != depth.dims[1])
    throw ShapeMismatch("mask resolution does not match depth");
  frame.num_masks = static_cast<int>(masks.dims[0]);
  frame.masks = masks.u8();

  const bool dense = file.has("featmap");
  const bool per_mask = file.has("maskfeat");
  if (dense == per_mask)
    throw FormatError("frame must carry exactly one of featmap/maskfeat");
  if (dense) {
    const Fi3dBlock& fm = file.at("featmap");
    if (fm.dtype() != Fi3dDtype::kF32 || fm.dims.size() != 3)
      throw ShapeMismatch("featmap must be f32 K x H x W");
    if (fm.dims[1] != depth.dims[0] || fm.dims[2] != depth.dims[1])
      throw ShapeMismatch("featmap resolution does not match depth");
    frame.feat_dim = static_cast<int>(fm.dims[0]);
    frame.featmap = fm.f32();
  } else {
    const Fi3dBlock& mf = file.at("maskfeat");
    if (mf.dtype() != Fi3dDtype::kF32 || mf.dims.size() != 2)
      throw ShapeMismatch("maskfeat must be f32 J x K");
    if (mf.dims[0] != masks.dims[0])
      throw ShapeMismatch("maskfeat rows must match mask count");
    frame.feat_dim = static_cast<int>(mf.dims[1]);
    frame.maskfeat.resize(static_cast<int>(mf.dims[0]), frame.feat_dim);
    for (int j = 0; j < frame.maskfeat.rows(); ++j)
      for (int k = 0; k < frame.feat_dim; ++k)
        frame.maskfeat(j, k) = static_cast<double>(mf.f32()[static_cast<std::size_t>(j) * frame.feat_dim + k]);
  }
  if (frame.feat_dim <= 0) throw ShapeMismatch("feature dimension must be positive");
  return frame;
}

void write_vlm_frame(const std::filesystem::path& path, const VlmFrame& frame) {
  Fi3dFile file;
  const auto h = static_cast<std::uint64_t>(frame.height);
  const auto w = static_cast<std::uint64_t>(frame.width);
  file.blocks.push_back({"depth", {h, w}, frame.depth});
  file.blocks.push_back(
      {"intrinsics",
       {4},
       std::vector<float>{static_cast<float>(frame.camera.fx), static_cast<float>(frame.camera.fy),
                          static_cast<float>(frame.camera.cx), static_cast<float>(frame.camera.cy)}});
  std::vector<float> pose(16);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) pose[r * 4 + c] = static_cast<float>(frame.camera.pose(r, c));
  file.blocks.push_back({"pose", {4, 4}, std::move(pose)});
  file.blocks.push_back({"masks", {static_cast<std::uint64_t>(frame.num_masks), h, w}, frame.masks});
  if (frame.has_dense_features()) {
    file.blocks.push_back({"featmap", {static_cast<std::uint64_t>(frame.feat_dim), h, w}, frame.featmap});
  } else {
    std::vector<float> mf(static_cast<std::size_t>(frame.maskfeat.rows()) * frame.maskfeat.cols());
    for (int j = 0; j < frame.maskfeat.rows(); ++j)
      for (int k = 0; k < frame.maskfeat.cols(); ++k)
        mf[static_cast<std::size_t>(j) * frame.maskfeat.cols() + k] =
            static_cast<float>(frame.maskfeat(j, k));
    file.blocks.push_back({"maskfeat",
                           {static_cast<std::uint64_t>(frame.maskfeat.rows()),
                            static_cast<std::uint64_t>(frame.maskfeat.cols())},
                           std::move(mf)});
  }
  write_fi3d(path, file);
}

std::vector<Eigen::Vector3d> lift_mask(const VlmFrame& frame, int j, int min_points) {
  if (j < 0 || j >= frame.num_masks) throw ShapeMismatch("mask index out of range");
  const Eigen::Matrix3d r = frame.camera.pose.topLeftCorner<3, 3>();
  const Eigen::Vector3d t = frame.camera.pose.topRightCorner<3, 1>();
  std::vector<Eigen::Vector3d> out;
  for (int v = 0; v < frame.height; ++v) {
    for (int u = 0; u < frame.width; ++u) {
      if (!frame.mask_at(j, u, v)) continue;
      const double d = static_cast<double>(frame.depth_at(u, v));
      if (!(d > 0.0f)) continue;
      const Eigen::Vector3d cam((u - frame.camera.cx) * d / frame.camera.fx,
                                (v - frame.camera.cy) * d / frame.camera.fy, d);
      out.push_back(r * cam + t);
    }
  }
  if (static_cast<int>(out.size()) < min_points)
    throw InsufficientDepth("mask " + std::to_string(j) + " lifted only " +
                            std::to_string(out.size()) + " points");
  return out;
}

Eigen::VectorXd pool_instance_feature(const VlmFrame& frame, int j) {
  if (j < 0 || j >= frame.num_masks) throw ShapeMismatch("mask index out of range");
  if (!frame.has_dense_features()) {
    if (j >= frame.maskfeat.rows()) throw ShapeMismatch("mask index out of range");
    return frame.maskfeat.row(j).transpose();
  }
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(frame.feat_dim);
  const std::size_t plane = static_cast<std::size_t>(frame.height) * frame.width;
  long count = 0;
  for (int v = 0; v < frame.height; ++v) {
    for (int u = 0; u < frame.width; ++u) {
      if (!frame.mask_at(j, u, v)) continue;
      const std::size_t pix = static_cast<std::size_t>(v) * frame.width + u;
      for (int k = 0; k < frame.feat_dim; ++k)
        acc[k] += static_cast<double>(frame.featmap[k * plane + pix]);
      ++count;
    }
  }
  if (count == 0) throw EmptyMask("mask " + std::to_string(j) + " has no pixels");
  return acc / static_cast<double>(count);
}

std::vector<PseudoObject> mine_unknown_objects(const std::vector<VlmFrame>& frames,
                                               const std::vector<Box3>& known_boxes,
                                               const MiningConfig& cfg, MiningStats* stats) {
  MiningStats local;

  int feat_dim = -1;
  for (const auto& f : frames) {
    if (feat_dim < 0) feat_dim = f.feat_dim;
    if (f.feat_dim != feat_dim)
      throw ShapeMismatch("frames disagree on feature dimension");
  }

  // Stage 1: per-mask candidates in (frame, mask) order.
  std::vector<PseudoObject> candidates;
  for (const auto& frame : frames) {
    for (int j = 0; j < frame.num_masks; ++j) {
      ++local.masks_seen;
      try {
        const auto points = lift_mask(frame, j, cfg.min_points);
        PseudoObject obj;
        obj.box = fit_box(points, cfg.fit_mode);
        obj.feature = pool_instance_feature(frame, j);
        obj.support_count = static_cast<int>(points.size());
        obj.source_frame = frame.id;
        candidates.push_back(std::move(obj));
      } catch (const InsufficientDepth&) {
        ++local.masks_skipped;
      } catch (const DegenerateGeometry&) {
        ++local.masks_skipped;
      } catch (const EmptyMask&) {
        ++local.masks_skipped;
      }
    }
  }

  // Stage 2: greedy merge, highest support first; candidate order breaks
  // ties so the result is independent of everything but the inputs.
  std::vector<PseudoObject> merged;
  if (cfg.merge) {
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return candidates[a].support_count > candidates[b].support_count;
    });
    std::vector<bool> consumed(candidates.size(), false);
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const std::size_t i = order[oi];
      if (consumed[i]) continue;
      consumed[i] = true;
      PseudoObject survivor = candidates[i];
      Eigen::VectorXd acc = survivor.feature * static_cast<double>(survivor.support_count);
      long support = survivor.support_count;
      for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
        const std::size_t k = order[oj];
        if (consumed[k]) continue;
        if (iou3d(survivor.box, candidates[k].box) > cfg.merge_iou) {
          consumed[k] = true;
          ++local.merged_away;
          acc += candidates[k].feature * static_cast<double>(candidates[k].support_count);
          support += candidates[k].support_count;
        }
      }
      // Support-weighted mean, rescaled to unit norm; magnitude carries no
      // information downstream (all consumers normalize), direction does.
      Eigen::VectorXd mean = acc / static_cast<double>(support);
      const double norm = mean.norm();
      survivor.feature = norm > 0.0 ? Eigen::VectorXd(mean / norm) : mean;
      survivor.support_count = static_cast<int>(support);
      merged.push_back(std::move(survivor));
    }
  } else {
    merged = std::move(candidates);
  }

  // Stage 3: drop hypotheses that overlap annotated objects; those are not
  // unknowns.
  std::vector<PseudoObject> kept;
  for (auto& obj : merged) {
    bool suppressed = false;
    if (cfg.suppress_known) {
      for (const auto& gt : known_boxes) {
        if (iou3d(obj.box, gt) > cfg.gt_suppress_iou) {
          suppressed = true;
          break;
        }
      }
    }
    if (suppressed)
      ++local.suppressed_known;
    else
      kept.push_back(std::move(obj));
  }

  if (stats) *stats = local;
  return kept;
}

}  // namespace fi3det
