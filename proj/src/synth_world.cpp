#include "fi3det/synth_world.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "fi3det/fi3d_format.hpp"

namespace fi3det {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kMinDepth = 0.05;
constexpr double kMinProposalSize = 0.05;

int draw_count(Rng& rng, int lo, int hi) {
  if (hi <= lo) return lo;
  return lo + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
}

int draw_poisson(Rng& rng, double lambda) {
  if (!(lambda > 0.0)) return 0;
  const double limit = std::exp(-lambda);
  int k = 0;
  double p = 1.0;
  do {
    ++k;
    p *= rng.uniform();
  } while (p > limit);
  return k - 1;
}

// Uniform sample on the surface of a box, in local coordinates, with the
// outward normal of the sampled face.
void sample_surface_local(Rng& rng, const Eigen::Vector3d& size, Eigen::Vector3d& p,
                          Eigen::Vector3d& n) {
  const double ax = size.y() * size.z();  // +-x faces
  const double ay = size.x() * size.z();
  const double az = size.x() * size.y();
  const double total = 2.0 * (ax + ay + az);
  double u = rng.uniform(0.0, total);
  const double sx = size.x() / 2.0, sy = size.y() / 2.0, sz = size.z() / 2.0;
  auto pick_sign = [&](double& v, double extent) {
    if (v >= extent) {
      v -= extent;
      return 1.0;
    }
    return -1.0;
  };
  if (u < 2.0 * ax) {
    const double sign = pick_sign(u, ax);
    p = {sign * sx, rng.uniform(-sy, sy), rng.uniform(-sz, sz)};
    n = {sign, 0, 0};
  } else if ((u -= 2.0 * ax) < 2.0 * ay) {
    const double sign = pick_sign(u, ay);
    p = {rng.uniform(-sx, sx), sign * sy, rng.uniform(-sz, sz)};
    n = {0, sign, 0};
  } else {
    u -= 2.0 * ay;
    const double sign = pick_sign(u, az);
    p = {rng.uniform(-sx, sx), rng.uniform(-sy, sy), sign * sz};
    n = {0, 0, sign};
  }
}

Eigen::Matrix3d yaw_rotation(double yaw) {
  Eigen::Matrix3d r;
  const double c = std::cos(yaw), s = std::sin(yaw);
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return r;
}

}  // namespace

void validate_config(const WorldConfig& cfg) {
  if (cfg.categories.empty()) throw EmptyInput("config names no categories");
  if (!(cfg.room.minCoeff() > 0.0)) throw EmptyInput("room extents must be positive");
  if (cfg.points_per_object < 4) throw EmptyInput("points_per_object must be at least 4");
  if (cfg.floor_clutter_points < 0) throw EmptyInput("floor clutter count must be >= 0");
  if (cfg.feat3_dim < static_cast<int>(cfg.categories.size()) ||
      cfg.feat2_dim < static_cast<int>(cfg.categories.size()))
    throw DimensionMismatch("feature dims must be at least the category count");
  if (cfg.feature_noise < 0.0 || cfg.center_jitter < 0.0 || cfg.size_jitter < 0.0 ||
      cfg.clutter_rate < 0.0 || cfg.mask_dropout < 0.0 || cfg.mask_dropout > 1.0)
    throw EmptyInput("noise knobs must be non-negative (dropout within [0, 1])");
  if (cfg.image_width < 8 || cfg.image_height < 8 || !(cfg.focal > 0.0))
    throw EmptyInput("image geometry is degenerate");
  if (!(cfg.camera_ring_scale > 0.0))
    throw EmptyInput("camera ring scale must be positive");
  if (cfg.frames_per_scene < 1) throw EmptyInput("at least one frame per scene required");
  if (cfg.mask_bleed < 0) throw EmptyInput("mask bleed must be >= 0");
  for (const auto& c : cfg.categories) {
    if (c.name.empty()) throw EmptyInput("category without a name");
    if (!(c.size_min.minCoeff() > 0.0) || (c.size_max - c.size_min).minCoeff() < 0.0)
      throw EmptyInput("category size range is invalid: " + c.name);
    if (c.count_min < 0 || c.count_max < c.count_min)
      throw EmptyInput("category count range is invalid: " + c.name);
  }
}

Scene generate_scene(const WorldConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  Rng layout = Rng(seed).child("layout", 0);
  Rng surface = Rng(seed).child("surface", 0);

  Scene scene;
  scene.id = "scene_" + std::to_string(seed);

  for (std::size_t ci = 0; ci < cfg.categories.size(); ++ci) {
    const CategorySpec& spec = cfg.categories[ci];
    const int count = draw_count(layout, spec.count_min, spec.count_max);
    for (int inst = 0; inst < count; ++inst) {
      bool placed = false;
      for (int attempt = 0; attempt < cfg.max_placement_attempts && !placed; ++attempt) {
        Eigen::Vector3d size;
        for (int a = 0; a < 3; ++a)
          size[a] = layout.uniform(spec.size_min[a], spec.size_max[a]);
        if (size.z() > cfg.room.z()) continue;
        const double yaw = cfg.random_yaw ? layout.uniform(-kPi, kPi) : 0.0;
        // Keep the whole footprint inside the room whatever the yaw.
        const double reach = 0.5 * std::hypot(size.x(), size.y());
        const double half_x = cfg.room.x() / 2.0 - reach;
        const double half_y = cfg.room.y() / 2.0 - reach;
        if (half_x <= 0.0 || half_y <= 0.0) continue;
        const Eigen::Vector3d center(layout.uniform(-half_x, half_x),
                                     layout.uniform(-half_y, half_y), size.z() / 2.0);
        const Box3 candidate = make_box(center, size, yaw);
        bool overlaps = false;
        for (const auto& other : scene.objects)
          if (iou3d(candidate, other.box) > 0.0) {
            overlaps = true;
            break;
          }
        if (!overlaps) {
          scene.objects.push_back({candidate, static_cast<int>(ci)});
          placed = true;
        }
      }
      if (!placed)
        throw PlacementFailure("could not place instance of " + spec.name + " in scene " +
                               scene.id);
    }
  }

  const std::size_t n_object_pts =
      scene.objects.size() * static_cast<std::size_t>(cfg.points_per_object);
  const std::size_t n_total = n_object_pts + static_cast<std::size_t>(cfg.floor_clutter_points);
  scene.points.resize(static_cast<Eigen::Index>(n_total), 6);
  scene.point_object.assign(n_total, -1);

  Eigen::Index row = 0;
  for (std::size_t oi = 0; oi < scene.objects.size(); ++oi) {
    const Box3& box = scene.objects[oi].box;
    const Eigen::Matrix3d rot = yaw_rotation(box.yaw);
    for (int k = 0; k < cfg.points_per_object; ++k, ++row) {
      Eigen::Vector3d lp, ln;
      sample_surface_local(surface, box.size, lp, ln);
      const Eigen::Vector3d wp = rot * lp + box.center;
      const Eigen::Vector3d wn = rot * ln;
      scene.points.row(row) << wp.x(), wp.y(), wp.z(), wn.x(), wn.y(), wn.z();
      scene.point_object[static_cast<std::size_t>(row)] = static_cast<int>(oi);
    }
  }
  for (int k = 0; k < cfg.floor_clutter_points; ++k, ++row) {
    const double x = surface.uniform(-cfg.room.x() / 2.0, cfg.room.x() / 2.0);
    const double y = surface.uniform(-cfg.room.y() / 2.0, cfg.room.y() / 2.0);
    scene.points.row(row) << x, y, 0.0, 0.0, 0.0, 1.0;
  }
  return scene;
}

std::pair<Eigen::MatrixXd, Eigen::MatrixXd> oracle_features(const Scene& scene,
                                                            const WorldConfig& cfg,
                                                            std::uint64_t seed) {
  validate_config(cfg);
  Rng noise = Rng(seed).child("features", 0);
  const Eigen::Index n = scene.points.rows();
  Eigen::MatrixXd f3 = Eigen::MatrixXd::Zero(n, cfg.feat3_dim);
  Eigen::MatrixXd f2 = Eigen::MatrixXd::Zero(n, cfg.feat2_dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int obj = scene.point_object[static_cast<std::size_t>(i)];
    if (obj >= 0) {
      const int cat = scene.objects[static_cast<std::size_t>(obj)].category;
      f3(i, cat) = 1.0;  // orthonormal basis embedding: axis = category index
      f2(i, cat) = 1.0;
    }
    if (cfg.feature_noise > 0.0) {
      for (int k = 0; k < cfg.feat3_dim; ++k) f3(i, k) += noise.normal(0.0, cfg.feature_noise);
      for (int k = 0; k < cfg.feat2_dim; ++k) f2(i, k) += noise.normal(0.0, cfg.feature_noise);
    }
  }
  return {std::move(f3), std::move(f2)};
}

std::vector<Proposal> oracle_detector(const Scene& scene, const WorldConfig& cfg,
                                      std::uint64_t seed) {
  validate_config(cfg);
  Rng rng = Rng(seed).child("detector", 0);
  std::vector<Proposal> out;
  for (const auto& obj : scene.objects) {
    Eigen::Vector3d dc = Eigen::Vector3d::Zero(), ds = Eigen::Vector3d::Zero();
    if (cfg.center_jitter > 0.0)
      for (int a = 0; a < 3; ++a) dc[a] = rng.normal(0.0, cfg.center_jitter);
    if (cfg.size_jitter > 0.0)
      for (int a = 0; a < 3; ++a) ds[a] = rng.normal(0.0, cfg.size_jitter);
    Eigen::Vector3d size = obj.box.size + ds;
    for (int a = 0; a < 3; ++a) size[a] = std::max(size[a], kMinProposalSize);
    Proposal p;
    p.box = make_box(obj.box.center + dc, size, obj.box.yaw);
    p.objectness = std::exp(-(dc.norm() + ds.norm()));
    out.push_back(std::move(p));
  }
  const int clutter = draw_poisson(rng, cfg.clutter_rate);
  for (int k = 0; k < clutter; ++k) {
    Eigen::Vector3d size(rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0));
    const double reach = 0.5 * std::hypot(size.x(), size.y());
    const double half_x = std::max(cfg.room.x() / 2.0 - reach, 0.1);
    const double half_y = std::max(cfg.room.y() / 2.0 - reach, 0.1);
    const Eigen::Vector3d center(rng.uniform(-half_x, half_x), rng.uniform(-half_y, half_y),
                                 size.z() / 2.0);
    const double yaw = cfg.random_yaw ? rng.uniform(-kPi, kPi) : 0.0;
    Proposal p;
    p.box = make_box(center, size, yaw);
    p.objectness = rng.uniform(0.05, 0.5);
    out.push_back(std::move(p));
  }
  return out;
}

VlmFrame render_frame(const Scene& scene, const Eigen::MatrixXd& feat2,
                      const WorldConfig& cfg, int frame_index, std::uint64_t seed,
                      std::vector<int>* mask_object) {
  validate_config(cfg);
  if (feat2.rows() != scene.points.rows())
    throw ShapeMismatch("one aligned feature row per scene point required");
  if (frame_index < 0 || frame_index >= cfg.frames_per_scene)
    throw EmptyInput("frame index outside frames_per_scene");

  const int W = cfg.image_width, H = cfg.image_height;

  // Camera on a ring around the room, looking at a point slightly above
  // the floor at the room center.
  const double angle = 2.0 * kPi * static_cast<double>(frame_index) /
                       static_cast<double>(cfg.frames_per_scene);
  const double ring = cfg.camera_ring_scale * std::max(cfg.room.x(), cfg.room.y());
  const Eigen::Vector3d eye(ring * std::cos(angle), ring * std::sin(angle),
                            0.65 * cfg.room.z());
  const Eigen::Vector3d target(0.0, 0.0, 0.4);
  const Eigen::Vector3d fwd = (target - eye).normalized();
  const Eigen::Vector3d up(0.0, 0.0, 1.0);
  Eigen::Vector3d xc = fwd.cross(up);  // right, with image y pointing down
  xc.normalize();
  const Eigen::Vector3d yc = fwd.cross(xc);

  VlmFrame frame;
  frame.id = scene.id + "__f" + std::to_string(frame_index);
  frame.width = W;
  frame.height = H;
  frame.camera.fx = cfg.focal;
  frame.camera.fy = cfg.focal;
  frame.camera.cx = (static_cast<double>(W) - 1.0) / 2.0;
  frame.camera.cy = (static_cast<double>(H) - 1.0) / 2.0;
  frame.camera.pose = Eigen::Matrix4d::Identity();
  frame.camera.pose.block<3, 1>(0, 0) = xc;
  frame.camera.pose.block<3, 1>(0, 1) = yc;
  frame.camera.pose.block<3, 1>(0, 2) = fwd;
  frame.camera.pose.block<3, 1>(0, 3) = eye;

  // Z-buffered point splatting.
  const std::size_t plane = static_cast<std::size_t>(W) * static_cast<std::size_t>(H);
  frame.depth.assign(plane, 0.0f);
  std::vector<double> zbuf(plane, std::numeric_limits<double>::infinity());
  std::vector<long> winner(plane, -1);  // scene point index per pixel
  for (Eigen::Index i = 0; i < scene.points.rows(); ++i) {
    const Eigen::Vector3d p = scene.points.row(i).head<3>();
    const Eigen::Vector3d rel = p - eye;
    const double z = fwd.dot(rel);
    if (z < kMinDepth) continue;
    const double x = xc.dot(rel);
    const double y = yc.dot(rel);
    const long u = std::lround(cfg.focal * x / z + frame.camera.cx);
    const long v = std::lround(cfg.focal * y / z + frame.camera.cy);
    if (u < 0 || u >= W || v < 0 || v >= H) continue;
    const std::size_t pix = static_cast<std::size_t>(v) * static_cast<std::size_t>(W) +
                            static_cast<std::size_t>(u);
    if (z < zbuf[pix]) {
      zbuf[pix] = z;
      winner[pix] = static_cast<long>(i);
    }
  }
  for (std::size_t pix = 0; pix < plane; ++pix)
    if (winner[pix] >= 0) frame.depth[pix] = static_cast<float>(zbuf[pix]);

  // Instance masks from pixel ownership, in object index order.
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<int> owners;
  for (std::size_t oi = 0; oi < scene.objects.size(); ++oi) {
    std::vector<std::uint8_t> mask(plane, 0);
    bool any = false;
    for (std::size_t pix = 0; pix < plane; ++pix) {
      if (winner[pix] < 0) continue;
      const int po = scene.point_object[static_cast<std::size_t>(winner[pix])];
      if (po == static_cast<int>(oi)) {
        mask[pix] = 1;
        any = true;
      }
    }
    if (any) {
      masks.push_back(std::move(mask));
      owners.push_back(static_cast<int>(oi));
    }
  }

  // Bleed: square dilation pulling neighboring pixels (and whatever depth
  // and features live there) into the mask.
  if (cfg.mask_bleed > 0) {
    const int r = cfg.mask_bleed;
    for (auto& mask : masks) {
      std::vector<std::uint8_t> grown = mask;
      for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u) {
          if (mask[static_cast<std::size_t>(v) * static_cast<std::size_t>(W) +
                   static_cast<std::size_t>(u)] == 0)
            continue;
          for (int dv = -r; dv <= r; ++dv)
            for (int du = -r; du <= r; ++du) {
              const int nv = v + dv, nu = u + du;
              if (nv < 0 || nv >= H || nu < 0 || nu >= W) continue;
              grown[static_cast<std::size_t>(nv) * static_cast<std::size_t>(W) +
                    static_cast<std::size_t>(nu)] = 1;
            }
        }
      mask = std::move(grown);
    }
  }

  // Dropout: erase mask pixels at random (depth and features stay).
  if (cfg.mask_dropout > 0.0) {
    Rng drop = Rng(seed).child(("dropout_f" + std::to_string(frame_index)).c_str(), 0);
    for (auto& mask : masks)
      for (std::size_t pix = 0; pix < plane; ++pix)
        if (mask[pix] != 0 && drop.uniform() < cfg.mask_dropout) mask[pix] = 0;
  }

  frame.num_masks = static_cast<int>(masks.size());
  frame.masks.assign(plane * masks.size(), 0);
  for (std::size_t j = 0; j < masks.size(); ++j)
    std::copy(masks[j].begin(), masks[j].end(), frame.masks.begin() + static_cast<long>(j * plane));

  // Dense aligned-feature map: each pixel carries the winning point's
  // feature row; empty pixels stay zero.
  frame.feat_dim = static_cast<int>(feat2.cols());
  frame.featmap.assign(static_cast<std::size_t>(frame.feat_dim) * plane, 0.0f);
  for (std::size_t pix = 0; pix < plane; ++pix) {
    if (winner[pix] < 0) continue;
    for (int k = 0; k < frame.feat_dim; ++k)
      frame.featmap[static_cast<std::size_t>(k) * plane + pix] =
          static_cast<float>(feat2(winner[pix], k));
  }

  if (mask_object != nullptr) *mask_object = owners;
  return frame;
}

void write_scene_fi3d(const std::string& path, const Scene& scene,
                      const Eigen::MatrixXd* feat3, const Eigen::MatrixXd* feat2) {
  Fi3dFile file;
  {
    Fi3dBlock b;
    b.name = "points";
    b.dims = {static_cast<std::uint64_t>(scene.points.rows()), 6};
    std::vector<float> data;
    data.reserve(static_cast<std::size_t>(scene.points.size()));
    for (Eigen::Index i = 0; i < scene.points.rows(); ++i)
      for (Eigen::Index k = 0; k < 6; ++k) data.push_back(static_cast<float>(scene.points(i, k)));
    b.data = std::move(data);
    file.blocks.push_back(std::move(b));
  }
  {
    Fi3dBlock b;
    b.name = "gt_boxes";
    b.dims = {static_cast<std::uint64_t>(scene.objects.size()), 7};
    std::vector<float> data;
    for (const auto& o : scene.objects) {
      data.push_back(static_cast<float>(o.box.center.x()));
      data.push_back(static_cast<float>(o.box.center.y()));
      data.push_back(static_cast<float>(o.box.center.z()));
      data.push_back(static_cast<float>(o.box.size.x()));
      data.push_back(static_cast<float>(o.box.size.y()));
      data.push_back(static_cast<float>(o.box.size.z()));
      data.push_back(static_cast<float>(o.box.yaw));
    }
    b.data = std::move(data);
    file.blocks.push_back(std::move(b));
  }
  {
    Fi3dBlock b;
    b.name = "gt_labels";
    b.dims = {static_cast<std::uint64_t>(scene.objects.size())};
    std::vector<std::uint32_t> data;
    for (const auto& o : scene.objects) data.push_back(static_cast<std::uint32_t>(o.category));
    b.data = std::move(data);
    file.blocks.push_back(std::move(b));
  }
  auto add_feat = [&](const char* name, const Eigen::MatrixXd* m) {
    if (m == nullptr) return;
    if (m->rows() != scene.points.rows())
      throw ShapeMismatch("feature rows must match the point count");
    Fi3dBlock b;
    b.name = name;
    b.dims = {static_cast<std::uint64_t>(m->rows()), static_cast<std::uint64_t>(m->cols())};
    std::vector<float> data;
    data.reserve(static_cast<std::size_t>(m->size()));
    for (Eigen::Index i = 0; i < m->rows(); ++i)
      for (Eigen::Index k = 0; k < m->cols(); ++k) data.push_back(static_cast<float>((*m)(i, k)));
    b.data = std::move(data);
    file.blocks.push_back(std::move(b));
  };
  add_feat("feat3d", feat3);
  add_feat("feat2d", feat2);
  write_fi3d(path, file);
}

LoadedScene read_scene_fi3d(const std::string& path) {
  const Fi3dFile file = read_fi3d(path);
  LoadedScene out;
  const Fi3dBlock& pts = file.at("points");
  if (pts.dims.size() != 2 || pts.dims[1] != 6 || pts.dtype() != Fi3dDtype::kF32)
    throw FormatError(path + ": points must be f32 N x 6");
  const auto& pdata = pts.f32();
  const Eigen::Index n = static_cast<Eigen::Index>(pts.dims[0]);
  out.scene.points.resize(n, 6);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index k = 0; k < 6; ++k)
      out.scene.points(i, k) = pdata[static_cast<std::size_t>(i * 6 + k)];
  out.scene.point_object.assign(static_cast<std::size_t>(n), -1);

  const Fi3dBlock& boxes = file.at("gt_boxes");
  if (boxes.dims.size() != 2 || boxes.dims[1] != 7 || boxes.dtype() != Fi3dDtype::kF32)
    throw FormatError(path + ": gt_boxes must be f32 G x 7");
  const Fi3dBlock& labels = file.at("gt_labels");
  if (labels.dims.size() != 1 || labels.dims[0] != boxes.dims[0] ||
      labels.dtype() != Fi3dDtype::kU32)
    throw FormatError(path + ": gt_labels must be u32 with one entry per box");
  const auto& bdata = boxes.f32();
  const auto& ldata = labels.u32();
  for (std::size_t g = 0; g < boxes.dims[0]; ++g) {
    const float* row = bdata.data() + g * 7;
    SceneObject obj;
    obj.box = make_box({row[0], row[1], row[2]}, {row[3], row[4], row[5]}, row[6]);
    obj.category = static_cast<int>(ldata[g]);
    out.scene.objects.push_back(std::move(obj));
  }

  auto load_feat = [&](const char* name, Eigen::MatrixXd& dst) {
    if (!file.has(name)) {
      dst.resize(0, 0);
      return;
    }
    const Fi3dBlock& b = file.at(name);
    if (b.dims.size() != 2 || b.dims[0] != static_cast<std::uint64_t>(n) ||
        b.dtype() != Fi3dDtype::kF32)
      throw FormatError(path + ": feature block must be f32 with one row per point");
    const auto& data = b.f32();
    dst.resize(n, static_cast<Eigen::Index>(b.dims[1]));
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < dst.cols(); ++k)
        dst(i, k) = data[static_cast<std::size_t>(i) * b.dims[1] + static_cast<std::size_t>(k)];
  };
  load_feat("feat3d", out.feat3);
  load_feat("feat2d", out.feat2);
  out.scene.id = std::filesystem::path(path).stem().string();
  return out;
}

}  // namespace fi3det
