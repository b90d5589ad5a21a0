#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "fi3det/errors.hpp"

namespace fi3det {

// Upright 7-parameter box: center, positive extents along the box axes, and
// a rotation about +z. Yaw is kept in [-pi, pi).
struct Box3 {
  Eigen::Vector3d center{0.0, 0.0, 0.0};
  Eigen::Vector3d size{1.0, 1.0, 1.0};
  double yaw = 0.0;

  double volume() const { return size.x() * size.y() * size.z(); }
  double z_min() const { return center.z() - 0.5 * size.z(); }
  double z_max() const { return center.z() + 0.5 * size.z(); }
};

// Wraps an angle into [-pi, pi).
double normalize_yaw(double yaw);

// Validating constructor: extents must be positive and finite.
Box3 make_box(const Eigen::Vector3d& center, const Eigen::Vector3d& size, double yaw);

// Convex polygon in the ground plane, counter-clockwise, >= 3 vertices.
using BevPolygon = std::vector<Eigen::Vector2d>;

// Signed area (positive for counter-clockwise rings).
double polygon_area(const BevPolygon& poly);

// Footprint corners of the box in the ground plane, counter-clockwise,
// starting from the (+x, +y) corner of the box frame.
BevPolygon box_corners_bev(const Box3& box);

// Area of the intersection of two convex polygons (Sutherland-Hodgman).
// Slivers below 1e-12 m^2 are treated as empty contact.
double convex_intersection_area(const BevPolygon& a, const BevPolygon& b);

// Volumetric IoU of two yawed boxes: footprint overlap times vertical
// overlap, over the volume union. Returns 0 for disjoint boxes.
double iou3d(const Box3& a, const Box3& b);

// Distance-penalized IoU: iou3d minus the squared center distance over the
// squared diagonal of the tightest axis-aligned box enclosing both inputs.
// Range (-1, 1]; equals iou3d exactly when centers coincide.
double diou3d(const Box3& pred, const Box3& target);

enum class FitMode {
  kAxisAligned,  // tight axis-aligned bounds, yaw = 0
  kMinAreaYaw,   // minimum-area yawed footprint via rotating calipers
};

// Smallest extent a fitted box reports per axis; keeps boxes fitted to
// planar point sets (pictures, windows) from collapsing to zero volume.
inline constexpr double kFitSizeFloor = 1e-6;

// Fits a box to a point set.
//   kAxisAligned: needs >= 1 point; throws DegenerateGeometry when the set
//     is a single point (all extents below the size floor).
//   kMinAreaYaw: needs >= 4 points with a non-collinear footprint; the
//     reported yaw lies in [-pi/4, pi/4) (a rectangle determines its
//     orientation only up to quarter turns). Throws DegenerateGeometry on
//     collinear footprints.
// Both modes throw EmptyInput on an empty set and clamp each extent to the
// size floor. The fitted box contains every input point.
Box3 fit_box(std::span<const Eigen::Vector3d> points, FitMode mode);

// Closed containment test in the box frame (faces count as inside, with a
// 1e-9 slack so fitted boxes contain their defining points).
bool point_in_box(const Eigen::Vector3d& p, const Box3& box);

// Containment mask over a point set.
std::vector<bool> points_in_box(std::span<const Eigen::Vector3d> points, const Box3& box);

}  // namespace fi3det
