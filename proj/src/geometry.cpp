#include "fi3det/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fi3det {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kSliverArea = 1e-12;

// Cross product z-component of (b - a) x (p - a); positive when p is left
// of the directed line a -> b.
double cross_side(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& p) {
  return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

// dp, dq are signed side values of p, q against a clip edge, with opposite
// signs; returns the crossing point on segment p -> q.
Eigen::Vector2d line_intersect(const Eigen::Vector2d& p, const Eigen::Vector2d& q,
                               double dp, double dq) {
  double t = dp / (dp - dq);
  return p + t * (q - p);
}

// Convex hull, counter-clockwise, collinear points dropped (monotone chain).
std::vector<Eigen::Vector2d> convex_hull(std::vector<Eigen::Vector2d> pts) {
  std::sort(pts.begin(), pts.end(), [](const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
                          return a.x() == b.x() && a.y() == b.y();
                        }),
            pts.end());
  const std::size_t n = pts.size();
  if (n < 3) return pts;
  std::vector<Eigen::Vector2d> hull(2 * n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    while (k >= 2 && cross_side(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
    hull[k++] = pts[i];
  }
  const std::size_t lower = k + 1;
  for (std::size_t i = n - 1; i-- > 0;) {
    while (k >= lower && cross_side(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

}  // namespace

double normalize_yaw(double yaw) {
  double y = std::fmod(yaw + kPi, 2.0 * kPi);
  if (y < 0.0) y += 2.0 * kPi;
  return y - kPi;
}

Box3 make_box(const Eigen::Vector3d& center, const Eigen::Vector3d& size, double yaw) {
  if (!center.allFinite() || !size.allFinite() || !std::isfinite(yaw))
    throw DegenerateGeometry("box parameters must be finite");
  if (!(size.minCoeff() > 0.0)) throw DegenerateGeometry("box extents must be positive");
  return Box3{center, size, normalize_yaw(yaw)};
}

double polygon_area(const BevPolygon& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % n];
    acc += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * acc;
}

BevPolygon box_corners_bev(const Box3& box) {
  const double hx = 0.5 * box.size.x();
  const double hy = 0.5 * box.size.y();
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double lx[4] = {hx, -hx, -hx, hx};
  const double ly[4] = {hy, hy, -hy, -hy};
  BevPolygon out(4);
  for (int i = 0; i < 4; ++i) {
    out[i].x() = box.center.x() + c * lx[i] - s * ly[i];
    out[i].y() = box.center.y() + s * lx[i] + c * ly[i];
  }
  return out;
}

double convex_intersection_area(const BevPolygon& a, const BevPolygon& b) {
  if (a.size() < 3 || b.size() < 3) return 0.0;
  std::vector<Eigen::Vector2d> poly(a.begin(), a.end());
  std::vector<Eigen::Vector2d> next;
  for (std::size_t i = 0; i < b.size() && !poly.empty(); ++i) {
    const Eigen::Vector2d& e0 = b[i];
    const Eigen::Vector2d& e1 = b[(i + 1) % b.size()];
    next.clear();
    const std::size_t m = poly.size();
    for (std::size_t j = 0; j < m; ++j) {
      const Eigen::Vector2d& p = poly[j];
      const Eigen::Vector2d& q = poly[(j + 1) % m];
      const double dp = cross_side(e0, e1, p);
      const double dq = cross_side(e0, e1, q);
      if (dp >= 0.0) next.push_back(p);
      if ((dp > 0.0 && dq < 0.0) || (dp < 0.0 && dq > 0.0))
        next.push_back(line_intersect(p, q, dp, dq));
    }
    poly.swap(next);
  }
  double area = polygon_area(poly);
  if (area < kSliverArea) return 0.0;
  return area;
}

namespace {

// Orders two boxes by their parameters so that iou3d is symmetric to the
// last bit: polygon clipping is evaluated in a canonical argument order.
bool box_param_less(const Box3& a, const Box3& b) {
  for (int i = 0; i < 3; ++i) {
    if (a.center[i] != b.center[i]) return a.center[i] < b.center[i];
    if (a.size[i] != b.size[i]) return a.size[i] < b.size[i];
  }
  return a.yaw < b.yaw;
}

}  // namespace

double iou3d(const Box3& a, const Box3& b) {
  const Box3& p = box_param_less(b, a) ? b : a;
  const Box3& q = box_param_less(b, a) ? a : b;
  const double zi = std::min(p.z_max(), q.z_max()) - std::max(p.z_min(), q.z_min());
  if (zi <= 0.0) return 0.0;
  const BevPolygon cp = box_corners_bev(p);
  const BevPolygon cq = box_corners_bev(q);
  const double bev = convex_intersection_area(cp, cq);
  if (bev <= 0.0) return 0.0;
  // Volumes are derived from the same footprint representation the clipper
  // sees, so identical boxes come out at exactly 1.
  const double vol_p = polygon_area(cp) * (p.z_max() - p.z_min());
  const double vol_q = polygon_area(cq) * (q.z_max() - q.z_min());
  const double inter = bev * zi;
  const double uni = vol_p + vol_q - inter;
  return inter / uni;
}

double diou3d(const Box3& pred, const Box3& target) {
  const double iou = iou3d(pred, target);
  Eigen::Vector2d bev_min(std::numeric_limits<double>::infinity(),
                          std::numeric_limits<double>::infinity());
  Eigen::Vector2d bev_max = -bev_min;
  double z_lo = std::numeric_limits<double>::infinity();
  double z_hi = -z_lo;
  for (const Box3* box : {&pred, &target}) {
    for (const auto& c : box_corners_bev(*box)) {
      bev_min = bev_min.cwiseMin(c);
      bev_max = bev_max.cwiseMax(c);
    }
    z_lo = std::min(z_lo, box->z_min());
    z_hi = std::max(z_hi, box->z_max());
  }
  const double dx = bev_max.x() - bev_min.x();
  const double dy = bev_max.y() - bev_min.y();
  const double dz = z_hi - z_lo;
  const double diag_sq = dx * dx + dy * dy + dz * dz;
  const double center_sq = (pred.center - target.center).squaredNorm();
  return iou - center_sq / diag_sq;
}

Box3 fit_box(std::span<const Eigen::Vector3d> points, FitMode mode) {
  if (points.empty()) throw EmptyInput("fit_box: empty point set");

  double z_lo = std::numeric_limits<double>::infinity();
  double z_hi = -z_lo;
  for (const auto& p : points) {
    z_lo = std::min(z_lo, p.z());
    z_hi = std::max(z_hi, p.z());
  }

  if (mode == FitMode::kAxisAligned) {
    Eigen::Vector2d lo(std::numeric_limits<double>::infinity(),
                       std::numeric_limits<double>::infinity());
    Eigen::Vector2d hi = -lo;
    for (const auto& p : points) {
      lo = lo.cwiseMin(p.head<2>());
      hi = hi.cwiseMax(p.head<2>());
    }
    const Eigen::Vector3d raw(hi.x() - lo.x(), hi.y() - lo.y(), z_hi - z_lo);
    if (raw.maxCoeff() < kFitSizeFloor)
      throw DegenerateGeometry("fit_box: point set has no extent");
    Box3 box;
    box.center = Eigen::Vector3d(0.5 * (lo.x() + hi.x()), 0.5 * (lo.y() + hi.y()),
                                 0.5 * (z_lo + z_hi));
    box.size = raw.cwiseMax(kFitSizeFloor);
    box.yaw = 0.0;
    return box;
  }

  if (points.size() < 4)
    throw DegenerateGeometry("fit_box: yawed fit needs at least 4 points");
  std::vector<Eigen::Vector2d> bev(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) bev[i] = points[i].head<2>();
  const std::vector<Eigen::Vector2d> hull = convex_hull(std::move(bev));
  if (hull.size() < 3)
    throw DegenerateGeometry("fit_box: footprint is collinear");

  // Rotating calipers: a minimum-area enclosing rectangle has one side
  // collinear with a hull edge, so trying every edge direction is exact.
  double best_area = std::numeric_limits<double>::infinity();
  double best_theta = 0.0;
  const std::size_t h = hull.size();
  for (std::size_t i = 0; i < h; ++i) {
    const Eigen::Vector2d d = hull[(i + 1) % h] - hull[i];
    const double theta = std::atan2(d.y(), d.x());
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    double ux_lo = std::numeric_limits<double>::infinity(), ux_hi = -ux_lo;
    double uy_lo = ux_lo, uy_hi = -uy_lo;
    for (const auto& v : hull) {
      const double ux = c * v.x() + s * v.y();
      const double uy = -s * v.x() + c * v.y();
      ux_lo = std::min(ux_lo, ux); ux_hi = std::max(ux_hi, ux);
      uy_lo = std::min(uy_lo, uy); uy_hi = std::max(uy_hi, uy);
    }
    const double area = (ux_hi - ux_lo) * (uy_hi - uy_lo);
    if (area < best_area) {
      best_area = area;
      best_theta = theta;
    }
  }

  // A rectangle's orientation is only defined modulo pi/2; report the
  // representative in [-pi/4, pi/4).
  double yaw = std::remainder(best_theta, 0.5 * kPi);
  if (yaw >= 0.25 * kPi) yaw -= 0.5 * kPi;

  const double c = std::cos(yaw);
  const double s = std::sin(yaw);
  double ux_lo = std::numeric_limits<double>::infinity(), ux_hi = -ux_lo;
  double uy_lo = ux_lo, uy_hi = -uy_lo;
  for (const auto& v : hull) {
    const double ux = c * v.x() + s * v.y();
    const double uy = -s * v.x() + c * v.y();
    ux_lo = std::min(ux_lo, ux); ux_hi = std::max(ux_hi, ux);
    uy_lo = std::min(uy_lo, uy); uy_hi = std::max(uy_hi, uy);
  }
  const double mx = 0.5 * (ux_lo + ux_hi);
  const double my = 0.5 * (uy_lo + uy_hi);
  Box3 box;
  box.center = Eigen::Vector3d(c * mx - s * my, s * mx + c * my, 0.5 * (z_lo + z_hi));
  box.size = Eigen::Vector3d(ux_hi - ux_lo, uy_hi - uy_lo, z_hi - z_lo).cwiseMax(kFitSizeFloor);
  box.yaw = yaw;
  return box;
}

bool point_in_box(const Eigen::Vector3d& p, const Box3& box) {
  constexpr double kEps = 1e-9;
  const double dx = p.x() - box.center.x();
  const double dy = p.y() - box.center.y();
  const double dz = p.z() - box.center.z();
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::abs(lx) <= 0.5 * box.size.x() + kEps &&
         std::abs(ly) <= 0.5 * box.size.y() + kEps &&
         std::abs(dz) <= 0.5 * box.size.z() + kEps;
}

std::vector<bool> points_in_box(std::span<const Eigen::Vector3d> points, const Box3& box) {
  std::vector<bool> mask(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) mask[i] = point_in_box(points[i], box);
  return mask;
}

}  // namespace fi3det
