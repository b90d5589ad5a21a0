#include "fi3det/weighting.hpp"

#include <cmath>

namespace fi3det {

// The arithmetic in this file sticks to plain index-order loops on purpose:
// the weight field is part of the persisted artifact contract and must be
// reproducible to the last bit against a naive reference.

namespace {

double feature_norm(const Eigen::MatrixXd& feats, int row) {
  double sq = 0.0;
  for (int k = 0; k < feats.cols(); ++k) sq += feats(row, k) * feats(row, k);
  return std::sqrt(sq);
}

constexpr double kZeroNorm = 1e-12;

}  // namespace

double point_weight(const Eigen::Vector3d& p, const Eigen::Vector3d& center, double sigma) {
  if (!(sigma > 0.0)) throw InvalidSigma("sigma must be positive");
  const double dx = p.x() - center.x();
  const double dy = p.y() - center.y();
  const double dz = p.z() - center.z();
  const double sq = dx * dx + dy * dy + dz * dz;
  return std::exp(-sq / (2.0 * sigma * sigma));
}

double box_weight(const std::vector<Eigen::VectorXd>& member_features) {
  if (member_features.empty()) throw EmptyBox("box has no member features");
  const auto dim = member_features.front().size();
  std::vector<double> acc(static_cast<std::size_t>(dim), 0.0);
  for (const auto& f : member_features) {
    if (f.size() != dim) throw ShapeMismatch("member features disagree on dimension");
    double sq = 0.0;
    for (Eigen::Index k = 0; k < dim; ++k) sq += f[k] * f[k];
    const double norm = std::sqrt(sq);
    if (norm <= kZeroNorm) throw ZeroNormFeature("member feature has zero norm");
    for (Eigen::Index k = 0; k < dim; ++k) acc[static_cast<std::size_t>(k)] += f[k] / norm;
  }
  const double count = static_cast<double>(member_features.size());
  double sq = 0.0;
  for (double a : acc) {
    const double m = a / count;
    sq += m * m;
  }
  return std::sqrt(sq);
}

WeightField combined_weights(std::span<const Eigen::Vector3d> points,
                             std::span<const Box3> boxes,
                             const Eigen::MatrixXd& aligned_features,
                             const WeightingConfig& cfg) {
  if (!(cfg.sigma > 0.0)) throw InvalidSigma("sigma must be positive");
  if (aligned_features.rows() != static_cast<Eigen::Index>(points.size()))
    throw ShapeMismatch("one aligned feature row per point required");

  WeightField field;
  field.sigma = cfg.sigma;
  field.box_weights.assign(boxes.size(), 0.0);
  field.box_kept.assign(boxes.size(), false);

  const int dim = static_cast<int>(aligned_features.cols());
  for (std::size_t bi = 0; bi < boxes.size(); ++bi) {
    const Box3& box = boxes[bi];
    const auto mask = points_in_box(points, box);
    std::vector<int> members;
    for (std::size_t i = 0; i < points.size(); ++i)
      if (mask[i]) members.push_back(static_cast<int>(i));
    if (members.empty()) {
      ++field.dropped_empty;
      continue;
    }

    // Box reliability over the members with usable (nonzero) directions.
    std::vector<double> acc(static_cast<std::size_t>(dim), 0.0);
    long used = 0;
    for (int pi : members) {
      const double norm = feature_norm(aligned_features, pi);
      if (norm <= kZeroNorm) continue;
      for (int k = 0; k < dim; ++k) acc[static_cast<std::size_t>(k)] += aligned_features(pi, k) / norm;
      ++used;
    }
    if (used == 0) {
      ++field.dropped_zero_norm;
      continue;
    }
    double sq = 0.0;
    for (double a : acc) {
      const double m = a / static_cast<double>(used);
      sq += m * m;
    }
    const double w_box = std::sqrt(sq);

    field.box_weights[bi] = w_box;
    field.box_kept[bi] = true;
    const double c = std::cos(box.yaw);
    const double s = std::sin(box.yaw);
    for (int pi : members) {
      double w_pt;
      if (cfg.normalized_distance) {
        // Offset in the box frame, scaled by half-extents per axis.
        const double dx = points[static_cast<std::size_t>(pi)].x() - box.center.x();
        const double dy = points[static_cast<std::size_t>(pi)].y() - box.center.y();
        const double dz = points[static_cast<std::size_t>(pi)].z() - box.center.z();
        const double lx = (c * dx + s * dy) / (0.5 * box.size.x());
        const double ly = (-s * dx + c * dy) / (0.5 * box.size.y());
        const double lz = dz / (0.5 * box.size.z());
        w_pt = std::exp(-(lx * lx + ly * ly + lz * lz) / (2.0 * cfg.sigma * cfg.sigma));
      } else {
        w_pt = point_weight(points[static_cast<std::size_t>(pi)], box.center, cfg.sigma);
      }
      field.entries.push_back(
          {pi, static_cast<int>(bi), w_pt, w_box * w_pt});
    }
  }
  return field;
}

}  // namespace fi3det
