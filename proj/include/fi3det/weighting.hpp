#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "fi3det/errors.hpp"
#include "fi3det/geometry.hpp"

namespace fi3det {

// Gaussian falloff of a point's supervision strength with distance from a
// box center: exp(-|p - c|^2 / (2 sigma^2)). Throws InvalidSigma for
// sigma <= 0.
double point_weight(const Eigen::Vector3d& p, const Eigen::Vector3d& center, double sigma);

// Reliability of a box hypothesis: the norm of the mean of unit-normalized
// member features. Mutually consistent directions give values near 1,
// contradicting directions cancel toward 0. Throws EmptyBox on an empty
// member list and ZeroNormFeature when any feature has zero norm.
double box_weight(const std::vector<Eigen::VectorXd>& member_features);

struct WeightingConfig {
  double sigma = 0.5;
  // When set, the center offset is divided by the box half-extents (in the
  // box frame) before the Gaussian, making the falloff scale with object
  // size instead of absolute meters.
  bool normalized_distance = false;
};

// One supervised (point, box) pair. combined = box weight times the point
// weight; always in (0, 1].
struct WeightEntry {
  int point = 0;
  int box = 0;
  double point_weight = 0.0;
  double combined = 0.0;
};

struct WeightField {
  std::vector<WeightEntry> entries;  // ordered by (box, point)
  std::vector<double> box_weights;   // per input box; 0 for dropped boxes
  std::vector<bool> box_kept;        // false = dropped, no entries emitted
  double sigma = 0.5;
  int dropped_empty = 0;       // boxes with no interior points
  int dropped_zero_norm = 0;   // boxes whose member features all had zero norm
};

// Builds the full supervision weight field for a scene: for every box, its
// interior points become entries weighted by box reliability times center
// falloff. Member features with zero norm are excluded from the box
// reliability mean (they carry no direction); a box keeping no usable
// feature is dropped, as is a box with no interior points. Feature rows
// must align with points by index (ShapeMismatch otherwise).
WeightField combined_weights(std::span<const Eigen::Vector3d> points,
                             std::span<const Box3> boxes,
                             const Eigen::MatrixXd& aligned_features,
                             const WeightingConfig& cfg);

}  // namespace fi3det
