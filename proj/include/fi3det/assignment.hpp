#pragma once

#include <Eigen/Core>
#include <limits>
#include <span>
#include <vector>

#include "fi3det/errors.hpp"
#include "fi3det/geometry.hpp"

namespace fi3det {

struct LabeledBox {
  Box3 box;
  int category = -1;
};

// Per-location outcome of center assignment. Unassigned locations keep
// box = category = -1 and an infinite distance.
struct LocationAssignment {
  int box = -1;
  int category = -1;
  double distance = std::numeric_limits<double>::infinity();
};

struct AssignmentResult {
  std::vector<LocationAssignment> per_location;  // one entry per input location
  std::vector<int> positives_per_box;            // bounded by k
  std::vector<int> boxes_without_candidates;     // boxes containing no location
};

// Center-based positive selection. Every location is first claimed by the
// containing box with the nearest center (ties: smaller volume, then lower
// box index); each box then keeps at most its k claimed locations nearest
// to the center (ties: lower location index). Throws EmptyInput when k < 1.
AssignmentResult assign_centers(std::span<const Eigen::Vector3d> locations,
                                std::span<const LabeledBox> boxes, int k);

}  // namespace fi3det
