#include "fi3det/assignment.hpp"

#include <algorithm>

namespace fi3det {

AssignmentResult assign_centers(std::span<const Eigen::Vector3d> locations,
                                std::span<const LabeledBox> boxes, int k) {
  if (k < 1) throw EmptyInput("k must be at least 1");

  AssignmentResult res;
  res.per_location.resize(locations.size());
  res.positives_per_box.assign(boxes.size(), 0);

  // Claim phase: nearest containing center wins each location.
  std::vector<int> claimed(locations.size(), -1);
  std::vector<double> claim_dist(locations.size(), 0.0);
  std::vector<bool> has_candidate(boxes.size(), false);
  for (std::size_t i = 0; i < locations.size(); ++i) {
    int best = -1;
    double best_d = 0.0, best_vol = 0.0;
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      if (!point_in_box(locations[i], boxes[b].box)) continue;
      has_candidate[b] = true;
      const double d = (locations[i] - boxes[b].box.center).norm();
      const double vol = boxes[b].box.volume();
      if (best < 0 || d < best_d || (d == best_d && vol < best_vol)) {
        best = static_cast<int>(b);
        best_d = d;
        best_vol = vol;
      }
    }
    claimed[i] = best;
    claim_dist[i] = best_d;
  }
  for (std::size_t b = 0; b < boxes.size(); ++b)
    if (!has_candidate[b]) res.boxes_without_candidates.push_back(static_cast<int>(b));

  // Selection phase: each box keeps its k nearest claimed locations.
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    std::vector<int> mine;
    for (std::size_t i = 0; i < locations.size(); ++i)
      if (claimed[i] == static_cast<int>(b)) mine.push_back(static_cast<int>(i));
    std::sort(mine.begin(), mine.end(), [&](int l, int r) {
      if (claim_dist[static_cast<std::size_t>(l)] != claim_dist[static_cast<std::size_t>(r)])
        return claim_dist[static_cast<std::size_t>(l)] < claim_dist[static_cast<std::size_t>(r)];
      return l < r;
    });
    if (mine.size() > static_cast<std::size_t>(k)) mine.resize(static_cast<std::size_t>(k));
    for (int i : mine) {
      auto& slot = res.per_location[static_cast<std::size_t>(i)];
      slot.box = static_cast<int>(b);
      slot.category = boxes[b].category;
      slot.distance = claim_dist[static_cast<std::size_t>(i)];
    }
    res.positives_per_box[b] = static_cast<int>(mine.size());
  }
  return res;
}

}  // namespace fi3det
