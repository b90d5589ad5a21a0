#pragma once

#include <span>
#include <string>
#include <vector>

#include "fi3det/errors.hpp"
#include "fi3det/geometry.hpp"

namespace fi3det {

// One detection or ground-truth record. Ground truth carries an implicit
// score of 1.0.
struct Detection {
  std::string scene;
  std::string category;
  Box3 box;
  double score = 1.0;
};

// Category split for reporting. A category must appear in exactly one list.
struct Split {
  std::vector<std::string> base;
  std::vector<std::string> novel;
};

struct CategoryMetrics {
  std::string category;
  bool novel = false;
  double ap = 0.0;
  long n_gt = 0;
  long n_det = 0;
};

struct MetricsReport {
  std::vector<CategoryMetrics> per_category;  // split order, zero-GT excluded
  double base_map = 0.0;
  double novel_map = 0.0;
  double all_map = 0.0;
  std::vector<std::string> zero_gt_categories;  // excluded from the means
  // Protocol metadata, filled by the protocol runner.
  std::string protocol;
  int way = 0;
  int shot = 0;
  int session = 0;
};

struct EvalConfig {
  double iou_thresh = 0.25;
  bool axis_aligned = false;  // force yaw = 0 on both boxes before IoU
  bool eleven_point = false;  // 11-point interpolation instead of all-point
};

// Greedy matching of one category's detections against one scene's ground
// truth: detections are ranked by (score desc, input index) and each takes
// the best-IoU ground truth not yet consumed; TP iff that IoU clears the
// threshold. Returned flags are aligned with the input order.
std::vector<bool> match_detections(std::span<const Box3> det_boxes,
                                   std::span<const double> scores,
                                   std::span<const Box3> gt_boxes, double iou_thresh,
                                   bool axis_aligned = false);

// Area under the monotone-interpolated precision/recall curve. flags are
// TP markers in rank order pooled across scenes. Throws ZeroGroundTruth.
double average_precision(const std::vector<bool>& flags, long n_gt,
                         bool eleven_point = false);

// Class-agnostic greedy non-maximum suppression within each scene: keep in
// (score desc, input index) order, dropping any detection whose IoU with an
// already kept one exceeds the threshold.
std::vector<Detection> nms_per_scene(std::span<const Detection> dets, double iou_thresh = 0.5);

// Full report: per-category AP, Base/Novel/All means. Categories with zero
// ground truth are excluded from every mean and listed in the report.
// Throws EmptySplit when the split is empty or does not cover a ground-truth
// category.
MetricsReport map_report(std::span<const Detection> dets, std::span<const Detection> gts,
                         const Split& split, const EvalConfig& cfg = {});

// JSON-lines persistence: one object per line with scene, category, the 7
// box numbers, and (for detections) the score. Reads default a missing
// score to 1.0. Throws FormatError.
void write_detections_jsonl(const std::string& path, std::span<const Detection> dets,
                            bool with_score = true);
std::vector<Detection> read_detections_jsonl(const std::string& path);

}  // namespace fi3det
