#include "fi3det/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "json.hpp"

namespace fi3det {

namespace {

Box3 flatten_yaw(const Box3& b) {
  Box3 out = b;
  out.yaw = 0.0;
  return out;
}

double pair_iou(const Box3& a, const Box3& b, bool axis_aligned) {
  return axis_aligned ? iou3d(flatten_yaw(a), flatten_yaw(b)) : iou3d(a, b);
}

// Rank order shared by matching, pooling and NMS: score descending, input
// index ascending on ties.
std::vector<std::size_t> rank_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
    return scores[l] > scores[r];
  });
  return order;
}

}  // namespace

std::vector<bool> match_detections(std::span<const Box3> det_boxes,
                                   std::span<const double> scores,
                                   std::span<const Box3> gt_boxes, double iou_thresh,
                                   bool axis_aligned) {
  if (det_boxes.size() != scores.size())
    throw ShapeMismatch("one score per detection box required");
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0))
    throw EmptyInput("iou threshold must lie in (0, 1)");
  std::vector<bool> tp(det_boxes.size(), false);
  std::vector<bool> consumed(gt_boxes.size(), false);
  for (std::size_t i : rank_order(scores)) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t j = 0; j < gt_boxes.size(); ++j) {
      if (consumed[j]) continue;
      const double iou = pair_iou(det_boxes[i], gt_boxes[j], axis_aligned);
      if (best < 0 || iou > best_iou) {
        best = static_cast<int>(j);
        best_iou = iou;
      }
    }
    if (best >= 0 && best_iou >= iou_thresh) {
      consumed[static_cast<std::size_t>(best)] = true;
      tp[i] = true;
    }
  }
  return tp;
}

double average_precision(const std::vector<bool>& flags, long n_gt, bool eleven_point) {
  if (n_gt < 1) throw ZeroGroundTruth("average precision needs ground truth");
  // Precision after each rank position, kept for the interpolation.
  std::vector<double> prec(flags.size());
  std::vector<double> recall(flags.size());
  long tp = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i]) ++tp;
    prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }
  if (eleven_point) {
    double total = 0.0;
    for (int k = 0; k <= 10; ++k) {
      const double r = static_cast<double>(k) / 10.0;
      double best = 0.0;
      for (std::size_t i = 0; i < flags.size(); ++i)
        if (recall[i] >= r - 1e-12 && prec[i] > best) best = prec[i];
      total += best;
    }
    return total / 11.0;
  }
  // All-point interpolation: each TP contributes (1/n_gt) times the best
  // precision at or after its position. The backward pass materializes that
  // maximum; the sum then runs in rank order.
  std::vector<double> pint(prec.size());
  double running = 0.0;
  for (std::size_t k = flags.size(); k-- > 0;) {
    if (prec[k] > running) running = prec[k];
    pint[k] = running;
  }
  double ap = 0.0;
  for (std::size_t i = 0; i < flags.size(); ++i)
    if (flags[i]) ap += pint[i] / static_cast<double>(n_gt);
  return ap;
}

std::vector<Detection> nms_per_scene(std::span<const Detection> dets, double iou_thresh) {
  // Group by scene, preserving input order inside each group.
  std::map<std::string, std::vector<std::size_t>> by_scene;
  for (std::size_t i = 0; i < dets.size(); ++i) by_scene[dets[i].scene].push_back(i);
  std::vector<bool> keep(dets.size(), false);
  for (auto& [scene, idx] : by_scene) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t l, std::size_t r) {
      return dets[l].score > dets[r].score;
    });
    std::vector<std::size_t> kept;
    for (std::size_t i : idx) {
      bool suppressed = false;
      for (std::size_t k : kept)
        if (iou3d(dets[i].box, dets[k].box) > iou_thresh) {
          suppressed = true;
          break;
        }
      if (!suppressed) {
        kept.push_back(i);
        keep[i] = true;
      }
    }
  }
  std::vector<Detection> out;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (keep[i]) out.push_back(dets[i]);
  return out;
}

MetricsReport map_report(std::span<const Detection> dets, std::span<const Detection> gts,
                         const Split& split, const EvalConfig& cfg) {
  if (split.base.empty() && split.novel.empty())
    throw EmptySplit("split lists no categories");
  std::vector<std::pair<std::string, bool>> cats;  // (name, novel)
  for (const auto& c : split.base) cats.emplace_back(c, false);
  for (const auto& c : split.novel) cats.emplace_back(c, true);
  for (const auto& g : gts) {
    bool known = false;
    for (const auto& [name, novel] : cats)
      if (name == g.category) known = true;
    if (!known) throw EmptySplit("ground-truth category missing from the split: " + g.category);
  }

  MetricsReport report;
  double base_sum = 0.0, novel_sum = 0.0;
  long base_n = 0, novel_n = 0;
  for (const auto& [name, novel] : cats) {
    // Scene list in first-appearance order keeps pooling deterministic.
    std::vector<std::string> scenes;
    auto note_scene = [&](const std::string& s) {
      if (std::find(scenes.begin(), scenes.end(), s) == scenes.end()) scenes.push_back(s);
    };
    for (const auto& g : gts)
      if (g.category == name) note_scene(g.scene);
    for (const auto& d : dets)
      if (d.category == name) note_scene(d.scene);

    long n_gt = 0, n_det = 0;
    std::vector<double> pooled_scores;
    std::vector<bool> pooled_flags;
    for (const auto& scene : scenes) {
      std::vector<Box3> db, gb;
      std::vector<double> ds;
      for (const auto& d : dets)
        if (d.category == name && d.scene == scene) {
          db.push_back(d.box);
          ds.push_back(d.score);
        }
      for (const auto& g : gts)
        if (g.category == name && g.scene == scene) gb.push_back(g.box);
      n_gt += static_cast<long>(gb.size());
      n_det += static_cast<long>(db.size());
      const std::vector<bool> tp =
          match_detections(db, ds, gb, cfg.iou_thresh, cfg.axis_aligned);
      for (std::size_t i = 0; i < db.size(); ++i) {
        pooled_scores.push_back(ds[i]);
        pooled_flags.push_back(tp[i]);
      }
    }
    if (n_gt == 0) {
      report.zero_gt_categories.push_back(name);
      continue;
    }
    std::vector<std::size_t> order(pooled_scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
      return pooled_scores[l] > pooled_scores[r];
    });
    std::vector<bool> ranked;
    ranked.reserve(order.size());
    for (std::size_t i : order) ranked.push_back(pooled_flags[i]);
    const double ap = average_precision(ranked, n_gt, cfg.eleven_point);

    CategoryMetrics m;
    m.category = name;
    m.novel = novel;
    m.ap = ap;
    m.n_gt = n_gt;
    m.n_det = n_det;
    report.per_category.push_back(std::move(m));
    if (novel) {
      novel_sum += ap;
      ++novel_n;
    } else {
      base_sum += ap;
      ++base_n;
    }
  }
  report.base_map = base_n > 0 ? base_sum / static_cast<double>(base_n) : 0.0;
  report.novel_map = novel_n > 0 ? novel_sum / static_cast<double>(novel_n) : 0.0;
  report.all_map =
      (base_n + novel_n) > 0 ? (base_sum + novel_sum) / static_cast<double>(base_n + novel_n)
                             : 0.0;
  return report;
}

void write_detections_jsonl(const std::string& path, std::span<const Detection> dets,
                            bool with_score) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open for writing: " + path);
  for (const auto& d : dets) {
    nlohmann::ordered_json j;
    j["scene"] = d.scene;
    j["category"] = d.category;
    j["box"] = {d.box.center.x(), d.box.center.y(), d.box.center.z(),
                d.box.size.x(),   d.box.size.y(),   d.box.size.z(),
                d.box.yaw};
    if (with_score) j["score"] = d.score;
    out << j.dump() << "\n";
  }
  if (!out) throw FormatError("short write: " + path);
}

std::vector<Detection> read_detections_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path);
  std::vector<Detection> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw FormatError(path + ": invalid JSON on line " + std::to_string(lineno));
    }
    try {
      Detection d;
      d.scene = j.at("scene").get<std::string>();
      d.category = j.at("category").get<std::string>();
      const auto& b = j.at("box");
      if (b.size() != 7) throw FormatError(path + ": box needs 7 numbers");
      d.box = make_box({b[0].get<double>(), b[1].get<double>(), b[2].get<double>()},
                       {b[3].get<double>(), b[4].get<double>(), b[5].get<double>()},
                       b[6].get<double>());
      d.score = j.value("score", 1.0);
      out.push_back(std::move(d));
    } catch (const nlohmann::json::exception&) {
      throw FormatError(path + ": missing or mistyped field on line " + std::to_string(lineno));
    }
  }
  return out;
}

}  // namespace fi3det
