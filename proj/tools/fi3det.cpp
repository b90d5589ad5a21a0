// Command-line front end: pseudo-label mining over exported scenes and
// frames, prototype imprinting from support manifests, detection
// evaluation, and the synthetic end-to-end protocol.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fi3det/fi3d_format.hpp"
#include "fi3det/parallel.hpp"
#include "fi3det/session.hpp"

namespace fs = std::filesystem;
using namespace fi3det;
using nlohmann::json;

namespace {

std::vector<Eigen::Vector3d> positions_of(const Scene& scene) {
  std::vector<Eigen::Vector3d> pts;
  pts.reserve(static_cast<std::size_t>(scene.points.rows()));
  for (Eigen::Index r = 0; r < scene.points.rows(); ++r)
    pts.emplace_back(scene.points(r, 0), scene.points(r, 1), scene.points(r, 2));
  return pts;
}

std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& ext) {
  if (!fs::is_directory(dir)) throw FormatError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ext)
      out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write: " + path.string());
  out << text;
}

// ------------------------------------------------------------------ mine

// Scene files pair with frame files by id: scene S.fi3d expects frames
// named S__f<index>.fi3d. Everything annotated in the scene counts as
// known; mining returns boxes for whatever else the masks cover.
int run_mine(const std::string& scenes_dir, const std::string& frames_dir, double sigma,
             bool normalized, const MiningConfig& mining, const std::string& out_dir) {
  const auto scene_files = sorted_files(scenes_dir, ".fi3d");
  if (scene_files.empty()) throw FormatError("no .fi3d scenes in " + scenes_dir);
  fs::create_directories(out_dir);

  long total_boxes = 0;
  int failed = 0;
  for (const auto& scene_path : scene_files) {
    const std::string stem = scene_path.stem().string();
    try {
      const LoadedScene loaded = read_scene_fi3d(scene_path.string());
      if (loaded.feat2.rows() != loaded.scene.points.rows())
        throw FormatError(stem + ": scene file lacks per-point feat2d, required for weighting");

      std::vector<VlmFrame> frames;
      for (int f = 0;; ++f) {
        const fs::path frame_path =
            fs::path(frames_dir) / (stem + "__f" + std::to_string(f) + ".fi3d");
        if (!fs::exists(frame_path)) break;
        frames.push_back(load_vlm_frame(frame_path));
      }
      if (frames.empty()) throw FormatError(stem + ": no frames named " + stem + "__f*.fi3d");

      std::vector<Box3> known;
      for (const auto& obj : loaded.scene.objects) known.push_back(obj.box);
      MiningStats stats;
      const auto pseudo = mine_unknown_objects(frames, known, mining, &stats);

      std::vector<Box3> boxes;
      for (const auto& p : pseudo) boxes.push_back(p.box);
      WeightingConfig wcfg;
      wcfg.sigma = sigma;
      wcfg.normalized_distance = normalized;
      const WeightField weights =
          combined_weights(positions_of(loaded.scene), boxes, loaded.feat2, wcfg);

      // One container per scene: mined boxes, pooled features, support
      // counts, per-box reliability, and the sparse point-weight entries.
      Fi3dFile out;
      const int feat_dim = pseudo.empty() ? 0 : static_cast<int>(pseudo[0].feature.size());
      Fi3dBlock bboxes;
      bboxes.name = "pseudo_boxes";
      bboxes.dims = {pseudo.size(), 7};
      std::vector<float> bdata;
      for (const auto& p : pseudo) {
        const Box3& b = p.box;
        for (double v : {b.center.x(), b.center.y(), b.center.z(), b.size.x(), b.size.y(),
                         b.size.z(), b.yaw})
          bdata.push_back(static_cast<float>(v));
      }
      bboxes.data = std::move(bdata);
      out.blocks.push_back(std::move(bboxes));

      Fi3dBlock bfeat;
      bfeat.name = "pseudo_feats";
      bfeat.dims = {pseudo.size(), static_cast<std::uint64_t>(feat_dim)};
      std::vector<float> fdata;
      for (const auto& p : pseudo)
        for (Eigen::Index k = 0; k < p.feature.size(); ++k)
          fdata.push_back(static_cast<float>(p.feature[k]));
      bfeat.data = std::move(fdata);
      out.blocks.push_back(std::move(bfeat));

      Fi3dBlock bsup;
      bsup.name = "support";
      bsup.dims = {pseudo.size()};
      std::vector<std::uint32_t> sdata;
      for (const auto& p : pseudo) sdata.push_back(static_cast<std::uint32_t>(p.support_count));
      bsup.data = std::move(sdata);
      out.blocks.push_back(std::move(bsup));

      Fi3dBlock bbw;
      bbw.name = "box_weights";
      bbw.dims = {weights.box_weights.size()};
      std::vector<float> bwdata;
      for (double v : weights.box_weights) bwdata.push_back(static_cast<float>(v));
      bbw.data = std::move(bwdata);
      out.blocks.push_back(std::move(bbw));

      Fi3dBlock bidx;
      bidx.name = "weight_index";
      bidx.dims = {weights.entries.size(), 2};
      std::vector<std::uint32_t> idata;
      for (const auto& e : weights.entries) {
        idata.push_back(static_cast<std::uint32_t>(e.box));
        idata.push_back(static_cast<std::uint32_t>(e.point));
      }
      bidx.data = std::move(idata);
      out.blocks.push_back(std::move(bidx));

      Fi3dBlock bval;
      bval.name = "weight_values";
      bval.dims = {weights.entries.size(), 2};
      std::vector<float> vdata;
      for (const auto& e : weights.entries) {
        vdata.push_back(static_cast<float>(e.point_weight));
        vdata.push_back(static_cast<float>(e.combined));
      }
      bval.data = std::move(vdata);
      out.blocks.push_back(std::move(bval));

      write_fi3d(fs::path(out_dir) / (stem + ".fi3d"), out);
      total_boxes += static_cast<long>(pseudo.size());
      std::printf("%s: %zu boxes (%d masks, %d skipped, %d merged, %d known)\n", stem.c_str(),
                  pseudo.size(), stats.masks_seen, stats.masks_skipped, stats.merged_away,
                  stats.suppressed_known);
    } catch (const std::exception& e) {
      ++failed;
      std::fprintf(stderr, "%s: %s\n", stem.c_str(), e.what());
    }
  }
  std::printf("mined %ld boxes over %zu scenes (%d failed)\n", total_boxes,
              scene_files.size(), failed);
  return failed == 0 ? 0 : 1;
}

// --------------------------------------------------------------- imprint

// The support directory holds support.json plus one exported scene file
// per referenced scene. The manifest must target exactly the next session:
// earlier sessions' data is gone by design, later ones don't exist yet.
//   { "session": t+1,
//     "categories": ["name", ...],
//     "instances": [ { "scene": "id", "object": 0, "category": "name" }, ... ] }
int run_imprint(const std::string& state_path, const std::string& support_dir, double mu,
                int epochs, double lr, const std::string& out_path) {
  SessionState state = load_state(state_path);

  std::ifstream in(fs::path(support_dir) / "support.json", std::ios::binary);
  if (!in) throw FormatError("missing support.json in " + support_dir);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw FormatError(std::string("support.json is not valid JSON: ") + e.what());
  }
  const int session = manifest.at("session").get<int>();
  if (session != state.t + 1)
    throw FormatError("support manifest targets session " + std::to_string(session) +
                      " but the state expects session " + std::to_string(state.t + 1));
  const auto categories = manifest.at("categories").get<std::vector<std::string>>();

  // Group instances by scene, keeping the manifest's scene order.
  std::vector<std::string> scene_order;
  std::map<std::string, std::map<std::string, std::vector<int>>> by_scene;
  for (const auto& inst : manifest.at("instances")) {
    const std::string scene = inst.at("scene").get<std::string>();
    const std::string category = inst.at("category").get<std::string>();
    if (std::find(categories.begin(), categories.end(), category) == categories.end())
      throw FormatError("instance category not in the manifest: " + category);
    if (by_scene.find(scene) == by_scene.end()) scene_order.push_back(scene);
    by_scene[scene][category].push_back(inst.at("object").get<int>());
  }

  std::vector<ImprintScene> support;
  for (const auto& scene_id : scene_order) {
    const LoadedScene loaded =
        read_scene_fi3d((fs::path(support_dir) / (scene_id + ".fi3d")).string());
    if (loaded.feat3.rows() != loaded.scene.points.rows() ||
        loaded.feat2.rows() != loaded.scene.points.rows())
      throw FormatError(scene_id + ": support scenes need feat3d and feat2d blocks");
    const auto pts = positions_of(loaded.scene);
    ImprintScene imprint_scene;
    for (const auto& name : categories) {
      const auto it = by_scene[scene_id].find(name);
      if (it == by_scene[scene_id].end()) continue;
      PositiveSet set;
      set.category = name;
      for (const int oi : it->second) {
        if (oi < 0 || oi >= static_cast<int>(loaded.scene.objects.size()))
          throw FormatError(scene_id + ": object index out of range: " + std::to_string(oi));
        Eigen::VectorXd m3, m2;
        if (!instance_feature_means(pts, loaded.feat3, loaded.feat2,
                                    loaded.scene.objects[static_cast<std::size_t>(oi)].box,
                                    m3, m2))
          continue;
        set.f3.push_back(std::move(m3));
        set.f2.push_back(std::move(m2));
      }
      if (!set.f3.empty()) imprint_scene.push_back(std::move(set));
    }
    if (!imprint_scene.empty()) support.push_back(std::move(imprint_scene));
  }

  state.store.momentum = mu;
  const auto res = run_incremental_session(state, categories, support, epochs, lr);
  save_state(out_path, state);

  std::printf("session %d: +%d categories", state.t, res.added);
  if (!res.imprint.loss_trace.empty())
    std::printf(", gate loss %.6f -> %.6f", res.imprint.loss_trace.front(),
                res.imprint.loss_trace.back());
  std::printf("\n");
  for (const auto& name : res.imprint.categories_without_positives)
    std::fprintf(stderr, "warning: no usable positives for %s\n", name.c_str());
  std::printf("state written to %s\n", out_path.c_str());
  return 0;
}

// ------------------------------------------------------------------ eval

json metrics_to_json(const MetricsReport& m) {
  json j;
  j["base_map"] = m.base_map;
  j["novel_map"] = m.novel_map;
  j["all_map"] = m.all_map;
  j["per_category"] = json::array();
  for (const auto& cm : m.per_category)
    j["per_category"].push_back({{"category", cm.category},
                                 {"novel", cm.novel},
                                 {"ap", cm.ap},
                                 {"gt", cm.n_gt},
                                 {"detections", cm.n_det}});
  j["zero_gt"] = m.zero_gt_categories;
  return j;
}

std::string metrics_csv(const MetricsReport& m) {
  std::string csv = "base_map,novel_map,all_map\n";
  csv += nlohmann::json(m.base_map).dump() + "," + nlohmann::json(m.novel_map).dump() + "," +
         nlohmann::json(m.all_map).dump() + "\n";
  return csv;
}

// The split argument is either a preset name or a path to a JSON file with
// "base" and "novel" (or "tasks") category arrays.
Split split_from_arg(const std::string& arg, bool& axis_aligned) {
  Split split;
  if (fs::exists(arg)) {
    std::ifstream in(arg, std::ios::binary);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw FormatError(std::string("split file is not valid JSON: ") + e.what());
    }
    split.base = j.at("base").get<std::vector<std::string>>();
    if (j.contains("novel")) {
      split.novel = j.at("novel").get<std::vector<std::string>>();
    } else {
      for (const auto& task : j.at("tasks").get<std::vector<std::vector<std::string>>>())
        split.novel.insert(split.novel.end(), task.begin(), task.end());
    }
    axis_aligned = j.value("axis_aligned_eval", false);
    return split;
  }
  const SplitSpec spec = preset_split(arg);
  split.base = spec.base;
  split.novel = spec.all_novel();
  axis_aligned = spec.axis_aligned_eval;
  return split;
}

int run_eval(const std::string& pred_path, const std::string& gt_path, double iou,
             const std::string& split_arg, bool eleven_point, const std::string& out_path) {
  const auto dets = read_detections_jsonl(pred_path);
  const auto gts = read_detections_jsonl(gt_path);
  bool axis_aligned = false;
  const Split split = split_from_arg(split_arg, axis_aligned);

  EvalConfig ecfg;
  ecfg.iou_thresh = iou;
  ecfg.axis_aligned = axis_aligned;
  ecfg.eleven_point = eleven_point;
  const MetricsReport m = map_report(dets, gts, split, ecfg);

  json report;
  report["version"] = 1;
  report["iou"] = iou;
  report["axis_aligned"] = axis_aligned;
  report["split"] = {{"base", split.base}, {"novel", split.novel}};
  report["detections"] = dets.size();
  report["ground_truths"] = gts.size();
  report["metrics"] = metrics_to_json(m);
  write_text(out_path, report.dump(2) + "\n");
  write_text(fs::path(out_path).replace_extension(".csv"), metrics_csv(m));

  std::printf("base %.4f novel %.4f all %.4f (%zu categories, %zu zero-gt)\n", m.base_map,
              m.novel_map, m.all_map, m.per_category.size(), m.zero_gt_categories.size());
  std::printf("report written to %s\n", out_path.c_str());
  return 0;
}

// -------------------------------------------------------------- simulate

int run_simulate(const std::string& config_path, const std::string& protocol,
                 const std::string& seed_arg, const std::string& out_path) {
  std::ifstream in(config_path, std::ios::binary);
  if (!in) throw FormatError("cannot read config: " + config_path);
  json cj;
  try {
    in >> cj;
  } catch (const json::exception& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what());
  }
  // Command-line overrides sit on top of the file.
  if (!protocol.empty()) cj["protocol"] = protocol;
  if (!seed_arg.empty()) cj["seed"] = std::stoull(seed_arg);
  const SimulateConfig cfg = parse_simulate_config(cj);

  const ProtocolResult res = run_protocol(cfg);
  write_text(out_path, res.report.dump(2) + "\n");
  write_text(fs::path(out_path).replace_extension(".csv"), res.csv);

  for (const auto& rep : res.sessions)
    std::printf("session %d: base %.4f novel %.4f all %.4f\n", rep.session,
                rep.metrics.base_map, rep.metrics.novel_map, rep.metrics.all_map);
  std::printf("report written to %s\n", out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"few-shot incremental 3d detection toolkit"};
  app.require_subcommand(1);

  // mine
  auto* mine = app.add_subcommand("mine", "mine pseudo objects from exported scenes and frames");
  std::string scenes_dir, frames_dir, mine_out;
  double sigma = 0.5;
  bool normalized = false;
  MiningConfig mining;
  mine->add_option("--scenes", scenes_dir, "directory of scene .fi3d files")->required();
  mine->add_option("--frames", frames_dir, "directory of frame .fi3d files")->required();
  mine->add_option("--sigma", sigma, "spatial weight falloff in meters");
  mine->add_flag("--normalized", normalized, "falloff in box-relative units");
  mine->add_option("--min-points", mining.min_points, "lifted points needed per mask");
  mine->add_option("--merge-iou", mining.merge_iou, "cross-frame duplicate threshold");
  mine->add_option("--suppress-iou", mining.gt_suppress_iou,
                   "overlap with annotated boxes that drops a candidate");
  mine->add_option("--out", mine_out, "output directory")->required();

  // imprint
  auto* imprint = app.add_subcommand("imprint", "imprint novel prototypes from a support set");
  std::string state_path, support_dir, imprint_out;
  double mu = 0.999, lr = 0.01;
  int epochs = 200;
  imprint->add_option("--state", state_path, "session state JSON")->required();
  imprint->add_option("--support", support_dir, "support directory with support.json")
      ->required();
  imprint->add_option("--mu", mu, "prototype momentum");
  imprint->add_option("--epochs", epochs, "gate training epochs");
  imprint->add_option("--lr", lr, "gate learning rate");
  imprint->add_option("--out", imprint_out, "output state JSON")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "score detections against ground truth");
  std::string pred_path, gt_path, split_arg, eval_out;
  double iou = 0.25;
  bool eleven_point = false;
  eval->add_option("--pred", pred_path, "detections JSONL")->required();
  eval->add_option("--gt", gt_path, "ground-truth JSONL")->required();
  eval->add_option("--iou", iou, "IoU threshold");
  eval->add_option("--split", split_arg, "preset name or split JSON file")->required();
  eval->add_flag("--eleven-point", eleven_point, "11-point AP interpolation");
  eval->add_option("--out", eval_out, "report JSON path (CSV written alongside)")->required();

  // simulate
  auto* simulate = app.add_subcommand("simulate", "run the synthetic end-to-end protocol");
  std::string config_path, protocol, seed_arg, sim_out;
  simulate->add_option("--config", config_path, "protocol config JSON")->required();
  simulate->add_option("--protocol", protocol, "batch or sequential (overrides config)")
      ->check(CLI::IsMember({"batch", "sequential"}));
  simulate->add_option("--seed", seed_arg, "rng seed (overrides config)");
  simulate->add_option("--out", sim_out, "report JSON path (CSV written alongside)")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (mine->parsed()) return run_mine(scenes_dir, frames_dir, sigma, normalized, mining, mine_out);
    if (imprint->parsed()) return run_imprint(state_path, support_dir, mu, epochs, lr, imprint_out);
    if (eval->parsed()) return run_eval(pred_path, gt_path, iou, split_arg, eleven_point, eval_out);
    if (simulate->parsed()) return run_simulate(config_path, protocol, seed_arg, sim_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
