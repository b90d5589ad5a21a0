#include "fi3det/session.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <unordered_set>

#include "fi3det/parallel.hpp"

namespace fi3det {

namespace {

constexpr double kZeroNormSq = 1e-24;
constexpr double kMinPredSize = 0.05;

std::string zero_padded(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04zu", prefix, i);
  return buf;
}

std::vector<std::string> scannet_categories() {
  return {"bathtub", "bed",     "bookshelf",    "cabinet", "chair", "counter",
          "curtain", "desk",    "door",         "garbagebin", "picture", "refrigerator",
          "showercurtain", "sink", "sofa",      "table",   "toilet", "window"};
}

std::vector<std::string> sunrgbd_categories() {
  return {"bathtub", "bed",  "bookshelf",  "chair", "desk",
          "dresser", "night_stand", "sofa", "table", "toilet"};
}

std::vector<std::string> slice(const std::vector<std::string>& v, std::size_t lo,
                               std::size_t hi) {
  return {v.begin() + static_cast<long>(lo), v.begin() + static_cast<long>(hi)};
}

// Scalar cosine, clamped into [-1, 1]; false when either side is
// degenerate.
bool scalar_cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double& out) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (na <= kZeroNormSq || nb <= kZeroNormSq) return false;
  out = dot / (std::sqrt(na) * std::sqrt(nb));
  out = std::clamp(out, -1.0, 1.0);
  return true;
}

std::vector<Eigen::Vector3d> scene_positions(const Scene& scene) {
  std::vector<Eigen::Vector3d> pts;
  pts.reserve(static_cast<std::size_t>(scene.points.rows()));
  for (Eigen::Index r = 0; r < scene.points.rows(); ++r)
    pts.emplace_back(scene.points(r, 0), scene.points(r, 1), scene.points(r, 2));
  return pts;
}

int world_category_id(const WorldConfig& world, const std::string& name) {
  for (std::size_t i = 0; i < world.categories.size(); ++i)
    if (world.categories[i].name == name) return static_cast<int>(i);
  throw UnknownCategory("category not in the world: " + name);
}

std::uint64_t frozen_hash(const PrototypeStore& store,
                          const std::unordered_set<std::string>& exclude) {
  PrototypeStore sub(store.l_dim, store.k_dim, store.momentum);
  sub.imprint_first = store.imprint_first;
  for (const auto& e : store.entries)
    if (exclude.find(e.name) == exclude.end()) sub.entries.push_back(e);
  return store_hash(sub);
}

std::uint64_t fnv1a64_str(std::uint64_t h, const std::string& s) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

nlohmann::ordered_json detection_line(const Detection& d) {
  nlohmann::ordered_json j;
  j["scene"] = d.scene;
  j["category"] = d.category;
  j["box"] = {d.box.center.x(), d.box.center.y(), d.box.center.z(),
              d.box.size.x(),   d.box.size.y(),   d.box.size.z(),   d.box.yaw};
  j["score"] = d.score;
  return j;
}

}  // namespace

// Scalar-loop mean of the member feature rows of a box. A member counts
// only when both its rows carry signal; means stay byte-identical however
// many categories or scenes surround this call.
bool instance_feature_means(const std::vector<Eigen::Vector3d>& points,
                          const Eigen::MatrixXd& f3, const Eigen::MatrixXd& f2,
                          const Box3& box, Eigen::VectorXd& m3, Eigen::VectorXd& m2) {
  const std::vector<bool> inside = points_in_box(points, box);
  m3 = Eigen::VectorXd::Zero(f3.cols());
  m2 = Eigen::VectorXd::Zero(f2.cols());
  long used = 0;
  for (std::size_t i = 0; i < inside.size(); ++i) {
    if (!inside[i]) continue;
    const Eigen::Index r = static_cast<Eigen::Index>(i);
    double n3 = 0.0, n2 = 0.0;
    for (Eigen::Index k = 0; k < f3.cols(); ++k) n3 += f3(r, k) * f3(r, k);
    for (Eigen::Index k = 0; k < f2.cols(); ++k) n2 += f2(r, k) * f2(r, k);
    if (n3 <= kZeroNormSq || n2 <= kZeroNormSq) continue;
    for (Eigen::Index k = 0; k < f3.cols(); ++k) m3[k] += f3(r, k);
    for (Eigen::Index k = 0; k < f2.cols(); ++k) m2[k] += f2(r, k);
    ++used;
  }
  if (used == 0) return false;
  for (Eigen::Index k = 0; k < m3.size(); ++k) m3[k] /= static_cast<double>(used);
  for (Eigen::Index k = 0; k < m2.size(); ++k) m2[k] /= static_cast<double>(used);
  return true;
}


// ---------------------------------------------------------------- splits

std::vector<std::string> SplitSpec::all_novel() const {
  std::vector<std::string> out;
  for (const auto& task : tasks) out.insert(out.end(), task.begin(), task.end());
  return out;
}

std::vector<std::string> SplitSpec::all_categories() const {
  std::vector<std::string> out = base;
  for (const auto& task : tasks) out.insert(out.end(), task.begin(), task.end());
  return out;
}

SplitSpec preset_split(const std::string& name) {
  const auto scannet = scannet_categories();
  const auto sunrgbd = sunrgbd_categories();
  SplitSpec s;
  s.name = name;
  if (name == "scannet_1way") {
    s.base = slice(scannet, 0, 17);
    s.tasks = {slice(scannet, 17, 18)};
    s.axis_aligned_eval = true;
  } else if (name == "scannet_9way") {
    s.base = slice(scannet, 0, 9);
    s.tasks = {slice(scannet, 9, 18)};
    s.axis_aligned_eval = true;
  } else if (name == "scannet_sequential") {
    s.base = slice(scannet, 0, 9);
    s.tasks = {slice(scannet, 9, 12), slice(scannet, 12, 15), slice(scannet, 15, 18)};
    s.axis_aligned_eval = true;
  } else if (name == "sunrgbd_1way") {
    s.base = slice(sunrgbd, 0, 9);
    s.tasks = {slice(sunrgbd, 9, 10)};
  } else if (name == "sunrgbd_5way") {
    s.base = slice(sunrgbd, 0, 5);
    s.tasks = {slice(sunrgbd, 5, 10)};
  } else if (name == "sunrgbd_sequential") {
    s.base = slice(sunrgbd, 0, 5);
    s.tasks = {slice(sunrgbd, 5, 8), slice(sunrgbd, 8, 10)};
  } else {
    throw FormatError("unknown split preset: " + name);
  }
  return s;
}

// ----------------------------------------------------------------- state

std::vector<std::string> SessionState::all_categories() const {
  std::vector<std::string> out = base_categories;
  for (const auto& s : novel_sessions) out.insert(out.end(), s.begin(), s.end());
  return out;
}

void check_state(const SessionState& s) {
  const auto all = s.all_categories();
  std::set<std::string> seen;
  for (const auto& name : all)
    if (!seen.insert(name).second)
      throw CategoryCollision("category appears in two sessions: " + name);
  if (static_cast<int>(s.novel_sessions.size()) != s.t)
    throw Error("session counter does not match the session lists");
  if (s.store.entries.size() != all.size())
    throw Error("prototype store does not mirror the category sets");
  std::size_t i = 0;
  for (const auto& name : s.base_categories) {
    if (s.store.entries[i].name != name || s.store.entries[i].session != 0)
      throw Error("store order diverged from the base vocabulary");
    ++i;
  }
  for (std::size_t t = 0; t < s.novel_sessions.size(); ++t)
    for (const auto& name : s.novel_sessions[t]) {
      if (s.store.entries[i].name != name ||
          s.store.entries[i].session != static_cast<int>(t) + 1)
        throw Error("store order diverged from the novel sessions");
      ++i;
    }
  if (s.gates.novel_count != static_cast<int>(all.size() - s.base_categories.size()))
    throw Error("gate width does not match the novel category count");
}

nlohmann::ordered_json state_to_json(const SessionState& s) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["t"] = s.t;
  j["seed"] = s.seed;
  j["base"] = s.base_categories;
  j["novel_sessions"] = s.novel_sessions;
  j["store"] = store_to_json(s.store);
  j["gates"] = gates_to_json(s.gates);
  return j;
}

SessionState state_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("version", 0) != 1)
    throw FormatError("unsupported session state payload");
  SessionState s;
  s.t = j.at("t").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.base_categories = j.at("base").get<std::vector<std::string>>();
  s.novel_sessions = j.at("novel_sessions").get<std::vector<std::vector<std::string>>>();
  s.store = store_from_json(j.at("store"));
  s.gates = gates_from_json(j.at("gates"));
  check_state(s);
  return s;
}

void save_state(const std::string& path, const SessionState& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write state file: " + path);
  out << state_to_json(s).dump(2) << "\n";
}

SessionState load_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read state file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("state file is not valid JSON: ") + e.what());
  }
  return state_from_json(j);
}

// --------------------------------------------------------------- support

std::vector<SupportInstance> sample_support(std::span<const Scene> scenes,
                                            const WorldConfig& world,
                                            std::span<const std::string> categories, int k,
                                            std::uint64_t seed) {
  if (k < 1) throw EmptyInput("support shots must be at least 1");
  if (categories.empty()) throw EmptyInput("no support categories requested");
  std::vector<SupportInstance> out;
  for (const auto& name : categories) {
    const int cat = world_category_id(world, name);
    std::vector<int> eligible;
    for (std::size_t si = 0; si < scenes.size(); ++si)
      for (const auto& obj : scenes[si].objects)
        if (obj.category == cat) {
          eligible.push_back(static_cast<int>(si));
          break;
        }
    if (static_cast<int>(eligible.size()) < k)
      throw InsufficientSupport("category " + name + " appears in " +
                                std::to_string(eligible.size()) + " scenes, need " +
                                std::to_string(k));
    Rng rng = Rng(seed).child(name);
    // Partial Fisher-Yates: k distinct scenes, deterministic in seed.
    for (int j = 0; j < k; ++j) {
      const std::size_t pick =
          static_cast<std::size_t>(j) +
          static_cast<std::size_t>(rng.uniform_index(eligible.size() - static_cast<std::size_t>(j)));
      std::swap(eligible[static_cast<std::size_t>(j)], eligible[pick]);
    }
    std::vector<int> chosen(eligible.begin(), eligible.begin() + k);
    std::sort(chosen.begin(), chosen.end());
    for (const int si : chosen) {
      std::vector<int> instances;
      for (std::size_t oi = 0; oi < scenes[static_cast<std::size_t>(si)].objects.size(); ++oi)
        if (scenes[static_cast<std::size_t>(si)].objects[oi].category == cat)
          instances.push_back(static_cast<int>(oi));
      const int obj = instances[rng.uniform_index(instances.size())];
      out.push_back({si, obj, name});
    }
  }
  return out;
}

// ---------------------------------------------------------------- config

namespace {

Eigen::Vector3d vec3_from(const nlohmann::json& j, const char* key) {
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3)
    throw FormatError(std::string(key) + " must be an array of three numbers");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const char* where) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw FormatError(std::string("unknown key in ") + where + ": " + key);
  }
}

}  // namespace

SimulateConfig parse_simulate_config(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("config must be a JSON object");
  reject_unknown_keys(j,
                      {"split", "protocol", "seed", "shots", "train_scenes", "val_scenes",
                       "sigma", "normalized_weights", "momentum", "imprint_first",
                       "gate_epochs", "gate_lr", "iou", "score_floor", "world", "mining"},
                      "config");
  SimulateConfig cfg;
  if (!j.contains("split")) throw FormatError("config needs a split");
  if (j.at("split").is_string()) {
    cfg.split = preset_split(j.at("split").get<std::string>());
  } else {
    const auto& s = j.at("split");
    reject_unknown_keys(s, {"name", "base", "tasks", "axis_aligned_eval"}, "split");
    cfg.split.name = s.value("name", "custom");
    cfg.split.base = s.at("base").get<std::vector<std::string>>();
    cfg.split.tasks = s.at("tasks").get<std::vector<std::vector<std::string>>>();
    cfg.split.axis_aligned_eval = s.value("axis_aligned_eval", false);
  }
  if (cfg.split.base.empty() || cfg.split.tasks.empty())
    throw FormatError("split needs base categories and at least one task");
  for (const auto& task : cfg.split.tasks)
    if (task.empty()) throw FormatError("split tasks must not be empty");

  if (j.contains("protocol")) {
    const std::string p = j.at("protocol").get<std::string>();
    if (p != "batch" && p != "sequential")
      throw FormatError("protocol must be batch or sequential");
    cfg.sequential = (p == "sequential");
  }
  cfg.seed = j.value("seed", std::uint64_t{0});
  cfg.shots = j.value("shots", 5);
  cfg.train_scenes = j.value("train_scenes", 16);
  cfg.val_scenes = j.value("val_scenes", 6);
  cfg.sigma = j.value("sigma", 0.5);
  cfg.normalized_weights = j.value("normalized_weights", false);
  cfg.momentum = j.value("momentum", 0.999);
  cfg.imprint_first = j.value("imprint_first", true);
  cfg.gate_epochs = j.value("gate_epochs", 200);
  cfg.gate_lr = j.value("gate_lr", 0.01);
  cfg.iou_thresh = j.value("iou", 0.25);
  cfg.score_floor = j.value("score_floor", 0.0);
  if (cfg.shots < 1 || cfg.train_scenes < 1 || cfg.val_scenes < 1)
    throw FormatError("shots and scene counts must be at least 1");

  const nlohmann::json w = j.value("world", nlohmann::json::object());
  reject_unknown_keys(w,
                      {"room", "size_min", "size_max", "count_min", "count_max",
                       "points_per_object", "floor_clutter_points", "feat3_dim", "feat2_dim",
                       "feature_noise", "center_jitter", "size_jitter", "clutter_rate",
                       "random_yaw", "max_placement_attempts", "image_width", "image_height",
                       "focal", "frames_per_scene", "mask_dropout", "mask_bleed",
                       "camera_ring_scale"},
                      "world");
  WorldConfig world;
  if (w.contains("room")) world.room = vec3_from(w, "room");
  CategorySpec proto;
  if (w.contains("size_min")) proto.size_min = vec3_from(w, "size_min");
  if (w.contains("size_max")) proto.size_max = vec3_from(w, "size_max");
  proto.count_min = w.value("count_min", 1);
  proto.count_max = w.value("count_max", 1);
  world.categories.clear();
  for (const auto& name : cfg.split.all_categories()) {
    CategorySpec spec = proto;
    spec.name = name;
    world.categories.push_back(std::move(spec));
  }
  world.points_per_object = w.value("points_per_object", world.points_per_object);
  world.floor_clutter_points = w.value("floor_clutter_points", world.floor_clutter_points);
  const int n_cats = static_cast<int>(world.categories.size());
  world.feat3_dim = std::max(n_cats, w.value("feat3_dim", n_cats));
  world.feat2_dim = std::max(n_cats, w.value("feat2_dim", n_cats));
  world.feature_noise = w.value("feature_noise", world.feature_noise);
  world.center_jitter = w.value("center_jitter", world.center_jitter);
  world.size_jitter = w.value("size_jitter", world.size_jitter);
  world.clutter_rate = w.value("clutter_rate", world.clutter_rate);
  world.random_yaw = w.value("random_yaw", world.random_yaw);
  world.max_placement_attempts =
      w.value("max_placement_attempts", world.max_placement_attempts);
  world.image_width = w.value("image_width", world.image_width);
  world.image_height = w.value("image_height", world.image_height);
  world.focal = w.value("focal", world.focal);
  world.frames_per_scene = w.value("frames_per_scene", world.frames_per_scene);
  world.mask_dropout = w.value("mask_dropout", world.mask_dropout);
  world.mask_bleed = w.value("mask_bleed", world.mask_bleed);
  world.camera_ring_scale = w.value("camera_ring_scale", world.camera_ring_scale);
  cfg.world = std::move(world);
  validate_config(cfg.world);

  const nlohmann::json m = j.value("mining", nlohmann::json::object());
  reject_unknown_keys(m, {"min_points", "merge_iou", "gt_suppress_iou"}, "mining");
  cfg.mining.min_points = m.value("min_points", cfg.mining.min_points);
  cfg.mining.merge_iou = m.value("merge_iou", cfg.mining.merge_iou);
  cfg.mining.gt_suppress_iou = m.value("gt_suppress_iou", cfg.mining.gt_suppress_iou);
  return cfg;
}

nlohmann::ordered_json simulate_config_to_json(const SimulateConfig& cfg) {
  nlohmann::ordered_json j;
  j["split"] = {{"name", cfg.split.name},
                {"base", cfg.split.base},
                {"tasks", cfg.split.tasks},
                {"axis_aligned_eval", cfg.split.axis_aligned_eval}};
  j["protocol"] = cfg.sequential ? "sequential" : "batch";
  j["seed"] = cfg.seed;
  j["shots"] = cfg.shots;
  j["train_scenes"] = cfg.train_scenes;
  j["val_scenes"] = cfg.val_scenes;
  j["sigma"] = cfg.sigma;
  j["normalized_weights"] = cfg.normalized_weights;
  j["momentum"] = cfg.momentum;
  j["imprint_first"] = cfg.imprint_first;
  j["gate_epochs"] = cfg.gate_epochs;
  j["gate_lr"] = cfg.gate_lr;
  j["iou"] = cfg.iou_thresh;
  j["score_floor"] = cfg.score_floor;
  j["world"] = {{"room", {cfg.world.room.x(), cfg.world.room.y(), cfg.world.room.z()}},
                {"points_per_object", cfg.world.points_per_object},
                {"floor_clutter_points", cfg.world.floor_clutter_points},
                {"feat3_dim", cfg.world.feat3_dim},
                {"feat2_dim", cfg.world.feat2_dim},
                {"feature_noise", cfg.world.feature_noise},
                {"center_jitter", cfg.world.center_jitter},
                {"size_jitter", cfg.world.size_jitter},
                {"clutter_rate", cfg.world.clutter_rate},
                {"random_yaw", cfg.world.random_yaw},
                {"max_placement_attempts", cfg.world.max_placement_attempts},
                {"image_width", cfg.world.image_width},
                {"image_height", cfg.world.image_height},
                {"focal", cfg.world.focal},
                {"frames_per_scene", cfg.world.frames_per_scene},
                {"mask_dropout", cfg.world.mask_dropout},
                {"mask_bleed", cfg.world.mask_bleed},
                {"camera_ring_scale", cfg.world.camera_ring_scale}};
  j["mining"] = {{"min_points", cfg.mining.min_points},
                 {"merge_iou", cfg.mining.merge_iou},
                 {"gt_suppress_iou", cfg.mining.gt_suppress_iou}};
  return j;
}

// ----------------------------------------------------------- base session

BaseSessionResult run_base_session(const SimulateConfig& cfg,
                                   std::span<const Scene> train_scenes,
                                   const FeatureProvider& provider, SessionState& state) {
  const int n_base = static_cast<int>(state.base_categories.size());
  if (n_base == 0) throw EmptyInput("state has no base vocabulary");

  BaseSessionResult res;
  res.scenes.resize(train_scenes.size());
  parallel_for(train_scenes.size(), [&](std::size_t i) {
    const Scene& scene = train_scenes[i];
    SceneArtifacts& art = res.scenes[i];
    art.scene_id = scene.id;
    try {
      const auto [f3, f2] = provider.features(scene);
      std::vector<VlmFrame> frames;
      const std::uint64_t render_seed = Rng(cfg.seed).child("render").child(scene.id).state();
      for (int f = 0; f < cfg.world.frames_per_scene; ++f)
        frames.push_back(render_frame(scene, f2, cfg.world, f, render_seed));

      std::vector<Box3> known;
      for (const auto& obj : scene.objects)
        if (obj.category < n_base) known.push_back(obj.box);
      art.pseudo = mine_unknown_objects(frames, known, cfg.mining, &art.mining);

      const std::vector<Eigen::Vector3d> pts = scene_positions(scene);
      std::vector<Box3> pboxes;
      for (const auto& p : art.pseudo) pboxes.push_back(p.box);
      WeightingConfig wcfg;
      wcfg.sigma = cfg.sigma;
      wcfg.normalized_distance = cfg.normalized_weights;
      art.weights = combined_weights(pts, pboxes, f2, wcfg);

      // Per-box supervision quality: mean combined weight over members.
      art.box_quality.assign(art.pseudo.size(), 0.0);
      std::vector<long> member_count(art.pseudo.size(), 0);
      for (const auto& e : art.weights.entries) {
        art.box_quality[static_cast<std::size_t>(e.box)] += e.combined;
        ++member_count[static_cast<std::size_t>(e.box)];
      }
      for (std::size_t b = 0; b < art.box_quality.size(); ++b)
        if (member_count[b] > 0) art.box_quality[b] /= static_cast<double>(member_count[b]);

      // Pseudo-label quality against the annotations mining was after:
      // objects outside the base vocabulary.
      art.best_gt_iou.assign(art.pseudo.size(), 0.0);
      for (std::size_t b = 0; b < art.pseudo.size(); ++b)
        for (const auto& obj : scene.objects)
          if (obj.category >= n_base)
            art.best_gt_iou[b] =
                std::max(art.best_gt_iou[b], iou3d(art.pseudo[b].box, obj.box));

      // Auxiliary losses over synthetic per-member predictions: each member
      // sees the pseudo box corrupted by the world's detector jitter, with
      // objectness decaying in the jitter magnitude; targets are the
      // combined supervision weights.
      Rng aux = Rng(cfg.seed).child("aux").child(scene.id);
      std::vector<double> pred_obj, target_obj;
      std::vector<double> feat_losses, reg_losses;
      std::size_t cursor = 0;
      for (std::size_t b = 0; b < art.pseudo.size(); ++b) {
        std::vector<Box3> preds;
        std::vector<double> w;
        std::vector<Eigen::VectorXd> member_feats;
        std::vector<double> member_w;
        while (cursor < art.weights.entries.size() &&
               art.weights.entries[cursor].box == static_cast<int>(b)) {
          const WeightEntry& e = art.weights.entries[cursor];
          Eigen::Vector3d eta = Eigen::Vector3d::Zero(), zeta = Eigen::Vector3d::Zero();
          if (cfg.world.center_jitter > 0.0)
            for (int a = 0; a < 3; ++a) eta[a] = aux.normal(0.0, cfg.world.center_jitter);
          if (cfg.world.size_jitter > 0.0)
            for (int a = 0; a < 3; ++a) zeta[a] = aux.normal(0.0, cfg.world.size_jitter);
          pred_obj.push_back(std::exp(-(eta.norm() + zeta.norm())));
          target_obj.push_back(e.combined);
          Eigen::Vector3d size = art.pseudo[b].box.size + zeta;
          for (int a = 0; a < 3; ++a) size[a] = std::max(size[a], kMinPredSize);
          preds.push_back(make_box(art.pseudo[b].box.center + eta, size,
                                   art.pseudo[b].box.yaw));
          w.push_back(e.combined);
          double n2 = 0.0;
          for (Eigen::Index k = 0; k < f2.cols(); ++k)
            n2 += f2(e.point, k) * f2(e.point, k);
          if (n2 > kZeroNormSq) {
            member_feats.emplace_back(f2.row(e.point).transpose());
            member_w.push_back(e.combined);
          }
          ++cursor;
        }
        if (!preds.empty())
          reg_losses.push_back(weighted_diou_regression(preds, art.pseudo[b].box, w,
                                                        static_cast<long>(w.size())));
        if (!member_feats.empty())
          feat_losses.push_back(cosine_alignment_loss(member_feats, art.pseudo[b].feature,
                                                      member_w,
                                                      static_cast<long>(member_w.size())));
      }
      double obj = 0.0;
      if (!pred_obj.empty()) obj = bce_dice_objectness(pred_obj, target_obj);
      auto mean_of = [](const std::vector<double>& v) {
        if (v.empty()) return 0.0;
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
      };
      long kept = 0;
      for (const bool k : art.weights.box_kept)
        if (k) ++kept;
      art.aux = aux_total(obj, mean_of(feat_losses), mean_of(reg_losses), 0.0,
                          static_cast<long>(art.weights.entries.size()), kept);
    } catch (const std::exception& e) {
      art.failed = true;
      art.error = e.what();
    }
  });

  double wsum = 0.0, wiou = 0.0, isum = 0.0;
  for (const auto& art : res.scenes) {
    if (art.failed) {
      ++res.failed_scenes;
      continue;
    }
    for (std::size_t b = 0; b < art.pseudo.size(); ++b) {
      ++res.mined_boxes;
      isum += art.best_gt_iou[b];
      wsum += art.box_quality[b];
      wiou += art.box_quality[b] * art.best_gt_iou[b];
    }
  }
  if (res.mined_boxes > 0) res.unweighted_iou = isum / static_cast<double>(res.mined_boxes);
  if (wsum > 0.0) res.weighted_iou = wiou / wsum;

  // Base prototypes, imprinted once from base annotations at session end:
  // a stand-in for the frozen detector's trained classifier head.
  for (const Scene& scene : train_scenes) {
    const auto [f3, f2] = provider.features(scene);
    const std::vector<Eigen::Vector3d> pts = scene_positions(scene);
    for (int c = 0; c < n_base; ++c) {
      Eigen::VectorXd sum3 = Eigen::VectorXd::Zero(f3.cols());
      Eigen::VectorXd sum2 = Eigen::VectorXd::Zero(f2.cols());
      long instances = 0;
      for (const auto& obj : scene.objects) {
        if (obj.category != c) continue;
        Eigen::VectorXd m3, m2;
        if (!instance_feature_means(pts, f3, f2, obj.box, m3, m2)) continue;
        for (Eigen::Index k = 0; k < sum3.size(); ++k) sum3[k] += m3[k];
        for (Eigen::Index k = 0; k < sum2.size(); ++k) sum2[k] += m2[k];
        ++instances;
      }
      if (instances == 0) continue;
      for (Eigen::Index k = 0; k < sum3.size(); ++k) sum3[k] /= static_cast<double>(instances);
      for (Eigen::Index k = 0; k < sum2.size(); ++k) sum2[k] /= static_cast<double>(instances);
      update_prototype(state.store, state.base_categories[static_cast<std::size_t>(c)], sum3,
                       sum2);
    }
  }
  return res;
}

// ---------------------------------------------------- incremental session

IncrementalResult run_incremental_session(SessionState& state,
                                          std::span<const std::string> categories,
                                          std::span<const ImprintScene> support, int epochs,
                                          double lr) {
  if (categories.empty()) throw InsufficientSupport("session introduces no categories");
  if (support.empty()) throw InsufficientSupport("session has no support scenes");
  const auto existing = state.all_categories();
  for (const auto& name : categories)
    if (std::find(existing.begin(), existing.end(), name) != existing.end())
      throw CategoryCollision("category already known: " + name);

  IncrementalResult res;
  const int session = state.t + 1;
  for (const auto& name : categories) register_category(state.store, name, session);
  extend_novel(state.gates, static_cast<int>(categories.size()));
  res.added = static_cast<int>(categories.size());

  std::unordered_set<std::string> fresh(categories.begin(), categories.end());
  res.frozen_hash_before = frozen_hash(state.store, fresh);
  res.imprint = imprint_session(support, categories, state.store, state.gates, epochs, lr);
  res.frozen_hash_after = frozen_hash(state.store, fresh);
  if (res.frozen_hash_after != res.frozen_hash_before)
    throw Error("frozen prototypes changed during an incremental session");

  state.novel_sessions.emplace_back(categories.begin(), categories.end());
  state.t += 1;
  check_state(state);
  return res;
}

// ------------------------------------------------------------- inference

std::vector<Detection> classify_proposals(const Scene& scene,
                                          std::span<const Proposal> proposals,
                                          const Eigen::MatrixXd& f3,
                                          const Eigen::MatrixXd& f2,
                                          const SessionState& state, double score_floor) {
  const std::vector<Eigen::Vector3d> pts = scene_positions(scene);
  const std::vector<int> novel = novel_indices(state.store);
  std::vector<Detection> out;
  for (const auto& prop : proposals) {
    Eigen::VectorXd m3, m2;
    if (!instance_feature_means(pts, f3, f2, prop.box, m3, m2)) continue;

    bool have_gates = false;
    GateOutput gate;
    double best = -2.0;
    int best_idx = -1;
    for (std::size_t c = 0; c < state.store.entries.size(); ++c) {
      const auto& entry = state.store.entries[c];
      if (!entry.initialized) continue;
      double s3 = 0.0, s2 = 0.0;
      if (!scalar_cosine(m3, entry.proto3d, s3)) continue;
      if (!scalar_cosine(m2, entry.proto2d, s2)) continue;
      double fused;
      if (entry.session == 0) {
        fused = 0.5 * (s3 + s2);
      } else {
        if (!have_gates) {
          gate = gate_forward(m3, m2, state.gates);
          have_gates = true;
        }
        int row = -1;
        for (std::size_t n = 0; n < novel.size(); ++n)
          if (novel[n] == static_cast<int>(c)) {
            row = static_cast<int>(n);
            break;
          }
        fused = gate.gamma[row] * (gate.alpha3 * s3 + gate.alpha2 * s2);
      }
      if (fused > best) {
        best = fused;
        best_idx = static_cast<int>(c);
      }
    }
    if (best_idx < 0 || !(best > score_floor)) continue;
    Detection det;
    det.scene = scene.id;
    det.category = state.store.entries[static_cast<std::size_t>(best_idx)].name;
    det.box = prop.box;
    det.score = (best + 1.0) / 2.0;
    out.push_back(std::move(det));
  }
  return out;
}

// -------------------------------------------------------------- protocol

ProtocolResult run_protocol(const SimulateConfig& cfg) {
  validate_config(cfg.world);
  if (cfg.split.base.empty() || cfg.split.tasks.empty())
    throw EmptyInput("protocol needs base categories and at least one task");
  if (cfg.train_scenes < 1 || cfg.val_scenes < 1)
    throw EmptyInput("protocol needs training and validation scenes");
  for (const auto& name : cfg.split.all_categories())
    (void)world_category_id(cfg.world, name);  // split must live in the world

  const Rng root(cfg.seed);
  std::vector<Scene> train(static_cast<std::size_t>(cfg.train_scenes));
  std::vector<Scene> val(static_cast<std::size_t>(cfg.val_scenes));
  parallel_for(train.size(), [&](std::size_t i) {
    train[i] = generate_scene(cfg.world, root.child("train_scene", i).state());
    train[i].id = zero_padded("train", i);
  });
  parallel_for(val.size(), [&](std::size_t i) {
    val[i] = generate_scene(cfg.world, root.child("val_scene", i).state());
    val[i].id = zero_padded("val", i);
  });

  const ScenewiseOracleProvider provider(cfg.world, root.child("features").state());
  std::vector<std::pair<Eigen::MatrixXd, Eigen::MatrixXd>> val_feats(val.size());
  std::vector<std::vector<Proposal>> val_props(val.size());
  parallel_for(val.size(), [&](std::size_t i) {
    val_feats[i] = provider.features(val[i]);
    // Proposals are drawn once; every session classifies the same boxes.
    val_props[i] = oracle_detector(val[i], cfg.world, root.child("proposals", i).state());
  });

  ProtocolResult res;
  SessionState& state = res.final_state;
  state.seed = cfg.seed;
  state.base_categories = cfg.split.base;
  state.store = PrototypeStore(cfg.world.feat3_dim, cfg.world.feat2_dim, cfg.momentum);
  state.store.imprint_first = cfg.imprint_first;
  for (const auto& name : state.base_categories) register_category(state.store, name, 0);
  state.gates = make_gates(cfg.world.feat3_dim, cfg.world.feat2_dim, 0,
                           root.child("gates").state());
  check_state(state);

  res.base = run_base_session(cfg, train, provider, state);

  const int way = static_cast<int>(cfg.split.all_novel().size());
  const std::string protocol = cfg.sequential ? "sequential" : "batch";

  auto eval_session = [&](const std::vector<std::string>& introduced,
                          const ImprintReport& imprint) {
    SessionReport rep;
    rep.session = state.t;
    rep.categories = introduced;
    rep.imprint = imprint;
    for (std::size_t i = 0; i < val.size(); ++i) {
      auto dets = classify_proposals(val[i], val_props[i], val_feats[i].first,
                                     val_feats[i].second, state, cfg.score_floor);
      rep.detections.insert(rep.detections.end(), dets.begin(), dets.end());
    }
    const auto vocab_list = state.all_categories();
    const std::set<std::string> vocab(vocab_list.begin(), vocab_list.end());
    std::vector<Detection> gts;
    for (const auto& scene : val)
      for (const auto& obj : scene.objects) {
        const std::string& name =
            cfg.world.categories[static_cast<std::size_t>(obj.category)].name;
        if (vocab.find(name) == vocab.end()) continue;
        gts.push_back({scene.id, name, obj.box, 1.0});
      }
    Split split;
    split.base = cfg.split.base;
    for (const auto& s : state.novel_sessions)
      split.novel.insert(split.novel.end(), s.begin(), s.end());
    EvalConfig ecfg;
    ecfg.iou_thresh = cfg.iou_thresh;
    ecfg.axis_aligned = cfg.split.axis_aligned_eval;
    rep.metrics = map_report(rep.detections, gts, split, ecfg);
    rep.metrics.protocol = protocol;
    rep.metrics.way = way;
    rep.metrics.shot = cfg.shots;
    rep.metrics.session = state.t;
    res.sessions.push_back(std::move(rep));
  };

  eval_session(state.base_categories, {});

  std::vector<std::vector<std::string>> agenda;
  if (cfg.sequential)
    agenda = cfg.split.tasks;
  else
    agenda = {cfg.split.all_novel()};

  for (std::size_t s = 0; s < agenda.size(); ++s) {
    const auto& cats = agenda[s];
    const auto picks =
        sample_support(train, cfg.world, cats, cfg.shots, root.child("support", s).state());

    // Group picked instances by scene (ascending), categories in session
    // order, instance features from the shared provider.
    std::map<int, std::map<std::string, std::vector<int>>> by_scene;
    for (const auto& pick : picks) by_scene[pick.scene][pick.category].push_back(pick.object);
    std::vector<ImprintScene> support;
    for (const auto& [scene_idx, per_cat] : by_scene) {
      const Scene& scene = train[static_cast<std::size_t>(scene_idx)];
      const auto [f3, f2] = provider.features(scene);
      const std::vector<Eigen::Vector3d> pts = scene_positions(scene);
      ImprintScene imprint_scene;
      for (const auto& name : cats) {
        const auto it = per_cat.find(name);
        if (it == per_cat.end()) continue;
        PositiveSet set;
        set.category = name;
        for (const int oi : it->second) {
          Eigen::VectorXd m3, m2;
          if (!instance_feature_means(pts, f3, f2,
                                    scene.objects[static_cast<std::size_t>(oi)].box, m3, m2))
            continue;
          set.f3.push_back(std::move(m3));
          set.f2.push_back(std::move(m2));
        }
        if (!set.f3.empty()) imprint_scene.push_back(std::move(set));
      }
      if (!imprint_scene.empty()) support.push_back(std::move(imprint_scene));
    }

    const auto inc =
        run_incremental_session(state, cats, support, cfg.gate_epochs, cfg.gate_lr);
    eval_session(cats, inc.imprint);
  }

  // Combined report. Every number flows through the same JSON writer, so a
  // rerun with identical inputs serializes byte-identically.
  nlohmann::ordered_json rj;
  rj["version"] = 1;
  rj["protocol"] = protocol;
  rj["split"] = cfg.split.name;
  rj["way"] = way;
  rj["shot"] = cfg.shots;
  rj["seed"] = cfg.seed;
  rj["config"] = simulate_config_to_json(cfg);
  {
    nlohmann::ordered_json b;
    b["scenes"] = res.base.scenes.size();
    b["failed_scenes"] = res.base.failed_scenes;
    b["mined_boxes"] = res.base.mined_boxes;
    b["weighted_iou"] = res.base.weighted_iou;
    b["unweighted_iou"] = res.base.unweighted_iou;
    MiningStats pooled;
    double obj = 0.0, feat = 0.0, reg = 0.0;
    long ok = 0;
    for (const auto& art : res.base.scenes) {
      if (art.failed) continue;
      pooled.masks_seen += art.mining.masks_seen;
      pooled.masks_skipped += art.mining.masks_skipped;
      pooled.merged_away += art.mining.merged_away;
      pooled.suppressed_known += art.mining.suppressed_known;
      obj += art.aux.obj;
      feat += art.aux.feat;
      reg += art.aux.reg;
      ++ok;
    }
    if (ok > 0) {
      obj /= static_cast<double>(ok);
      feat /= static_cast<double>(ok);
      reg /= static_cast<double>(ok);
    }
    b["mining"] = {{"masks_seen", pooled.masks_seen},
                   {"masks_skipped", pooled.masks_skipped},
                   {"merged_away", pooled.merged_away},
                   {"suppressed_known", pooled.suppressed_known}};
    b["aux_losses"] = {{"obj", obj}, {"feat", feat}, {"reg", reg}, {"total", obj + feat + reg}};
    rj["base_session"] = std::move(b);
  }
  rj["sessions"] = nlohmann::ordered_json::array();
  std::uint64_t det_hash = 0xCBF29CE484222325ull;
  for (const auto& rep : res.sessions) {
    nlohmann::ordered_json sj;
    sj["session"] = rep.session;
    sj["introduced"] = rep.categories;
    sj["base_map"] = rep.metrics.base_map;
    sj["novel_map"] = rep.metrics.novel_map;
    sj["all_map"] = rep.metrics.all_map;
    sj["per_category"] = nlohmann::ordered_json::array();
    for (const auto& cm : rep.metrics.per_category)
      sj["per_category"].push_back({{"category", cm.category},
                                    {"novel", cm.novel},
                                    {"ap", cm.ap},
                                    {"gt", cm.n_gt},
                                    {"detections", cm.n_det}});
    sj["zero_gt"] = rep.metrics.zero_gt_categories;
    sj["detections"] = rep.detections.size();
    sj["imprint"] = {{"categories_without_positives",
                      rep.imprint.categories_without_positives},
                     {"final_gate_loss", rep.imprint.loss_trace.empty()
                                             ? nlohmann::ordered_json(nullptr)
                                             : nlohmann::ordered_json(
                                                   rep.imprint.loss_trace.back())}};
    rj["sessions"].push_back(std::move(sj));
    for (const auto& det : rep.detections)
      det_hash = fnv1a64_str(det_hash, detection_line(det).dump() + "\n");
  }
  rj["categories"] = {{"base", state.base_categories},
                      {"novel_sessions", state.novel_sessions}};
  char hash_buf[19];
  std::snprintf(hash_buf, sizeof(hash_buf), "0x%016llX",
                static_cast<unsigned long long>(det_hash));
  rj["detections_hash"] = hash_buf;
  res.report = std::move(rj);

  std::string csv = "session,protocol,way,shot,base_map,novel_map,all_map\n";
  for (const auto& rep : res.sessions) {
    csv += std::to_string(rep.session) + "," + protocol + "," + std::to_string(way) + "," +
           std::to_string(cfg.shots) + "," + nlohmann::json(rep.metrics.base_map).dump() +
           "," + nlohmann::json(rep.metrics.novel_map).dump() + "," +
           nlohmann::json(rep.metrics.all_map).dump() + "\n";
  }
  res.csv = std::move(csv);
  return res;
}

}  // namespace fi3det
