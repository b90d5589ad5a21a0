#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "fi3det/session.hpp"

using namespace fi3det;
using nlohmann::json;

namespace {

std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// Audit world: one base category that never spawns, three novel categories
// with one instance each, cameras on a ring outside the room so every
// object is fully visible in every frame.
SimulateConfig audit_config() {
  SimulateConfig cfg;
  cfg.split.base = {"anchor"};
  cfg.split.tasks = {{"t0", "t1", "t2"}};
  WorldConfig w;
  w.room = Eigen::Vector3d(6.0, 6.0, 3.0);
  for (const auto& name : cfg.split.all_categories()) {
    CategorySpec s;
    s.name = name;
    s.size_min = Eigen::Vector3d(0.8, 0.8, 0.8);
    s.size_max = Eigen::Vector3d(1.2, 1.2, 1.2);
    const bool spawns = name != "anchor";
    s.count_min = spawns ? 1 : 0;
    s.count_max = spawns ? 1 : 0;
    w.categories.push_back(s);
  }
  w.points_per_object = 2048;
  w.floor_clutter_points = 0;
  w.feat3_dim = 4;
  w.feat2_dim = 4;
  w.image_width = 1024;
  w.image_height = 512;
  w.focal = 512.0;
  w.frames_per_scene = 6;
  w.camera_ring_scale = 1.5;
  cfg.world = w;
  cfg.mining.min_points = 300;
  cfg.mining.merge_iou = 0.12;
  return cfg;
}

SessionState fresh_state(const SimulateConfig& cfg) {
  SessionState state;
  state.seed = cfg.seed;
  state.base_categories = cfg.split.base;
  state.store = PrototypeStore(cfg.world.feat3_dim, cfg.world.feat2_dim, cfg.momentum);
  state.store.imprint_first = cfg.imprint_first;
  for (const auto& name : state.base_categories) register_category(state.store, name, 0);
  state.gates = make_gates(cfg.world.feat3_dim, cfg.world.feat2_dim, 0,
                           Rng(cfg.seed).child("gates").state());
  check_state(state);
  return state;
}

std::vector<Scene> audit_scenes(const SimulateConfig& cfg, int count) {
  std::vector<Scene> scenes(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    scenes[static_cast<std::size_t>(i)] = generate_scene(
        cfg.world, Rng(cfg.seed).child("train_scene", static_cast<std::uint64_t>(i)).state());
    scenes[static_cast<std::size_t>(i)].id = "train_" + std::to_string(i);
  }
  return scenes;
}

Eigen::VectorXd axis(int dim, int k) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
  v[k] = 1.0;
  return v;
}

bool same_box(const Box3& a, const Box3& b) {
  return a.center == b.center && a.size == b.size && a.yaw == b.yaw;
}

}  // namespace

TEST_CASE("preset splits expose the expected vocabularies") {
  const SplitSpec s1 = preset_split("scannet_1way");
  REQUIRE(s1.base.size() == 17);
  REQUIRE(s1.tasks.size() == 1);
  CHECK(s1.tasks[0] == std::vector<std::string>{"window"});
  CHECK(s1.axis_aligned_eval);
  CHECK(s1.base.front() == "bathtub");
  CHECK(s1.name == "scannet_1way");

  const SplitSpec s9 = preset_split("scannet_9way");
  CHECK(s9.base.size() == 9);
  REQUIRE(s9.tasks.size() == 1);
  CHECK(s9.tasks[0].size() == 9);
  CHECK(s9.all_categories().size() == 18);

  const SplitSpec sq = preset_split("scannet_sequential");
  CHECK(sq.base.size() == 9);
  REQUIRE(sq.tasks.size() == 3);
  CHECK(sq.tasks[0] == std::vector<std::string>{"garbagebin", "picture", "refrigerator"});
  CHECK(sq.tasks[1] == std::vector<std::string>{"showercurtain", "sink", "sofa"});
  CHECK(sq.tasks[2] == std::vector<std::string>{"table", "toilet", "window"});
  CHECK(sq.all_novel().size() == 9);
  // Same 18 categories as the one-shot splits, base first.
  CHECK(sq.all_categories() == s9.all_categories());

  const SplitSpec u1 = preset_split("sunrgbd_1way");
  CHECK(u1.base.size() == 9);
  CHECK(u1.tasks == std::vector<std::vector<std::string>>{{"toilet"}});
  CHECK_FALSE(u1.axis_aligned_eval);

  const SplitSpec u5 = preset_split("sunrgbd_5way");
  CHECK(u5.base == std::vector<std::string>{"bathtub", "bed", "bookshelf", "chair", "desk"});
  CHECK(u5.tasks[0] ==
        std::vector<std::string>{"dresser", "night_stand", "sofa", "table", "toilet"});

  const SplitSpec us = preset_split("sunrgbd_sequential");
  CHECK(us.tasks == std::vector<std::vector<std::string>>{
                        {"dresser", "night_stand", "sofa"}, {"table", "toilet"}});

  // Base and novel never overlap, and categories stay sorted per dataset.
  for (const char* name : {"scannet_1way", "scannet_9way", "scannet_sequential",
                           "sunrgbd_1way", "sunrgbd_5way", "sunrgbd_sequential"}) {
    const SplitSpec s = preset_split(name);
    const auto all = s.all_categories();
    const std::set<std::string> uniq(all.begin(), all.end());
    CHECK(uniq.size() == all.size());
    CHECK(std::is_sorted(all.begin(), all.end()));
  }

  CHECK_THROWS_AS(preset_split("kitti_3way"), FormatError);
}

TEST_CASE("session state round-trips through json and disk") {
  SessionState s;
  s.t = 1;
  s.seed = 99;
  s.base_categories = {"b0", "b1"};
  s.novel_sessions = {{"n0"}};
  s.store = PrototypeStore(3, 2, 0.99);
  register_category(s.store, "b0", 0);
  register_category(s.store, "b1", 0);
  register_category(s.store, "n0", 1);
  update_prototype(s.store, "b0", axis(3, 0), axis(2, 1));
  update_prototype(s.store, "n0", axis(3, 2), axis(2, 0));
  s.gates = make_gates(3, 2, 1, 555);
  check_state(s);

  const auto j = state_to_json(s);
  const SessionState back = state_from_json(j);
  CHECK(state_to_json(back).dump() == j.dump());
  CHECK(back.t == 1);
  CHECK(back.store.entries.size() == 3);
  CHECK(back.store.entries[0].initialized);
  CHECK_FALSE(back.store.entries[1].initialized);

  const std::string path = temp_file("fi3det_state_test.json");
  save_state(path, s);
  const SessionState loaded = load_state(path);
  CHECK(state_to_json(loaded).dump() == j.dump());
  std::filesystem::remove(path);

  json bad = j;
  bad["version"] = 2;
  CHECK_THROWS_AS(state_from_json(bad), FormatError);
  CHECK_THROWS_AS(load_state(temp_file("fi3det_no_such_state.json")), FormatError);

  SUBCASE("category collisions are rejected") {
    SessionState dup = s;
    dup.novel_sessions = {{"b0"}};
    dup.store.entries[2].name = "b0";
    CHECK_THROWS_AS(check_state(dup), CategoryCollision);
  }
  SUBCASE("session counter must match the lists") {
    SessionState off = s;
    off.t = 2;
    CHECK_THROWS_AS(check_state(off), Error);
  }
  SUBCASE("store must mirror the sessions") {
    SessionState extra = s;
    register_category(extra.store, "ghost", 2);
    CHECK_THROWS_AS(check_state(extra), Error);

    SessionState wrong = s;
    wrong.store.entries[2].session = 3;
    CHECK_THROWS_AS(check_state(wrong), Error);
  }
  SUBCASE("gate width must match the novel count") {
    SessionState thin = s;
    thin.gates = make_gates(3, 2, 0, 555);
    CHECK_THROWS_AS(check_state(thin), Error);
  }
}

TEST_CASE("support sampling picks distinct scenes deterministically") {
  SimulateConfig cfg = audit_config();
  cfg.seed = 3;
  const auto scenes = audit_scenes(cfg, 6);
  const std::vector<std::string> cats = {"t0", "t1"};

  const auto a = sample_support(scenes, cfg.world, cats, 3, 77);
  const auto b = sample_support(scenes, cfg.world, cats, 3, 77);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].scene == b[i].scene);
    CHECK(a[i].object == b[i].object);
    CHECK(a[i].category == b[i].category);
  }
  // Output groups categories in request order, k picks each.
  for (std::size_t i = 0; i < 3; ++i) CHECK(a[i].category == "t0");
  for (std::size_t i = 3; i < 6; ++i) CHECK(a[i].category == "t1");

  // Per category: distinct scenes, and the picked object really carries it.
  for (const auto& name : cats) {
    std::set<int> seen;
    for (const auto& pick : a) {
      if (pick.category != name) continue;
      CHECK(seen.insert(pick.scene).second);
      REQUIRE(pick.scene >= 0);
      REQUIRE(pick.scene < 6);
      const Scene& sc = scenes[static_cast<std::size_t>(pick.scene)];
      REQUIRE(pick.object >= 0);
      REQUIRE(pick.object < static_cast<int>(sc.objects.size()));
      const int cat = sc.objects[static_cast<std::size_t>(pick.object)].category;
      CHECK(cfg.world.categories[static_cast<std::size_t>(cat)].name == name);
    }
  }

  const auto other = sample_support(scenes, cfg.world, cats, 3, 78);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].scene != other[i].scene || a[i].object != other[i].object) differs = true;
  CHECK(differs);

  // Every scene carries every novel category, so k == scene count works and
  // both categories must reuse all scenes.
  const auto full = sample_support(scenes, cfg.world, cats, 6, 5);
  CHECK(full.size() == 12);

  CHECK_THROWS_AS(sample_support(scenes, cfg.world, cats, 7, 5), InsufficientSupport);
  CHECK_THROWS_AS(
      sample_support(scenes, cfg.world, std::vector<std::string>{"anchor"}, 1, 5),
      InsufficientSupport);  // never spawns
  CHECK_THROWS_AS(sample_support(scenes, cfg.world, cats, 0, 5), EmptyInput);
  CHECK_THROWS_AS(sample_support(scenes, cfg.world, std::vector<std::string>{}, 1, 5),
                  EmptyInput);
  CHECK_THROWS_AS(
      sample_support(scenes, cfg.world, std::vector<std::string>{"zebra"}, 1, 5),
      UnknownCategory);
}

TEST_CASE("zero-noise mining recovers every hidden object above 0.9 iou") {
  // Full camera coverage, isolated cuboids, no clutter: mining must find
  // exactly the unknown objects, each with a tight box.
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    SimulateConfig cfg = audit_config();
    cfg.seed = seed;
    const auto scenes = audit_scenes(cfg, 6);
    long objects = 0;
    for (const auto& s : scenes) objects += static_cast<long>(s.objects.size());

    ScenewiseOracleProvider provider(cfg.world, Rng(cfg.seed).child("features").state());
    SessionState state = fresh_state(cfg);
    const BaseSessionResult res = run_base_session(cfg, scenes, provider, state);

    CHECK(res.failed_scenes == 0);
    CHECK(res.mined_boxes == objects);
    for (const auto& art : res.scenes) {
      REQUIRE_FALSE(art.failed);
      CHECK(art.mining.suppressed_known == 0);
      REQUIRE(art.best_gt_iou.size() == art.pseudo.size());
      for (std::size_t b = 0; b < art.pseudo.size(); ++b) {
        CHECK(art.best_gt_iou[b] > 0.9);
        CHECK(art.box_quality[b] > 0.0);
        CHECK(art.box_quality[b] <= 1.0);
        CHECK(art.pseudo[b].support_count >= cfg.mining.min_points);
      }
      CHECK(art.aux.obj >= 0.0);
      CHECK(std::isfinite(art.aux.aux_total));
    }
    CHECK(res.unweighted_iou > 0.9);
    CHECK(res.weighted_iou > 0.9);
    // The base category never spawned, so its prototype stays empty.
    REQUIRE(state.store.entries.size() == 1);
    CHECK_FALSE(state.store.entries[0].initialized);
  }
}

TEST_CASE("base-session artifacts are reproducible") {
  SimulateConfig cfg = audit_config();
  cfg.seed = 11;
  const auto scenes = audit_scenes(cfg, 3);
  ScenewiseOracleProvider provider(cfg.world, Rng(cfg.seed).child("features").state());

  SessionState s1 = fresh_state(cfg);
  SessionState s2 = fresh_state(cfg);
  const BaseSessionResult a = run_base_session(cfg, scenes, provider, s1);
  const BaseSessionResult b = run_base_session(cfg, scenes, provider, s2);

  REQUIRE(a.scenes.size() == b.scenes.size());
  for (std::size_t i = 0; i < a.scenes.size(); ++i) {
    const auto& x = a.scenes[i];
    const auto& y = b.scenes[i];
    REQUIRE(x.pseudo.size() == y.pseudo.size());
    for (std::size_t j = 0; j < x.pseudo.size(); ++j) {
      CHECK(same_box(x.pseudo[j].box, y.pseudo[j].box));
      CHECK(x.pseudo[j].support_count == y.pseudo[j].support_count);
      CHECK(x.pseudo[j].feature == y.pseudo[j].feature);
    }
    REQUIRE(x.weights.entries.size() == y.weights.entries.size());
    for (std::size_t j = 0; j < x.weights.entries.size(); ++j)
      CHECK(x.weights.entries[j].combined == y.weights.entries[j].combined);
    CHECK(x.aux.aux_total == y.aux.aux_total);
    CHECK(x.best_gt_iou == y.best_gt_iou);
    CHECK(x.box_quality == y.box_quality);
  }
  CHECK(a.weighted_iou == b.weighted_iou);
  CHECK(a.unweighted_iou == b.unweighted_iou);
}

TEST_CASE("a fully known scene yields no pseudo labels but imprints the base") {
  // Two base categories that spawn, one novel category that never does:
  // every mask belongs to a known object and must be suppressed.
  SimulateConfig cfg;
  cfg.split.base = {"b0", "b1"};
  cfg.split.tasks = {{"ghost"}};
  cfg.seed = 4;
  WorldConfig w;
  w.room = Eigen::Vector3d(6.0, 6.0, 3.0);
  for (const auto& name : cfg.split.all_categories()) {
    CategorySpec s;
    s.name = name;
    s.size_min = Eigen::Vector3d(0.8, 0.8, 0.8);
    s.size_max = Eigen::Vector3d(1.2, 1.2, 1.2);
    const bool spawns = name != "ghost";
    s.count_min = spawns ? 1 : 0;
    s.count_max = spawns ? 1 : 0;
    w.categories.push_back(s);
  }
  w.points_per_object = 1024;
  w.floor_clutter_points = 64;
  w.feat3_dim = 3;
  w.feat2_dim = 3;
  w.image_width = 512;
  w.image_height = 256;
  w.focal = 256.0;
  w.frames_per_scene = 4;
  w.camera_ring_scale = 1.5;
  cfg.world = w;
  cfg.mining.min_points = 150;

  const auto scenes = audit_scenes(cfg, 4);
  ScenewiseOracleProvider provider(cfg.world, Rng(cfg.seed).child("features").state());
  SessionState state = fresh_state(cfg);
  const BaseSessionResult res = run_base_session(cfg, scenes, provider, state);

  CHECK(res.failed_scenes == 0);
  CHECK(res.mined_boxes == 0);
  CHECK(res.weighted_iou == 0.0);
  CHECK(res.unweighted_iou == 0.0);
  for (const auto& art : res.scenes) {
    CHECK(art.pseudo.empty());
    CHECK(art.mining.suppressed_known > 0);
    CHECK(art.weights.entries.empty());
    CHECK(art.aux.aux_total == 0.0);
  }

  // Base prototypes imprinted from annotations; zero noise means they are
  // exactly the category axes. Floor clutter has zero-norm features and
  // must not dilute the means.
  REQUIRE(state.store.entries.size() == 2);
  for (int c = 0; c < 2; ++c) {
    const auto& e = state.store.entries[static_cast<std::size_t>(c)];
    REQUIRE(e.initialized);
    for (int k = 0; k < 3; ++k) {
      CHECK(e.proto3d[k] == (k == c ? 1.0 : 0.0));
      CHECK(e.proto2d[k] == (k == c ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("incremental sessions freeze earlier prototypes and extend the head") {
  SimulateConfig cfg;
  cfg.world.feat3_dim = 3;
  cfg.world.feat2_dim = 3;
  cfg.split.base = {"b0"};
  cfg.split.tasks = {{"n0"}};
  SessionState state = fresh_state(cfg);
  update_prototype(state.store, "b0", axis(3, 0), axis(3, 0));

  ImprintScene scene1;
  PositiveSet set;
  set.category = "n0";
  set.f3 = {axis(3, 1)};
  set.f2 = {axis(3, 1)};
  scene1.push_back(set);
  const std::vector<ImprintScene> support = {scene1};

  const auto res = run_incremental_session(state, std::vector<std::string>{"n0"}, support,
                                           20, 0.05);
  CHECK(res.added == 1);
  CHECK(res.frozen_hash_before == res.frozen_hash_after);
  CHECK(res.imprint.categories_without_positives.empty());
  CHECK(res.imprint.loss_trace.size() == 21);
  CHECK(state.t == 1);
  REQUIRE(state.novel_sessions.size() == 1);
  CHECK(state.novel_sessions[0] == std::vector<std::string>{"n0"});
  CHECK(state.gates.novel_count == 1);
  REQUIRE(state.store.entries.size() == 2);
  CHECK(state.store.entries[1].initialized);
  CHECK(state.store.entries[1].session == 1);
  CHECK(state.store.entries[1].proto3d == axis(3, 1));
  // b0 untouched, bit for bit.
  CHECK(state.store.entries[0].proto3d == axis(3, 0));

  // A second session grows the head again and leaves n0 frozen.
  ImprintScene scene2;
  PositiveSet set2;
  set2.category = "n1";
  set2.f3 = {axis(3, 2)};
  set2.f2 = {axis(3, 2)};
  scene2.push_back(set2);
  const std::vector<ImprintScene> support2 = {scene2};
  const auto res2 = run_incremental_session(state, std::vector<std::string>{"n1"}, support2,
                                            20, 0.05);
  CHECK(res2.frozen_hash_before == res2.frozen_hash_after);
  CHECK(state.t == 2);
  CHECK(state.gates.novel_count == 2);
  CHECK(state.store.entries[1].proto3d == axis(3, 1));

  SUBCASE("violations leave the state untouched") {
    const auto before = state_to_json(state).dump();
    CHECK_THROWS_AS(run_incremental_session(state, std::vector<std::string>{"b0"}, support,
                                            20, 0.05),
                    CategoryCollision);
    CHECK_THROWS_AS(run_incremental_session(state, std::vector<std::string>{},  support,
                                            20, 0.05),
                    InsufficientSupport);
    CHECK_THROWS_AS(run_incremental_session(state, std::vector<std::string>{"n2"},
                                            std::vector<ImprintScene>{}, 20, 0.05),
                    InsufficientSupport);
    CHECK(state_to_json(state).dump() == before);
  }
}

TEST_CASE("proposal classification favors the matching prototype") {
  // One base object and one novel object, zero noise: an ideal proposal on
  // the base object scores cosine 1 on both prototype spaces.
  SimulateConfig cfg;
  cfg.split.base = {"b0"};
  cfg.split.tasks = {{"n0"}};
  cfg.seed = 21;
  WorldConfig w;
  w.room = Eigen::Vector3d(6.0, 6.0, 3.0);
  for (const auto& name : cfg.split.all_categories()) {
    CategorySpec s;
    s.name = name;
    s.size_min = Eigen::Vector3d(0.8, 0.8, 0.8);
    s.size_max = Eigen::Vector3d(1.2, 1.2, 1.2);
    w.categories.push_back(s);
  }
  w.points_per_object = 512;
  w.floor_clutter_points = 0;
  w.feat3_dim = 2;
  w.feat2_dim = 2;
  cfg.world = w;

  const Scene scene = generate_scene(w, 909);
  REQUIRE(scene.objects.size() == 2);
  CHECK(scene.objects[0].category == 0);
  CHECK(scene.objects[1].category == 1);
  const auto [f3, f2] = oracle_features(scene, w, 31);
  const auto proposals = oracle_detector(scene, w, 17);
  REQUIRE(proposals.size() == 2);

  SessionState state = fresh_state(cfg);
  update_prototype(state.store, "b0", axis(2, 0), axis(2, 0));

  // Before any incremental session the novel object finds no category.
  const auto dets0 = classify_proposals(scene, proposals, f3, f2, state, 0.0);
  REQUIRE(dets0.size() == 1);
  CHECK(dets0[0].category == "b0");
  CHECK(dets0[0].score == 1.0);
  CHECK(same_box(dets0[0].box, scene.objects[0].box));
  CHECK(dets0[0].scene == scene.id);

  // Imprint n0 without gate training: the gates stay at their neutral
  // initialization, alpha = (1/2, 1/2) and gamma = 1/2, so a perfect novel
  // match fuses to 1/2 and maps to score 3/4.
  ImprintScene sup;
  PositiveSet set;
  set.category = "n0";
  set.f3 = {axis(2, 1)};
  set.f2 = {axis(2, 1)};
  sup.push_back(set);
  run_incremental_session(state, std::vector<std::string>{"n0"},
                          std::vector<ImprintScene>{sup}, 0, 0.05);

  const auto dets1 = classify_proposals(scene, proposals, f3, f2, state, 0.0);
  REQUIRE(dets1.size() == 2);
  CHECK(dets1[0].category == "b0");
  CHECK(dets1[1].category == "n0");
  CHECK(dets1[1].score == doctest::Approx(0.75).epsilon(1e-12));

  // A floor above the neutral fused score drops the novel detection only.
  const auto dets2 = classify_proposals(scene, proposals, f3, f2, state, 0.9);
  REQUIRE(dets2.size() == 1);
  CHECK(dets2[0].category == "b0");

  // Trained gates push the fused score of a perfect match above neutral.
  SessionState trained = fresh_state(cfg);
  update_prototype(trained.store, "b0", axis(2, 0), axis(2, 0));
  run_incremental_session(trained, std::vector<std::string>{"n0"},
                          std::vector<ImprintScene>{sup}, 300, 0.1);
  const auto dets3 = classify_proposals(scene, proposals, f3, f2, trained, 0.0);
  REQUIRE(dets3.size() == 2);
  CHECK(dets3[1].category == "n0");
  CHECK(dets3[1].score > 0.75);
}

TEST_CASE("batch protocol reaches perfect novel detection in a clean world") {
  json cj;
  cj["split"]["base"] = {"c00", "c01", "c02", "c03", "c04", "c05", "c06", "c07", "c08"};
  cj["split"]["tasks"] = json::array({json::array({"c09", "c10", "c11"})});
  cj["shots"] = 5;
  cj["train_scenes"] = 16;
  cj["val_scenes"] = 6;
  cj["world"]["points_per_object"] = 192;
  cj["world"]["floor_clutter_points"] = 128;
  cj["world"]["frames_per_scene"] = 3;
  cj["seed"] = 7;
  const SimulateConfig cfg = parse_simulate_config(cj);
  const ProtocolResult res = run_protocol(cfg);

  REQUIRE(res.sessions.size() == 2);
  const auto& s0 = res.sessions[0].metrics;
  CHECK(s0.session == 0);
  CHECK(s0.base_map == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(s0.novel_map == 0.0);
  CHECK(s0.way == 3);
  CHECK(s0.shot == 5);
  CHECK(s0.protocol == "batch");

  const auto& s1 = res.sessions[1].metrics;
  CHECK(s1.session == 1);
  CHECK(s1.base_map == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(s1.novel_map == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(s1.all_map == doctest::Approx(1.0).epsilon(1e-9));
  REQUIRE(res.sessions[1].categories == std::vector<std::string>{"c09", "c10", "c11"});

  CHECK(res.final_state.t == 1);
  CHECK(res.final_state.all_categories().size() == 12);

  // Report structure.
  const auto& rj = res.report;
  CHECK(rj.at("version") == 1);
  CHECK(rj.at("protocol") == "batch");
  CHECK(rj.at("way") == 3);
  CHECK(rj.at("sessions").size() == 2);
  CHECK(rj.at("base_session").at("failed_scenes") == 0);
  CHECK(rj.at("base_session").at("mined_boxes").get<long>() > 0);
  const std::string hash = rj.at("detections_hash").get<std::string>();
  REQUIRE(hash.size() == 18);
  CHECK(hash.substr(0, 2) == "0x");

  // CSV: header plus one row per session.
  int lines = 0;
  for (char c : res.csv)
    if (c == '\n') ++lines;
  CHECK(lines == 3);
  CHECK(res.csv.rfind("session,protocol,way,shot,base_map,novel_map,all_map\n", 0) == 0);

  // Bit-stable across reruns.
  const ProtocolResult again = run_protocol(cfg);
  CHECK(again.report.dump() == res.report.dump());
  CHECK(again.csv == res.csv);
}

TEST_CASE("sequential protocol freezes base detections across tasks") {
  json cj;
  cj["split"]["base"] = {"c00", "c01", "c02", "c03"};
  cj["split"]["tasks"] = json::array({json::array({"c04"}), json::array({"c05"})});
  cj["protocol"] = "sequential";
  cj["shots"] = 2;
  cj["train_scenes"] = 8;
  cj["val_scenes"] = 2;
  cj["world"]["points_per_object"] = 192;
  cj["world"]["frames_per_scene"] = 3;
  cj["seed"] = 3;
  const SimulateConfig cfg = parse_simulate_config(cj);
  REQUIRE(cfg.sequential);
  const ProtocolResult res = run_protocol(cfg);

  REQUIRE(res.sessions.size() == 3);
  CHECK(res.sessions[1].categories == std::vector<std::string>{"c04"});
  CHECK(res.sessions[2].categories == std::vector<std::string>{"c05"});
  CHECK(res.final_state.t == 2);
  CHECK(res.sessions[0].metrics.protocol == "sequential");
  CHECK(res.sessions[2].metrics.novel_map == doctest::Approx(1.0).epsilon(1e-6));

  // The base vocabulary's detections are byte-stable while sessions come
  // and go: same proposals, same prototypes, same scores.
  const std::set<std::string> base(cfg.split.base.begin(), cfg.split.base.end());
  auto base_dets = [&](const SessionReport& rep) {
    std::vector<Detection> out;
    for (const auto& d : rep.detections)
      if (base.count(d.category)) out.push_back(d);
    return out;
  };
  const auto d0 = base_dets(res.sessions[0]);
  CHECK(!d0.empty());
  for (const auto& rep : res.sessions) {
    const auto dn = base_dets(rep);
    REQUIRE(dn.size() == d0.size());
    for (std::size_t i = 0; i < dn.size(); ++i) {
      CHECK(dn[i].scene == d0[i].scene);
      CHECK(dn[i].category == d0[i].category);
      CHECK(same_box(dn[i].box, d0[i].box));
      CHECK(dn[i].score == d0[i].score);
    }
  }

  // Novel categories appear in detections only once introduced.
  for (const auto& d : res.sessions[1].detections) CHECK(d.category != "c05");
  bool saw_c05 = false;
  for (const auto& d : res.sessions[2].detections) saw_c05 |= d.category == "c05";
  CHECK(saw_c05);
}

TEST_CASE("simulate configs parse with defaults and reject surprises") {
  json minimal;
  minimal["split"]["base"] = {"a"};
  minimal["split"]["tasks"] = json::array({json::array({"b"})});
  const SimulateConfig cfg = parse_simulate_config(minimal);
  CHECK(cfg.shots == 5);
  CHECK(cfg.train_scenes == 16);
  CHECK(cfg.val_scenes == 6);
  CHECK(cfg.sigma == 0.5);
  CHECK_FALSE(cfg.normalized_weights);
  CHECK(cfg.momentum == 0.999);
  CHECK(cfg.imprint_first);
  CHECK(cfg.gate_epochs == 200);
  CHECK(cfg.gate_lr == 0.01);
  CHECK(cfg.iou_thresh == 0.25);
  CHECK(cfg.score_floor == 0.0);
  CHECK_FALSE(cfg.sequential);
  CHECK(cfg.seed == 0);
  REQUIRE(cfg.world.categories.size() == 2);
  CHECK(cfg.world.categories[0].name == "a");
  CHECK(cfg.world.categories[1].name == "b");
  CHECK(cfg.world.feat3_dim == 2);  // grown to the category count
  CHECK(cfg.world.feat2_dim == 2);
  CHECK(cfg.world.camera_ring_scale == 0.48);
  CHECK(cfg.mining.min_points == 20);
  CHECK(cfg.mining.merge_iou == 0.5);
  CHECK(cfg.mining.gt_suppress_iou == 0.25);

  SUBCASE("presets, protocol and world knobs") {
    json j = minimal;
    j["split"] = "sunrgbd_5way";
    j["protocol"] = "sequential";
    j["world"]["feat3_dim"] = 3;   // below the category count, must grow
    j["world"]["feat2_dim"] = 32;  // above it, kept
    j["world"]["count_min"] = 0;
    j["world"]["count_max"] = 2;
    j["world"]["camera_ring_scale"] = 1.5;
    const SimulateConfig c = parse_simulate_config(j);
    CHECK(c.split.name == "sunrgbd_5way");
    CHECK(c.split.base.size() == 5);
    CHECK(c.sequential);
    CHECK(c.world.feat3_dim == 10);
    CHECK(c.world.feat2_dim == 32);
    CHECK(c.world.camera_ring_scale == 1.5);
    for (const auto& spec : c.world.categories) {
      CHECK(spec.count_min == 0);
      CHECK(spec.count_max == 2);
    }
  }

  SUBCASE("the echoed config is a fixed point of the parser") {
    json j = minimal;
    j["seed"] = 12;
    j["world"]["frames_per_scene"] = 2;
    const SimulateConfig c = parse_simulate_config(j);
    const auto echoed = simulate_config_to_json(c);
    const SimulateConfig c2 = parse_simulate_config(echoed);
    CHECK(simulate_config_to_json(c2).dump() == echoed.dump());
    CHECK(echoed.at("world").contains("camera_ring_scale"));
  }

  SUBCASE("unknown keys are rejected everywhere") {
    json j = minimal;
    j["sigmaa"] = 0.5;
    CHECK_THROWS_AS(parse_simulate_config(j), FormatError);

    json jw = minimal;
    jw["world"]["resolution"] = 2;
    CHECK_THROWS_AS(parse_simulate_config(jw), FormatError);

    json jm = minimal;
    jm["mining"]["min_pts"] = 5;
    CHECK_THROWS_AS(parse_simulate_config(jm), FormatError);

    json js = minimal;
    js["split"]["extra"] = 1;
    CHECK_THROWS_AS(parse_simulate_config(js), FormatError);
  }

  SUBCASE("malformed configs are rejected") {
    CHECK_THROWS_AS(parse_simulate_config(json::array()), FormatError);
    CHECK_THROWS_AS(parse_simulate_config(json::object()), FormatError);

    json j = minimal;
    j["protocol"] = "continuous";
    CHECK_THROWS_AS(parse_simulate_config(j), FormatError);

    json jb = minimal;
    jb["split"]["base"] = json::array();
    CHECK_THROWS_AS(parse_simulate_config(jb), FormatError);

    json jt = minimal;
    jt["split"]["tasks"] = json::array({json::array()});
    CHECK_THROWS_AS(parse_simulate_config(jt), FormatError);

    json jp = minimal;
    jp["split"] = "nuscenes_1way";
    CHECK_THROWS_AS(parse_simulate_config(jp), FormatError);

    json jshots = minimal;
    jshots["shots"] = 0;
    CHECK_THROWS_AS(parse_simulate_config(jshots), FormatError);
  }
}
