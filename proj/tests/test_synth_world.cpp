#include "fi3det/synth_world.hpp"

#include <Eigen/LU>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "fi3det/vlm_ingest.hpp"

using namespace fi3det;

namespace {

WorldConfig small_config(int n_categories) {
  WorldConfig cfg;
  cfg.categories.clear();
  for (int i = 0; i < n_categories; ++i) {
    CategorySpec spec;
    spec.name = "cat" + std::to_string(i);
    cfg.categories.push_back(spec);
  }
  cfg.points_per_object = 128;
  cfg.floor_clutter_points = 64;
  return cfg;
}

std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return a.dot(b) / (a.norm() * b.norm());
}

std::filesystem::path temp_file(const char* stem) {
  return std::filesystem::temp_directory_path() / stem;
}

}  // namespace

TEST_CASE("random stream matches pinned golden values") {
  Rng r0(0);
  CHECK(r0.next_u64() == 0xE220A8397B1DCDAFull);
  CHECK(r0.next_u64() == 0x6E789E6AA1B965F4ull);
  CHECK(r0.next_u64() == 0x06C45D188009454Full);
  CHECK(r0.next_u64() == 0xF88BB8A8724C81ECull);
  Rng r42(42);
  CHECK(r42.next_u64() == 0xBDD732262FEB6E95ull);
  CHECK(r42.next_u64() == 0x28EFE333B266F103ull);
  CHECK(Rng(7).child("layout", 0).state() == 0xBF800BCC2E0D72BCull);
  // The uniform derivation is an exact shift-and-scale of the bit stream.
  Rng u(0);
  CHECK(u.uniform() == static_cast<double>(0xE220A8397B1DCDAFull >> 11) * 0x1.0p-53);
}

TEST_CASE("config validation rejects bad setups") {
  CHECK_THROWS_AS(validate_config(WorldConfig{}), EmptyInput);  // no categories

  WorldConfig cfg = small_config(2);
  CHECK_NOTHROW(validate_config(cfg));

  WorldConfig narrow = small_config(2);
  narrow.feat3_dim = 1;
  CHECK_THROWS_AS(validate_config(narrow), DimensionMismatch);

  WorldConfig drop = small_config(1);
  drop.mask_dropout = 1.5;
  CHECK_THROWS_AS(validate_config(drop), EmptyInput);

  WorldConfig sizes = small_config(1);
  sizes.categories[0].size_max = Eigen::Vector3d(0.1, 0.1, 0.1);  // below size_min
  CHECK_THROWS_AS(validate_config(sizes), EmptyInput);

  WorldConfig counts = small_config(1);
  counts.categories[0].count_max = 0;  // below count_min = 1
  CHECK_THROWS_AS(validate_config(counts), EmptyInput);

  WorldConfig frames = small_config(1);
  frames.frames_per_scene = 0;
  CHECK_THROWS_AS(validate_config(frames), EmptyInput);
}

TEST_CASE("scene generation is deterministic") {
  WorldConfig cfg = small_config(3);
  for (auto& c : cfg.categories) c.count_max = 2;
  const Scene a = generate_scene(cfg, 7);
  const Scene b = generate_scene(cfg, 7);
  REQUIRE(a.objects.size() == b.objects.size());
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    CHECK(a.objects[i].category == b.objects[i].category);
    CHECK(a.objects[i].box.center == b.objects[i].box.center);
    CHECK(a.objects[i].box.size == b.objects[i].box.size);
    CHECK(a.objects[i].box.yaw == b.objects[i].box.yaw);
  }
  REQUIRE(a.points.rows() == b.points.rows());
  CHECK((a.points - b.points).cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.point_object == b.point_object);

  const Scene c = generate_scene(cfg, 8);
  CHECK(c.points != a.points);  // different seed, different layout
}

TEST_CASE("placed instances stay inside the room and never overlap") {
  WorldConfig cfg = small_config(3);
  for (auto& c : cfg.categories) c.count_max = 2;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Scene scene = generate_scene(cfg, seed);
    REQUIRE(scene.objects.size() >= 3);
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
      const Box3& box = scene.objects[i].box;
      const double reach = 0.5 * std::hypot(box.size.x(), box.size.y());
      CHECK(std::abs(box.center.x()) + reach <= cfg.room.x() / 2.0 + 1e-9);
      CHECK(std::abs(box.center.y()) + reach <= cfg.room.y() / 2.0 + 1e-9);
      CHECK(box.center.z() == box.size.z() / 2.0);  // resting on the floor
      for (std::size_t j = i + 1; j < scene.objects.size(); ++j)
        CHECK(iou3d(box, scene.objects[j].box) == 0.0);
    }
    // Every object point sits on its own box (within float slack) and
    // floor clutter sits on the floor plane.
    for (Eigen::Index r = 0; r < scene.points.rows(); ++r) {
      const int obj = scene.point_object[static_cast<std::size_t>(r)];
      const Eigen::Vector3d p = scene.points.row(r).head<3>();
      if (obj < 0) {
        CHECK(p.z() == 0.0);
        CHECK(scene.points.row(r).tail<3>() == Eigen::RowVector3d(0, 0, 1));
        continue;
      }
      Box3 inflated = scene.objects[static_cast<std::size_t>(obj)].box;
      inflated.size.array() += 1e-6;
      CHECK(point_in_box(p, inflated));
      CHECK(scene.points.row(r).tail<3>().norm() == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("placement failure throws after the attempt budget") {
  WorldConfig cramped = small_config(1);
  cramped.room = Eigen::Vector3d(1.2, 1.2, 3.0);
  cramped.categories[0].size_min = Eigen::Vector3d(1.0, 1.0, 1.0);
  cramped.categories[0].size_max = Eigen::Vector3d(1.0, 1.0, 1.0);
  CHECK_THROWS_AS(generate_scene(cramped, 1), PlacementFailure);

  WorldConfig crowded = small_config(1);
  crowded.room = Eigen::Vector3d(2.6, 2.6, 3.0);
  crowded.random_yaw = false;
  crowded.categories[0].size_min = Eigen::Vector3d(1.4, 1.4, 1.0);
  crowded.categories[0].size_max = Eigen::Vector3d(1.4, 1.4, 1.0);
  crowded.categories[0].count_min = 2;
  crowded.categories[0].count_max = 2;
  CHECK_THROWS_AS(generate_scene(crowded, 1), PlacementFailure);
}

TEST_CASE("noise-free embeddings are the category axes") {
  WorldConfig cfg = small_config(3);
  const Scene scene = generate_scene(cfg, 11);
  const auto [f3, f2] = oracle_features(scene, cfg, 11);
  REQUIRE(f3.rows() == scene.points.rows());
  REQUIRE(f3.cols() == cfg.feat3_dim);
  REQUIRE(f2.cols() == cfg.feat2_dim);
  for (Eigen::Index r = 0; r < f3.rows(); ++r) {
    const int obj = scene.point_object[static_cast<std::size_t>(r)];
    if (obj < 0) {
      CHECK(f3.row(r).norm() == 0.0);
      CHECK(f2.row(r).norm() == 0.0);
      continue;
    }
    const int cat = scene.objects[static_cast<std::size_t>(obj)].category;
    CHECK(f3(r, cat) == 1.0);
    CHECK(f3.row(r).norm() == 1.0);
    CHECK(f2(r, cat) == 1.0);
    CHECK(f2.row(r).norm() == 1.0);
  }
}

TEST_CASE("noisy embeddings keep categories separable") {
  WorldConfig cfg = small_config(2);
  cfg.feature_noise = 0.1;
  const Scene scene = generate_scene(cfg, 3);
  const auto [f3, f2] = oracle_features(scene, cfg, 3);
  double own = 0.0, cross = 0.0;
  int n = 0;
  for (Eigen::Index r = 0; r < f3.rows(); ++r) {
    const int obj = scene.point_object[static_cast<std::size_t>(r)];
    if (obj < 0) continue;
    const int cat = scene.objects[static_cast<std::size_t>(obj)].category;
    own += f3(r, cat);
    cross += f3(r, 1 - cat);
    ++n;
  }
  REQUIRE(n > 0);
  CHECK(own / n > 0.8);
  CHECK(std::abs(cross / n) < 0.2);

  // Same seed, same noise draw: deterministic.
  const auto [g3, g2] = oracle_features(scene, cfg, 3);
  CHECK((f3 - g3).cwiseAbs().maxCoeff() == 0.0);
  CHECK((f2 - g2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("ideal detector reproduces the annotations") {
  WorldConfig cfg = small_config(3);
  const Scene scene = generate_scene(cfg, 5);
  const auto proposals = oracle_detector(scene, cfg, 5);
  REQUIRE(proposals.size() == scene.objects.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    CHECK(proposals[i].box.center == scene.objects[i].box.center);
    CHECK(proposals[i].box.size == scene.objects[i].box.size);
    CHECK(proposals[i].box.yaw == scene.objects[i].box.yaw);
    CHECK(proposals[i].objectness == 1.0);
  }
}

TEST_CASE("jittered proposals stay near the annotations") {
  WorldConfig cfg = small_config(3);
  cfg.center_jitter = 0.05;
  cfg.size_jitter = 0.05;
  double iou_sum = 0.0;
  int count = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Scene scene = generate_scene(cfg, seed);
    const auto proposals = oracle_detector(scene, cfg, seed);
    REQUIRE(proposals.size() == scene.objects.size());
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      iou_sum += iou3d(proposals[i].box, scene.objects[i].box);
      ++count;
      CHECK(proposals[i].objectness > 0.0);
      CHECK(proposals[i].objectness <= 1.0);
    }
  }
  CHECK(iou_sum / count > 0.7);
}

TEST_CASE("clutter proposals follow the configured rate") {
  WorldConfig cfg = small_config(1);
  cfg.clutter_rate = 2.0;
  const Scene scene = generate_scene(cfg, 1);
  double extra = 0.0;
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    const auto proposals = oracle_detector(scene, cfg, seed);
    REQUIRE(proposals.size() >= scene.objects.size());
    extra += static_cast<double>(proposals.size() - scene.objects.size());
    for (std::size_t i = scene.objects.size(); i < proposals.size(); ++i) {
      CHECK(proposals[i].objectness >= 0.05);
      CHECK(proposals[i].objectness <= 0.5);
    }
  }
  const double mean = extra / 400.0;
  CHECK(mean > 1.7);
  CHECK(mean < 2.3);

  WorldConfig quiet = small_config(1);
  const auto proposals = oracle_detector(scene, quiet, 9);
  CHECK(proposals.size() == scene.objects.size());  // rate 0 never draws
}

TEST_CASE("rendering projects points with a valid camera") {
  WorldConfig cfg = small_config(2);
  const Scene scene = generate_scene(cfg, 13);
  const auto [f3, f2] = oracle_features(scene, cfg, 13);
  std::vector<int> owners;
  const VlmFrame frame = render_frame(scene, f2, cfg, 0, 13, &owners);

  CHECK(frame.id == scene.id + "__f0");
  CHECK(frame.width == cfg.image_width);
  CHECK(frame.height == cfg.image_height);
  const Eigen::Matrix3d rot = frame.camera.pose.block<3, 3>(0, 0);
  CHECK((rot.transpose() * rot - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(rot.determinant() == doctest::Approx(1.0).epsilon(1e-12));

  REQUIRE(frame.num_masks >= 1);
  REQUIRE(owners.size() == static_cast<std::size_t>(frame.num_masks));
  for (std::size_t j = 0; j < owners.size(); ++j) {
    CHECK(owners[j] >= 0);
    CHECK(owners[j] < static_cast<int>(scene.objects.size()));
    if (j > 0) CHECK(owners[j] > owners[j - 1]);  // object index order
  }

  REQUIRE(frame.has_dense_features());
  int depth_pixels = 0;
  for (float d : frame.depth)
    if (d > 0.0f) ++depth_pixels;
  CHECK(depth_pixels > 50);

  // With no corruption, every mask pixel is a real splat of its owner:
  // positive depth and the owner's category axis in the feature map.
  const std::size_t plane = static_cast<std::size_t>(frame.width) * frame.height;
  for (int j = 0; j < frame.num_masks; ++j) {
    const int cat = scene.objects[static_cast<std::size_t>(owners[static_cast<std::size_t>(j)])].category;
    int pixels = 0;
    for (int v = 0; v < frame.height; ++v)
      for (int u = 0; u < frame.width; ++u) {
        if (!frame.mask_at(j, u, v)) continue;
        ++pixels;
        CHECK(frame.depth_at(u, v) > 0.0f);
        const std::size_t pix = static_cast<std::size_t>(v) * frame.width + u;
        CHECK(frame.featmap[static_cast<std::size_t>(cat) * plane + pix] == 1.0f);
      }
    CHECK(pixels >= 1);
  }

  // Determinism.
  const VlmFrame again = render_frame(scene, f2, cfg, 0, 13);
  CHECK(again.depth == frame.depth);
  CHECK(again.masks == frame.masks);
  CHECK(again.featmap == frame.featmap);
}

TEST_CASE("rendered frames round-trip through the frame container") {
  WorldConfig cfg = small_config(2);
  const Scene scene = generate_scene(cfg, 21);
  const auto [f3, f2] = oracle_features(scene, cfg, 21);
  const VlmFrame frame = render_frame(scene, f2, cfg, 1, 21);
  const auto path = temp_file("synth_frame_roundtrip.fi3d");
  write_vlm_frame(path, frame);
  const VlmFrame loaded = load_vlm_frame(path);
  std::filesystem::remove(path);
  CHECK(loaded.width == frame.width);
  CHECK(loaded.height == frame.height);
  CHECK(loaded.depth == frame.depth);
  CHECK(loaded.masks == frame.masks);
  CHECK(loaded.featmap == frame.featmap);
  CHECK(loaded.num_masks == frame.num_masks);
  CHECK(loaded.camera.fx == doctest::Approx(frame.camera.fx).epsilon(1e-6));
  CHECK((loaded.camera.pose.cast<float>() - frame.camera.pose.cast<float>())
            .cwiseAbs()
            .maxCoeff() == 0.0f);
}

TEST_CASE("mined boxes from rendered frames recover the layout") {
  WorldConfig cfg = small_config(2);
  cfg.image_width = 320;
  cfg.image_height = 240;
  cfg.focal = 240.0;
  cfg.frames_per_scene = 4;
  cfg.points_per_object = 2048;
  cfg.floor_clutter_points = 0;
  const Scene scene = generate_scene(cfg, 17);
  REQUIRE(scene.objects.size() == 2);
  const auto [f3, f2] = oracle_features(scene, cfg, 17);

  std::vector<VlmFrame> frames;
  for (int f = 0; f < cfg.frames_per_scene; ++f)
    frames.push_back(render_frame(scene, f2, cfg, f, 17));

  MiningConfig mcfg;
  MiningStats stats;
  const auto mined = mine_unknown_objects(frames, {}, mcfg, &stats);
  // Partial views below the merge threshold may survive as extra boxes;
  // recovery means every annotation is hit and nothing lands in free space.
  REQUIRE(mined.size() >= scene.objects.size());
  CHECK(stats.masks_seen >= static_cast<int>(mined.size()));

  for (const auto& m : mined) {
    double best = 0.0;
    for (const auto& obj : scene.objects) best = std::max(best, iou3d(m.box, obj.box));
    CHECK(best > 0.25);  // no hallucinated boxes
  }
  for (const auto& obj : scene.objects) {
    double best = 0.0;
    const PseudoObject* hit = nullptr;
    for (const auto& m : mined) {
      const double iou = iou3d(m.box, obj.box);
      if (iou > best) {
        best = iou;
        hit = &m;
      }
    }
    REQUIRE(hit != nullptr);
    CHECK(best > 0.75);
    CHECK(hit->support_count >= mcfg.min_points);
    // Noise-free features pool to the exact category axis.
    Eigen::VectorXd axis = Eigen::VectorXd::Zero(cfg.feat2_dim);
    axis[obj.category] = 1.0;
    CHECK(cosine(hit->feature, axis) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("mask corruption knobs change coverage in the expected direction") {
  WorldConfig cfg = small_config(1);
  const Scene scene = generate_scene(cfg, 23);
  const auto [f3, f2] = oracle_features(scene, cfg, 23);
  const VlmFrame clean = render_frame(scene, f2, cfg, 0, 23);

  auto mask_count = [](const VlmFrame& fr) {
    std::size_t n = 0;
    for (auto m : fr.masks)
      if (m != 0) ++n;
    return n;
  };
  const std::size_t base = mask_count(clean);
  REQUIRE(base > 0);

  WorldConfig bled = cfg;
  bled.mask_bleed = 2;
  CHECK(mask_count(render_frame(scene, f2, bled, 0, 23)) > base);

  WorldConfig dropped = cfg;
  dropped.mask_dropout = 0.5;
  const std::size_t kept = mask_count(render_frame(scene, f2, dropped, 0, 23));
  CHECK(kept < base);
  CHECK(kept > 0);
}

TEST_CASE("scene containers round-trip exactly") {
  WorldConfig cfg = small_config(3);
  const Scene scene = generate_scene(cfg, 29);
  const auto [f3, f2] = oracle_features(scene, cfg, 29);
  const auto path = temp_file("synth_scene_roundtrip.fi3d");
  write_scene_fi3d(path.string(), scene, &f3, &f2);
  const LoadedScene loaded = read_scene_fi3d(path.string());
  std::filesystem::remove(path);

  REQUIRE(loaded.scene.objects.size() == scene.objects.size());
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    CHECK(loaded.scene.objects[i].category == scene.objects[i].category);
    CHECK(loaded.scene.objects[i].box.center.cast<float>() ==
          scene.objects[i].box.center.cast<float>());
    CHECK(loaded.scene.objects[i].box.size.cast<float>() ==
          scene.objects[i].box.size.cast<float>());
    CHECK(static_cast<float>(loaded.scene.objects[i].box.yaw) ==
          static_cast<float>(scene.objects[i].box.yaw));
  }
  REQUIRE(loaded.scene.points.rows() == scene.points.rows());
  CHECK((loaded.scene.points.cast<float>() - scene.points.cast<float>())
            .cwiseAbs()
            .maxCoeff() == 0.0f);
  CHECK((loaded.feat3.cast<float>() - f3.cast<float>()).cwiseAbs().maxCoeff() == 0.0f);
  CHECK((loaded.feat2.cast<float>() - f2.cast<float>()).cwiseAbs().maxCoeff() == 0.0f);

  const auto bare = temp_file("synth_scene_bare.fi3d");
  write_scene_fi3d(bare.string(), scene);
  const LoadedScene plain = read_scene_fi3d(bare.string());
  std::filesystem::remove(bare);
  CHECK(plain.feat3.size() == 0);
  CHECK(plain.feat2.size() == 0);
}

TEST_CASE("scene bytes match the pinned golden hash") {
  WorldConfig cfg = small_config(2);
  cfg.points_per_object = 64;
  cfg.floor_clutter_points = 16;
  const Scene scene = generate_scene(cfg, 1234);
  std::vector<float> bytes;
  for (Eigen::Index r = 0; r < scene.points.rows(); ++r)
    for (Eigen::Index c = 0; c < scene.points.cols(); ++c)
      bytes.push_back(static_cast<float>(scene.points(r, c)));
  for (const auto& o : scene.objects) {
    bytes.push_back(static_cast<float>(o.box.center.x()));
    bytes.push_back(static_cast<float>(o.box.center.y()));
    bytes.push_back(static_cast<float>(o.box.center.z()));
    bytes.push_back(static_cast<float>(o.box.size.x()));
    bytes.push_back(static_cast<float>(o.box.size.y()));
    bytes.push_back(static_cast<float>(o.box.size.z()));
    bytes.push_back(static_cast<float>(o.box.yaw));
  }
  const std::uint64_t h = fnv1a64(bytes.data(), bytes.size() * sizeof(float));
  CHECK(h == 3667677713337391499ull);
}
