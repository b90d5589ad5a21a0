#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fi3det/errors.hpp"
#include "fi3det/evaluation.hpp"
#include "fi3det/losses.hpp"
#include "fi3det/prototype_gate.hpp"
#include "fi3det/synth_world.hpp"
#include "fi3det/vlm_ingest.hpp"
#include "fi3det/weighting.hpp"
#include "json.hpp"

namespace fi3det {

// A category split: the base vocabulary plus one list of novel categories
// per incremental task. Batch protocols flatten the tasks into a single
// incremental session; sequential protocols run them in order.
struct SplitSpec {
  std::string name = "custom";
  std::vector<std::string> base;
  std::vector<std::vector<std::string>> tasks;
  bool axis_aligned_eval = false;

  std::vector<std::string> all_novel() const;
  std::vector<std::string> all_categories() const;  // base first, then tasks in order
};

// Named dataset splits, categories in alphabetical order:
//   scannet_1way      17 base + 1 novel (window)
//   scannet_9way       9 base + 9 novel
//   scannet_sequential 9 base + tasks of 3/3/3
//   sunrgbd_1way       9 base + 1 novel (toilet)
//   sunrgbd_5way       5 base + 5 novel
//   sunrgbd_sequential 5 base + tasks of 3/2
// Throws FormatError for an unknown name.
SplitSpec preset_split(const std::string& name);

// Mutable protocol state: which categories exist, which session introduced
// them, and the prototype/gate parameters. Raw scenes from earlier
// sessions are never part of it.
struct SessionState {
  int t = 0;  // 0 = base session done, t >= 1 after incremental sessions
  std::vector<std::string> base_categories;
  std::vector<std::vector<std::string>> novel_sessions;  // one list per session 1..t
  PrototypeStore store;
  GateParams gates;
  std::uint64_t seed = 0;

  std::vector<std::string> all_categories() const;
};

// Bookkeeping invariants: session lists pairwise disjoint, store entries
// exactly mirror them with matching session tags. Throws CategoryCollision
// or Error.
void check_state(const SessionState& s);

nlohmann::ordered_json state_to_json(const SessionState& s);
SessionState state_from_json(const nlohmann::json& j);
void save_state(const std::string& path, const SessionState& s);
SessionState load_state(const std::string& path);

// One few-shot annotated example: an object instance inside a scene.
struct SupportInstance {
  int scene = -1;   // index into the sampled scene list
  int object = -1;  // index into that scene's objects
  std::string category;
};

// Mean feature rows over the points inside a box, in both feature spaces.
// Rows where either space carries no signal are excluded; returns false
// when no usable member remains. Scalar accumulation in index order, so
// the result never depends on surrounding categories or scenes.
bool instance_feature_means(const std::vector<Eigen::Vector3d>& points,
                            const Eigen::MatrixXd& f3, const Eigen::MatrixXd& f2,
                            const Box3& box, Eigen::VectorXd& m3, Eigen::VectorXd& m2);

// Draws exactly k examples per category, each from a distinct scene
// (a scene may still serve several categories). Deterministic in seed.
// Throws InsufficientSupport when fewer than k scenes contain a category.
std::vector<SupportInstance> sample_support(std::span<const Scene> scenes,
                                            const WorldConfig& world,
                                            std::span<const std::string> categories, int k,
                                            std::uint64_t seed);

// Everything a synthetic protocol run needs. The world's category list is
// derived from the split; feature dims grow to fit the category count.
struct SimulateConfig {
  SplitSpec split;
  WorldConfig world;
  int shots = 5;
  int train_scenes = 16;
  int val_scenes = 6;
  double sigma = 0.5;              // supervision-weight falloff in meters
  bool normalized_weights = false; // falloff in box-relative units instead
  double momentum = 0.999;        // prototype EMA
  bool imprint_first = true;
  int gate_epochs = 200;
  double gate_lr = 0.01;
  double iou_thresh = 0.25;
  double score_floor = 0.0;     // raw fused score needed to emit a detection
  bool sequential = false;
  std::uint64_t seed = 0;
  MiningConfig mining;
};

// Fills a SimulateConfig from JSON with defaults for absent fields; the
// accepted keys are pinned in schemas/simulate_config.schema.json.
SimulateConfig parse_simulate_config(const nlohmann::json& j);
nlohmann::ordered_json simulate_config_to_json(const SimulateConfig& cfg);

// Per-point features that depend only on (seed, scene id), so any subset
// of scenes sees the same values in any order.
class ScenewiseOracleProvider : public FeatureProvider {
 public:
  ScenewiseOracleProvider(WorldConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)), seed_(seed) {}
  std::pair<Eigen::MatrixXd, Eigen::MatrixXd> features(const Scene& scene) const override {
    return oracle_features(scene, cfg_, Rng(seed_).child(scene.id).state());
  }

 private:
  WorldConfig cfg_;
  std::uint64_t seed_;
};

// Base-session artifacts for one scene.
struct SceneArtifacts {
  std::string scene_id;
  MiningStats mining;
  std::vector<PseudoObject> pseudo;
  WeightField weights;               // scene points vs pseudo boxes
  std::vector<double> box_quality;   // per pseudo box: mean combined weight (0 = dropped)
  std::vector<double> best_gt_iou;   // per pseudo box vs non-base annotations (0 if none)
  LossReport aux;
  bool failed = false;
  std::string error;
};

struct BaseSessionResult {
  std::vector<SceneArtifacts> scenes;
  int failed_scenes = 0;
  long mined_boxes = 0;
  double weighted_iou = 0.0;    // sum(q_e iou_e) / sum(q_e) pooled over scenes
  double unweighted_iou = 0.0;  // plain mean over mined boxes
};

// Mines pseudo objects against the base vocabulary on every training
// scene, builds supervision weights, evaluates the auxiliary losses over
// synthetic per-member predictions, and finally imprints the base
// prototypes from base annotations. Per-scene failures are recorded and
// skipped, never fatal.
BaseSessionResult run_base_session(const SimulateConfig& cfg,
                                   std::span<const Scene> train_scenes,
                                   const FeatureProvider& provider, SessionState& state);

struct IncrementalResult {
  ImprintReport imprint;
  int added = 0;
  std::uint64_t frozen_hash_before = 0;  // prototypes outside this session
  std::uint64_t frozen_hash_after = 0;   // must equal the before-hash
};

// Registers the session's categories, imprints their prototypes from the
// support scenes and trains the gates. Prototypes of every earlier
// category are hash-checked to be byte-identical afterwards. Throws
// CategoryCollision on a duplicate category and InsufficientSupport on an
// empty session.
IncrementalResult run_incremental_session(SessionState& state,
                                          std::span<const std::string> categories,
                                          std::span<const ImprintScene> support, int epochs,
                                          double lr);

// Classifies fixed class-agnostic proposals against the current prototype
// state: base categories score 0.5 (S3 + S2), novel categories
// gamma (alpha3 S3 + alpha2 S2); the argmax wins (earlier registration
// breaks ties) and is emitted iff the fused score exceeds the floor, with
// score mapped to [0, 1] via (s + 1) / 2.
std::vector<Detection> classify_proposals(const Scene& scene,
                                          std::span<const Proposal> proposals,
                                          const Eigen::MatrixXd& f3,
                                          const Eigen::MatrixXd& f2,
                                          const SessionState& state, double score_floor);

struct SessionReport {
  int session = 0;
  std::vector<std::string> categories;  // introduced this session
  MetricsReport metrics;
  std::vector<Detection> detections;
  ImprintReport imprint;  // empty for the base session
};

struct ProtocolResult {
  BaseSessionResult base;
  std::vector<SessionReport> sessions;  // base session first
  SessionState final_state;
  nlohmann::ordered_json report;  // combined report, schema-pinned
  std::string csv;                // session x Base/Novel/All table
};

// The full protocol: generate train/val scenes, run the base session,
// then one batch session or the split's task sequence; evaluate after
// every session on the categories introduced so far. Proposals and
// features for the validation scenes are generated once and shared by all
// sessions. Deterministic in (cfg, cfg.seed).
ProtocolResult run_protocol(const SimulateConfig& cfg);

}  // namespace fi3det
