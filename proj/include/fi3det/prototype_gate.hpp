#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fi3det/errors.hpp"
#include "fi3det/rng.hpp"
#include "json.hpp"

namespace fi3det {

// One prototype pair per category. Categories keep their registration
// order; that order is the tie-break authority everywhere a winner must
// be picked among equal scores.
struct PrototypeStore {
  struct Entry {
    std::string name;
    int session = 0;  // 0 = base vocabulary, >= 1 = incremental session
    Eigen::VectorXd proto3d;
    Eigen::VectorXd proto2d;
    bool initialized = false;
  };

  int l_dim = 0;  // 3D feature width
  int k_dim = 0;  // aligned 2D feature width
  double momentum = 0.999;
  bool imprint_first = true;  // first update copies the mean instead of blending with zero

  std::vector<Entry> entries;

  PrototypeStore() = default;
  PrototypeStore(int l, int k, double mu = 0.999) : l_dim(l), k_dim(k), momentum(mu) {}

  int find(const std::string& name) const;  // -1 when absent
};

// Registers a category with zeroed prototypes. Throws CategoryCollision on
// duplicate names.
int register_category(PrototypeStore& store, const std::string& name, int session);

// Momentum update T <- mu T + (1 - mu) mean. In imprint-first mode the
// very first update copies the mean directly. Throws UnknownCategory and
// DimensionMismatch.
void update_prototype(PrototypeStore& store, const std::string& name,
                      const Eigen::VectorXd& mean3d, const Eigen::VectorXd& mean2d);

// Registration-order indices of categories from incremental sessions.
std::vector<int> novel_indices(const PrototypeStore& store);

// Stacks the selected categories' prototypes as rows.
Eigen::MatrixXd stack_protos3(const PrototypeStore& store, std::span<const int> idx);
Eigen::MatrixXd stack_protos2(const PrototypeStore& store, std::span<const int> idx);

// Content hash over every field of the store, used to prove that gate
// training leaves prototypes untouched.
std::uint64_t store_hash(const PrototypeStore& store);

// Cosine similarity of every feature row against every prototype row,
// clamped into [-1, 1]. Computed as explicit per-pair dot products so a
// category's column never depends on which other categories are present.
// Throws ZeroNormRow and DimensionMismatch.
Eigen::MatrixXd class_scores(const Eigen::MatrixXd& feats, const Eigen::MatrixXd& protos);

// Two small perceptrons over the concatenated [f3; f2] input: alpha_net
// emits two logits softmaxed into modality weights, gamma_net emits one
// logit per novel category, squashed by sigmoid (softmax across categories
// behind the flag). Output layers start at zero so the initial gates are
// exactly neutral: alpha = (0.5, 0.5), gamma = 0.5.
struct GateParams {
  int input_dim = 0;
  int hidden = 64;
  int novel_count = 0;
  bool gamma_softmax = false;

  Eigen::MatrixXd a_w1, a_w2;  // hidden x input, 2 x hidden
  Eigen::VectorXd a_b1, a_b2;
  Eigen::MatrixXd g_w1, g_w2;  // hidden x input, novel x hidden
  Eigen::VectorXd g_b1, g_b2;
};

GateParams make_gates(int l_dim, int k_dim, int novel_count, std::uint64_t seed,
                      int hidden = 64);

// Appends zero rows for newly registered novel categories; existing rows
// (and therefore existing behavior) are untouched.
void extend_novel(GateParams& g, int added);

struct GateOutput {
  double alpha3 = 0.5;
  double alpha2 = 0.5;
  Eigen::VectorXd gamma;
};

GateOutput gate_forward(const Eigen::VectorXd& f3, const Eigen::VectorXd& f2,
                        const GateParams& g);

// Gated fusion gamma * (a3 * s3 + a2 * s2), row-wise over score matrices.
Eigen::VectorXd fuse_scores(const Eigen::VectorXd& s3, const Eigen::VectorXd& s2,
                            double alpha3, double alpha2, const Eigen::VectorXd& gamma);
Eigen::MatrixXd fuse_scores(const Eigen::MatrixXd& s3, const Eigen::MatrixXd& s2,
                            const Eigen::VectorXd& alpha3, const Eigen::VectorXd& alpha2,
                            const Eigen::MatrixXd& gamma);

// One labelled support sample: per-modality features plus the index of its
// category within the novel registry.
struct SupportSample {
  Eigen::VectorXd f3;
  Eigen::VectorXd f2;
  int label = -1;
};

struct GateGrads {
  Eigen::MatrixXd a_w1, a_w2, g_w1, g_w2;
  Eigen::VectorXd a_b1, a_b2, g_b1, g_b2;
};

// Full-batch loss of the gated scores against one-hot labels over the
// given (frozen) novel prototypes, and its hand-derived gradients.
double gate_loss(std::span<const SupportSample> support, const GateParams& g,
                 const Eigen::MatrixXd& proto3, const Eigen::MatrixXd& proto2);
double gate_loss_grads(std::span<const SupportSample> support, const GateParams& g,
                       const Eigen::MatrixXd& proto3, const Eigen::MatrixXd& proto2,
                       GateGrads* out);

// Plain full-batch gradient descent on the incremental loss; prototypes
// are read-only throughout. Appends epochs + 1 loss values to the trace
// (one per epoch plus the final state). Throws EmptySupport and
// NonFiniteLoss (the trace keeps everything recorded so far).
void train_gates(std::span<const SupportSample> support, GateParams& g,
                 const PrototypeStore& store, int epochs, double lr,
                 std::vector<double>& loss_trace);

// Positive samples of one category within one support scene.
struct PositiveSet {
  std::string category;
  std::vector<Eigen::VectorXd> f3;
  std::vector<Eigen::VectorXd> f2;
};
using ImprintScene = std::vector<PositiveSet>;

struct ImprintReport {
  std::vector<std::string> categories_without_positives;
  std::vector<double> loss_trace;
};

// Imprints per-scene mean positive features into the prototypes (scenes in
// input order), then trains the gates on every positive sample. Categories
// that never produced a positive are reported, not fatal.
ImprintReport imprint_session(std::span<const ImprintScene> scenes,
                              std::span<const std::string> session_categories,
                              PrototypeStore& store, GateParams& g, int epochs, double lr);

// Versioned JSON snapshots; field names are pinned by the schema files.
nlohmann::ordered_json store_to_json(const PrototypeStore& store);
PrototypeStore store_from_json(const nlohmann::json& j);
nlohmann::ordered_json gates_to_json(const GateParams& g);
GateParams gates_from_json(const nlohmann::json& j);

}  // namespace fi3det
