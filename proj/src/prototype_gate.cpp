#include "fi3det/prototype_gate.hpp"

#include <cmath>
#include <cstring>

#include "fi3det/losses.hpp"

namespace fi3det {

namespace {

constexpr double kZeroNorm = 1e-12;

void hash_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;  // FNV-1a
  }
}

void hash_vec(std::uint64_t& h, const Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) hash_bytes(h, &v[i], sizeof(double));
}

std::vector<double> json_to_doubles(const nlohmann::json& a) {
  std::vector<double> out;
  for (const auto& x : a) out.push_back(x.get<double>());
  return out;
}

Eigen::VectorXd json_to_vec(const nlohmann::json& a) {
  const auto d = json_to_doubles(a);
  Eigen::VectorXd v(static_cast<Eigen::Index>(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i) v[static_cast<Eigen::Index>(i)] = d[i];
  return v;
}

nlohmann::ordered_json vec_to_json(const Eigen::VectorXd& v) {
  nlohmann::ordered_json a = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

nlohmann::ordered_json mat_to_json(const Eigen::MatrixXd& m) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd json_to_mat(const nlohmann::json& a, Eigen::Index cols_hint = -1) {
  const Eigen::Index rows = static_cast<Eigen::Index>(a.size());
  Eigen::Index cols = cols_hint;
  if (rows > 0) cols = static_cast<Eigen::Index>(a.front().size());
  if (cols < 0) throw FormatError("cannot infer matrix width from empty array");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = a[static_cast<std::size_t>(r)];
    if (static_cast<Eigen::Index>(row.size()) != cols)
      throw FormatError("ragged matrix rows in state file");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace

int PrototypeStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].name == name) return static_cast<int>(i);
  return -1;
}

int register_category(PrototypeStore& store, const std::string& name, int session) {
  if (store.find(name) >= 0) throw CategoryCollision("category already registered: " + name);
  PrototypeStore::Entry e;
  e.name = name;
  e.session = session;
  e.proto3d = Eigen::VectorXd::Zero(store.l_dim);
  e.proto2d = Eigen::VectorXd::Zero(store.k_dim);
  store.entries.push_back(std::move(e));
  return static_cast<int>(store.entries.size()) - 1;
}

void update_prototype(PrototypeStore& store, const std::string& name,
                      const Eigen::VectorXd& mean3d, const Eigen::VectorXd& mean2d) {
  const int idx = store.find(name);
  if (idx < 0) throw UnknownCategory("category not registered: " + name);
  if (mean3d.size() != store.l_dim || mean2d.size() != store.k_dim)
    throw DimensionMismatch("mean feature width does not match the store");
  auto& e = store.entries[static_cast<std::size_t>(idx)];
  if (store.imprint_first && !e.initialized) {
    e.proto3d = mean3d;
    e.proto2d = mean2d;
  } else {
    const double mu = store.momentum;
    e.proto3d = mu * e.proto3d + (1.0 - mu) * mean3d;
    e.proto2d = mu * e.proto2d + (1.0 - mu) * mean2d;
  }
  e.initialized = true;
}

std::vector<int> novel_indices(const PrototypeStore& store) {
  std::vector<int> out;
  for (std::size_t i = 0; i < store.entries.size(); ++i)
    if (store.entries[i].session > 0) out.push_back(static_cast<int>(i));
  return out;
}

Eigen::MatrixXd stack_protos3(const PrototypeStore& store, std::span<const int> idx) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(idx.size()), store.l_dim);
  for (std::size_t r = 0; r < idx.size(); ++r)
    m.row(static_cast<Eigen::Index>(r)) = store.entries[static_cast<std::size_t>(idx[r])].proto3d;
  return m;
}

Eigen::MatrixXd stack_protos2(const PrototypeStore& store, std::span<const int> idx) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(idx.size()), store.k_dim);
  for (std::size_t r = 0; r < idx.size(); ++r)
    m.row(static_cast<Eigen::Index>(r)) = store.entries[static_cast<std::size_t>(idx[r])].proto2d;
  return m;
}

std::uint64_t store_hash(const PrototypeStore& store) {
  std::uint64_t h = 1469598103934665603ULL;
  hash_bytes(h, &store.l_dim, sizeof(store.l_dim));
  hash_bytes(h, &store.k_dim, sizeof(store.k_dim));
  hash_bytes(h, &store.momentum, sizeof(store.momentum));
  for (const auto& e : store.entries) {
    hash_bytes(h, e.name.data(), e.name.size());
    hash_bytes(h, &e.session, sizeof(e.session));
    const char init = e.initialized ? 1 : 0;
    hash_bytes(h, &init, 1);
    hash_vec(h, e.proto3d);
    hash_vec(h, e.proto2d);
  }
  return h;
}

Eigen::MatrixXd class_scores(const Eigen::MatrixXd& feats, const Eigen::MatrixXd& protos) {
  if (feats.cols() != protos.cols())
    throw DimensionMismatch("feature and prototype widths disagree");
  const Eigen::Index n = feats.rows(), c = protos.rows(), d = feats.cols();
  std::vector<double> fnorm(static_cast<std::size_t>(n)), pnorm(static_cast<std::size_t>(c));
  for (Eigen::Index i = 0; i < n; ++i) {
    double sq = 0.0;
    for (Eigen::Index k = 0; k < d; ++k) sq += feats(i, k) * feats(i, k);
    const double nm = std::sqrt(sq);
    if (nm <= kZeroNorm) throw ZeroNormRow("feature row has zero norm");
    fnorm[static_cast<std::size_t>(i)] = nm;
  }
  for (Eigen::Index j = 0; j < c; ++j) {
    double sq = 0.0;
    for (Eigen::Index k = 0; k < d; ++k) sq += protos(j, k) * protos(j, k);
    const double nm = std::sqrt(sq);
    if (nm <= kZeroNorm) throw ZeroNormRow("prototype row has zero norm");
    pnorm[static_cast<std::size_t>(j)] = nm;
  }
  // Scalar per-pair loops: each (row, category) score is a self-contained
  // dot product, so scores never shift when other categories join.
  Eigen::MatrixXd s(n, c);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < c; ++j) {
      double dot = 0.0;
      for (Eigen::Index k = 0; k < d; ++k) dot += feats(i, k) * protos(j, k);
      double v = dot / (fnorm[static_cast<std::size_t>(i)] * pnorm[static_cast<std::size_t>(j)]);
      if (v > 1.0) v = 1.0;
      if (v < -1.0) v = -1.0;
      s(i, j) = v;
    }
  return s;
}

GateParams make_gates(int l_dim, int k_dim, int novel_count, std::uint64_t seed, int hidden) {
  GateParams g;
  g.input_dim = l_dim + k_dim;
  g.hidden = hidden;
  g.novel_count = novel_count;
  const double bound = 1.0 / std::sqrt(static_cast<double>(g.input_dim));
  Rng rng(seed);
  auto fill = [&](Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
  };
  g.a_w1.resize(hidden, g.input_dim);
  fill(g.a_w1);
  g.a_b1 = Eigen::VectorXd::Zero(hidden);
  g.a_w2 = Eigen::MatrixXd::Zero(2, hidden);
  g.a_b2 = Eigen::VectorXd::Zero(2);
  g.g_w1.resize(hidden, g.input_dim);
  fill(g.g_w1);
  g.g_b1 = Eigen::VectorXd::Zero(hidden);
  g.g_w2 = Eigen::MatrixXd::Zero(novel_count, hidden);
  g.g_b2 = Eigen::VectorXd::Zero(novel_count);
  return g;
}

void extend_novel(GateParams& g, int added) {
  if (added < 0) throw DimensionMismatch("cannot extend by a negative count");
  if (added == 0) return;
  Eigen::MatrixXd w2 = Eigen::MatrixXd::Zero(g.novel_count + added, g.hidden);
  w2.topRows(g.novel_count) = g.g_w2;
  Eigen::VectorXd b2 = Eigen::VectorXd::Zero(g.novel_count + added);
  b2.head(g.novel_count) = g.g_b2;
  g.g_w2 = std::move(w2);
  g.g_b2 = std::move(b2);
  g.novel_count += added;
}

namespace {

struct GateForwardCache {
  Eigen::VectorXd x;            // concatenated input
  Eigen::VectorXd a_pre, a_h;   // alpha hidden pre/post ReLU
  Eigen::VectorXd g_pre, g_h;   // gamma hidden pre/post ReLU
  Eigen::Vector2d a_logit;
  Eigen::Vector2d alpha;
  Eigen::VectorXd g_logit;
  Eigen::VectorXd gamma;
};

GateForwardCache gate_forward_cached(const Eigen::VectorXd& f3, const Eigen::VectorXd& f2,
                                     const GateParams& g) {
  if (f3.size() + f2.size() != g.input_dim)
    throw DimensionMismatch("gate input width does not match the parameters");
  GateForwardCache c;
  c.x.resize(g.input_dim);
  c.x << f3, f2;
  c.a_pre = g.a_w1 * c.x + g.a_b1;
  c.a_h = c.a_pre.cwiseMax(0.0);
  c.a_logit = g.a_w2 * c.a_h + g.a_b2;
  const double m = std::max(c.a_logit[0], c.a_logit[1]);
  const double e0 = std::exp(c.a_logit[0] - m), e1 = std::exp(c.a_logit[1] - m);
  // The complement form keeps alpha3 + alpha2 == 1 exact in floating point.
  const double a0 = e0 / (e0 + e1);
  c.alpha << a0, 1.0 - a0;
  c.g_pre = g.g_w1 * c.x + g.g_b1;
  c.g_h = c.g_pre.cwiseMax(0.0);
  c.g_logit = g.g_w2 * c.g_h + g.g_b2;
  c.gamma.resize(c.g_logit.size());
  if (g.gamma_softmax) {
    const double gm = c.g_logit.maxCoeff();
    double denom = 0.0;
    for (Eigen::Index i = 0; i < c.g_logit.size(); ++i) denom += std::exp(c.g_logit[i] - gm);
    for (Eigen::Index i = 0; i < c.g_logit.size(); ++i)
      c.gamma[i] = std::exp(c.g_logit[i] - gm) / denom;
  } else {
    for (Eigen::Index i = 0; i < c.g_logit.size(); ++i)
      c.gamma[i] = 1.0 / (1.0 + std::exp(-c.g_logit[i]));
  }
  return c;
}

}  // namespace

GateOutput gate_forward(const Eigen::VectorXd& f3, const Eigen::VectorXd& f2,
                        const GateParams& g) {
  const GateForwardCache c = gate_forward_cached(f3, f2, g);
  GateOutput out;
  out.alpha3 = c.alpha[0];
  out.alpha2 = c.alpha[1];
  out.gamma = c.gamma;
  return out;
}

Eigen::VectorXd fuse_scores(const Eigen::VectorXd& s3, const Eigen::VectorXd& s2,
                            double alpha3, double alpha2, const Eigen::VectorXd& gamma) {
  if (s3.size() != s2.size() || s3.size() != gamma.size())
    throw ShapeMismatch("score and gamma widths disagree");
  Eigen::VectorXd out(s3.size());
  for (Eigen::Index i = 0; i < s3.size(); ++i)
    out[i] = gamma[i] * (alpha3 * s3[i] + alpha2 * s2[i]);
  return out;
}

Eigen::MatrixXd fuse_scores(const Eigen::MatrixXd& s3, const Eigen::MatrixXd& s2,
                            const Eigen::VectorXd& alpha3, const Eigen::VectorXd& alpha2,
                            const Eigen::MatrixXd& gamma) {
  if (s3.rows() != s2.rows() || s3.cols() != s2.cols() || s3.rows() != gamma.rows() ||
      s3.cols() != gamma.cols() || alpha3.size() != s3.rows() || alpha2.size() != s3.rows())
    throw ShapeMismatch("fusion inputs disagree in shape");
  Eigen::MatrixXd out(s3.rows(), s3.cols());
  for (Eigen::Index r = 0; r < s3.rows(); ++r)
    for (Eigen::Index c = 0; c < s3.cols(); ++c)
      out(r, c) = gamma(r, c) * (alpha3[r] * s3(r, c) + alpha2[r] * s2(r, c));
  return out;
}

namespace {

struct LossWork {
  Eigen::MatrixXd s3, s2;  // per-sample novel-category cosine scores
  Eigen::MatrixXd onehot;
};

LossWork prepare_loss_work(std::span<const SupportSample> support,
                           const Eigen::MatrixXd& proto3, const Eigen::MatrixXd& proto2) {
  if (support.empty()) throw EmptySupport("no support samples");
  if (proto3.rows() == 0) throw EmptySupport("no novel prototypes to score against");
  const Eigen::Index n = static_cast<Eigen::Index>(support.size());
  Eigen::MatrixXd f3(n, proto3.cols()), f2(n, proto2.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = support[static_cast<std::size_t>(i)];
    if (s.f3.size() != proto3.cols() || s.f2.size() != proto2.cols())
      throw DimensionMismatch("support sample width does not match the prototypes");
    if (s.label < 0 || s.label >= proto3.rows())
      throw UnknownCategory("support label outside the novel registry");
    f3.row(i) = s.f3;
    f2.row(i) = s.f2;
  }
  LossWork w;
  w.s3 = class_scores(f3, proto3);
  w.s2 = class_scores(f2, proto2);
  w.onehot = Eigen::MatrixXd::Zero(n, proto3.rows());
  for (Eigen::Index i = 0; i < n; ++i)
    w.onehot(i, support[static_cast<std::size_t>(i)].label) = 1.0;
  return w;
}

}  // namespace

double gate_loss(std::span<const SupportSample> support, const GateParams& g,
                 const Eigen::MatrixXd& proto3, const Eigen::MatrixXd& proto2) {
  return gate_loss_grads(support, g, proto3, proto2, nullptr);
}

double gate_loss_grads(std::span<const SupportSample> support, const GateParams& g,
                       const Eigen::MatrixXd& proto3, const Eigen::MatrixXd& proto2,
                       GateGrads* out) {
  const LossWork w = prepare_loss_work(support, proto3, proto2);
  const Eigen::Index n = w.s3.rows(), c = w.s3.cols();

  if (out != nullptr) {
    out->a_w1 = Eigen::MatrixXd::Zero(g.a_w1.rows(), g.a_w1.cols());
    out->a_b1 = Eigen::VectorXd::Zero(g.a_b1.size());
    out->a_w2 = Eigen::MatrixXd::Zero(g.a_w2.rows(), g.a_w2.cols());
    out->a_b2 = Eigen::VectorXd::Zero(g.a_b2.size());
    out->g_w1 = Eigen::MatrixXd::Zero(g.g_w1.rows(), g.g_w1.cols());
    out->g_b1 = Eigen::VectorXd::Zero(g.g_b1.size());
    out->g_w2 = Eigen::MatrixXd::Zero(g.g_w2.rows(), g.g_w2.cols());
    out->g_b2 = Eigen::VectorXd::Zero(g.g_b2.size());
  }

  Eigen::MatrixXd fused(n, c);
  std::vector<GateForwardCache> caches;
  caches.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = support[static_cast<std::size_t>(i)];
    caches.push_back(gate_forward_cached(s.f3, s.f2, g));
    const auto& cc = caches.back();
    for (Eigen::Index j = 0; j < c; ++j)
      fused(i, j) = cc.gamma[j] * (cc.alpha[0] * w.s3(i, j) + cc.alpha[1] * w.s2(i, j));
  }
  const double loss = incremental_loss(fused, w.onehot);
  if (out == nullptr) return loss;

  const Eigen::MatrixXd dL_ds = incremental_loss_grad(fused, w.onehot);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& cc = caches[static_cast<std::size_t>(i)];
    // Gamma head: ds/dgamma_j = alpha . (s3, s2)_j.
    Eigen::VectorXd dgamma(c);
    double u1 = 0.0, u2 = 0.0;  // dL/dalpha3, dL/dalpha2
    for (Eigen::Index j = 0; j < c; ++j) {
      const double gj = dL_ds(i, j);
      dgamma[j] = gj * (cc.alpha[0] * w.s3(i, j) + cc.alpha[1] * w.s2(i, j));
      u1 += gj * cc.gamma[j] * w.s3(i, j);
      u2 += gj * cc.gamma[j] * w.s2(i, j);
    }
    Eigen::VectorXd dz_g(c);
    if (g.gamma_softmax) {
      const double inner = cc.gamma.dot(dgamma);
      for (Eigen::Index j = 0; j < c; ++j) dz_g[j] = cc.gamma[j] * (dgamma[j] - inner);
    } else {
      for (Eigen::Index j = 0; j < c; ++j)
        dz_g[j] = dgamma[j] * cc.gamma[j] * (1.0 - cc.gamma[j]);
    }
    // Alpha head softmax backward over the two logits.
    const double inner_a = cc.alpha[0] * u1 + cc.alpha[1] * u2;
    Eigen::Vector2d dz_a(cc.alpha[0] * (u1 - inner_a), cc.alpha[1] * (u2 - inner_a));

    out->g_w2.noalias() += dz_g * cc.g_h.transpose();
    out->g_b2 += dz_g;
    Eigen::VectorXd dh_g = g.g_w2.transpose() * dz_g;
    for (Eigen::Index k = 0; k < dh_g.size(); ++k)
      if (cc.g_pre[k] <= 0.0) dh_g[k] = 0.0;
    out->g_w1.noalias() += dh_g * cc.x.transpose();
    out->g_b1 += dh_g;

    out->a_w2.noalias() += dz_a * cc.a_h.transpose();
    out->a_b2 += dz_a;
    Eigen::VectorXd dh_a = g.a_w2.transpose() * dz_a;
    for (Eigen::Index k = 0; k < dh_a.size(); ++k)
      if (cc.a_pre[k] <= 0.0) dh_a[k] = 0.0;
    out->a_w1.noalias() += dh_a * cc.x.transpose();
    out->a_b1 += dh_a;
  }
  return loss;
}

void train_gates(std::span<const SupportSample> support, GateParams& g,
                 const PrototypeStore& store, int epochs, double lr,
                 std::vector<double>& loss_trace) {
  if (support.empty()) throw EmptySupport("no support samples");
  if (!(lr > 0.0)) throw EmptyInput("learning rate must be positive");
  const std::vector<int> novel = novel_indices(store);
  if (novel.empty()) throw EmptySupport("store has no novel categories");
  if (static_cast<int>(novel.size()) != g.novel_count)
    throw DimensionMismatch("gate output width does not match the novel registry");

  // Only categories that actually received an imprint can be scored; the
  // gamma rows of absent categories stay at their neutral zero init.
  std::vector<int> cols;       // positions within the novel registry
  std::vector<int> store_idx;  // matching store entry indices
  for (std::size_t j = 0; j < novel.size(); ++j)
    if (store.entries[static_cast<std::size_t>(novel[j])].initialized) {
      cols.push_back(static_cast<int>(j));
      store_idx.push_back(novel[j]);
    }
  if (cols.empty()) throw EmptySupport("no imprinted novel prototypes");
  const Eigen::MatrixXd p3 = stack_protos3(store, store_idx);
  const Eigen::MatrixXd p2 = stack_protos2(store, store_idx);

  std::vector<SupportSample> remapped(support.begin(), support.end());
  for (auto& s : remapped) {
    int col = -1;
    for (std::size_t j = 0; j < cols.size(); ++j)
      if (cols[j] == s.label) col = static_cast<int>(j);
    if (col < 0) throw UnknownCategory("support label has no imprinted prototype");
    s.label = col;
  }

  GateParams sub = g;
  sub.novel_count = static_cast<int>(cols.size());
  sub.g_w2.resize(sub.novel_count, g.hidden);
  sub.g_b2.resize(sub.novel_count);
  for (std::size_t j = 0; j < cols.size(); ++j) {
    sub.g_w2.row(static_cast<Eigen::Index>(j)) = g.g_w2.row(cols[j]);
    sub.g_b2[static_cast<Eigen::Index>(j)] = g.g_b2[cols[j]];
  }

  const std::uint64_t before = store_hash(store);
  GateGrads grads;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double loss = gate_loss_grads(remapped, sub, p3, p2, &grads);
    loss_trace.push_back(loss);
    if (!std::isfinite(loss)) throw NonFiniteLoss("gate training diverged");
    sub.a_w1 -= lr * grads.a_w1;
    sub.a_b1 -= lr * grads.a_b1;
    sub.a_w2 -= lr * grads.a_w2;
    sub.a_b2 -= lr * grads.a_b2;
    sub.g_w1 -= lr * grads.g_w1;
    sub.g_b1 -= lr * grads.g_b1;
    sub.g_w2 -= lr * grads.g_w2;
    sub.g_b2 -= lr * grads.g_b2;
  }
  const double final_loss = gate_loss(remapped, sub, p3, p2);
  loss_trace.push_back(final_loss);
  if (!std::isfinite(final_loss)) throw NonFiniteLoss("gate training diverged");
  if (store_hash(store) != before)
    throw Error("prototype store changed during gate training");

  g.a_w1 = sub.a_w1;
  g.a_b1 = sub.a_b1;
  g.a_w2 = sub.a_w2;
  g.a_b2 = sub.a_b2;
  g.g_w1 = sub.g_w1;
  g.g_b1 = sub.g_b1;
  for (std::size_t j = 0; j < cols.size(); ++j) {
    g.g_w2.row(cols[j]) = sub.g_w2.row(static_cast<Eigen::Index>(j));
    g.g_b2[cols[j]] = sub.g_b2[static_cast<Eigen::Index>(j)];
  }
}

ImprintReport imprint_session(std::span<const ImprintScene> scenes,
                              std::span<const std::string> session_categories,
                              PrototypeStore& store, GateParams& g, int epochs, double lr) {
  ImprintReport report;
  std::vector<bool> touched(session_categories.size(), false);

  // Prototype pass: per-scene per-category mean of the positive features,
  // folded into the store in scene input order.
  for (const ImprintScene& scene : scenes) {
    for (const PositiveSet& ps : scene) {
      if (ps.f3.empty()) continue;
      if (ps.f3.size() != ps.f2.size())
        throw ShapeMismatch("per-sample 3D and 2D positives must pair up");
      Eigen::VectorXd m3 = Eigen::VectorXd::Zero(store.l_dim);
      Eigen::VectorXd m2 = Eigen::VectorXd::Zero(store.k_dim);
      for (std::size_t i = 0; i < ps.f3.size(); ++i) {
        if (ps.f3[i].size() != store.l_dim || ps.f2[i].size() != store.k_dim)
          throw DimensionMismatch("positive feature width does not match the store");
        m3 += ps.f3[i];
        m2 += ps.f2[i];
      }
      m3 /= static_cast<double>(ps.f3.size());
      m2 /= static_cast<double>(ps.f2.size());
      update_prototype(store, ps.category, m3, m2);
      for (std::size_t k = 0; k < session_categories.size(); ++k)
        if (session_categories[k] == ps.category) touched[k] = true;
    }
  }
  for (std::size_t k = 0; k < session_categories.size(); ++k)
    if (!touched[k]) report.categories_without_positives.push_back(session_categories[k]);

  // Gate pass: every positive sample, labelled by its novel-registry slot.
  const std::vector<int> novel = novel_indices(store);
  std::vector<SupportSample> samples;
  for (const ImprintScene& scene : scenes) {
    for (const PositiveSet& ps : scene) {
      int label = -1;
      for (std::size_t j = 0; j < novel.size(); ++j)
        if (store.entries[static_cast<std::size_t>(novel[j])].name == ps.category)
          label = static_cast<int>(j);
      if (label < 0) throw UnknownCategory("positive set for unregistered category: " + ps.category);
      for (std::size_t i = 0; i < ps.f3.size(); ++i)
        samples.push_back({ps.f3[i], ps.f2[i], label});
    }
  }
  if (!samples.empty()) train_gates(samples, g, store, epochs, lr, report.loss_trace);
  return report;
}

nlohmann::ordered_json store_to_json(const PrototypeStore& store) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["l_dim"] = store.l_dim;
  j["k_dim"] = store.k_dim;
  j["momentum"] = store.momentum;
  j["imprint_first"] = store.imprint_first;
  nlohmann::ordered_json cats = nlohmann::ordered_json::array();
  for (const auto& e : store.entries) {
    nlohmann::ordered_json c;
    c["name"] = e.name;
    c["session"] = e.session;
    c["initialized"] = e.initialized;
    c["proto3d"] = vec_to_json(e.proto3d);
    c["proto2d"] = vec_to_json(e.proto2d);
    cats.push_back(std::move(c));
  }
  j["categories"] = std::move(cats);
  return j;
}

PrototypeStore store_from_json(const nlohmann::json& j) {
  if (!j.contains("version") || j.at("version").get<int>() != 1)
    throw FormatError("unsupported prototype store version");
  PrototypeStore s(j.at("l_dim").get<int>(), j.at("k_dim").get<int>(),
                   j.at("momentum").get<double>());
  s.imprint_first = j.at("imprint_first").get<bool>();
  for (const auto& c : j.at("categories")) {
    PrototypeStore::Entry e;
    e.name = c.at("name").get<std::string>();
    e.session = c.at("session").get<int>();
    e.initialized = c.at("initialized").get<bool>();
    e.proto3d = json_to_vec(c.at("proto3d"));
    e.proto2d = json_to_vec(c.at("proto2d"));
    if (e.proto3d.size() != s.l_dim || e.proto2d.size() != s.k_dim)
      throw FormatError("prototype width does not match the store header");
    s.entries.push_back(std::move(e));
  }
  return s;
}

nlohmann::ordered_json gates_to_json(const GateParams& g) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["input_dim"] = g.input_dim;
  j["hidden"] = g.hidden;
  j["novel_count"] = g.novel_count;
  j["gamma_softmax"] = g.gamma_softmax;
  nlohmann::ordered_json a, gm;
  a["w1"] = mat_to_json(g.a_w1);
  a["b1"] = vec_to_json(g.a_b1);
  a["w2"] = mat_to_json(g.a_w2);
  a["b2"] = vec_to_json(g.a_b2);
  gm["w1"] = mat_to_json(g.g_w1);
  gm["b1"] = vec_to_json(g.g_b1);
  gm["w2"] = mat_to_json(g.g_w2);
  gm["b2"] = vec_to_json(g.g_b2);
  j["alpha"] = std::move(a);
  j["gamma"] = std::move(gm);
  return j;
}

GateParams gates_from_json(const nlohmann::json& j) {
  if (!j.contains("version") || j.at("version").get<int>() != 1)
    throw FormatError("unsupported gate parameter version");
  GateParams g;
  g.input_dim = j.at("input_dim").get<int>();
  g.hidden = j.at("hidden").get<int>();
  g.novel_count = j.at("novel_count").get<int>();
  g.gamma_softmax = j.at("gamma_softmax").get<bool>();
  const auto& a = j.at("alpha");
  const auto& gm = j.at("gamma");
  g.a_w1 = json_to_mat(a.at("w1"), g.input_dim);
  g.a_b1 = json_to_vec(a.at("b1"));
  g.a_w2 = json_to_mat(a.at("w2"), g.hidden);
  g.a_b2 = json_to_vec(a.at("b2"));
  g.g_w1 = json_to_mat(gm.at("w1"), g.input_dim);
  g.g_b1 = json_to_vec(gm.at("b1"));
  g.g_w2 = json_to_mat(gm.at("w2"), g.hidden);
  g.g_b2 = json_to_vec(gm.at("b2"));
  if (g.a_w1.rows() != g.hidden || g.a_w1.cols() != g.input_dim || g.a_w2.rows() != 2 ||
      g.g_w2.rows() != g.novel_count || g.g_b2.size() != g.novel_count)
    throw FormatError("gate parameter shapes are inconsistent");
  return g;
}

}  // namespace fi3det
