#include "fi3det/losses.hpp"

#include <cmath>

namespace fi3det {

namespace {

constexpr double kClamp = 1e-7;
constexpr double kDiceSmooth = 1e-6;
constexpr double kZeroNorm = 1e-12;

double clamp_prob(double p) {
  if (p < kClamp) return kClamp;
  if (p > 1.0 - kClamp) return 1.0 - kClamp;
  return p;
}

}  // namespace

namespace {

double bce_dice_core(std::span<const double> pred, std::span<const double> target,
                     const bool* region) {
  if (pred.size() != target.size())
    throw ShapeMismatch("pred and target must agree in length");
  double bce = 0.0;
  double spw = 0.0, sp2 = 0.0, sw2 = 0.0;
  long n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (region != nullptr && !region[i]) continue;
    const double p = clamp_prob(pred[i]);
    const double w = target[i];
    bce += -(w * std::log(p) + (1.0 - w) * std::log(1.0 - p));
    spw += p * w;
    sp2 += p * p;
    sw2 += w * w;
    ++n;
  }
  if (n == 0) throw EmptyRegion("objectness loss needs at least one supervised point");
  const double dice = 1.0 - (2.0 * spw + kDiceSmooth) / (sp2 + sw2 + kDiceSmooth);
  return bce / static_cast<double>(n) + dice;
}

}  // namespace

double bce_dice_objectness(std::span<const double> pred, std::span<const double> target,
                           std::span<const bool> region) {
  if (pred.size() != region.size())
    throw ShapeMismatch("pred and region must agree in length");
  return bce_dice_core(pred, target, region.data());
}

double bce_dice_objectness(std::span<const double> pred, std::span<const double> target) {
  return bce_dice_core(pred, target, nullptr);
}

double cosine_alignment_loss(const std::vector<Eigen::VectorXd>& member_feats,
                             const Eigen::VectorXd& instance_feat,
                             std::span<const double> weights, long z) {
  if (z <= 0) throw EmptyInput("normalizer z must be positive");
  if (member_feats.size() != weights.size())
    throw ShapeMismatch("one weight per member feature required");
  const double inorm = instance_feat.norm();
  if (inorm <= kZeroNorm) throw ZeroNormFeature("instance feature has zero norm");
  double sum = 0.0;
  for (std::size_t e = 0; e < member_feats.size(); ++e) {
    const Eigen::VectorXd& f = member_feats[e];
    if (f.size() != instance_feat.size())
      throw ShapeMismatch("member and instance feature dimensions disagree");
    const double fnorm = f.norm();
    if (fnorm <= kZeroNorm) throw ZeroNormFeature("member feature has zero norm");
    const double cosv = f.dot(instance_feat) / (fnorm * inorm);
    sum += (1.0 - cosv) * weights[e];
  }
  return sum / static_cast<double>(z);
}

double weighted_diou_regression(std::span<const Box3> pred_boxes, const Box3& pseudo,
                                std::span<const double> weights, long z) {
  if (z <= 0) throw EmptyInput("normalizer z must be positive");
  if (pred_boxes.size() != weights.size())
    throw ShapeMismatch("one weight per predicted box required");
  double sum = 0.0;
  for (std::size_t e = 0; e < pred_boxes.size(); ++e)
    sum += (1.0 - diou3d(pred_boxes[e], pseudo)) * weights[e];
  return sum / static_cast<double>(z);
}

double incremental_loss(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& onehot) {
  if (scores.rows() != onehot.rows() || scores.cols() != onehot.cols())
    throw ShapeMismatch("scores and targets must agree in shape");
  if (scores.size() == 0) throw ShapeMismatch("incremental loss needs at least one entry");
  double sum = 0.0;
  for (Eigen::Index r = 0; r < scores.rows(); ++r)
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
      const double s = scores(r, c);
      const double y = onehot(r, c);
      sum += (1.0 - s) * y + s * (1.0 - y);
    }
  return sum / static_cast<double>(scores.size());
}

Eigen::MatrixXd incremental_loss_grad(const Eigen::MatrixXd& scores,
                                      const Eigen::MatrixXd& onehot) {
  if (scores.rows() != onehot.rows() || scores.cols() != onehot.cols())
    throw ShapeMismatch("scores and targets must agree in shape");
  if (scores.size() == 0) throw ShapeMismatch("incremental loss needs at least one entry");
  const double inv = 1.0 / static_cast<double>(scores.size());
  Eigen::MatrixXd g(scores.rows(), scores.cols());
  for (Eigen::Index r = 0; r < scores.rows(); ++r)
    for (Eigen::Index c = 0; c < scores.cols(); ++c) g(r, c) = (1.0 - 2.0 * onehot(r, c)) * inv;
  return g;
}

LossReport aux_total(double obj, double feat, double reg, double inc, long points, long boxes) {
  LossReport r;
  r.obj = obj;
  r.feat = feat;
  r.reg = reg;
  r.aux_total = obj + feat + reg;
  r.inc = inc;
  r.points = points;
  r.boxes = boxes;
  return r;
}

}  // namespace fi3det
