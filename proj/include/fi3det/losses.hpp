#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "fi3det/errors.hpp"
#include "fi3det/geometry.hpp"

namespace fi3det {

// Aggregate of the auxiliary losses computed for one scene plus the
// incremental classification loss. aux_total is always obj + feat + reg.
struct LossReport {
  double obj = 0.0;
  double feat = 0.0;
  double reg = 0.0;
  double aux_total = 0.0;
  double inc = 0.0;
  long points = 0;  // member points contributing to the weighted losses
  long boxes = 0;   // pseudo boxes contributing
};

// Mean binary cross-entropy plus soft Dice over the masked region.
// Predictions are clamped to [1e-7, 1 - 1e-7] before the logs; the Dice
// term uses squared sums in the denominator with smoothing 1e-6, so a
// prediction that matches the target exactly contributes zero Dice loss.
// Throws EmptyRegion when the mask selects nothing, ShapeMismatch on
// length disagreements.
double bce_dice_objectness(std::span<const double> pred, std::span<const double> target,
                           std::span<const bool> region);
double bce_dice_objectness(std::span<const double> pred, std::span<const double> target);

// (1/z) * sum_e (1 - cos(member_e, instance)) * w_e. Throws
// ZeroNormFeature when any participating vector has (near-)zero norm,
// ShapeMismatch on dimension or length disagreements, EmptyInput when
// z <= 0.
double cosine_alignment_loss(const std::vector<Eigen::VectorXd>& member_feats,
                             const Eigen::VectorXd& instance_feat,
                             std::span<const double> weights, long z);

// (1/z) * sum_e (1 - diou3d(pred_e, pseudo)) * w_e. Same error contract
// as cosine_alignment_loss minus the norm checks.
double weighted_diou_regression(std::span<const Box3> pred_boxes, const Box3& pseudo,
                                std::span<const double> weights, long z);

// Mean over all entries of (1 - s) * y + s * (1 - y). scores and onehot
// must agree in shape and be non-empty; throws ShapeMismatch otherwise.
double incremental_loss(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& onehot);

// Analytic gradient of incremental_loss with respect to every score:
// (1 - 2 y) / (rows * cols).
Eigen::MatrixXd incremental_loss_grad(const Eigen::MatrixXd& scores,
                                      const Eigen::MatrixXd& onehot);

// Assembles the report; aux_total is the plain unweighted sum.
LossReport aux_total(double obj, double feat, double reg, double inc, long points, long boxes);

}  // namespace fi3det
