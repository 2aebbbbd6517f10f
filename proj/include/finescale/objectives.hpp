// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>

#include <Eigen/Dense>

#include "finescale/config.hpp"

namespace finescale::objectives {

/// Loss value with named components; for vicreg the components recombine as
/// total = lambda*invariance + mu*variance + nu*covariance.
struct LossReport {
  double total = 0.0;
  std::map<std::string, double> components;
  SslMethod method = SslMethod::none;
};

/// Objective hyperparameters shared by the dispatcher.
struct SslHyperparams {
  double temperature = 0.5;
  double vicreg_lambda = 25.0;
  double vicreg_mu = 25.0;
  double vicreg_nu = 1.0;
  double vicreg_gamma = 1.0;
};

SslHyperparams hyperparams_from_config(const ValidatedConfig& config);

/// Normalized-temperature cross-entropy over an interleaved batch: rows 2i
/// and 2i+1 are the positive pair. Self-similarity is excluded from each
/// softmax; the positive is included. If `grad` is non-null it receives
/// d(total)/d(batch), same shape as `batch`.
LossReport ntxent_loss(const Eigen::MatrixXd& batch, double temperature,
                       Eigen::MatrixXd* grad = nullptr);

/// Mean over rows of the squared distance between L2-normalized predictions
/// and targets (2 - 2*cos per row). Targets are constants: no gradient flows
/// into them. `grad_predictions` receives d(total)/d(predictions).
LossReport byol_loss(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& targets,
                     Eigen::MatrixXd* grad_predictions = nullptr);

/// Invariance (MSE) + variance hinge (std with 1e-4 inside the sqrt,
/// unbiased) + covariance (off-diagonal second moments / d), variance and
/// covariance averaged over the two branches.
LossReport vicreg_loss(const Eigen::MatrixXd& z1, const Eigen::MatrixXd& z2, double lambda,
                       double mu, double nu, double gamma, Eigen::MatrixXd* grad1 = nullptr,
                       Eigen::MatrixXd* grad2 = nullptr);

/// Dispatches an interleaved embedding batch (rows 2i, 2i+1 paired) to the
/// configured objective. For byol, `embeddings` holds the online predictor
/// outputs and `byol_targets` the target-network embeddings in the same
/// interleaved layout; the symmetrization pairs each prediction with the
/// partner view's target. `grad` receives d(total)/d(embeddings).
LossReport ssl_batch_loss(SslMethod method, const Eigen::MatrixXd& embeddings,
                          const Eigen::MatrixXd* byol_targets, const SslHyperparams& hp,
                          Eigen::MatrixXd* grad = nullptr);

}  // namespace finescale::objectives
