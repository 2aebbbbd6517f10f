// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/objectives.hpp"

#include <cmath>
#include <limits>

#include "finescale/error.hpp"

namespace finescale::objectives {

namespace {

constexpr double kVarianceEps = 1e-4;
constexpr double kNormFloor = 1e-30;

void require_finite(const Eigen::MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw Error(ErrorKind::format, std::string(what) + " must be finite");
}

/// Row-normalizes `z`; returns the norms. Throws ZeroNorm on a zero row.
Eigen::VectorXd normalize_rows(const Eigen::MatrixXd& z, Eigen::MatrixXd& unit) {
  Eigen::VectorXd norms = z.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (norms(i) < kNormFloor) throw Error(ErrorKind::zero_norm, "embedding row has zero norm");
  }
  unit = norms.cwiseInverse().asDiagonal() * z;
  return norms;
}

/// Pulls a gradient w.r.t. unit rows back through L2 normalization.
Eigen::MatrixXd denormalize_grad(const Eigen::MatrixXd& grad_unit, const Eigen::MatrixXd& unit,
                                 const Eigen::VectorXd& norms) {
  Eigen::MatrixXd grad = grad_unit;
  for (Eigen::Index i = 0; i < unit.rows(); ++i) {
    const double radial = grad_unit.row(i).dot(unit.row(i));
    grad.row(i) = (grad_unit.row(i) - radial * unit.row(i)) / norms(i);
  }
  return grad;
}

}  // namespace

SslHyperparams hyperparams_from_config(const ValidatedConfig& config) {
  SslHyperparams hp;
  hp.temperature = config->temperature;
  hp.vicreg_lambda = config->vicreg_lambda;
  hp.vicreg_mu = config->vicreg_mu;
  hp.vicreg_nu = config->vicreg_nu;
  hp.vicreg_gamma = config->vicreg_gamma;
  return hp;
}

LossReport ntxent_loss(const Eigen::MatrixXd& batch, double temperature, Eigen::MatrixXd* grad) {
  const Eigen::Index n = batch.rows();
  if (n < 4 || n % 2 != 0) {
    throw Error(ErrorKind::degenerate_batch, "ntxent needs an even batch of at least 4 rows");
  }
  if (batch.cols() < 2) throw Error(ErrorKind::shape, "embedding dim must be at least 2");
  if (temperature <= 0.0) throw Error(ErrorKind::config, "temperature");
  require_finite(batch, "embeddings");

  Eigen::MatrixXd unit;
  const Eigen::VectorXd norms = normalize_rows(batch, unit);
  Eigen::MatrixXd sim = (unit * unit.transpose()) / temperature;
  sim.diagonal().setConstant(-std::numeric_limits<double>::infinity());

  Eigen::MatrixXd prob(n, n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index pos = i ^ 1;
    const double row_max = sim.row(i).maxCoeff();
    Eigen::ArrayXd shifted = (sim.row(i).array() - row_max).exp();
    shifted(i) = 0.0;
    const double denom = shifted.sum();
    prob.row(i) = (shifted / denom).matrix();
    total += -(sim(i, pos) - row_max) + std::log(denom);
  }
  total /= static_cast<double>(n);

  if (grad != nullptr) {
    Eigen::MatrixXd g = prob;
    for (Eigen::Index i = 0; i < n; ++i) {
      g(i, i ^ 1) -= 1.0;
      g(i, i) = 0.0;
    }
    g /= static_cast<double>(n);
    const Eigen::MatrixXd grad_unit = ((g + g.transpose()) * unit) / temperature;
    *grad = denormalize_grad(grad_unit, unit, norms);
  }

  LossReport report;
  report.total = total;
  report.components["ntxent"] = total;
  report.method = SslMethod::simclr;
  return report;
}

LossReport byol_loss(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& targets,
                     Eigen::MatrixXd* grad_predictions) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw Error(ErrorKind::shape, "prediction and target shapes differ");
  }
  if (predictions.rows() < 1 || predictions.cols() < 2) {
    throw Error(ErrorKind::degenerate_batch, "byol needs at least one row of dim >= 2");
  }
  require_finite(predictions, "predictions");
  require_finite(targets, "targets");

  const Eigen::Index n = predictions.rows();
  Eigen::MatrixXd p_unit, t_unit;
  const Eigen::VectorXd p_norms = normalize_rows(predictions, p_unit);
  normalize_rows(targets, t_unit);

  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    total += 2.0 - 2.0 * p_unit.row(i).dot(t_unit.row(i));
  }
  total /= static_cast<double>(n);

  if (grad_predictions != nullptr) {
    // Targets are constants (stop-gradient); only the prediction branch
    // receives a gradient.
    const Eigen::MatrixXd grad_unit = (-2.0 / static_cast<double>(n)) * t_unit;
    *grad_predictions = denormalize_grad(grad_unit, p_unit, p_norms);
  }

  LossReport report;
  report.total = total;
  report.components["byol"] = total;
  report.method = SslMethod::byol;
  return report;
}

LossReport vicreg_loss(const Eigen::MatrixXd& z1, const Eigen::MatrixXd& z2, double lambda,
                       double mu, double nu, double gamma, Eigen::MatrixXd* grad1,
                       Eigen::MatrixXd* grad2) {
  if (z1.rows() != z2.rows() || z1.cols() != z2.cols()) {
    throw Error(ErrorKind::shape, "branch shapes differ");
  }
  const Eigen::Index n = z1.rows(), d = z1.cols();
  if (n < 2) throw Error(ErrorKind::degenerate_batch, "vicreg needs at least 2 rows");
  if (d < 2) throw Error(ErrorKind::shape, "embedding dim must be at least 2");
  if (lambda < 0.0 || mu < 0.0 || nu < 0.0) throw Error(ErrorKind::config, "vicreg coefficients");
  require_finite(z1, "embeddings");
  require_finite(z2, "embeddings");

  const double nd = static_cast<double>(n) * static_cast<double>(d);
  const double invariance = (z1 - z2).squaredNorm() / nd;

  double variance = 0.0;
  double covariance = 0.0;
  Eigen::MatrixXd var_grads[2], cov_grads[2];
  const Eigen::MatrixXd* branches[2] = {&z1, &z2};
  for (int b = 0; b < 2; ++b) {
    const Eigen::MatrixXd& z = *branches[b];
    const Eigen::RowVectorXd mean = z.colwise().mean();
    const Eigen::MatrixXd centered = z.rowwise() - mean;
    const Eigen::VectorXd var_dims =
        centered.colwise().squaredNorm().transpose() / static_cast<double>(n - 1);
    const Eigen::VectorXd std_dims = (var_dims.array() + kVarianceEps).sqrt();

    double hinge = 0.0;
    Eigen::MatrixXd vgrad = Eigen::MatrixXd::Zero(n, d);
    for (Eigen::Index j = 0; j < d; ++j) {
      if (std_dims(j) < gamma) {
        hinge += gamma - std_dims(j);
        vgrad.col(j) = -centered.col(j) /
                       (2.0 * static_cast<double>(d) * std_dims(j) * static_cast<double>(n - 1));
      }
    }
    variance += hinge / static_cast<double>(d);
    var_grads[b] = vgrad;

    Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    cov.diagonal().setZero();
    covariance += cov.squaredNorm() / static_cast<double>(d);
    Eigen::MatrixXd cgrad =
        (4.0 / (static_cast<double>(d) * static_cast<double>(n - 1))) * (centered * cov);
    cgrad.rowwise() -= cgrad.colwise().mean();  // centering projection
    cov_grads[b] = 0.5 * cgrad;
  }
  variance *= 0.5;
  covariance *= 0.5;

  const double total = lambda * invariance + mu * variance + nu * covariance;

  if (grad1 != nullptr || grad2 != nullptr) {
    const Eigen::MatrixXd inv_grad = (2.0 / nd) * (z1 - z2);
    if (grad1 != nullptr) *grad1 = lambda * inv_grad + mu * var_grads[0] + nu * cov_grads[0];
    if (grad2 != nullptr) *grad2 = -lambda * inv_grad + mu * var_grads[1] + nu * cov_grads[1];
  }

  LossReport report;
  report.total = total;
  report.components["invariance"] = invariance;
  report.components["variance"] = variance;
  report.components["covariance"] = covariance;
  report.method = SslMethod::vicreg;
  return report;
}

LossReport ssl_batch_loss(SslMethod method, const Eigen::MatrixXd& embeddings,
                          const Eigen::MatrixXd* byol_targets, const SslHyperparams& hp,
                          Eigen::MatrixXd* grad) {
  switch (method) {
    case SslMethod::simclr:
      return ntxent_loss(embeddings, hp.temperature, grad);
    case SslMethod::byol: {
      if (byol_targets == nullptr) throw Error(ErrorKind::shape, "byol requires target embeddings");
      if (byol_targets->rows() != embeddings.rows() || byol_targets->cols() != embeddings.cols()) {
        throw Error(ErrorKind::shape, "byol target shape differs from predictions");
      }
      if (embeddings.rows() % 2 != 0) {
        throw Error(ErrorKind::degenerate_batch, "byol needs an even interleaved batch");
      }
      // Symmetrization: prediction for view 1 regresses the partner view's
      // target and vice versa; the row mean covers both directions.
      Eigen::MatrixXd swapped(byol_targets->rows(), byol_targets->cols());
      for (Eigen::Index i = 0; i < byol_targets->rows(); ++i) {
        swapped.row(i) = byol_targets->row(i ^ 1);
      }
      return byol_loss(embeddings, swapped, grad);
    }
    case SslMethod::vicreg: {
      if (embeddings.rows() % 2 != 0) {
        throw Error(ErrorKind::degenerate_batch, "vicreg needs an even interleaved batch");
      }
      const Eigen::Index pairs = embeddings.rows() / 2;
      Eigen::MatrixXd z1(pairs, embeddings.cols()), z2(pairs, embeddings.cols());
      for (Eigen::Index i = 0; i < pairs; ++i) {
        z1.row(i) = embeddings.row(2 * i);
        z2.row(i) = embeddings.row(2 * i + 1);
      }
      Eigen::MatrixXd g1, g2;
      LossReport report =
          vicreg_loss(z1, z2, hp.vicreg_lambda, hp.vicreg_mu, hp.vicreg_nu, hp.vicreg_gamma,
                      grad != nullptr ? &g1 : nullptr, grad != nullptr ? &g2 : nullptr);
      if (grad != nullptr) {
        grad->resize(embeddings.rows(), embeddings.cols());
        for (Eigen::Index i = 0; i < pairs; ++i) {
          grad->row(2 * i) = g1.row(i);
          grad->row(2 * i + 1) = g2.row(i);
        }
      }
      return report;
    }
    case SslMethod::none:
      break;
  }
  throw Error(ErrorKind::unknown_method, "no such pretraining objective");
}

}  // namespace finescale::objectives
