// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "finescale/config.hpp"
#include "finescale/nets.hpp"

namespace finescale::optim {

/// Gradient-descent rule over a fixed parameter list. Step applies the
/// accumulated gradients; moments are serializable so resumed runs continue
/// the exact trajectory.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(double lr) = 0;
  virtual void save_state(const std::string& path) const = 0;
  virtual void load_state(const std::string& path) = 0;
};

/// Layerwise-adaptive momentum SGD: per tensor, the learning rate is scaled
/// by trust * ||theta|| / (||g|| + wd * ||theta|| + eps) when both norms are
/// positive, 1 otherwise.
class Lars : public Optimizer {
 public:
  Lars(std::vector<nets::Parameter*> params, double momentum, double weight_decay,
       double trust_coefficient);
  void step(double lr) override;
  void save_state(const std::string& path) const override;
  void load_state(const std::string& path) override;

 private:
  std::vector<nets::Parameter*> params_;
  std::vector<Tensor> velocity_;
  double momentum_, weight_decay_, trust_;
};

class Sgd : public Optimizer {
 public:
  Sgd(std::vector<nets::Parameter*> params, double momentum, double weight_decay);
  void step(double lr) override;
  void save_state(const std::string& path) const override;
  void load_state(const std::string& path) override;

 private:
  std::vector<nets::Parameter*> params_;
  std::vector<Tensor> velocity_;
  double momentum_, weight_decay_;
};

class Adam : public Optimizer {
 public:
  Adam(std::vector<nets::Parameter*> params, double weight_decay, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  void step(double lr) override;
  void save_state(const std::string& path) const override;
  void load_state(const std::string& path) override;

 private:
  std::vector<nets::Parameter*> params_;
  std::vector<Tensor> m_, v_;
  double weight_decay_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, std::vector<nets::Parameter*> params,
                                          const ValidatedConfig& config);

/// Linear warmup to `base` over `warmup_epochs`, then cosine decay to zero
/// across the remaining epochs.
double cosine_warmup_lr(double base, int epoch, int total_epochs, int warmup_epochs);

}  // namespace finescale::optim
