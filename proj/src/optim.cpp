// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/optim.hpp"

#include <cmath>
#include <fstream>

#include "finescale/error.hpp"

namespace finescale::optim {

namespace {

constexpr double kLarsEps = 1e-9;
constexpr std::uint32_t kStateMagic = 0x46534f50u;  // "FSOP"

double tensor_norm(const Tensor& t) {
  double sq = 0.0;
  for (std::int64_t i = 0; i < t.numel(); ++i) sq += t[i] * t[i];
  return std::sqrt(sq);
}

void require_finite_grad(const nets::Parameter& p) {
  if (!p.grad.all_finite()) {
    throw Error(ErrorKind::non_finite_gradient, "gradient of " + p.name);
  }
}

void write_moments(const std::string& path, const std::vector<const std::vector<Tensor>*>& groups,
                   std::int64_t step_count) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(&kStateMagic), sizeof(kStateMagic));
  out.write(reinterpret_cast<const char*>(&step_count), sizeof(step_count));
  const std::uint64_t ngroups = groups.size();
  out.write(reinterpret_cast<const char*>(&ngroups), sizeof(ngroups));
  for (const auto* group : groups) {
    const std::uint64_t n = group->size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    for (const Tensor& t : *group) {
      const std::uint64_t numel = static_cast<std::uint64_t>(t.numel());
      out.write(reinterpret_cast<const char*>(&numel), sizeof(numel));
      out.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
  }
  if (!out) throw Error(ErrorKind::io, "failed writing '" + path + "'");
}

void read_moments(const std::string& path, const std::vector<std::vector<Tensor>*>& groups,
                  std::int64_t* step_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read '" + path + "'");
  std::uint32_t magic = 0;
  in.read(reinterpret_cast<char*>(&magic), sizeof(magic));
  if (!in || magic != kStateMagic) {
    throw Error(ErrorKind::format, "not an optimizer state file: '" + path + "'");
  }
  std::int64_t steps = 0;
  in.read(reinterpret_cast<char*>(&steps), sizeof(steps));
  if (step_count != nullptr) *step_count = steps;
  std::uint64_t ngroups = 0;
  in.read(reinterpret_cast<char*>(&ngroups), sizeof(ngroups));
  if (!in || ngroups != groups.size()) {
    throw Error(ErrorKind::structure_mismatch, "optimizer state group count");
  }
  for (auto* group : groups) {
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (!in || n != group->size()) {
      throw Error(ErrorKind::structure_mismatch, "optimizer state tensor count");
    }
    for (Tensor& t : *group) {
      std::uint64_t numel = 0;
      in.read(reinterpret_cast<char*>(&numel), sizeof(numel));
      if (!in || numel != static_cast<std::uint64_t>(t.numel())) {
        throw Error(ErrorKind::structure_mismatch, "optimizer state tensor size");
      }
      in.read(reinterpret_cast<char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
      if (!in) throw Error(ErrorKind::format, "truncated optimizer state");
    }
  }
}

std::vector<Tensor> zeros_for(const std::vector<nets::Parameter*>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const nets::Parameter* p : params) out.push_back(Tensor::zeros_like(p->value));
  return out;
}

std::vector<nets::Parameter*> trainable_only(std::vector<nets::Parameter*> params) {
  std::vector<nets::Parameter*> out;
  out.reserve(params.size());
  for (nets::Parameter* p : params) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// LARS

Lars::Lars(std::vector<nets::Parameter*> params, double momentum, double weight_decay,
           double trust_coefficient)
    : params_(trainable_only(std::move(params))),
      velocity_(zeros_for(params_)),
      momentum_(momentum),
      weight_decay_(weight_decay),
      trust_(trust_coefficient) {}

void Lars::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    nets::Parameter& p = *params_[i];
    require_finite_grad(p);
    const double wn = tensor_norm(p.value);
    const double gn = tensor_norm(p.grad);
    const double local =
        (wn > 0.0 && gn > 0.0) ? trust_ * wn / (gn + weight_decay_ * wn + kLarsEps) : 1.0;
    Tensor& v = velocity_[i];
    for (std::int64_t j = 0; j < v.numel(); ++j) {
      const double update = p.grad[j] + weight_decay_ * p.value[j];
      v[j] = momentum_ * v[j] + local * lr * update;
      p.value[j] -= v[j];
    }
  }
}

void Lars::save_state(const std::string& path) const { write_moments(path, {&velocity_}, 0); }
void Lars::load_state(const std::string& path) { read_moments(path, {&velocity_}, nullptr); }

// ---------------------------------------------------------------------------
// SGD

Sgd::Sgd(std::vector<nets::Parameter*> params, double momentum, double weight_decay)
    : params_(trainable_only(std::move(params))),
      velocity_(zeros_for(params_)),
      momentum_(momentum),
      weight_decay_(weight_decay) {}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    nets::Parameter& p = *params_[i];
    require_finite_grad(p);
    Tensor& v = velocity_[i];
    for (std::int64_t j = 0; j < v.numel(); ++j) {
      v[j] = momentum_ * v[j] + lr * (p.grad[j] + weight_decay_ * p.value[j]);
      p.value[j] -= v[j];
    }
  }
}

void Sgd::save_state(const std::string& path) const { write_moments(path, {&velocity_}, 0); }
void Sgd::load_state(const std::string& path) { read_moments(path, {&velocity_}, nullptr); }

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<nets::Parameter*> params, double weight_decay, double beta1, double beta2,
           double eps)
    : params_(trainable_only(std::move(params))),
      m_(zeros_for(params_)),
      v_(zeros_for(params_)),
      weight_decay_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {}

void Adam::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    nets::Parameter& p = *params_[i];
    require_finite_grad(p);
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::int64_t j = 0; j < m.numel(); ++j) {
      const double g = p.grad[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p.value[j]);
    }
  }
}

void Adam::save_state(const std::string& path) const { write_moments(path, {&m_, &v_}, t_); }
void Adam::load_state(const std::string& path) { read_moments(path, {&m_, &v_}, &t_); }

// ---------------------------------------------------------------------------

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, std::vector<nets::Parameter*> params,
                                          const ValidatedConfig& config) {
  switch (kind) {
    case OptimizerKind::lars:
      return std::make_unique<Lars>(std::move(params), config->momentum, config->weight_decay,
                                    config->trust_coefficient);
    case OptimizerKind::sgd:
      return std::make_unique<Sgd>(std::move(params), config->momentum, config->weight_decay);
    case OptimizerKind::adam:
      return std::make_unique<Adam>(std::move(params), config->weight_decay);
  }
  throw Error(ErrorKind::unknown_method, "no such optimizer");
}

double cosine_warmup_lr(double base, int epoch, int total_epochs, int warmup_epochs) {
  if (epoch < warmup_epochs) {
    return base * static_cast<double>(epoch + 1) / static_cast<double>(warmup_epochs);
  }
  const int span = std::max(total_epochs - warmup_epochs, 1);
  const double progress = static_cast<double>(epoch - warmup_epochs) / static_cast<double>(span);
  constexpr double kPi = 3.14159265358979323846;
  return base * 0.5 * (1.0 + std::cos(kPi * progress));
}

}  // namespace finescale::optim
