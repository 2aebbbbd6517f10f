// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <Eigen/Dense>

#include "finescale/error.hpp"

namespace finescale::nets {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapRowConst = Eigen::Map<const RowMat>;

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

Tensor he_normal(const std::vector<std::int64_t>& shape, std::int64_t fan_in,
                 std::uint64_t init_seed, const std::string& name) {
  Tensor t(shape);
  RngStream rng(init_seed, "init/" + name);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

void require_nchw(const Tensor& x, int channels, const char* who) {
  if (x.ndim() != 4) throw Error(ErrorKind::shape, std::string(who) + " expects {N,C,H,W}");
  if (channels > 0 && x.dim(1) != channels) {
    throw Error(ErrorKind::shape, std::string(who) + " channel mismatch");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Sequential

Tensor Sequential::forward(const Tensor& x, bool train) {
  Tensor cur = x;
  for (auto& layer : layers_) cur = layer->forward(cur, train);
  return cur;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor cur = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
  return cur;
}

void Sequential::collect(std::vector<Parameter*>& out) {
  for (auto& layer : layers_) layer->collect(out);
}

void Sequential::set_update_stats(bool update) {
  for (auto& layer : layers_) layer->set_update_stats(update);
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad,
               int dilation, std::uint64_t init_seed)
    : in_ch_(in_ch),
      out_ch_(out_ch),
      kernel_(kernel),
      stride_(stride),
      pad_(pad),
      dilation_(dilation),
      weight_(name + "/weight",
              he_normal({out_ch, in_ch, kernel, kernel},
                        static_cast<std::int64_t>(in_ch) * kernel * kernel, init_seed,
                        name + "/weight")),
      bias_(name + "/bias", Tensor({out_ch})) {}

std::int64_t Conv2d::out_extent(std::int64_t in, int kernel_extent) const {
  const std::int64_t eff = static_cast<std::int64_t>(dilation_) * (kernel_extent - 1) + 1;
  return (in + 2 * pad_ - eff) / stride_ + 1;
}

Tensor Conv2d::forward(const Tensor& x, bool /*train*/) {
  require_nchw(x, in_ch_, "conv");
  input_ = x;
  const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = out_extent(h, kernel_), wo = out_extent(w, kernel_);
  if (ho < 1 || wo < 1) throw Error(ErrorKind::shape, "conv output would be empty");
  Tensor out({n, out_ch_, ho, wo});

  const std::int64_t krows = static_cast<std::int64_t>(in_ch_) * kernel_ * kernel_;
  Eigen::MatrixXd col(krows, ho * wo);
  MapRowConst wmat(weight_.value.data(), out_ch_, krows);
  Eigen::Map<const Eigen::VectorXd> bvec(bias_.value.data(), out_ch_);

  for (std::int64_t s = 0; s < n; ++s) {
    for (int ci = 0; ci < in_ch_; ++ci) {
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx) {
          const std::int64_t r = (static_cast<std::int64_t>(ci) * kernel_ + ky) * kernel_ + kx;
          for (std::int64_t oy = 0; oy < ho; ++oy) {
            const std::int64_t iy = oy * stride_ - pad_ + static_cast<std::int64_t>(ky) * dilation_;
            for (std::int64_t ox = 0; ox < wo; ++ox) {
              const std::int64_t ix =
                  ox * stride_ - pad_ + static_cast<std::int64_t>(kx) * dilation_;
              col(r, oy * wo + ox) = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                         ? x.at(s, ci, iy, ix)
                                         : 0.0;
            }
          }
        }
      }
    }
    MapRow out_mat(&out.at(s, 0, 0, 0), out_ch_, ho * wo);
    out_mat.noalias() = wmat * col;
    out_mat.colwise() += bvec;
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const std::int64_t n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
  const std::int64_t ho = grad_out.dim(2), wo = grad_out.dim(3);
  Tensor grad_in({n, in_ch_, h, w});

  const std::int64_t krows = static_cast<std::int64_t>(in_ch_) * kernel_ * kernel_;
  Eigen::MatrixXd col(krows, ho * wo);
  Eigen::MatrixXd dcol(krows, ho * wo);
  MapRowConst wmat(weight_.value.data(), out_ch_, krows);
  MapRow gw(weight_.grad.data(), out_ch_, krows);
  Eigen::Map<Eigen::VectorXd> gb(bias_.grad.data(), out_ch_);

  for (std::int64_t s = 0; s < n; ++s) {
    for (int ci = 0; ci < in_ch_; ++ci) {
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx) {
          const std::int64_t r = (static_cast<std::int64_t>(ci) * kernel_ + ky) * kernel_ + kx;
          for (std::int64_t oy = 0; oy < ho; ++oy) {
            const std::int64_t iy = oy * stride_ - pad_ + static_cast<std::int64_t>(ky) * dilation_;
            for (std::int64_t ox = 0; ox < wo; ++ox) {
              const std::int64_t ix =
                  ox * stride_ - pad_ + static_cast<std::int64_t>(kx) * dilation_;
              col(r, oy * wo + ox) = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                         ? input_.at(s, ci, iy, ix)
                                         : 0.0;
            }
          }
        }
      }
    }
    MapRowConst go(grad_out.data() + s * out_ch_ * ho * wo, out_ch_, ho * wo);
    gw.noalias() += go * col.transpose();
    gb += go.rowwise().sum();
    dcol.noalias() = wmat.transpose() * go;
    for (int ci = 0; ci < in_ch_; ++ci) {
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx) {
          const std::int64_t r = (static_cast<std::int64_t>(ci) * kernel_ + ky) * kernel_ + kx;
          for (std::int64_t oy = 0; oy < ho; ++oy) {
            const std::int64_t iy = oy * stride_ - pad_ + static_cast<std::int64_t>(ky) * dilation_;
            if (iy < 0 || iy >= h) continue;
            for (std::int64_t ox = 0; ox < wo; ++ox) {
              const std::int64_t ix =
                  ox * stride_ - pad_ + static_cast<std::int64_t>(kx) * dilation_;
              if (ix < 0 || ix >= w) continue;
              grad_in.at(s, ci, iy, ix) += dcol(r, oy * wo + ox);
            }
          }
        }
      }
    }
  }
  return grad_in;
}

void Conv2d::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(const std::string& name, int channels)
    : channels_(channels),
      gamma_(name + "/gamma", Tensor({channels}, 1.0)),
      beta_(name + "/beta", Tensor({channels})),
      running_mean_(name + "/running_mean", Tensor({channels}), false),
      running_var_(name + "/running_var", Tensor({channels}, 1.0), false) {}

Tensor BatchNorm2d::forward(const Tensor& x, bool train) {
  require_nchw(x, channels_, "batchnorm");
  const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const double m = static_cast<double>(n * h * w);
  train_mode_ = train;
  normalized_ = Tensor::zeros_like(x);
  inv_std_.assign(static_cast<std::size_t>(channels_), 0.0);
  Tensor out = Tensor::zeros_like(x);

  for (int c = 0; c < channels_; ++c) {
    double mean, var;
    if (train) {
      double sum = 0.0, sq = 0.0;
      for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t q = 0; q < w; ++q) {
            const double v = x.at(s, c, y, q);
            sum += v;
            sq += v * v;
          }
        }
      }
      mean = sum / m;
      var = std::max(sq / m - mean * mean, 0.0);
      if (update_stats_) {
        const double unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
        running_mean_.value[c] = (1.0 - kBnMomentum) * running_mean_.value[c] + kBnMomentum * mean;
        running_var_.value[c] = (1.0 - kBnMomentum) * running_var_.value[c] + kBnMomentum * unbiased;
      }
    } else {
      mean = running_mean_.value[c];
      var = running_var_.value[c];
    }
    const double inv = 1.0 / std::sqrt(var + kBnEps);
    inv_std_[static_cast<std::size_t>(c)] = inv;
    const double g = gamma_.value[c], b = beta_.value[c];
    for (std::int64_t s = 0; s < n; ++s) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t q = 0; q < w; ++q) {
          const double norm = (x.at(s, c, y, q) - mean) * inv;
          normalized_.at(s, c, y, q) = norm;
          out.at(s, c, y, q) = g * norm + b;
        }
      }
    }
  }
  return out;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  const std::int64_t n = grad_out.dim(0), h = grad_out.dim(2), w = grad_out.dim(3);
  const double m = static_cast<double>(n * h * w);
  Tensor grad_in = Tensor::zeros_like(grad_out);

  for (int c = 0; c < channels_; ++c) {
    double dg = 0.0, db = 0.0;
    for (std::int64_t s = 0; s < n; ++s) {
      for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t q = 0; q < w; ++q) {
          const double gy = grad_out.at(s, c, y, q);
          dg += gy * normalized_.at(s, c, y, q);
          db += gy;
        }
      }
    }
    gamma_.grad[c] += dg;
    beta_.grad[c] += db;
    const double g = gamma_.value[c], inv = inv_std_[static_cast<std::size_t>(c)];
    if (train_mode_) {
      const double scale = g * inv / m;
      for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t q = 0; q < w; ++q) {
            grad_in.at(s, c, y, q) =
                scale * (m * grad_out.at(s, c, y, q) - db - normalized_.at(s, c, y, q) * dg);
          }
        }
      }
    } else {
      const double scale = g * inv;
      for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t q = 0; q < w; ++q) {
            grad_in.at(s, c, y, q) = scale * grad_out.at(s, c, y, q);
          }
        }
      }
    }
  }
  return grad_in;
}

void BatchNorm2d::collect(std::vector<Parameter*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

// ---------------------------------------------------------------------------
// ReLU / MaxPool / GlobalAvgPool

Tensor ReLU::forward(const Tensor& x, bool /*train*/) {
  input_ = x;
  Tensor out = x;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    if (out[i] < 0.0) out[i] = 0.0;
  }
  return out;
}

Tensor ReLU::backward(const Tensor& grad_out) {
  Tensor grad_in = grad_out;
  for (std::int64_t i = 0; i < grad_in.numel(); ++i) {
    if (input_[i] <= 0.0) grad_in[i] = 0.0;
  }
  return grad_in;
}

Tensor MaxPool2d::forward(const Tensor& x, bool /*train*/) {
  require_nchw(x, 0, "maxpool");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t ho = (h + 2 * pad_ - kernel_) / stride_ + 1;
  const std::int64_t wo = (w + 2 * pad_ - kernel_) / stride_ + 1;
  in_shape_ = x.shape();
  Tensor out({n, c, ho, wo});
  argmax_.assign(static_cast<std::size_t>(out.numel()), -1);
  std::int64_t o = 0;
  for (std::int64_t s = 0; s < n; ++s) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        for (std::int64_t ox = 0; ox < wo; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t best_idx = -1;
          for (int ky = 0; ky < kernel_; ++ky) {
            const std::int64_t iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kernel_; ++kx) {
              const std::int64_t ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= w) continue;
              const double v = x.at(s, ch, iy, ix);
              if (v > best) {
                best = v;
                best_idx = ((s * c + ch) * h + iy) * w + ix;
              }
            }
          }
          out[o] = best;
          argmax_[static_cast<std::size_t>(o)] = best_idx;
        }
      }
    }
  }
  return out;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) {
  Tensor grad_in(in_shape_);
  for (std::int64_t o = 0; o < grad_out.numel(); ++o) {
    const std::int64_t idx = argmax_[static_cast<std::size_t>(o)];
    if (idx >= 0) grad_in[idx] += grad_out[o];
  }
  return grad_in;
}

Tensor GlobalAvgPool::forward(const Tensor& x, bool /*train*/) {
  require_nchw(x, 0, "global average pool");
  in_shape_ = x.shape();
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  for (std::int64_t s = 0; s < n; ++s) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double sum = 0.0;
      const double* base = x.data() + (s * c + ch) * hw;
      for (std::int64_t i = 0; i < hw; ++i) sum += base[i];
      out.at(s, ch) = sum / static_cast<double>(hw);
    }
  }
  return out;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
  Tensor grad_in(in_shape_);
  const std::int64_t n = in_shape_[0], c = in_shape_[1], hw = in_shape_[2] * in_shape_[3];
  for (std::int64_t s = 0; s < n; ++s) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double g = grad_out.at(s, ch) / static_cast<double>(hw);
      double* base = grad_in.data() + (s * c + ch) * hw;
      for (std::int64_t i = 0; i < hw; ++i) base[i] = g;
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(const std::string& name, int in_dim, int out_dim, std::uint64_t init_seed)
    : in_dim_(in_dim),
      out_dim_(out_dim),
      weight_(name + "/weight", he_normal({out_dim, in_dim}, in_dim, init_seed, name + "/weight")),
      bias_(name + "/bias", Tensor({out_dim})) {}

Tensor Linear::forward(const Tensor& x, bool /*train*/) {
  if (x.ndim() != 2 || x.dim(1) != in_dim_) throw Error(ErrorKind::shape, "linear input mismatch");
  input_ = x;
  const std::int64_t n = x.dim(0);
  Tensor out({n, out_dim_});
  MapRowConst xm(x.data(), n, in_dim_);
  MapRowConst wm(weight_.value.data(), out_dim_, in_dim_);
  Eigen::Map<const Eigen::VectorXd> bv(bias_.value.data(), out_dim_);
  MapRow om(out.data(), n, out_dim_);
  om.noalias() = xm * wm.transpose();
  om.rowwise() += bv.transpose();
  return out;
}

Tensor Linear::backward(const Tensor& grad_out) {
  const std::int64_t n = input_.dim(0);
  Tensor grad_in({n, in_dim_});
  MapRowConst gm(grad_out.data(), n, out_dim_);
  MapRowConst xm(input_.data(), n, in_dim_);
  MapRowConst wm(weight_.value.data(), out_dim_, in_dim_);
  MapRow gw(weight_.grad.data(), out_dim_, in_dim_);
  Eigen::Map<Eigen::VectorXd> gb(bias_.grad.data(), out_dim_);
  MapRow gi(grad_in.data(), n, in_dim_);
  gw.noalias() += gm.transpose() * xm;
  gb += gm.colwise().sum().transpose();
  gi.noalias() = gm * wm;
  return grad_in;
}

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

// ---------------------------------------------------------------------------
// Upsample2x

namespace {

struct Tap {
  std::int64_t a, b;
  double frac;
};

Tap upsample_tap(std::int64_t out_idx, std::int64_t in_extent) {
  const double src = (static_cast<double>(out_idx) + 0.5) / 2.0 - 0.5;
  const double floor_src = std::floor(src);
  std::int64_t lo = static_cast<std::int64_t>(floor_src);
  const double frac = src - floor_src;
  const std::int64_t a = std::clamp<std::int64_t>(lo, 0, in_extent - 1);
  const std::int64_t b = std::clamp<std::int64_t>(lo + 1, 0, in_extent - 1);
  return {a, b, frac};
}

}  // namespace

Tensor Upsample2x::forward(const Tensor& x, bool /*train*/) {
  require_nchw(x, 0, "upsample");
  in_shape_ = x.shape();
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({n, c, h * 2, w * 2});
  for (std::int64_t oy = 0; oy < h * 2; ++oy) {
    const Tap ty = upsample_tap(oy, h);
    for (std::int64_t ox = 0; ox < w * 2; ++ox) {
      const Tap tx = upsample_tap(ox, w);
      for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const double top = x.at(s, ch, ty.a, tx.a) * (1.0 - tx.frac) + x.at(s, ch, ty.a, tx.b) * tx.frac;
          const double bot = x.at(s, ch, ty.b, tx.a) * (1.0 - tx.frac) + x.at(s, ch, ty.b, tx.b) * tx.frac;
          out.at(s, ch, oy, ox) = top * (1.0 - ty.frac) + bot * ty.frac;
        }
      }
    }
  }
  return out;
}

Tensor Upsample2x::backward(const Tensor& grad_out) {
  Tensor grad_in(in_shape_);
  const std::int64_t n = in_shape_[0], c = in_shape_[1], h = in_shape_[2], w = in_shape_[3];
  for (std::int64_t oy = 0; oy < h * 2; ++oy) {
    const Tap ty = upsample_tap(oy, h);
    for (std::int64_t ox = 0; ox < w * 2; ++ox) {
      const Tap tx = upsample_tap(ox, w);
      for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const double g = grad_out.at(s, ch, oy, ox);
          grad_in.at(s, ch, ty.a, tx.a) += g * (1.0 - ty.frac) * (1.0 - tx.frac);
          grad_in.at(s, ch, ty.a, tx.b) += g * (1.0 - ty.frac) * tx.frac;
          grad_in.at(s, ch, ty.b, tx.a) += g * ty.frac * (1.0 - tx.frac);
          grad_in.at(s, ch, ty.b, tx.b) += g * ty.frac * tx.frac;
        }
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------
// BasicBlock

BasicBlock::BasicBlock(const std::string& name, int in_ch, int out_ch, int stride,
                       std::uint64_t init_seed)
    : conv1_(name + "/conv1", in_ch, out_ch, 3, stride, 1, 1, init_seed),
      bn1_(name + "/bn1", out_ch),
      conv2_(name + "/conv2", out_ch, out_ch, 3, 1, 1, 1, init_seed),
      bn2_(name + "/bn2", out_ch) {
  if (stride != 1 || in_ch != out_ch) {
    proj_ = std::make_unique<Conv2d>(name + "/proj", in_ch, out_ch, 1, stride, 0, 1, init_seed);
    proj_bn_ = std::make_unique<BatchNorm2d>(name + "/proj_bn", out_ch);
  }
}

Tensor BasicBlock::forward(const Tensor& x, bool train) {
  Tensor main = bn2_.forward(
      conv2_.forward(relu1_.forward(bn1_.forward(conv1_.forward(x, train), train), train), train),
      train);
  Tensor skip = proj_ ? proj_bn_->forward(proj_->forward(x, train), train) : x;
  if (!main.same_shape(skip)) throw Error(ErrorKind::shape, "residual branch shapes differ");
  sum_ = main;
  sum_.axpy(1.0, skip);
  Tensor out = sum_;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    if (out[i] < 0.0) out[i] = 0.0;
  }
  return out;
}

Tensor BasicBlock::backward(const Tensor& grad_out) {
  Tensor dsum = grad_out;
  for (std::int64_t i = 0; i < dsum.numel(); ++i) {
    if (sum_[i] <= 0.0) dsum[i] = 0.0;
  }
  Tensor dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(dsum)))));
  if (proj_) {
    dx.axpy(1.0, proj_->backward(proj_bn_->backward(dsum)));
  } else {
    dx.axpy(1.0, dsum);
  }
  return dx;
}

void BasicBlock::collect(std::vector<Parameter*>& out) {
  conv1_.collect(out);
  bn1_.collect(out);
  conv2_.collect(out);
  bn2_.collect(out);
  if (proj_) {
    proj_->collect(out);
    proj_bn_->collect(out);
  }
}

void BasicBlock::set_update_stats(bool update) {
  bn1_.set_update_stats(update);
  bn2_.set_update_stats(update);
  if (proj_bn_) proj_bn_->set_update_stats(update);
}

// ---------------------------------------------------------------------------
// ASPP decoder head

namespace {

/// Parallel context branches over the encoder feature map: a 1x1 conv, an
/// atrous 3x3 conv, and a global-pool branch, merged by a 1x1 conv.
class AsppLayer : public Layer {
 public:
  AsppLayer(const std::string& name, int in_ch, int branch_ch, int out_ch, std::uint64_t seed)
      : in_ch_(in_ch),
        branch_ch_(branch_ch),
        conv_local_(name + "/local", in_ch, branch_ch, 1, 1, 0, 1, seed),
        conv_atrous_(name + "/atrous", in_ch, branch_ch, 3, 1, 2, 2, seed),
        conv_image_(name + "/image", in_ch, branch_ch, 1, 1, 0, 1, seed),
        conv_merge_(name + "/merge", 3 * branch_ch, out_ch, 1, 1, 0, 1, seed) {}

  Tensor forward(const Tensor& x, bool train) override {
    require_nchw(x, in_ch_, "aspp");
    const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    Tensor local = conv_local_.forward(x, train);
    Tensor atrous = conv_atrous_.forward(x, train);
    Tensor pooled({n, in_ch_, 1, 1});
    for (std::int64_t s = 0; s < n; ++s) {
      for (int c = 0; c < in_ch_; ++c) {
        double sum = 0.0;
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t q = 0; q < w; ++q) sum += x.at(s, c, y, q);
        }
        pooled.at(s, c, 0, 0) = sum / static_cast<double>(h * w);
      }
    }
    Tensor image = conv_image_.forward(pooled, train);
    Tensor concat({n, 3 * branch_ch_, h, w});
    for (std::int64_t s = 0; s < n; ++s) {
      for (int c = 0; c < branch_ch_; ++c) {
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t q = 0; q < w; ++q) {
            concat.at(s, c, y, q) = local.at(s, c, y, q);
            concat.at(s, branch_ch_ + c, y, q) = atrous.at(s, c, y, q);
            concat.at(s, 2 * branch_ch_ + c, y, q) = image.at(s, c, 0, 0);
          }
        }
      }
    }
    merged_ = conv_merge_.forward(concat, train);
    Tensor out = merged_;
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      if (out[i] < 0.0) out[i] = 0.0;
    }
    return out;
  }

  Tensor backward(const Tensor& grad_out) override {
    Tensor dmerged = grad_out;
    for (std::int64_t i = 0; i < dmerged.numel(); ++i) {
      if (merged_[i] <= 0.0) dmerged[i] = 0.0;
    }
    Tensor dconcat = conv_merge_.backward(dmerged);
    const std::int64_t n = dconcat.dim(0), h = dconcat.dim(2), w = dconcat.dim(3);
    Tensor dlocal({n, branch_ch_, h, w}), datrous({n, branch_ch_, h, w});
    Tensor dimage({n, branch_ch_, 1, 1});
    for (std::int64_t s = 0; s < n; ++s) {
      for (int c = 0; c < branch_ch_; ++c) {
        double img_sum = 0.0;
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t q = 0; q < w; ++q) {
            dlocal.at(s, c, y, q) = dconcat.at(s, c, y, q);
            datrous.at(s, c, y, q) = dconcat.at(s, branch_ch_ + c, y, q);
            img_sum += dconcat.at(s, 2 * branch_ch_ + c, y, q);
          }
        }
        dimage.at(s, c, 0, 0) = img_sum;
      }
    }
    Tensor dx = conv_local_.backward(dlocal);
    dx.axpy(1.0, conv_atrous_.backward(datrous));
    Tensor dpooled = conv_image_.backward(dimage);
    const double inv_hw = 1.0 / static_cast<double>(h * w);
    for (std::int64_t s = 0; s < n; ++s) {
      for (int c = 0; c < in_ch_; ++c) {
        const double g = dpooled.at(s, c, 0, 0) * inv_hw;
        for (std::int64_t y = 0; y < h; ++y) {
          for (std::int64_t q = 0; q < w; ++q) dx.at(s, c, y, q) += g;
        }
      }
    }
    return dx;
  }

  void collect(std::vector<Parameter*>& out) override {
    conv_local_.collect(out);
    conv_atrous_.collect(out);
    conv_image_.collect(out);
    conv_merge_.collect(out);
  }

 private:
  int in_ch_, branch_ch_;
  Conv2d conv_local_, conv_atrous_, conv_image_, conv_merge_;
  Tensor merged_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Specs and builders

std::int64_t EncoderSpec::stride_product() const {
  std::int64_t p = 1;
  for (int s : stage_strides) p *= s;
  return p;
}

void EncoderSpec::validate() const {
  if (feature_dim < 1) throw Error(ErrorKind::config, "feature_dim");
  for (int s : stage_strides) {
    if (s != 1 && s != 2) throw Error(ErrorKind::config, "encoder_strides");
  }
  if (input_h > 0 && input_h % stride_product() != 0) {
    throw Error(ErrorKind::shape, "input height not divisible by the stride product");
  }
  if (input_w > 0 && input_w % stride_product() != 0) {
    throw Error(ErrorKind::shape, "input width not divisible by the stride product");
  }
}

EncoderSpec encoder_spec_from_config(const ValidatedConfig& config) {
  EncoderSpec spec;
  spec.arch = config->encoder;
  if (spec.arch == EncoderArch::resnet18) {
    spec.feature_dim = 512;
    spec.stage_strides = {2, 2, 2, 2, 2};
  } else {
    spec.feature_dim = config->feature_dim;
    spec.stage_strides = config->encoder_strides;
  }
  spec.validate();
  return spec;
}

std::unique_ptr<Sequential> build_encoder(const EncoderSpec& spec, std::uint64_t seed) {
  spec.validate();
  auto net = std::make_unique<Sequential>();
  if (spec.arch == EncoderArch::toy_cnn) {
    int prev = 1;
    const int stages = static_cast<int>(spec.stage_strides.size());
    for (int i = 0; i < stages; ++i) {
      const int ch = (i == stages - 1) ? spec.feature_dim : std::min(16 << i, spec.feature_dim);
      const std::string name = "encoder/stage" + std::to_string(i);
      net->add(std::make_unique<Conv2d>(name + "/conv", prev, ch, 3, spec.stage_strides[i], 1, 1,
                                        seed));
      net->add(std::make_unique<BatchNorm2d>(name + "/bn", ch));
      net->add(std::make_unique<ReLU>());
      prev = ch;
    }
    return net;
  }
  // resnet18: 7x7 stem, 3x3 maxpool, then four stages of two basic blocks.
  net->add(std::make_unique<Conv2d>("encoder/stem/conv", 1, 64, 7, 2, 3, 1, seed));
  net->add(std::make_unique<BatchNorm2d>("encoder/stem/bn", 64));
  net->add(std::make_unique<ReLU>());
  net->add(std::make_unique<MaxPool2d>(3, 2, 1));
  const int widths[4] = {64, 128, 256, 512};
  int prev = 64;
  for (int stage = 0; stage < 4; ++stage) {
    const int stride = stage == 0 ? 1 : 2;
    const std::string base = "encoder/layer" + std::to_string(stage + 1);
    net->add(std::make_unique<BasicBlock>(base + "/block0", prev, widths[stage], stride, seed));
    net->add(std::make_unique<BasicBlock>(base + "/block1", widths[stage], widths[stage], 1, seed));
    prev = widths[stage];
  }
  return net;
}

std::unique_ptr<Sequential> build_head(const HeadSpec& spec, int in_dim, std::uint64_t seed,
                                       const std::string& prefix) {
  if (spec.layer_dims.empty()) throw Error(ErrorKind::config, "head layer_dims");
  auto net = std::make_unique<Sequential>();
  int prev = in_dim;
  for (std::size_t i = 0; i < spec.layer_dims.size(); ++i) {
    if (i > 0) net->add(std::make_unique<ReLU>());
    const std::string name = prefix + "/fc" + std::to_string(i);
    net->add(std::make_unique<Linear>(name, prev, spec.layer_dims[i], seed));
    prev = spec.layer_dims[i];
  }
  return net;
}

std::unique_ptr<Sequential> build_decoder(const DecoderSpec& spec, int in_channels,
                                          std::int64_t stride_product, std::uint64_t seed) {
  if (spec.num_classes < 1) throw Error(ErrorKind::config, "num_classes");
  int stages = 0;
  std::int64_t sp = stride_product;
  while (sp > 1) {
    if (sp % 2 != 0) throw Error(ErrorKind::config, "stride product must be a power of two");
    sp /= 2;
    ++stages;
  }
  const int out_channels = spec.num_classes <= 2 ? 1 : spec.num_classes;
  auto net = std::make_unique<Sequential>();
  if (spec.style == DecoderStyle::plain_upsample) {
    int ch = in_channels;
    for (int i = 0; i < stages; ++i) {
      const int next = std::max(ch / 2, 8);
      const std::string name = "decoder/stage" + std::to_string(i);
      net->add(std::make_unique<Upsample2x>());
      net->add(std::make_unique<Conv2d>(name + "/conv", ch, next, 3, 1, 1, 1, seed));
      net->add(std::make_unique<ReLU>());
      ch = next;
    }
    net->add(std::make_unique<Conv2d>("decoder/head/conv", ch, out_channels, 1, 1, 0, 1, seed));
    return net;
  }
  net->add(std::make_unique<AsppLayer>("decoder/aspp", in_channels, 32, 64, seed));
  for (int i = 0; i < stages; ++i) net->add(std::make_unique<Upsample2x>());
  net->add(std::make_unique<Conv2d>("decoder/refine/conv", 64, 32, 3, 1, 1, 1, seed));
  net->add(std::make_unique<ReLU>());
  net->add(std::make_unique<Conv2d>("decoder/head/conv", 32, out_channels, 1, 1, 0, 1, seed));
  return net;
}

// ---------------------------------------------------------------------------
// Contract wrappers

Tensor encode(Sequential& encoder, const EncoderSpec& spec, const Tensor& patch, bool train) {
  Tensor x = patch;
  if (x.ndim() == 2) x = x.reshaped({1, 1, x.dim(0), x.dim(1)});
  require_nchw(x, 1, "encode");
  const std::int64_t sp = spec.stride_product();
  if (spec.input_h > 0 && (x.dim(2) != spec.input_h || x.dim(3) != spec.input_w)) {
    throw Error(ErrorKind::shape, "patch does not match the encoder input size");
  }
  if (x.dim(2) % sp != 0 || x.dim(3) % sp != 0 || x.dim(2) < sp || x.dim(3) < sp) {
    throw Error(ErrorKind::shape, "patch size must be a positive multiple of the stride product");
  }
  Tensor features = encoder.forward(x, train);
  if (features.dim(1) != spec.feature_dim || features.dim(2) != x.dim(2) / sp ||
      features.dim(3) != x.dim(3) / sp) {
    throw Error(ErrorKind::internal, "encoder output violates its shape contract");
  }
  return features;
}

Tensor project(Sequential& head, const Tensor& pooled, bool train) {
  if (pooled.ndim() != 2) throw Error(ErrorKind::shape, "project expects {N, feature_dim}");
  return head.forward(pooled, train);
}

void ema_update(std::vector<Parameter*>& target, const std::vector<Parameter*>& online,
                double momentum) {
  if (momentum < 0.0 || momentum > 1.0) throw Error(ErrorKind::config, "byol_momentum");
  if (target.size() != online.size()) {
    throw Error(ErrorKind::structure_mismatch, "parameter trees differ in size");
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i]->name != online[i]->name || !target[i]->value.same_shape(online[i]->value)) {
      throw Error(ErrorKind::structure_mismatch, "parameter " + target[i]->name);
    }
    Tensor& t = target[i]->value;
    const Tensor& o = online[i]->value;
    for (std::int64_t j = 0; j < t.numel(); ++j) {
      t[j] = momentum * t[j] + (1.0 - momentum) * o[j];
    }
  }
}

std::uint64_t parameter_checksum(const std::vector<Parameter*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Parameter* p : params) {
    h = fnv1a64(p->value.data(), static_cast<std::size_t>(p->value.numel()) * sizeof(double), h);
  }
  return h;
}

void zero_grads(std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->grad.fill(0.0);
}

Tensor sigmoid(const Tensor& logits) {
  Tensor out = logits;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const double x = out[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return out;
}

Tensor softmax_channels(const Tensor& logits) {
  require_nchw(logits, 0, "softmax");
  const std::int64_t n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  Tensor out = Tensor::zeros_like(logits);
  for (std::int64_t s = 0; s < n; ++s) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t q = 0; q < w; ++q) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t k = 0; k < c; ++k) mx = std::max(mx, logits.at(s, k, y, q));
        double denom = 0.0;
        for (std::int64_t k = 0; k < c; ++k) {
          const double e = std::exp(logits.at(s, k, y, q) - mx);
          out.at(s, k, y, q) = e;
          denom += e;
        }
        for (std::int64_t k = 0; k < c; ++k) out.at(s, k, y, q) /= denom;
      }
    }
  }
  return out;
}

Tensor segment_patch(Sequential& encoder, const EncoderSpec& enc_spec, Sequential& decoder,
                     const DecoderSpec& dec_spec, const Tensor& patch) {
  if (patch.ndim() != 2) throw Error(ErrorKind::shape, "segment_patch expects a 2-D patch");
  if (dec_spec.output_h > 0 &&
      (patch.dim(0) != dec_spec.output_h || patch.dim(1) != dec_spec.output_w)) {
    throw Error(ErrorKind::shape, "patch does not match the decoder output size");
  }
  Tensor features = encode(encoder, enc_spec, patch, false);
  Tensor logits = decoder.forward(features, false);
  if (logits.dim(2) != patch.dim(0) || logits.dim(3) != patch.dim(1)) {
    throw Error(ErrorKind::shape, "decoder output does not match the patch size");
  }
  if (logits.dim(1) == 1) {
    return sigmoid(logits).reshaped({patch.dim(0), patch.dim(1)});
  }
  Tensor probs = softmax_channels(logits);
  return probs.reshaped({probs.dim(1), probs.dim(2), probs.dim(3)});
}

// ---------------------------------------------------------------------------
// Parameter blobs

namespace {
constexpr std::uint32_t kBlobMagic = 0x4653504bu;  // "FSPK"
constexpr std::uint32_t kBlobVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error(ErrorKind::format, "truncated parameter blob");
}
}  // namespace

void save_params(const std::string& path, const std::vector<Parameter*>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
  write_pod(out, kBlobMagic);
  write_pod(out, kBlobVersion);
  const std::uint64_t count = params.size();
  write_pod(out, count);
  for (const Parameter* p : params) {
    const std::uint32_t name_len = static_cast<std::uint32_t>(p->name.size());
    write_pod(out, name_len);
    out.write(p->name.data(), name_len);
    const std::uint32_t ndim = static_cast<std::uint32_t>(p->value.ndim());
    write_pod(out, ndim);
    for (std::int64_t d = 0; d < p->value.ndim(); ++d) {
      const std::int64_t extent = p->value.dim(static_cast<int>(d));
      write_pod(out, extent);
    }
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
  }
  if (!out) throw Error(ErrorKind::io, "failed writing '" + path + "'");
}

void load_params(const std::string& path, std::vector<Parameter*>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read '" + path + "'");
  std::uint32_t magic = 0, version = 0;
  read_pod(in, magic);
  read_pod(in, version);
  if (magic != kBlobMagic || version != kBlobVersion) {
    throw Error(ErrorKind::format, "not a parameter blob: '" + path + "'");
  }
  std::uint64_t count = 0;
  read_pod(in, count);
  if (count != params.size()) {
    throw Error(ErrorKind::structure_mismatch, "parameter count differs from the checkpoint");
  }
  for (Parameter* p : params) {
    std::uint32_t name_len = 0;
    read_pod(in, name_len);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    std::uint32_t ndim = 0;
    read_pod(in, ndim);
    std::vector<std::int64_t> shape(ndim);
    for (auto& d : shape) read_pod(in, d);
    if (name != p->name || shape != p->value.shape()) {
      throw Error(ErrorKind::structure_mismatch, "checkpoint parameter " + name);
    }
    in.read(reinterpret_cast<char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
    if (!in) throw Error(ErrorKind::format, "truncated parameter blob");
  }
}

}  // namespace finescale::nets
