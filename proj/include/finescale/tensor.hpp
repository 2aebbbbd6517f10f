// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "finescale/error.hpp"

namespace finescale {

/// Dense row-major tensor of doubles, rank 1..4. Images are {H, W},
/// network activations are {N, C, H, W}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape, double fill = 0.0);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  const std::vector<std::int64_t>& shape() const { return shape_; }
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double at(std::int64_t i, std::int64_t j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }

  double& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  void fill(double value);
  Tensor reshaped(std::vector<std::int64_t> shape) const;
  bool all_finite() const;

  /// Accumulate `other` scaled by `alpha` into this tensor (shapes must match).
  void axpy(double alpha, const Tensor& other);

  double sum() const;
  double min() const;
  double max() const;

 private:
  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

/// Bilinear resize of a {H, W} tensor to {out_h, out_w} (half-pixel centers).
Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w);

}  // namespace finescale
