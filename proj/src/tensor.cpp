// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace finescale {

Tensor::Tensor(std::vector<std::int64_t> shape, double fill) : shape_(std::move(shape)) {
  if (shape_.empty() || shape_.size() > 4) {
    throw Error(ErrorKind::shape, "tensor rank must be 1..4");
  }
  std::int64_t n = 1;
  for (std::int64_t d : shape_) {
    if (d <= 0) throw Error(ErrorKind::shape, "tensor dims must be positive");
    n *= d;
  }
  data_.assign(static_cast<std::size_t>(n), fill);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor Tensor::reshaped(std::vector<std::int64_t> shape) const {
  Tensor out(std::move(shape));
  if (out.numel() != numel()) throw Error(ErrorKind::shape, "reshape changes element count");
  out.data_ = data_;
  return out;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::axpy(double alpha, const Tensor& other) {
  if (!same_shape(other)) throw Error(ErrorKind::shape, "axpy shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += alpha * other.data_[i];
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::min() const { return *std::min_element(data_.begin(), data_.end()); }

double Tensor::max() const { return *std::max_element(data_.begin(), data_.end()); }

Tensor resize_bilinear(const Tensor& image, std::int64_t out_h, std::int64_t out_w) {
  if (image.ndim() != 2) throw Error(ErrorKind::shape, "resize_bilinear expects a 2-D tensor");
  const std::int64_t in_h = image.dim(0);
  const std::int64_t in_w = image.dim(1);
  if (in_h == out_h && in_w == out_w) return image;

  Tensor out({out_h, out_w});
  const double scale_h = static_cast<double>(in_h) / static_cast<double>(out_h);
  const double scale_w = static_cast<double>(in_w) / static_cast<double>(out_w);
  for (std::int64_t r = 0; r < out_h; ++r) {
    // Half-pixel center mapping, clamped at the borders.
    double src_r = (static_cast<double>(r) + 0.5) * scale_h - 0.5;
    src_r = std::max(0.0, std::min(src_r, static_cast<double>(in_h - 1)));
    const std::int64_t r0 = static_cast<std::int64_t>(std::floor(src_r));
    const std::int64_t r1 = std::min(r0 + 1, in_h - 1);
    const double fr = src_r - static_cast<double>(r0);
    for (std::int64_t c = 0; c < out_w; ++c) {
      double src_c = (static_cast<double>(c) + 0.5) * scale_w - 0.5;
      src_c = std::max(0.0, std::min(src_c, static_cast<double>(in_w - 1)));
      const std::int64_t c0 = static_cast<std::int64_t>(std::floor(src_c));
      const std::int64_t c1 = std::min(c0 + 1, in_w - 1);
      const double fc = src_c - static_cast<double>(c0);
      const double top = image.at(r0, c0) * (1.0 - fc) + image.at(r0, c1) * fc;
      const double bot = image.at(r1, c0) * (1.0 - fc) + image.at(r1, c1) * fc;
      out.at(r, c) = top * (1.0 - fr) + bot * fr;
    }
  }
  return out;
}

}  // namespace finescale
