// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "finescale/error.hpp"
#include "finescale/tensor.hpp"

namespace finescale {

enum class Split { pretrain, train, val, test };

const char* split_name(Split split);
Split split_from_name(const std::string& name);

/// Per-pixel class labels; 0/1 for binary targets, 0..C-1 for multiclass.
struct LabelMap {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<std::uint8_t> values;

  LabelMap() = default;
  LabelMap(std::int64_t r, std::int64_t c, std::uint8_t fill = 0)
      : rows(r), cols(c), values(static_cast<std::size_t>(r * c), fill) {}

  std::uint8_t& at(std::int64_t r, std::int64_t c) { return values[static_cast<std::size_t>(r * cols + c)]; }
  std::uint8_t at(std::int64_t r, std::int64_t c) const { return values[static_cast<std::size_t>(r * cols + c)]; }
  std::int64_t count_nonzero() const;
  std::uint8_t max_label() const;
};

/// One 2-D grayscale slice with optional ground-truth mask.
struct ImageRecord {
  std::string id;
  Tensor pixels;  // {H, W}
  std::optional<LabelMap> mask;
  Split split = Split::pretrain;

  std::int64_t height() const { return pixels.dim(0); }
  std::int64_t width() const { return pixels.dim(1); }

  /// Enforces the type invariants (size floor, mask alignment, finiteness).
  void validate() const;
};

/// Crop specification: integer center with floor-based extents.
struct Window {
  std::int64_t center_u = 0;  // row
  std::int64_t center_v = 0;  // column
  std::int64_t h = 0;
  std::int64_t w = 0;

  std::int64_t top() const { return center_u - h / 2; }
  std::int64_t left() const { return center_v - w / 2; }

  bool in_bounds(std::int64_t image_h, std::int64_t image_w) const {
    return h >= 4 && w >= 4 && top() >= 0 && left() >= 0 && top() + h <= image_h && left() + w <= image_w;
  }
};

/// Crop-scale setting: base length L (smallest image dimension in the
/// dataset) and a divisor in {2, 4, 8}.
struct ScaleSpec {
  std::int64_t base_l = 0;
  int divisor = 2;

  std::int64_t resolved_size() const { return base_l / divisor; }
  void validate() const;
};

/// Smallest image dimension over a dataset.
std::int64_t dataset_base_length(const std::vector<ImageRecord>& records);

}  // namespace finescale
