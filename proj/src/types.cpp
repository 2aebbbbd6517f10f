// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/types.hpp"

#include <algorithm>
#include <limits>

namespace finescale {

const char* split_name(Split split) {
  switch (split) {
    case Split::pretrain: return "pretrain";
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "pretrain") return Split::pretrain;
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw Error(ErrorKind::format, "unknown split '" + name + "'");
}

std::int64_t LabelMap::count_nonzero() const {
  return static_cast<std::int64_t>(std::count_if(values.begin(), values.end(), [](std::uint8_t v) { return v != 0; }));
}

std::uint8_t LabelMap::max_label() const {
  std::uint8_t m = 0;
  for (std::uint8_t v : values) m = std::max(m, v);
  return m;
}

void ImageRecord::validate() const {
  if (pixels.ndim() != 2) throw Error(ErrorKind::shape, "record '" + id + "': pixels must be 2-D");
  if (height() < 8 || width() < 8) throw Error(ErrorKind::shape, "record '" + id + "': images must be at least 8x8");
  if (!pixels.all_finite()) throw Error(ErrorKind::format, "record '" + id + "': non-finite intensities");
  if (mask && (mask->rows != height() || mask->cols != width())) {
    throw Error(ErrorKind::inconsistent_shape, "record '" + id + "': mask shape differs from pixels");
  }
}

void ScaleSpec::validate() const {
  if (divisor != 2 && divisor != 4 && divisor != 8) throw Error(ErrorKind::config, "divisor");
  if (resolved_size() < 4) throw Error(ErrorKind::too_small, "resolved crop size below 4");
}

std::int64_t dataset_base_length(const std::vector<ImageRecord>& records) {
  if (records.empty()) throw Error(ErrorKind::empty_subset, "no records");
  std::int64_t base = std::numeric_limits<std::int64_t>::max();
  for (const auto& r : records) base = std::min(base, std::min(r.height(), r.width()));
  return base;
}

}  // namespace finescale
