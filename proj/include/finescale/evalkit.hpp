// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "finescale/tensor.hpp"
#include "finescale/types.hpp"

namespace finescale::evalkit {

/// Sliding-window layout for stitched full-slice inference. Edge windows
/// clamp flush to the borders so every pixel is covered without padding.
struct StitchPlan {
  std::int64_t image_h = 0, image_w = 0;
  std::int64_t h = 0, w = 0;
  std::int64_t stride = 0;
  std::vector<Window> windows;       // row-major over origin grid
  std::vector<int> coverage;         // image_h x image_w covering-window counts

  int coverage_at(std::int64_t r, std::int64_t c) const {
    return coverage[static_cast<std::size_t>(r * image_w + c)];
  }
};

StitchPlan build_stitch_plan(std::int64_t image_h, std::int64_t image_w, std::int64_t h,
                             std::int64_t w, std::int64_t stride);

/// Window-level model: maps an {h, w} patch to an {h, w} probability map
/// (binary) or a {C, h, w} per-class simplex map (multiclass).
using PatchPredictor = std::function<Tensor(const Tensor&)>;

/// Per-pixel arithmetic mean of the covering windows' probabilities.
Tensor stitch_predict(const Tensor& image, const PatchPredictor& model, const StitchPlan& plan);

/// 2|A n B| / (|A| + |B|) over nonzero pixels; both empty -> 1.0.
double dice_score(const LabelMap& pred, const LabelMap& gt);

/// Exact symmetric Hausdorff over foreground pixel coordinates, accelerated
/// with an exact Euclidean distance transform. One empty mask -> cap; both
/// empty -> 0.
double hausdorff(const LabelMap& pred, const LabelMap& gt, double cap);

/// Exhaustive pairwise-distance reference; agrees with hausdorff to 1e-9.
double hausdorff_bruteforce(const LabelMap& pred, const LabelMap& gt, double cap);

/// Squared Euclidean distance to the nearest nonzero pixel, per pixel
/// (exact two-pass lower-envelope transform). Empty masks give +inf.
std::vector<double> squared_distance_transform(const LabelMap& mask);

/// Strict-greater binary threshold; ties at the threshold go to background.
LabelMap threshold_binary(const Tensor& prob, double threshold);

/// Per-pixel argmax over {C, H, W} with lowest-index tie-break.
LabelMap argmax_classes(const Tensor& prob);

/// One results-table row per evaluated slice.
struct EvalRow {
  std::string dataset;
  std::string method;
  std::string sampling;
  std::string patch_divisor;
  std::string record_id;
  double dice = 0.0;
  double hd = 0.0;
  std::int64_t seed = 0;
};

struct EvalSummary {
  std::vector<EvalRow> rows;
  double mean_dice = 0.0;
  double mean_hd = 0.0;
};

/// Stitches and scores every record of a split. Binary predictions are
/// thresholded strictly above `threshold`; multiclass predictions use
/// argmax and the metrics are unweighted per-class means.
EvalSummary evaluate_split(const std::vector<ImageRecord>& records, const PatchPredictor& model,
                           std::int64_t h, std::int64_t w, std::int64_t stride, double threshold,
                           double cap, const EvalRow& row_template);

void write_eval_csv(const std::string& path, const EvalSummary& summary);
void write_eval_json(const std::string& path, const EvalSummary& summary);

}  // namespace finescale::evalkit
