// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "finescale/config.hpp"
#include "finescale/rng.hpp"
#include "finescale/tensor.hpp"
#include "finescale/types.hpp"

namespace finescale::views {

/// Replayable description of one stochastic augmentation. The descriptor
/// fully determines the transform: replaying it reproduces the output
/// bit-for-bit. Stage order is fixed: affine, hflip, vflip, intensity.
struct AugmentationDescriptor {
  bool hflip = false;
  bool vflip = false;
  double intensity_scale = 1.0;
  double intensity_shift = 0.0;
  double rotation_deg = 0.0;
  double shear_deg = 0.0;
  double scale = 1.0;

  bool identity_affine() const { return rotation_deg == 0.0 && shear_deg == 0.0 && scale == 1.0; }
  bool is_identity() const {
    return !hflip && !vflip && intensity_scale == 1.0 && intensity_shift == 0.0 && identity_affine();
  }
};

/// Two correlated views of one source image.
struct ViewPair {
  Tensor view1;
  Tensor view2;
  Window window1;
  Window window2;
  AugmentationDescriptor aug1;
  AugmentationDescriptor aug2;
  std::string source_id;
};

/// Per-run view geometry: crop extent, post-crop resize target (equal to the
/// crop extent except for full-view runs), and the proximity radius.
struct ViewGeometry {
  std::int64_t crop_h = 0;
  std::int64_t crop_w = 0;
  std::int64_t view_h = 0;
  std::int64_t view_w = 0;
  double delta = 0.0;
};

/// Largest multiple of `multiple` that is <= value (multiple >= 1).
std::int64_t floor_to_multiple(std::int64_t value, std::int64_t multiple);

/// Resolves the view geometry for a run from the dataset base length. The
/// resolved edge is floored to a multiple of `stride_multiple` so encoder
/// feature maps stay integral. Full-view runs resize the whole slice to a
/// square of the floored base length; the proximity radius defaults to the
/// crop edge when the config leaves it unset.
ViewGeometry resolve_view_geometry(const ValidatedConfig& config, std::int64_t base_l,
                                   std::int64_t stride_multiple = 1);

/// Uniform window placement over the valid-center rectangle.
Window sample_window_random(std::int64_t image_h, std::int64_t image_w, std::int64_t h,
                            std::int64_t w, RngStream& rng);

/// Second window of a proximity pair: uniform over the integer centers that
/// are both in the valid rectangle and strictly within Euclidean distance
/// `delta` of the first center (rejection sampling).
Window sample_window_proximal(const Window& first, std::int64_t image_h, std::int64_t image_w,
                              std::int64_t h, std::int64_t w, double delta, RngStream& rng);

/// Exact sub-array extraction; no interpolation, no padding.
Tensor crop(const Tensor& image, const Window& window);
LabelMap crop(const LabelMap& labels, const Window& window);

/// Applies the descriptor's transform. Shape is preserved; the affine stage
/// uses reflection padding with bilinear resampling and is skipped entirely
/// when the descriptor's affine part is the identity, so an identity
/// descriptor returns the input unchanged.
Tensor augment(const Tensor& patch, const AugmentationDescriptor& descriptor);

/// Draws one descriptor from the config's augmentation family and magnitudes.
AugmentationDescriptor sample_augmentation(const ValidatedConfig& config, RngStream& rng);

/// Assembles one view pair for the configured sampling strategy. Draw order
/// is fixed (window1, window2, aug1, aug2) so runs replay deterministically.
ViewPair make_view_pair(const ImageRecord& image, const ValidatedConfig& config,
                        const ViewGeometry& geometry, RngStream& rng);

/// Convenience overload: geometry derived from this image alone (base length
/// = its smaller side, stride multiple 1).
ViewPair make_view_pair(const ImageRecord& image, const ValidatedConfig& config, RngStream& rng);

/// One line-delimited JSON record per ViewPair for replay and audit.
struct ViewRecord {
  std::string source_id;
  Window window1;
  Window window2;
  std::int64_t view_h = 0;
  std::int64_t view_w = 0;
  AugmentationDescriptor aug1;
  AugmentationDescriptor aug2;
};

ViewRecord to_record(const ViewPair& pair);
std::string view_record_to_json(const ViewRecord& record);
ViewRecord view_record_from_json(const std::string& line);
void append_view_log(std::ostream& out, const ViewRecord& record);
std::vector<ViewRecord> read_view_log(std::istream& in);

/// Regenerates the views a logged record describes, bit-for-bit.
ViewPair replay_view_pair(const ImageRecord& image, const ViewRecord& record);

}  // namespace finescale::views
