// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "finescale/error.hpp"
#include "finescale/types.hpp"

namespace finescale::synth {

/// Generator families. The first two produce small, sparse foreground
/// structures; the last two produce structures spanning a large share of the
/// image. Together they give a controlled contrast in target scale.
enum class SynthKind { thin_curves, small_blobs, large_bands, large_regions };

enum class TextureKind { none, layered_reflectors, granular };

const char* synth_kind_name(SynthKind k);
SynthKind synth_kind_from_name(const std::string& name);
const char* texture_name(TextureKind t);
TextureKind texture_from_name(const std::string& name);

struct SynthSpec {
  SynthKind kind = SynthKind::thin_curves;
  std::int64_t image_h = 96;
  std::int64_t image_w = 96;
  int count = 100;
  double density = 3.0;  // expected structures per image
  int thickness_px = 2;  // thin_curves: curve width
  int radius_px = 2;     // small_blobs: max blob radius
  int band_count = 3;    // large_bands: number of mask classes
  double noise_sigma = 0.03;
  TextureKind texture = TextureKind::layered_reflectors;
  std::uint64_t seed = 0;

  /// SpecError naming the offending field.
  void validate() const;
};

/// Kind-appropriate defaults (texture, scale parameter) for the given family.
SynthSpec make_default_spec(SynthKind kind);

/// Layered background with additive noise; masks mark near-vertical polyline
/// curves of spec.thickness_px with an intensity discontinuity across each
/// curve. Per-image foreground stays below 5%.
std::vector<ImageRecord> gen_thin_curves(const SynthSpec& spec);

/// Granular background; masks mark small ellipses (radius <= spec.radius_px)
/// at Poisson-counted locations. Per-image foreground stays below 8%.
std::vector<ImageRecord> gen_small_blobs(const SynthSpec& spec);

/// large_bands: horizontal bands with undulating non-crossing boundaries,
/// one mask class per band. large_regions: a single connected foreground
/// region covering 25-60% of the image.
std::vector<ImageRecord> gen_large_structures(const SynthSpec& spec);

/// Dispatches on spec.kind and assigns splits (60/20/10/10).
std::vector<ImageRecord> generate_dataset(const SynthSpec& spec);

/// Disjoint exhaustive pretrain/train/val/test split by index blocks.
void assign_splits(std::vector<ImageRecord>& records);

/// Writes `<id>.png` (16-bit grayscale), `<id>_mask.png` (8-bit labels) and
/// manifest.json into the directory; returns the manifest path. Pixel values
/// must already lie in [0, 1].
std::string write_dataset(const std::vector<ImageRecord>& records, const SynthSpec& spec,
                          const std::string& directory);

/// Share of nonzero mask pixels.
double foreground_fraction(const LabelMap& mask);

/// Areas of 4-connected components of the nonzero mask region.
std::vector<std::int64_t> connected_component_areas(const LabelMap& mask);

}  // namespace finescale::synth
