// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/synth.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>

#include "finescale/rng.hpp"

namespace finescale::synth {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kGeneratorVersion = 1;
constexpr int kMaxImageRetries = 100;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

std::string image_id(const SynthSpec& spec, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05d", synth_kind_name(spec.kind), index);
  return buf;
}

RngStream image_stream(const SynthSpec& spec, int index, int retry) {
  std::string id = std::string("synth/") + synth_kind_name(spec.kind) + "/" +
                   std::to_string(index);
  if (retry > 0) id += "/retry" + std::to_string(retry);
  return RngStream(spec.seed, id);
}

void add_noise_and_clamp(Tensor& image, double sigma, RngStream& rng) {
  for (std::int64_t i = 0; i < image.numel(); ++i) {
    image[i] = clamp01(image[i] + sigma * rng.normal());
  }
}

/// Horizontally layered intensity field, evaluable at fractional row
/// positions so structural displacement stays consistent across a curve.
struct LayeredField {
  double wavelength, phase, wobble_amp, wobble_freq, wobble_phase, amplitude;

  static LayeredField draw(RngStream& rng, double image_w) {
    LayeredField f;
    f.wavelength = rng.uniform(8.0, 20.0);
    f.phase = rng.uniform(0.0, kTwoPi);
    f.wobble_amp = rng.uniform(0.5, 2.5);
    f.wobble_freq = rng.uniform(1.0, 3.0) / image_w;
    f.wobble_phase = rng.uniform(0.0, kTwoPi);
    f.amplitude = rng.uniform(0.25, 0.35);
    return f;
  }

  double at(double y, double c) const {
    const double warp = wobble_amp * std::sin(kTwoPi * wobble_freq * c + wobble_phase);
    return 0.5 + amplitude * std::sin(kTwoPi * (y + warp) / wavelength + phase);
  }
};

/// Smoothed value noise: coarse random grid, bilinear interpolation.
Tensor granular_field(std::int64_t h, std::int64_t w, RngStream& rng) {
  const std::int64_t g = 4;
  const std::int64_t gh = h / g + 2, gw = w / g + 2;
  std::vector<double> grid(static_cast<std::size_t>(gh * gw));
  for (double& v : grid) v = rng.uniform(0.3, 0.7);
  Tensor out({h, w});
  for (std::int64_t r = 0; r < h; ++r) {
    const double gr = static_cast<double>(r) / g;
    const std::int64_t r0 = static_cast<std::int64_t>(gr);
    const double fr = gr - r0;
    for (std::int64_t c = 0; c < w; ++c) {
      const double gc = static_cast<double>(c) / g;
      const std::int64_t c0 = static_cast<std::int64_t>(gc);
      const double fc = gc - c0;
      const double v00 = grid[static_cast<std::size_t>(r0 * gw + c0)];
      const double v01 = grid[static_cast<std::size_t>(r0 * gw + c0 + 1)];
      const double v10 = grid[static_cast<std::size_t>((r0 + 1) * gw + c0)];
      const double v11 = grid[static_cast<std::size_t>((r0 + 1) * gw + c0 + 1)];
      out.at(r, c) = (1 - fr) * ((1 - fc) * v00 + fc * v01) + fr * ((1 - fc) * v10 + fc * v11);
    }
  }
  return out;
}

void require_kind(const SynthSpec& spec, SynthKind want1, SynthKind want2) {
  if (spec.kind != want1 && spec.kind != want2) throw Error(ErrorKind::spec, "kind");
}

// ---------------------------------------------------------------------------
// thin_curves

bool try_thin_curves(const SynthSpec& spec, RngStream& rng, Tensor& image, LabelMap& mask) {
  const std::int64_t h = spec.image_h, w = spec.image_w;
  const LayeredField field = LayeredField::draw(rng, static_cast<double>(w));
  mask = LabelMap(h, w);

  // Vertical displacement accumulated across curves; sampling the layered
  // field through it produces the intensity discontinuity at each curve.
  Tensor displacement({h, w});
  const std::int64_t curves = rng.poisson(spec.density);
  for (std::int64_t k = 0; k < curves; ++k) {
    const double x0 = rng.uniform(2.0, static_cast<double>(w - 3));
    const double tilt = rng.uniform(-0.3, 0.3);
    const std::int64_t r0 = rng.uniform_int(0, h * 3 / 10);
    const std::int64_t r1 = rng.uniform_int(h * 6 / 10, h - 1);
    const double throw_px = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(2.0, 5.0);
    double x = x0;
    for (std::int64_t r = r0; r <= r1; ++r) {
      x += tilt + rng.uniform(-0.35, 0.35);
      const std::int64_t cx = static_cast<std::int64_t>(std::floor(x));
      for (int t = 0; t < spec.thickness_px; ++t) {
        const std::int64_t c = cx + t - (spec.thickness_px - 1) / 2;
        if (c >= 0 && c < w) mask.at(r, c) = 1;
      }
      for (std::int64_t c = std::max<std::int64_t>(cx + 1, 0); c < w; ++c) {
        displacement.at(r, c) += throw_px;
      }
    }
  }

  image = Tensor({h, w});
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      double v = field.at(static_cast<double>(r) + displacement.at(r, c), static_cast<double>(c));
      if (mask.at(r, c) != 0) v *= 0.6;  // curves image as low-amplitude traces
      image.at(r, c) = v;
    }
  }
  add_noise_and_clamp(image, spec.noise_sigma, rng);
  return foreground_fraction(mask) < 0.05;
}

// ---------------------------------------------------------------------------
// small_blobs

bool try_small_blobs(const SynthSpec& spec, RngStream& rng, Tensor& image, LabelMap& mask) {
  const std::int64_t h = spec.image_h, w = spec.image_w;
  image = granular_field(h, w, rng);
  mask = LabelMap(h, w);

  // Count first so the per-image blob count is exactly Poisson(density).
  const std::int64_t blobs = rng.poisson(spec.density);
  const double sep = 2.0 * spec.radius_px + 2.0;
  std::vector<std::pair<double, double>> centers;
  for (std::int64_t k = 0; k < blobs; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const double cy = rng.uniform(spec.radius_px + 1.0, static_cast<double>(h) - spec.radius_px - 2.0);
      const double cx = rng.uniform(spec.radius_px + 1.0, static_cast<double>(w) - spec.radius_px - 2.0);
      bool clear = true;
      for (const auto& [oy, ox] : centers) {
        if (std::hypot(cy - oy, cx - ox) < sep) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      centers.emplace_back(cy, cx);
      placed = true;

      const double a = rng.uniform(0.6 * spec.radius_px, static_cast<double>(spec.radius_px));
      const double b = rng.uniform(0.6 * spec.radius_px, static_cast<double>(spec.radius_px));
      const double theta = rng.uniform(0.0, kTwoPi);
      const double amp = rng.uniform(0.3, 0.6);
      const double ct = std::cos(theta), st = std::sin(theta);
      const std::int64_t reach = spec.radius_px + 1;
      for (std::int64_t dr = -reach; dr <= reach; ++dr) {
        for (std::int64_t dc = -reach; dc <= reach; ++dc) {
          const std::int64_t r = static_cast<std::int64_t>(std::llround(cy)) + dr;
          const std::int64_t c = static_cast<std::int64_t>(std::llround(cx)) + dc;
          if (r < 0 || r >= h || c < 0 || c >= w) continue;
          const double u = dr * ct + dc * st;
          const double v = -dr * st + dc * ct;
          const double d2 = (u * u) / (a * a) + (v * v) / (b * b);
          if (d2 <= 1.0) mask.at(r, c) = 1;
          if (d2 <= 4.0) image.at(r, c) += amp * std::exp(-d2);
        }
      }
    }
    if (!placed) return false;  // crowded draw; regenerate the image
  }
  add_noise_and_clamp(image, spec.noise_sigma, rng);
  return foreground_fraction(mask) < 0.08;
}

// ---------------------------------------------------------------------------
// large_bands

void make_large_bands(const SynthSpec& spec, RngStream& rng, Tensor& image, LabelMap& mask) {
  const std::int64_t h = spec.image_h, w = spec.image_w;
  const int bands = spec.band_count;
  mask = LabelMap(h, w);
  image = Tensor({h, w});

  // One single-valued boundary curve per interior interface; amplitudes are
  // bounded by a quarter of the nominal band height so curves never cross.
  const double band_h = static_cast<double>(h) / bands;
  std::vector<std::vector<double>> boundary(static_cast<std::size_t>(std::max(bands - 1, 0)));
  for (int k = 0; k + 1 < bands; ++k) {
    const double base = band_h * (k + 1);
    const double amp = rng.uniform(0.1, 0.24) * band_h;
    const double freq = rng.uniform(1.0, 2.5) / static_cast<double>(w);
    const double phase = rng.uniform(0.0, kTwoPi);
    const double drift = rng.uniform(-0.2, 0.2) * band_h / static_cast<double>(w);
    auto& row = boundary[static_cast<std::size_t>(k)];
    row.resize(static_cast<std::size_t>(w));
    for (std::int64_t c = 0; c < w; ++c) {
      row[static_cast<std::size_t>(c)] =
          base + amp * std::sin(kTwoPi * freq * c + phase) + drift * c;
    }
  }

  std::vector<double> band_mean(static_cast<std::size_t>(bands));
  std::vector<LayeredField> band_texture;
  band_texture.reserve(static_cast<std::size_t>(bands));
  for (int k = 0; k < bands; ++k) {
    band_mean[static_cast<std::size_t>(k)] = rng.uniform(0.3, 0.7);  // overlapping ranges
    band_texture.push_back(LayeredField::draw(rng, static_cast<double>(w)));
  }

  for (std::int64_t c = 0; c < w; ++c) {
    for (std::int64_t r = 0; r < h; ++r) {
      int label = bands - 1;
      for (int k = 0; k + 1 < bands; ++k) {
        if (static_cast<double>(r) < boundary[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)]) {
          label = k;
          break;
        }
      }
      mask.at(r, c) = static_cast<std::uint8_t>(label);
      const LayeredField& tex = band_texture[static_cast<std::size_t>(label)];
      const double local =
          0.35 * (tex.at(static_cast<double>(r), static_cast<double>(c)) - 0.5) * 2.0;
      image.at(r, c) = band_mean[static_cast<std::size_t>(label)] + 0.15 * local;
    }
  }
  add_noise_and_clamp(image, spec.noise_sigma, rng);
}

// ---------------------------------------------------------------------------
// large_regions

bool try_large_regions(const SynthSpec& spec, RngStream& rng, Tensor& image, LabelMap& mask) {
  const std::int64_t h = spec.image_h, w = spec.image_w;
  image = granular_field(h, w, rng);
  mask = LabelMap(h, w);

  const double target = rng.uniform(0.30, 0.50);
  const double r0 = std::sqrt(target * static_cast<double>(h * w) / std::numbers::pi);
  const double cy = h / 2.0 + rng.uniform(-0.05, 0.05) * h;
  const double cx = w / 2.0 + rng.uniform(-0.05, 0.05) * w;
  double harm_amp[4], harm_phase[4];
  for (int k = 0; k < 4; ++k) {
    harm_amp[k] = rng.uniform(0.0, 0.25 / (k + 1));
    harm_phase[k] = rng.uniform(0.0, kTwoPi);
  }
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      const double dy = r - cy, dx = c - cx;
      const double theta = std::atan2(dy, dx);
      double rho = 1.0;
      for (int k = 0; k < 4; ++k) rho += harm_amp[k] * std::sin((k + 1) * theta + harm_phase[k]);
      if (std::hypot(dy, dx) <= r0 * rho) {
        mask.at(r, c) = 1;
        image.at(r, c) += 0.25;
      }
    }
  }
  add_noise_and_clamp(image, spec.noise_sigma, rng);

  const double fg = foreground_fraction(mask);
  if (fg < 0.25 || fg > 0.60) return false;
  const auto areas = connected_component_areas(mask);
  return areas.size() == 1;
}

// ---------------------------------------------------------------------------

using TryGenerator = bool (*)(const SynthSpec&, RngStream&, Tensor&, LabelMap&);

std::vector<ImageRecord> generate_with_retries(const SynthSpec& spec, TryGenerator attempt) {
  std::vector<ImageRecord> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) {
    ImageRecord rec;
    rec.id = image_id(spec, i);
    bool ok = false;
    for (int retry = 0; retry < kMaxImageRetries && !ok; ++retry) {
      RngStream rng = image_stream(spec, i, retry);
      Tensor image;
      LabelMap mask;
      if (attempt(spec, rng, image, mask)) {
        rec.pixels = std::move(image);
        rec.mask = std::move(mask);
        ok = true;
      }
    }
    if (!ok) {
      throw Error(ErrorKind::spec,
                  "generation constraints unsatisfiable for '" + rec.id + "'");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public API

const char* synth_kind_name(SynthKind k) {
  switch (k) {
    case SynthKind::thin_curves: return "thin_curves";
    case SynthKind::small_blobs: return "small_blobs";
    case SynthKind::large_bands: return "large_bands";
    case SynthKind::large_regions: return "large_regions";
  }
  throw Error(ErrorKind::internal, "bad SynthKind");
}

SynthKind synth_kind_from_name(const std::string& name) {
  if (name == "thin_curves") return SynthKind::thin_curves;
  if (name == "small_blobs") return SynthKind::small_blobs;
  if (name == "large_bands") return SynthKind::large_bands;
  if (name == "large_regions") return SynthKind::large_regions;
  throw Error(ErrorKind::spec, "unknown kind '" + name + "'");
}

const char* texture_name(TextureKind t) {
  switch (t) {
    case TextureKind::none: return "none";
    case TextureKind::layered_reflectors: return "layered_reflectors";
    case TextureKind::granular: return "granular";
  }
  throw Error(ErrorKind::internal, "bad TextureKind");
}

TextureKind texture_from_name(const std::string& name) {
  if (name == "none") return TextureKind::none;
  if (name == "layered_reflectors") return TextureKind::layered_reflectors;
  if (name == "granular") return TextureKind::granular;
  throw Error(ErrorKind::spec, "unknown texture '" + name + "'");
}

void SynthSpec::validate() const {
  if (image_h < 16 || image_w < 16) throw Error(ErrorKind::spec, "image_size");
  if (count < 0) throw Error(ErrorKind::spec, "count");
  if (density < 0.0) throw Error(ErrorKind::spec, "density");
  if (noise_sigma < 0.0) throw Error(ErrorKind::spec, "noise_sigma");
  switch (kind) {
    case SynthKind::thin_curves:
      if (thickness_px < 1 || thickness_px > 3) throw Error(ErrorKind::spec, "thickness_px");
      break;
    case SynthKind::small_blobs:
      if (radius_px < 1 || radius_px > 5) throw Error(ErrorKind::spec, "radius_px");
      break;
    case SynthKind::large_bands: {
      if (band_count < 1) throw Error(ErrorKind::spec, "band_count");
      const double span = static_cast<double>(image_h) / band_count;
      if (span < 0.25 * static_cast<double>(std::min(image_h, image_w))) {
        throw Error(ErrorKind::spec, "band_count");
      }
      break;
    }
    case SynthKind::large_regions:
      break;
  }
}

SynthSpec make_default_spec(SynthKind kind) {
  SynthSpec spec;
  spec.kind = kind;
  switch (kind) {
    case SynthKind::thin_curves:
      spec.texture = TextureKind::layered_reflectors;
      break;
    case SynthKind::small_blobs:
      spec.texture = TextureKind::granular;
      break;
    case SynthKind::large_bands:
      spec.texture = TextureKind::layered_reflectors;
      spec.density = 1.0;
      break;
    case SynthKind::large_regions:
      spec.texture = TextureKind::granular;
      spec.density = 1.0;
      break;
  }
  return spec;
}

std::vector<ImageRecord> gen_thin_curves(const SynthSpec& spec) {
  require_kind(spec, SynthKind::thin_curves, SynthKind::thin_curves);
  spec.validate();
  return generate_with_retries(spec, &try_thin_curves);
}

std::vector<ImageRecord> gen_small_blobs(const SynthSpec& spec) {
  require_kind(spec, SynthKind::small_blobs, SynthKind::small_blobs);
  spec.validate();
  return generate_with_retries(spec, &try_small_blobs);
}

std::vector<ImageRecord> gen_large_structures(const SynthSpec& spec) {
  require_kind(spec, SynthKind::large_bands, SynthKind::large_regions);
  spec.validate();
  if (spec.kind == SynthKind::large_regions) {
    return generate_with_retries(spec, &try_large_regions);
  }
  return generate_with_retries(
      spec, +[](const SynthSpec& s, RngStream& rng, Tensor& image, LabelMap& mask) {
        make_large_bands(s, rng, image, mask);
        return true;
      });
}

std::vector<ImageRecord> generate_dataset(const SynthSpec& spec) {
  std::vector<ImageRecord> records;
  switch (spec.kind) {
    case SynthKind::thin_curves: records = gen_thin_curves(spec); break;
    case SynthKind::small_blobs: records = gen_small_blobs(spec); break;
    default: records = gen_large_structures(spec); break;
  }
  assign_splits(records);
  return records;
}

void assign_splits(std::vector<ImageRecord>& records) {
  const std::int64_t n = static_cast<std::int64_t>(records.size());
  const std::int64_t n_pre = n * 60 / 100;
  const std::int64_t n_train = n * 20 / 100;
  const std::int64_t n_val = n * 10 / 100;
  for (std::int64_t i = 0; i < n; ++i) {
    Split s = Split::test;
    if (i < n_pre) s = Split::pretrain;
    else if (i < n_pre + n_train) s = Split::train;
    else if (i < n_pre + n_train + n_val) s = Split::val;
    records[static_cast<std::size_t>(i)].split = s;
  }
}

std::string write_dataset(const std::vector<ImageRecord>& records, const SynthSpec& spec,
                          const std::string& directory) {
  fs::create_directories(directory);
  json files = json::array();
  for (const ImageRecord& rec : records) {
    const std::int64_t h = rec.height(), w = rec.width();
    cv::Mat image(static_cast<int>(h), static_cast<int>(w), CV_16UC1);
    for (std::int64_t r = 0; r < h; ++r) {
      for (std::int64_t c = 0; c < w; ++c) {
        image.at<std::uint16_t>(static_cast<int>(r), static_cast<int>(c)) =
            static_cast<std::uint16_t>(std::llround(clamp01(rec.pixels.at(r, c)) * 65535.0));
      }
    }
    const std::string image_name = rec.id + ".png";
    if (!cv::imwrite(directory + "/" + image_name, image)) {
      throw Error(ErrorKind::io, "cannot write '" + image_name + "'");
    }

    std::string mask_name;
    if (rec.mask) {
      cv::Mat mask(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
      for (std::int64_t r = 0; r < h; ++r) {
        for (std::int64_t c = 0; c < w; ++c) {
          mask.at<std::uint8_t>(static_cast<int>(r), static_cast<int>(c)) = rec.mask->at(r, c);
        }
      }
      mask_name = rec.id + "_mask.png";
      if (!cv::imwrite(directory + "/" + mask_name, mask)) {
        throw Error(ErrorKind::io, "cannot write '" + mask_name + "'");
      }
    }
    files.push_back(json{{"id", rec.id},
                         {"split", split_name(rec.split)},
                         {"image", image_name},
                         {"mask", mask_name}});
  }

  const json manifest{{"schema_version", 1},
                      {"generator_version", kGeneratorVersion},
                      {"spec",
                       {{"kind", synth_kind_name(spec.kind)},
                        {"image_h", spec.image_h},
                        {"image_w", spec.image_w},
                        {"count", spec.count},
                        {"density", spec.density},
                        {"thickness_px", spec.thickness_px},
                        {"radius_px", spec.radius_px},
                        {"band_count", spec.band_count},
                        {"noise_sigma", spec.noise_sigma},
                        {"texture", texture_name(spec.texture)},
                        {"seed", spec.seed}}},
                      {"files", files}};
  const std::string manifest_path = directory + "/manifest.json";
  std::ofstream out(manifest_path);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + manifest_path + "'");
  out << manifest.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::io, "failed writing '" + manifest_path + "'");
  return manifest_path;
}

double foreground_fraction(const LabelMap& mask) {
  if (mask.values.empty()) return 0.0;
  return static_cast<double>(mask.count_nonzero()) / static_cast<double>(mask.rows * mask.cols);
}

std::vector<std::int64_t> connected_component_areas(const LabelMap& mask) {
  std::vector<std::int64_t> areas;
  std::vector<bool> seen(mask.values.size(), false);
  for (std::int64_t r = 0; r < mask.rows; ++r) {
    for (std::int64_t c = 0; c < mask.cols; ++c) {
      const std::size_t start = static_cast<std::size_t>(r * mask.cols + c);
      if (mask.values[start] == 0 || seen[start]) continue;
      std::int64_t area = 0;
      std::deque<std::pair<std::int64_t, std::int64_t>> queue{{r, c}};
      seen[start] = true;
      while (!queue.empty()) {
        const auto [cr, cc] = queue.front();
        queue.pop_front();
        ++area;
        const std::int64_t dr[4] = {-1, 1, 0, 0};
        const std::int64_t dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const std::int64_t nr = cr + dr[k], nc = cc + dc[k];
          if (nr < 0 || nr >= mask.rows || nc < 0 || nc >= mask.cols) continue;
          const std::size_t idx = static_cast<std::size_t>(nr * mask.cols + nc);
          if (mask.values[idx] == 0 || seen[idx]) continue;
          seen[idx] = true;
          queue.emplace_back(nr, nc);
        }
      }
      areas.push_back(area);
    }
  }
  return areas;
}

}  // namespace finescale::synth
