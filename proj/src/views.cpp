// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/views.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace finescale::views {

using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct CenterRect {
  std::int64_t u_lo, u_hi, v_lo, v_hi;  // inclusive bounds
};

CenterRect valid_center_rect(std::int64_t image_h, std::int64_t image_w, std::int64_t h,
                             std::int64_t w) {
  if (h < 4 || w < 4) throw Error(ErrorKind::shape, "crop extent below the 4-pixel floor");
  if (h > image_h || w > image_w) throw Error(ErrorKind::shape, "crop exceeds image");
  return {h / 2, image_h - (h + 1) / 2, w / 2, image_w - (w + 1) / 2};
}

std::int64_t mirror_index(std::int64_t i, std::int64_t n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

double sample_reflect(const Tensor& p, double fy, double fx) {
  const std::int64_t rows = p.dim(0), cols = p.dim(1);
  const double floor_y = std::floor(fy), floor_x = std::floor(fx);
  const std::int64_t y0 = static_cast<std::int64_t>(floor_y);
  const std::int64_t x0 = static_cast<std::int64_t>(floor_x);
  const double dy = fy - floor_y, dx = fx - floor_x;
  const std::int64_t ya = mirror_index(y0, rows), yb = mirror_index(y0 + 1, rows);
  const std::int64_t xa = mirror_index(x0, cols), xb = mirror_index(x0 + 1, cols);
  const double top = p.at(ya, xa) * (1.0 - dx) + p.at(ya, xb) * dx;
  const double bot = p.at(yb, xa) * (1.0 - dx) + p.at(yb, xb) * dx;
  return top * (1.0 - dy) + bot * dy;
}

Tensor apply_affine(const Tensor& patch, double rotation_deg, double shear_deg, double scale) {
  const std::int64_t rows = patch.dim(0), cols = patch.dim(1);
  const double theta = rotation_deg * kPi / 180.0;
  const double k = std::tan(shear_deg * kPi / 180.0);
  const double c = std::cos(theta), s = std::sin(theta);
  // Forward map M = R(theta) * Shear(k) * scale, about the patch center.
  const double m00 = scale * c, m01 = scale * (c * k - s);
  const double m10 = scale * s, m11 = scale * (s * k + c);
  const double det = m00 * m11 - m01 * m10;
  const double i00 = m11 / det, i01 = -m01 / det;
  const double i10 = -m10 / det, i11 = m00 / det;
  const double cy = static_cast<double>(rows - 1) / 2.0;
  const double cx = static_cast<double>(cols - 1) / 2.0;
  Tensor out({rows, cols});
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t q = 0; q < cols; ++q) {
      const double du = static_cast<double>(r) - cy;
      const double dv = static_cast<double>(q) - cx;
      const double su = cy + i00 * du + i01 * dv;
      const double sv = cx + i10 * du + i11 * dv;
      out.at(r, q) = sample_reflect(patch, su, sv);
    }
  }
  return out;
}

json window_to_json(const Window& w) {
  return json{{"cu", w.center_u}, {"cv", w.center_v}, {"h", w.h}, {"w", w.w}};
}

Window window_from_json(const json& j) {
  Window w;
  w.center_u = j.at("cu").get<std::int64_t>();
  w.center_v = j.at("cv").get<std::int64_t>();
  w.h = j.at("h").get<std::int64_t>();
  w.w = j.at("w").get<std::int64_t>();
  return w;
}

json aug_to_json(const AugmentationDescriptor& a) {
  return json{{"hflip", a.hflip},
              {"vflip", a.vflip},
              {"iscale", a.intensity_scale},
              {"ishift", a.intensity_shift},
              {"rot", a.rotation_deg},
              {"shear", a.shear_deg},
              {"scale", a.scale}};
}

AugmentationDescriptor aug_from_json(const json& j) {
  AugmentationDescriptor a;
  a.hflip = j.at("hflip").get<bool>();
  a.vflip = j.at("vflip").get<bool>();
  a.intensity_scale = j.at("iscale").get<double>();
  a.intensity_shift = j.at("ishift").get<double>();
  a.rotation_deg = j.at("rot").get<double>();
  a.shear_deg = j.at("shear").get<double>();
  a.scale = j.at("scale").get<double>();
  return a;
}

Tensor build_view(const Tensor& image, const Window& window, std::int64_t view_h,
                  std::int64_t view_w, const AugmentationDescriptor& aug) {
  Tensor raw = crop(image, window);
  if (raw.dim(0) != view_h || raw.dim(1) != view_w) raw = resize_bilinear(raw, view_h, view_w);
  return augment(raw, aug);
}

}  // namespace

std::int64_t floor_to_multiple(std::int64_t value, std::int64_t multiple) {
  if (multiple < 1) throw Error(ErrorKind::internal, "floor_to_multiple needs multiple >= 1");
  return (value / multiple) * multiple;
}

ViewGeometry resolve_view_geometry(const ValidatedConfig& config, std::int64_t base_l,
                                   std::int64_t stride_multiple) {
  ViewGeometry g;
  if (config->sampling == SamplingStrategy::full_view) {
    const std::int64_t edge = floor_to_multiple(base_l, stride_multiple);
    if (edge < 4) throw Error(ErrorKind::too_small, "full-view edge below the 4-pixel floor");
    g.crop_h = g.crop_w = g.view_h = g.view_w = edge;
    g.delta = 0.0;
    return g;
  }
  ScaleSpec spec{base_l, *config->crop_divisor};
  spec.validate();
  const std::int64_t edge = std::max<std::int64_t>(floor_to_multiple(spec.resolved_size(), stride_multiple),
                                                   stride_multiple);
  if (edge < 4) throw Error(ErrorKind::too_small, "resolved crop below the 4-pixel floor");
  g.crop_h = g.crop_w = g.view_h = g.view_w = edge;
  g.delta = config->delta ? *config->delta : static_cast<double>(edge);
  return g;
}

Window sample_window_random(std::int64_t image_h, std::int64_t image_w, std::int64_t h,
                            std::int64_t w, RngStream& rng) {
  const CenterRect rect = valid_center_rect(image_h, image_w, h, w);
  Window window;
  window.center_u = rng.uniform_int(rect.u_lo, rect.u_hi);
  window.center_v = rng.uniform_int(rect.v_lo, rect.v_hi);
  window.h = h;
  window.w = w;
  return window;
}

Window sample_window_proximal(const Window& first, std::int64_t image_h, std::int64_t image_w,
                              std::int64_t h, std::int64_t w, double delta, RngStream& rng) {
  if (!first.in_bounds(image_h, image_w)) {
    throw Error(ErrorKind::shape, "first window out of bounds");
  }
  const CenterRect rect = valid_center_rect(image_h, image_w, h, w);
  const double u1 = static_cast<double>(first.center_u);
  const double v1 = static_cast<double>(first.center_v);
  // Nearest rectangle point to the first center; if even it misses the open
  // ball, no integer center can satisfy the constraint.
  const std::int64_t nu = std::clamp(first.center_u, rect.u_lo, rect.u_hi);
  const std::int64_t nv = std::clamp(first.center_v, rect.v_lo, rect.v_hi);
  const double nun = static_cast<double>(nu) - u1, nvn = static_cast<double>(nv) - v1;
  if (nun * nun + nvn * nvn >= delta * delta) {
    throw Error(ErrorKind::infeasible_constraint, "no valid center within delta of the first");
  }
  // Rejection sampling from the delta-ball bounding box clipped to the valid
  // rectangle: uniform over the feasible set, and guaranteed to terminate
  // because the set was just shown non-empty.
  const std::int64_t margin = static_cast<std::int64_t>(std::ceil(delta));
  const std::int64_t u_lo = std::max(rect.u_lo, first.center_u - margin);
  const std::int64_t u_hi = std::min(rect.u_hi, first.center_u + margin);
  const std::int64_t v_lo = std::max(rect.v_lo, first.center_v - margin);
  const std::int64_t v_hi = std::min(rect.v_hi, first.center_v + margin);
  for (;;) {
    const std::int64_t u = rng.uniform_int(u_lo, u_hi);
    const std::int64_t v = rng.uniform_int(v_lo, v_hi);
    const double du = static_cast<double>(u) - u1, dv = static_cast<double>(v) - v1;
    if (du * du + dv * dv < delta * delta) {
      return Window{u, v, h, w};
    }
  }
}

Tensor crop(const Tensor& image, const Window& window) {
  if (image.ndim() != 2) throw Error(ErrorKind::shape, "crop expects a 2-D image");
  if (!window.in_bounds(image.dim(0), image.dim(1))) {
    throw Error(ErrorKind::shape, "window out of bounds");
  }
  const std::int64_t top = window.top(), left = window.left();
  Tensor out({window.h, window.w});
  for (std::int64_t r = 0; r < window.h; ++r) {
    for (std::int64_t c = 0; c < window.w; ++c) {
      out.at(r, c) = image.at(top + r, left + c);
    }
  }
  return out;
}

LabelMap crop(const LabelMap& labels, const Window& window) {
  if (!window.in_bounds(labels.rows, labels.cols)) {
    throw Error(ErrorKind::shape, "window out of bounds");
  }
  const std::int64_t top = window.top(), left = window.left();
  LabelMap out(window.h, window.w);
  for (std::int64_t r = 0; r < window.h; ++r) {
    for (std::int64_t c = 0; c < window.w; ++c) {
      out.at(r, c) = labels.at(top + r, left + c);
    }
  }
  return out;
}

Tensor augment(const Tensor& patch, const AugmentationDescriptor& descriptor) {
  if (patch.ndim() != 2) throw Error(ErrorKind::shape, "augment expects a 2-D patch");
  if (!patch.all_finite()) throw Error(ErrorKind::format, "augment input must be finite");
  Tensor out = patch;
  if (!descriptor.identity_affine()) {
    out = apply_affine(out, descriptor.rotation_deg, descriptor.shear_deg, descriptor.scale);
  }
  const std::int64_t rows = out.dim(0), cols = out.dim(1);
  if (descriptor.hflip) {
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t c = 0; c < cols / 2; ++c) {
        std::swap(out.at(r, c), out.at(r, cols - 1 - c));
      }
    }
  }
  if (descriptor.vflip) {
    for (std::int64_t r = 0; r < rows / 2; ++r) {
      for (std::int64_t c = 0; c < cols; ++c) {
        std::swap(out.at(r, c), out.at(rows - 1 - r, c));
      }
    }
  }
  if (descriptor.intensity_scale != 1.0 || descriptor.intensity_shift != 0.0) {
    for (std::int64_t i = 0; i < out.numel(); ++i) {
      out[i] = out[i] * descriptor.intensity_scale + descriptor.intensity_shift;
    }
  }
  return out;
}

AugmentationDescriptor sample_augmentation(const ValidatedConfig& config, RngStream& rng) {
  AugmentationDescriptor a;
  if (config->aug_affine) {
    a.rotation_deg = rng.uniform(-config->max_rotation_deg, config->max_rotation_deg);
    a.shear_deg = rng.uniform(-config->max_shear_deg, config->max_shear_deg);
    a.scale = rng.uniform(config->affine_scale_lo, config->affine_scale_hi);
  }
  if (config->aug_flips) {
    a.hflip = rng.bernoulli(0.5);
    a.vflip = rng.bernoulli(0.5);
  }
  if (config->aug_intensity) {
    a.intensity_scale = rng.uniform(config->intensity_scale_lo, config->intensity_scale_hi);
    a.intensity_shift = rng.uniform(-config->intensity_shift_max, config->intensity_shift_max);
  }
  return a;
}

ViewPair make_view_pair(const ImageRecord& image, const ValidatedConfig& config,
                        const ViewGeometry& geometry, RngStream& rng) {
  const std::int64_t H = image.height(), W = image.width();
  ViewPair pair;
  pair.source_id = image.id;
  if (config->sampling == SamplingStrategy::full_view) {
    pair.window1 = pair.window2 = Window{H / 2, W / 2, H, W};
  } else {
    pair.window1 = sample_window_random(H, W, geometry.crop_h, geometry.crop_w, rng);
    if (config->sampling == SamplingStrategy::proximity) {
      pair.window2 = sample_window_proximal(pair.window1, H, W, geometry.crop_h, geometry.crop_w,
                                            geometry.delta, rng);
    } else {
      pair.window2 = sample_window_random(H, W, geometry.crop_h, geometry.crop_w, rng);
    }
  }
  pair.aug1 = sample_augmentation(config, rng);
  pair.aug2 = sample_augmentation(config, rng);
  pair.view1 = build_view(image.pixels, pair.window1, geometry.view_h, geometry.view_w, pair.aug1);
  pair.view2 = build_view(image.pixels, pair.window2, geometry.view_h, geometry.view_w, pair.aug2);
  return pair;
}

ViewPair make_view_pair(const ImageRecord& image, const ValidatedConfig& config, RngStream& rng) {
  const std::int64_t base_l = std::min(image.height(), image.width());
  return make_view_pair(image, config, resolve_view_geometry(config, base_l), rng);
}

ViewRecord to_record(const ViewPair& pair) {
  ViewRecord rec;
  rec.source_id = pair.source_id;
  rec.window1 = pair.window1;
  rec.window2 = pair.window2;
  rec.view_h = pair.view1.dim(0);
  rec.view_w = pair.view1.dim(1);
  rec.aug1 = pair.aug1;
  rec.aug2 = pair.aug2;
  return rec;
}

std::string view_record_to_json(const ViewRecord& record) {
  json j{{"source_id", record.source_id},
         {"window1", window_to_json(record.window1)},
         {"window2", window_to_json(record.window2)},
         {"view_h", record.view_h},
         {"view_w", record.view_w},
         {"aug1", aug_to_json(record.aug1)},
         {"aug2", aug_to_json(record.aug2)}};
  return j.dump();
}

ViewRecord view_record_from_json(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("view log line: ") + e.what());
  }
  ViewRecord rec;
  rec.source_id = j.at("source_id").get<std::string>();
  rec.window1 = window_from_json(j.at("window1"));
  rec.window2 = window_from_json(j.at("window2"));
  rec.view_h = j.at("view_h").get<std::int64_t>();
  rec.view_w = j.at("view_w").get<std::int64_t>();
  rec.aug1 = aug_from_json(j.at("aug1"));
  rec.aug2 = aug_from_json(j.at("aug2"));
  return rec;
}

void append_view_log(std::ostream& out, const ViewRecord& record) {
  out << view_record_to_json(record) << '\n';
}

std::vector<ViewRecord> read_view_log(std::istream& in) {
  std::vector<ViewRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    records.push_back(view_record_from_json(line));
  }
  return records;
}

ViewPair replay_view_pair(const ImageRecord& image, const ViewRecord& record) {
  ViewPair pair;
  pair.source_id = record.source_id;
  pair.window1 = record.window1;
  pair.window2 = record.window2;
  pair.aug1 = record.aug1;
  pair.aug2 = record.aug2;
  pair.view1 = build_view(image.pixels, record.window1, record.view_h, record.view_w, record.aug1);
  pair.view2 = build_view(image.pixels, record.window2, record.view_h, record.view_w, record.aug2);
  return pair;
}

}  // namespace finescale::views
