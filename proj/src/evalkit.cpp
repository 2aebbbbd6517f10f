// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "finescale/error.hpp"
#include "finescale/views.hpp"

namespace finescale::evalkit {

namespace {

constexpr double kFarAway = 1e18;  // acts as infinity inside the transform

void require_same_shape(const LabelMap& a, const LabelMap& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw Error(ErrorKind::shape, "mask shapes differ");
  }
}

/// 1-D squared-distance lower envelope (exact for integer sites).
void dt1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
          std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = 0;
  v[0] = 0;
  z[0] = -kFarAway;
  z[1] = kFarAway;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + static_cast<double>(q) * q) -
                (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
               (2.0 * (q - v[k]));
    while (s <= z[k]) {
      --k;
      s = ((f[q] + static_cast<double>(q) * q) -
           (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
          (2.0 * (q - v[k]));
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kFarAway;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

std::vector<std::pair<std::int64_t, std::int64_t>> foreground(const LabelMap& mask) {
  std::vector<std::pair<std::int64_t, std::int64_t>> pts;
  for (std::int64_t r = 0; r < mask.rows; ++r) {
    for (std::int64_t c = 0; c < mask.cols; ++c) {
      if (mask.at(r, c) != 0) pts.emplace_back(r, c);
    }
  }
  return pts;
}

LabelMap class_mask(const LabelMap& labels, std::uint8_t cls) {
  LabelMap out(labels.rows, labels.cols);
  for (std::size_t i = 0; i < labels.values.size(); ++i) {
    out.values[i] = labels.values[i] == cls ? 1 : 0;
  }
  return out;
}

}  // namespace

StitchPlan build_stitch_plan(std::int64_t image_h, std::int64_t image_w, std::int64_t h,
                             std::int64_t w, std::int64_t stride) {
  if (h < 4 || w < 4 || h > image_h || w > image_w) {
    throw Error(ErrorKind::shape, "window does not fit the image");
  }
  if (stride < 1 || stride >= h || stride >= w) {
    throw Error(ErrorKind::stride, "stride must satisfy 1 <= s < min(h, w)");
  }
  auto origins = [stride](std::int64_t extent, std::int64_t win) {
    std::vector<std::int64_t> out;
    for (std::int64_t o = 0; o + win < extent; o += stride) out.push_back(o);
    out.push_back(extent - win);  // final window flush with the border
    return out;
  };
  const std::vector<std::int64_t> ys = origins(image_h, h);
  const std::vector<std::int64_t> xs = origins(image_w, w);

  StitchPlan plan;
  plan.image_h = image_h;
  plan.image_w = image_w;
  plan.h = h;
  plan.w = w;
  plan.stride = stride;
  plan.coverage.assign(static_cast<std::size_t>(image_h * image_w), 0);
  for (std::int64_t oy : ys) {
    for (std::int64_t ox : xs) {
      plan.windows.push_back(Window{oy + h / 2, ox + w / 2, h, w});
      for (std::int64_t r = oy; r < oy + h; ++r) {
        for (std::int64_t c = ox; c < ox + w; ++c) {
          ++plan.coverage[static_cast<std::size_t>(r * image_w + c)];
        }
      }
    }
  }
  return plan;
}

Tensor stitch_predict(const Tensor& image, const PatchPredictor& model, const StitchPlan& plan) {
  if (image.ndim() != 2 || image.dim(0) != plan.image_h || image.dim(1) != plan.image_w) {
    throw Error(ErrorKind::shape, "plan does not match the image");
  }
  Tensor accum;
  std::int64_t classes = 0;
  for (const Window& window : plan.windows) {
    const Tensor patch = views::crop(image, window);
    Tensor prob = model(patch);
    if (prob.ndim() == 2) prob = prob.reshaped({1, prob.dim(0), prob.dim(1)});
    if (prob.ndim() != 3 || prob.dim(1) != plan.h || prob.dim(2) != plan.w) {
      throw Error(ErrorKind::shape, "window prediction does not match the window size");
    }
    if (classes == 0) {
      classes = prob.dim(0);
      accum = Tensor({classes, plan.image_h, plan.image_w});
    } else if (prob.dim(0) != classes) {
      throw Error(ErrorKind::shape, "window predictions disagree on class count");
    }
    const std::int64_t top = window.top(), left = window.left();
    for (std::int64_t k = 0; k < classes; ++k) {
      for (std::int64_t r = 0; r < plan.h; ++r) {
        for (std::int64_t c = 0; c < plan.w; ++c) {
          accum[(k * plan.image_h + top + r) * plan.image_w + left + c] +=
              prob[(k * plan.h + r) * plan.w + c];
        }
      }
    }
  }
  for (std::int64_t k = 0; k < classes; ++k) {
    for (std::int64_t r = 0; r < plan.image_h; ++r) {
      for (std::int64_t c = 0; c < plan.image_w; ++c) {
        accum[(k * plan.image_h + r) * plan.image_w + c] /=
            static_cast<double>(plan.coverage_at(r, c));
      }
    }
  }
  if (classes == 1) return accum.reshaped({plan.image_h, plan.image_w});
  return accum;
}

double dice_score(const LabelMap& pred, const LabelMap& gt) {
  require_same_shape(pred, gt);
  std::int64_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const bool pa = pred.values[i] != 0, pb = gt.values[i] != 0;
    a += pa;
    b += pb;
    both += pa && pb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::vector<double> squared_distance_transform(const LabelMap& mask) {
  const std::int64_t rows = mask.rows, cols = mask.cols;
  std::vector<double> dist(static_cast<std::size_t>(rows * cols));
  for (std::size_t i = 0; i < dist.size(); ++i) {
    dist[i] = mask.values[i] != 0 ? 0.0 : kFarAway;
  }
  const std::size_t max_extent = static_cast<std::size_t>(std::max(rows, cols));
  std::vector<double> f(max_extent), d(max_extent), z(max_extent + 1);
  std::vector<int> v(max_extent);

  for (std::int64_t r = 0; r < rows; ++r) {
    f.assign(dist.begin() + r * cols, dist.begin() + (r + 1) * cols);
    f.resize(static_cast<std::size_t>(cols));
    d.resize(static_cast<std::size_t>(cols));
    dt1d(f, d, v, z);
    std::copy(d.begin(), d.end(), dist.begin() + r * cols);
  }
  f.resize(static_cast<std::size_t>(rows));
  d.resize(static_cast<std::size_t>(rows));
  for (std::int64_t c = 0; c < cols; ++c) {
    for (std::int64_t r = 0; r < rows; ++r) f[static_cast<std::size_t>(r)] = dist[r * cols + c];
    dt1d(f, d, v, z);
    for (std::int64_t r = 0; r < rows; ++r) dist[r * cols + c] = d[static_cast<std::size_t>(r)];
  }
  return dist;
}

double hausdorff(const LabelMap& pred, const LabelMap& gt, double cap) {
  require_same_shape(pred, gt);
  const auto a_pts = foreground(pred);
  const auto b_pts = foreground(gt);
  if (a_pts.empty() && b_pts.empty()) return 0.0;
  if (a_pts.empty() || b_pts.empty()) return cap;

  const std::vector<double> to_b = squared_distance_transform(gt);
  const std::vector<double> to_a = squared_distance_transform(pred);
  double worst = 0.0;
  for (const auto& [r, c] : a_pts) worst = std::max(worst, to_b[r * gt.cols + c]);
  for (const auto& [r, c] : b_pts) worst = std::max(worst, to_a[r * gt.cols + c]);
  return std::sqrt(worst);
}

double hausdorff_bruteforce(const LabelMap& pred, const LabelMap& gt, double cap) {
  require_same_shape(pred, gt);
  const auto a_pts = foreground(pred);
  const auto b_pts = foreground(gt);
  if (a_pts.empty() && b_pts.empty()) return 0.0;
  if (a_pts.empty() || b_pts.empty()) return cap;

  auto directed = [](const auto& from, const auto& to) {
    double sup = 0.0;
    for (const auto& [ar, ac] : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& [br, bc] : to) {
        const double dr = static_cast<double>(ar - br), dc = static_cast<double>(ac - bc);
        best = std::min(best, dr * dr + dc * dc);
      }
      sup = std::max(sup, best);
    }
    return sup;
  };
  return std::sqrt(std::max(directed(a_pts, b_pts), directed(b_pts, a_pts)));
}

LabelMap threshold_binary(const Tensor& prob, double threshold) {
  if (prob.ndim() != 2) throw Error(ErrorKind::shape, "threshold expects a 2-D map");
  LabelMap out(prob.dim(0), prob.dim(1));
  for (std::int64_t i = 0; i < prob.numel(); ++i) {
    out.values[static_cast<std::size_t>(i)] = prob[i] > threshold ? 1 : 0;
  }
  return out;
}

LabelMap argmax_classes(const Tensor& prob) {
  if (prob.ndim() != 3) throw Error(ErrorKind::shape, "argmax expects {C, H, W}");
  const std::int64_t classes = prob.dim(0), rows = prob.dim(1), cols = prob.dim(2);
  LabelMap out(rows, cols);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      std::int64_t best = 0;
      double best_p = prob[(0 * rows + r) * cols + c];
      for (std::int64_t k = 1; k < classes; ++k) {
        const double p = prob[(k * rows + r) * cols + c];
        if (p > best_p) {  // strict: ties keep the lowest class index
          best_p = p;
          best = k;
        }
      }
      out.at(r, c) = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

EvalSummary evaluate_split(const std::vector<ImageRecord>& records, const PatchPredictor& model,
                           std::int64_t h, std::int64_t w, std::int64_t stride, double threshold,
                           double cap, const EvalRow& row_template) {
  if (records.empty()) throw Error(ErrorKind::empty_subset, "no records to evaluate");
  EvalSummary summary;
  for (const ImageRecord& record : records) {
    if (!record.mask) throw Error(ErrorKind::missing_mask, "record '" + record.id + "'");
    const StitchPlan plan = build_stitch_plan(record.height(), record.width(), h, w, stride);
    const Tensor prob = stitch_predict(record.pixels, model, plan);

    double dice, hd;
    if (prob.ndim() == 2) {
      const LabelMap pred = threshold_binary(prob, threshold);
      dice = dice_score(pred, *record.mask);
      hd = hausdorff(pred, *record.mask, cap);
    } else {
      const LabelMap pred = argmax_classes(prob);
      const std::int64_t classes = prob.dim(0);
      double dice_sum = 0.0, hd_sum = 0.0;
      for (std::int64_t k = 0; k < classes; ++k) {
        const LabelMap pk = class_mask(pred, static_cast<std::uint8_t>(k));
        const LabelMap gk = class_mask(*record.mask, static_cast<std::uint8_t>(k));
        dice_sum += dice_score(pk, gk);
        hd_sum += hausdorff(pk, gk, cap);
      }
      dice = dice_sum / static_cast<double>(classes);
      hd = hd_sum / static_cast<double>(classes);
    }

    EvalRow row = row_template;
    row.record_id = record.id;
    row.dice = dice;
    row.hd = hd;
    summary.rows.push_back(row);
    summary.mean_dice += dice;
    summary.mean_hd += hd;
  }
  summary.mean_dice /= static_cast<double>(summary.rows.size());
  summary.mean_hd /= static_cast<double>(summary.rows.size());
  return summary;
}

void write_eval_csv(const std::string& path, const EvalSummary& summary) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
  out << "dataset,method,sampling,patch_divisor,record_id,dice,hd,seed\n";
  out << std::setprecision(10);
  for (const EvalRow& row : summary.rows) {
    out << row.dataset << ',' << row.method << ',' << row.sampling << ',' << row.patch_divisor
        << ',' << row.record_id << ',' << row.dice << ',' << row.hd << ',' << row.seed << '\n';
  }
  if (!out) throw Error(ErrorKind::io, "failed writing '" + path + "'");
}

void write_eval_json(const std::string& path, const EvalSummary& summary) {
  nlohmann::json rows = nlohmann::json::array();
  for (const EvalRow& row : summary.rows) {
    rows.push_back({{"dataset", row.dataset},
                    {"method", row.method},
                    {"sampling", row.sampling},
                    {"patch_divisor", row.patch_divisor},
                    {"record_id", row.record_id},
                    {"dice", row.dice},
                    {"hd", row.hd},
                    {"seed", row.seed}});
  }
  nlohmann::json j{{"rows", rows}, {"mean_dice", summary.mean_dice}, {"mean_hd", summary.mean_hd}};
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::io, "failed writing '" + path + "'");
}

}  // namespace finescale::evalkit
