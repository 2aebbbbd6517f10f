// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>

#include "finescale/error.hpp"
#include "finescale/evalkit.hpp"
#include "finescale/rng.hpp"
#include "finescale/tensor.hpp"
#include "finescale/types.hpp"

using namespace finescale;
using namespace finescale::evalkit;

namespace {

LabelMap random_mask(std::int64_t h, std::int64_t w, double p, RngStream& rng) {
  LabelMap m(h, w);
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) m.at(r, c) = rng.bernoulli(p) ? 1 : 0;
  return m;
}

double dice_reference(const LabelMap& a, const LabelMap& b) {
  std::int64_t inter = 0, na = 0, nb = 0;
  for (std::int64_t r = 0; r < a.rows; ++r)
    for (std::int64_t c = 0; c < a.cols; ++c) {
      const bool pa = a.at(r, c) != 0, pb = b.at(r, c) != 0;
      inter += (pa && pb) ? 1 : 0;
      na += pa ? 1 : 0;
      nb += pb ? 1 : 0;
    }
  if (na + nb == 0) return 1.0;
  return 2.0 * double(inter) / double(na + nb);
}

}  // namespace

TEST_CASE("stitch plan covers every pixel with clamped edge windows") {
  const StitchPlan plan = build_stitch_plan(32, 32, 16, 16, 8);
  CHECK(plan.windows.size() == 9);  // origins {0,8,16} x {0,8,16}
  for (const Window& win : plan.windows) CHECK(win.in_bounds(32, 32));
  int max_cov = 0;
  for (std::int64_t r = 0; r < 32; ++r)
    for (std::int64_t c = 0; c < 32; ++c) {
      CHECK(plan.coverage_at(r, c) >= 1);
      max_cov = std::max(max_cov, plan.coverage_at(r, c));
    }
  CHECK(max_cov == 4);
}

TEST_CASE("stitch plan clamps the last window flush to the border") {
  // 20-wide image, 16-wide window, stride 8: origins 0 and clamp(8 -> 4).
  const StitchPlan plan = build_stitch_plan(20, 20, 16, 16, 8);
  std::set<std::int64_t> lefts;
  for (const Window& win : plan.windows) lefts.insert(win.left());
  CHECK(lefts.count(0) == 1);
  CHECK(lefts.count(4) == 1);
  for (std::int64_t r = 0; r < 20; ++r)
    for (std::int64_t c = 0; c < 20; ++c) CHECK(plan.coverage_at(r, c) >= 1);
}

TEST_CASE("stitch plan rejects strides outside (0, window)") {
  CHECK_THROWS_AS(build_stitch_plan(32, 32, 16, 16, 16), Error);
  CHECK_THROWS_AS(build_stitch_plan(32, 32, 16, 16, 0), Error);
  try {
    build_stitch_plan(32, 32, 16, 16, 17);
    FAIL("expected a stride error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::stride);
  }
  // A window larger than the image cannot tile it.
  CHECK_THROWS_AS(build_stitch_plan(12, 12, 16, 16, 8), Error);
}

TEST_CASE("stitched prediction equals a brute-force overlap average") {
  RngStream rng(17, "stitch");
  Tensor image({24, 20});
  for (std::int64_t i = 0; i < image.numel(); ++i) image.data()[i] = rng.uniform();

  // The model echoes a deterministic function of the patch content so window
  // placement errors change the answer.
  const PatchPredictor model = [](const Tensor& patch) {
    Tensor out(patch.shape());
    double mean = 0.0;
    for (std::int64_t i = 0; i < patch.numel(); ++i) mean += patch.data()[i];
    mean /= double(patch.numel());
    for (std::int64_t i = 0; i < patch.numel(); ++i)
      out.data()[i] = 0.5 * patch.data()[i] + 0.25 * mean;
    return out;
  };

  const StitchPlan plan = build_stitch_plan(24, 20, 8, 8, 5);
  const Tensor stitched = stitch_predict(image, model, plan);
  REQUIRE(stitched.shape() == std::vector<std::int64_t>{24, 20});

  Tensor acc({24, 20});
  std::vector<int> cov(24 * 20, 0);
  for (const Window& win : plan.windows) {
    Tensor patch({win.h, win.w});
    for (std::int64_t r = 0; r < win.h; ++r)
      for (std::int64_t c = 0; c < win.w; ++c)
        patch.at(r, c) = image.at(win.top() + r, win.left() + c);
    const Tensor pred = model(patch);
    for (std::int64_t r = 0; r < win.h; ++r)
      for (std::int64_t c = 0; c < win.w; ++c) {
        acc.at(win.top() + r, win.left() + c) += pred.at(r, c);
        cov[std::size_t((win.top() + r) * 20 + win.left() + c)] += 1;
      }
  }
  for (std::int64_t r = 0; r < 24; ++r)
    for (std::int64_t c = 0; c < 20; ++c) {
      const double expect = acc.at(r, c) / double(cov[std::size_t(r * 20 + c)]);
      CHECK(stitched.at(r, c) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("overlap score: worked example and edge cases") {
  LabelMap a(4, 4), b(4, 4);
  // |A| = 4, |B| = 2, |A n B| = 2 -> 2*2/(4+2) = 0.6667.
  a.at(0, 0) = a.at(0, 1) = a.at(1, 0) = a.at(1, 1) = 1;
  b.at(1, 1) = b.at(0, 0) = 1;
  CHECK(dice_score(a, b) == doctest::Approx(2.0 * 2.0 / 6.0).epsilon(1e-12));

  LabelMap empty1(4, 4), empty2(4, 4);
  CHECK(dice_score(empty1, empty2) == 1.0);
  CHECK(dice_score(a, empty1) == 0.0);
}

TEST_CASE("overlap score matches the reference on random masks") {
  RngStream rng(23, "dice");
  for (int trial = 0; trial < 100; ++trial) {
    const LabelMap a = random_mask(32, 32, 0.2, rng);
    const LabelMap b = random_mask(32, 32, 0.2, rng);
    CHECK(dice_score(a, b) == doctest::Approx(dice_reference(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("boundary distance: single-point masks give the exact distance") {
  LabelMap a(8, 8), b(8, 8);
  a.at(0, 0) = 1;
  b.at(3, 4) = 1;
  CHECK(hausdorff(a, b, 200.0) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(hausdorff(b, a, 200.0) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("boundary distance: empty-mask conventions") {
  LabelMap empty(8, 8), full(8, 8);
  full.at(2, 2) = 1;
  CHECK(hausdorff(empty, full, 123.0) == 123.0);
  CHECK(hausdorff(full, empty, 123.0) == 123.0);
  CHECK(hausdorff(empty, LabelMap(8, 8), 123.0) == 0.0);
}

TEST_CASE("boundary distance equals brute force on random masks") {
  RngStream rng(29, "hd");
  for (int trial = 0; trial < 60; ++trial) {
    const LabelMap a = random_mask(24, 24, trial % 3 == 0 ? 0.02 : 0.1, rng);
    const LabelMap b = random_mask(24, 24, 0.1, rng);
    const double fast = hausdorff(a, b, 200.0);
    const double slow = hausdorff_bruteforce(a, b, 200.0);
    CHECK(fast == doctest::Approx(slow).epsilon(1e-9));
  }
}

TEST_CASE("boundary distance is symmetric and obeys the triangle inequality") {
  RngStream rng(31, "hd-tri");
  for (int trial = 0; trial < 100; ++trial) {
    LabelMap a = random_mask(16, 16, 0.15, rng);
    LabelMap b = random_mask(16, 16, 0.15, rng);
    LabelMap c = random_mask(16, 16, 0.15, rng);
    // Guarantee non-empty so the cap convention does not interfere.
    a.at(0, 0) = b.at(8, 8) = c.at(15, 15) = 1;
    const double ab = hausdorff(a, b, 1e9);
    const double ba = hausdorff(b, a, 1e9);
    const double bc = hausdorff(b, c, 1e9);
    const double ac = hausdorff(a, c, 1e9);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
    CHECK(ac <= ab + bc + 1e-9);
  }
}

TEST_CASE("squared distance transform is exact") {
  RngStream rng(37, "edt");
  for (int trial = 0; trial < 20; ++trial) {
    const LabelMap m = random_mask(20, 20, 0.05, rng);
    const std::vector<double> edt = squared_distance_transform(m);
    std::vector<std::pair<std::int64_t, std::int64_t>> points;
    for (std::int64_t r = 0; r < 20; ++r)
      for (std::int64_t c = 0; c < 20; ++c)
        if (m.at(r, c) != 0) points.emplace_back(r, c);
    for (std::int64_t r = 0; r < 20; ++r)
      for (std::int64_t c = 0; c < 20; ++c) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [pr, pc] : points) {
          const double d = double((r - pr) * (r - pr) + (c - pc) * (c - pc));
          best = std::min(best, d);
        }
        const double got = edt[std::size_t(r * 20 + c)];
        if (std::isinf(best)) {
          CHECK(std::isinf(got));
        } else {
          CHECK(got == doctest::Approx(best).epsilon(1e-12));
        }
      }
  }
}

TEST_CASE("binary threshold is strictly greater-than") {
  Tensor prob({2, 2});
  prob.at(0, 0) = 0.5;   // exactly at the threshold -> background
  prob.at(0, 1) = 0.50001;
  prob.at(1, 0) = 0.0;
  prob.at(1, 1) = 1.0;
  const LabelMap m = threshold_binary(prob, 0.5);
  CHECK(m.at(0, 0) == 0);
  CHECK(m.at(0, 1) == 1);
  CHECK(m.at(1, 0) == 0);
  CHECK(m.at(1, 1) == 1);
}

TEST_CASE("class argmax breaks ties toward the lowest index") {
  Tensor prob({3, 1, 2});
  // Layout {class, row, col}: pixel (0,0) ties classes 0 and 1.
  const double values[6] = {0.4, 0.1,   // class 0
                            0.4, 0.3,   // class 1
                            0.2, 0.6};  // class 2
  for (int i = 0; i < 6; ++i) prob.data()[i] = values[i];
  const LabelMap m = argmax_classes(prob);
  CHECK(m.at(0, 0) == 0);
  CHECK(m.at(0, 1) == 2);
}

TEST_CASE("split evaluation: perfect predictor, identity metrics") {
  std::vector<ImageRecord> records;
  RngStream rng(41, "eval");
  for (int i = 0; i < 3; ++i) {
    ImageRecord rec;
    rec.id = "r" + std::to_string(i);
    rec.split = Split::test;
    rec.pixels = Tensor({16, 16});
    LabelMap mask(16, 16);
    for (std::int64_t r = 0; r < 16; ++r)
      for (std::int64_t c = 0; c < 16; ++c) {
        rec.pixels.at(r, c) = rng.bernoulli(0.3) ? 1.0 : 0.0;
        mask.at(r, c) = rec.pixels.at(r, c) > 0.5 ? 1 : 0;
      }
    mask.at(2, 2) = 1;
    rec.pixels.at(2, 2) = 1.0;
    rec.mask = mask;
    records.push_back(std::move(rec));
  }
  // The "model" reads the answer straight off the image.
  const PatchPredictor oracle = [](const Tensor& patch) { return patch; };
  EvalRow tmpl;
  tmpl.dataset = "synthetic";
  tmpl.method = "none";
  tmpl.sampling = "random";
  tmpl.patch_divisor = "L/2";
  tmpl.seed = 7;
  const EvalSummary s = evaluate_split(records, oracle, 8, 8, 4, 0.5, 200.0, tmpl);
  REQUIRE(s.rows.size() == 3);
  for (const EvalRow& row : s.rows) {
    CHECK(row.dice == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(row.hd == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
    CHECK(row.dataset == "synthetic");
    CHECK(row.method == "none");
    CHECK(row.seed == 7);
  }
  CHECK(s.mean_dice == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.mean_hd == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
}

TEST_CASE("split evaluation rejects empty splits and unlabeled records") {
  const PatchPredictor oracle = [](const Tensor& patch) { return patch; };
  EvalRow tmpl;
  try {
    evaluate_split({}, oracle, 8, 8, 4, 0.5, 200.0, tmpl);
    FAIL("expected an empty-subset error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::empty_subset);
  }
  std::vector<ImageRecord> records(1);
  records[0].id = "r0";
  records[0].pixels = Tensor({16, 16});
  records[0].split = Split::test;
  try {
    evaluate_split(records, oracle, 8, 8, 4, 0.5, 200.0, tmpl);
    FAIL("expected a missing-mask error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::missing_mask);
  }
}

TEST_CASE("results tables round-trip through CSV") {
  EvalSummary s;
  for (int i = 0; i < 2; ++i) {
    EvalRow row;
    row.dataset = "curves";
    row.method = i == 0 ? "simclr" : "byol";
    row.sampling = "proximity";
    row.patch_divisor = "L/8";
    row.record_id = "img" + std::to_string(i);
    row.dice = 0.25 * (i + 1);
    row.hd = 3.5 * (i + 1);
    row.seed = i;
    s.rows.push_back(row);
  }
  s.mean_dice = 0.375;
  s.mean_hd = 5.25;
  const std::string path = "/tmp/finescale_test_eval.csv";
  write_eval_csv(path, s);

  std::ifstream in(path);
  REQUIRE(in.good());
  std::string header;
  std::getline(in, header);
  CHECK(header.find("dice") != std::string::npos);
  CHECK(header.find("hd") != std::string::npos);
  int data_lines = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++data_lines;
    std::stringstream ss(line);
    std::vector<std::string> cells;
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    CHECK(cells.size() >= 7);
    if (data_lines == 1) {
      CHECK(cells[1] == "simclr");
      CHECK(std::stod(cells[5]) == doctest::Approx(0.25));
    }
  }
  CHECK(data_lines == 2);
  std::remove(path.c_str());
}
