// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdio>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <doctest.h>

#include "finescale/error.hpp"
#include "finescale/nets.hpp"
#include "finescale/rng.hpp"
#include "finescale/tensor.hpp"

using namespace finescale;
using namespace finescale::nets;

namespace {

Tensor random_tensor(const std::vector<std::int64_t>& shape, unsigned seed, double scale = 1.0) {
  Tensor t(shape);
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, scale);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = dist(gen);
  return t;
}

// Sum of elementwise products — a linear functional whose gradient w.r.t. the
// layer output is just `weights`, letting us test backward() end to end.
double weighted_sum(const Tensor& out, const Tensor& weights) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < out.numel(); ++i) acc += out.data()[i] * weights.data()[i];
  return acc;
}

// Central-difference check of d(weighted_sum(layer(x)))/dx and the parameter
// gradients accumulated by backward().
void check_layer_gradients(Layer& layer, const Tensor& x, bool train, double tol = 1e-6) {
  Tensor probe = x;
  Tensor out = layer.forward(probe, train);
  const Tensor weights = random_tensor(out.shape(), 4242, 1.0);

  std::vector<Parameter*> params;
  layer.collect(params);
  zero_grads(params);
  // Re-run forward so caches match the state the backward pass will see.
  out = layer.forward(probe, train);
  Tensor grad_out = weights;
  const Tensor grad_in = layer.backward(grad_out);
  REQUIRE(grad_in.shape() == x.shape());

  const double eps = 1e-5;
  std::mt19937_64 pick(7);
  // Input gradient at a sample of coordinates.
  for (int trial = 0; trial < 12; ++trial) {
    const std::int64_t i = std::int64_t(pick() % std::uint64_t(x.numel()));
    Tensor plus = x, minus = x;
    plus.data()[i] += eps;
    minus.data()[i] -= eps;
    const double f_plus = weighted_sum(layer.forward(plus, train), weights);
    const double f_minus = weighted_sum(layer.forward(minus, train), weights);
    const double fd = (f_plus - f_minus) / (2 * eps);
    CHECK(grad_in.data()[i] == doctest::Approx(fd).epsilon(tol).scale(1.0));
  }
  // Parameter gradients (trainable only), sampled per parameter.
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    for (int trial = 0; trial < 4; ++trial) {
      const std::int64_t i = std::int64_t(pick() % std::uint64_t(p->value.numel()));
      const double saved = p->value.data()[i];
      p->value.data()[i] = saved + eps;
      const double f_plus = weighted_sum(layer.forward(probe, train), weights);
      p->value.data()[i] = saved - eps;
      const double f_minus = weighted_sum(layer.forward(probe, train), weights);
      p->value.data()[i] = saved;
      const double fd = (f_plus - f_minus) / (2 * eps);
      CHECK(p->grad.data()[i] == doctest::Approx(fd).epsilon(tol).scale(1.0));
    }
  }
  // Restore the cache consumed by the finite-difference probes.
  layer.forward(probe, train);
}

}  // namespace

TEST_CASE("conv2d output extents follow the padded stride formula") {
  Conv2d conv("c", 1, 3, 3, 2, 1, 1, 5);
  CHECK(conv.out_extent(8, 3) == 4);
  CHECK(conv.out_extent(9, 3) == 5);
  Conv2d dilated("d", 1, 1, 3, 1, 2, 2, 5);
  // Effective kernel extent 5 with pad 2 preserves the input size.
  CHECK(dilated.out_extent(11, 3) == 11);
}

TEST_CASE("conv2d matches a hand-rolled direct convolution") {
  Conv2d conv("c", 2, 3, 3, 1, 1, 1, 17);
  std::vector<Parameter*> params;
  conv.collect(params);
  REQUIRE(params.size() == 2);
  const Tensor& w = params[0]->value;  // {out_ch, in_ch, k, k}
  const Tensor& b = params[1]->value;
  const Tensor x = random_tensor({1, 2, 5, 5}, 3);
  const Tensor y = conv.forward(x, false);
  REQUIRE(y.shape() == std::vector<std::int64_t>{1, 3, 5, 5});
  for (std::int64_t oc = 0; oc < 3; ++oc) {
    for (std::int64_t r = 0; r < 5; ++r) {
      for (std::int64_t c = 0; c < 5; ++c) {
        double acc = b.data()[oc];
        for (std::int64_t ic = 0; ic < 2; ++ic)
          for (std::int64_t kr = 0; kr < 3; ++kr)
            for (std::int64_t kc = 0; kc < 3; ++kc) {
              const std::int64_t rr = r + kr - 1, cc = c + kc - 1;
              if (rr < 0 || rr >= 5 || cc < 0 || cc >= 5) continue;
              acc += w.at(oc, ic, kr, kc) * x.at(0, ic, rr, cc);
            }
        CHECK(y.at(0, oc, r, c) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("conv2d gradients agree with finite differences") {
  Conv2d conv("c", 2, 4, 3, 2, 1, 1, 29);
  check_layer_gradients(conv, random_tensor({2, 2, 6, 6}, 11), false);
}

TEST_CASE("batch norm normalizes per channel in train mode") {
  BatchNorm2d bn("bn", 2);
  const Tensor x = random_tensor({3, 2, 4, 4}, 13, 2.5);
  const Tensor y = bn.forward(x, true);
  for (std::int64_t c = 0; c < 2; ++c) {
    double sum = 0.0, sq = 0.0;
    const std::int64_t count = 3 * 4 * 4;
    for (std::int64_t n = 0; n < 3; ++n)
      for (std::int64_t r = 0; r < 4; ++r)
        for (std::int64_t col = 0; col < 4; ++col) {
          sum += y.at(n, c, r, col);
          sq += y.at(n, c, r, col) * y.at(n, c, r, col);
        }
    const double mean = sum / double(count);
    CHECK(mean == doctest::Approx(0.0).scale(1.0).epsilon(1e-10));
    CHECK(sq / double(count) - mean * mean == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("batch norm eval mode uses running statistics") {
  BatchNorm2d bn("bn", 1);
  RngStream rng(3, "bn-feed");
  for (int step = 0; step < 200; ++step) {
    Tensor x({4, 1, 3, 3});
    for (std::int64_t i = 0; i < x.numel(); ++i) x.data()[i] = 5.0 + 2.0 * rng.uniform(-1.0, 1.0);
    bn.forward(x, true);
  }
  // Constant input at the running mean should map close to gamma*0+beta = 0.
  Tensor probe({1, 1, 3, 3});
  for (std::int64_t i = 0; i < probe.numel(); ++i) probe.data()[i] = 5.0;
  const Tensor y = bn.forward(probe, false);
  for (std::int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(0.0).scale(1.0).epsilon(0.12));
}

TEST_CASE("batch norm running stats freeze when updates are disabled") {
  BatchNorm2d bn("bn", 2);
  std::vector<Parameter*> params;
  bn.collect(params);
  bn.forward(random_tensor({2, 2, 3, 3}, 21), true);
  const std::uint64_t before = parameter_checksum(params);
  bn.set_update_stats(false);
  bn.forward(random_tensor({2, 2, 3, 3}, 22, 3.0), true);
  bn.forward(random_tensor({2, 2, 3, 3}, 23, 0.1), true);
  CHECK(parameter_checksum(params) == before);
  bn.set_update_stats(true);
  bn.forward(random_tensor({2, 2, 3, 3}, 24), true);
  CHECK(parameter_checksum(params) != before);
}

TEST_CASE("batch norm gradients agree with finite differences") {
  BatchNorm2d bn("bn", 3);
  bn.set_update_stats(false);  // keep forward passes side-effect free
  check_layer_gradients(bn, random_tensor({4, 3, 3, 3}, 31), true, 1e-5);
}

TEST_CASE("relu and max-pool gradients agree with finite differences") {
  ReLU relu;
  check_layer_gradients(relu, random_tensor({2, 3, 4, 4}, 41), false);
  MaxPool2d pool(3, 2, 1);
  check_layer_gradients(pool, random_tensor({2, 2, 6, 6}, 43), false);
}

TEST_CASE("max-pool picks the window maximum") {
  MaxPool2d pool(2, 2, 0);
  Tensor x({1, 1, 4, 4});
  for (std::int64_t i = 0; i < 16; ++i) x.data()[i] = double(i);
  const Tensor y = pool.forward(x, false);
  REQUIRE(y.shape() == std::vector<std::int64_t>{1, 1, 2, 2});
  CHECK(y.at(0, 0, 0, 0) == 5.0);
  CHECK(y.at(0, 0, 0, 1) == 7.0);
  CHECK(y.at(0, 0, 1, 0) == 13.0);
  CHECK(y.at(0, 0, 1, 1) == 15.0);
}

TEST_CASE("global average pool reduces spatial dims and backprops evenly") {
  GlobalAvgPool gap;
  Tensor x({2, 3, 4, 4});
  for (std::int64_t i = 0; i < x.numel(); ++i) x.data()[i] = double(i % 7);
  const Tensor y = gap.forward(x, false);
  REQUIRE(y.shape() == std::vector<std::int64_t>{2, 3});
  double manual = 0.0;
  for (std::int64_t r = 0; r < 4; ++r)
    for (std::int64_t c = 0; c < 4; ++c) manual += x.at(1, 2, r, c);
  CHECK(y.at(1, 2) == doctest::Approx(manual / 16.0).epsilon(1e-12));
  check_layer_gradients(gap, random_tensor({2, 3, 4, 4}, 47), false);
}

TEST_CASE("linear layer gradients agree with finite differences") {
  Linear lin("fc", 6, 4, 53);
  check_layer_gradients(lin, random_tensor({5, 6}, 51), false);
}

TEST_CASE("bilinear upsample doubles extents and keeps constants constant") {
  Upsample2x up;
  Tensor x({1, 1, 3, 3});
  for (std::int64_t i = 0; i < 9; ++i) x.data()[i] = 2.5;
  const Tensor y = up.forward(x, false);
  REQUIRE(y.shape() == std::vector<std::int64_t>{1, 1, 6, 6});
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(2.5));
  check_layer_gradients(up, random_tensor({2, 2, 3, 3}, 59), false);
}

TEST_CASE("residual block gradients agree with finite differences") {
  BasicBlock block("blk", 3, 5, 2, 61);  // stride 2 forces the projection path
  block.set_update_stats(false);
  check_layer_gradients(block, random_tensor({2, 3, 6, 6}, 63), true, 1e-5);
}

TEST_CASE("compact encoder honors the stride and channel contract") {
  EncoderSpec spec;
  spec.arch = EncoderArch::toy_cnn;
  spec.feature_dim = 64;
  spec.stage_strides = {2, 2, 2};
  CHECK(spec.stride_product() == 8);
  auto enc = build_encoder(spec, 7);
  const Tensor f = encode(*enc, spec, random_tensor({1, 1, 32, 32}, 71), false);
  CHECK(f.shape() == std::vector<std::int64_t>{1, 64, 4, 4});
  // A 2-D patch is promoted to a singleton batch.
  const Tensor f2 = encode(*enc, spec, random_tensor({32, 32}, 72), false);
  CHECK(f2.shape() == std::vector<std::int64_t>{1, 64, 4, 4});
}

TEST_CASE("encode rejects inputs that break the divisibility contract") {
  EncoderSpec spec;
  spec.stage_strides = {2, 2, 1};
  auto enc = build_encoder(spec, 7);
  CHECK_THROWS_AS(encode(*enc, spec, random_tensor({1, 1, 30, 30}, 73), false), Error);
}

TEST_CASE("deep encoder produces the documented feature shape") {
  EncoderSpec spec;
  spec.arch = EncoderArch::resnet18;
  spec.feature_dim = 512;
  spec.stage_strides = {2, 2, 2, 2, 2};  // stem (conv + pool) plus three strided stages
  auto enc = build_encoder(spec, 3);
  const Tensor f = encode(*enc, spec, random_tensor({1, 1, 96, 96}, 77, 0.5), false);
  CHECK(f.shape() == std::vector<std::int64_t>{1, 512, 3, 3});
}

TEST_CASE("ema update interpolates parameters exactly") {
  Linear online("fc", 4, 4, 1);
  Linear target("fc", 4, 4, 2);
  std::vector<Parameter*> po, pt;
  online.collect(po);
  target.collect(pt);
  std::vector<double> before;
  for (const Parameter* p : pt)
    for (std::int64_t i = 0; i < p->value.numel(); ++i) before.push_back(p->value.data()[i]);

  ema_update(pt, po, 0.99);
  std::size_t k = 0;
  for (std::size_t pi = 0; pi < pt.size(); ++pi)
    for (std::int64_t i = 0; i < pt[pi]->value.numel(); ++i, ++k) {
      const double expect = 0.99 * before[k] + 0.01 * po[pi]->value.data()[i];
      CHECK(pt[pi]->value.data()[i] == doctest::Approx(expect).epsilon(1e-12));
    }

  // Momentum 1 freezes the target entirely.
  const std::uint64_t frozen = parameter_checksum(pt);
  ema_update(pt, po, 1.0);
  CHECK(parameter_checksum(pt) == frozen);
  // Momentum 0 copies the online network.
  ema_update(pt, po, 0.0);
  CHECK(parameter_checksum(pt) == parameter_checksum(po));

  // A target tree whose parameter names disagree is rejected outright.
  Linear other("other", 4, 4, 3);
  std::vector<Parameter*> px;
  other.collect(px);
  try {
    ema_update(px, po, 0.5);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::structure_mismatch);
  }
}

TEST_CASE("parameter blobs round-trip through disk") {
  Linear a("fc", 5, 3, 11);
  std::vector<Parameter*> pa;
  a.collect(pa);
  const std::string path = "/tmp/finescale_test_params.bin";
  save_params(path, pa);

  Linear b("fc", 5, 3, 99);  // different init
  std::vector<Parameter*> pb;
  b.collect(pb);
  CHECK(parameter_checksum(pa) != parameter_checksum(pb));
  load_params(path, pb);
  CHECK(parameter_checksum(pa) == parameter_checksum(pb));

  // Mismatched structure is rejected.
  Linear c("fc", 4, 3, 1);
  std::vector<Parameter*> pc;
  c.collect(pc);
  try {
    load_params(path, pc);
    FAIL("expected a structure mismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::structure_mismatch);
  }
  std::remove(path.c_str());
}

TEST_CASE("projection heads map pooled features to the embedding dim") {
  HeadSpec spec;
  spec.kind = HeadSpec::Kind::projector;
  spec.layer_dims = {32, 16};
  auto head = build_head(spec, 64, 5, "proj");
  const Tensor z = project(*head, random_tensor({6, 64}, 81), false);
  CHECK(z.shape() == std::vector<std::int64_t>{6, 16});
}

TEST_CASE("segmentation forward produces calibrated probability maps") {
  EncoderSpec enc_spec;
  enc_spec.stage_strides = {2, 2, 1};
  enc_spec.feature_dim = 16;
  auto enc = build_encoder(enc_spec, 9);

  DecoderSpec dec_bin;
  dec_bin.style = DecoderStyle::plain_upsample;
  dec_bin.num_classes = 2;
  auto dec = build_decoder(dec_bin, 16, enc_spec.stride_product(), 10);
  const Tensor patch = random_tensor({16, 16}, 83, 0.3);
  const Tensor prob = segment_patch(*enc, enc_spec, *dec, dec_bin, patch);
  REQUIRE(prob.shape() == std::vector<std::int64_t>{16, 16});
  for (std::int64_t i = 0; i < prob.numel(); ++i) {
    CHECK(prob.data()[i] > 0.0);
    CHECK(prob.data()[i] < 1.0);
  }

  DecoderSpec dec_multi = dec_bin;
  dec_multi.num_classes = 4;
  auto dec4 = build_decoder(dec_multi, 16, enc_spec.stride_product(), 10);
  const Tensor probs = segment_patch(*enc, enc_spec, *dec4, dec_multi, patch);
  REQUIRE(probs.shape() == std::vector<std::int64_t>{4, 16, 16});
  for (std::int64_t r = 0; r < 16; ++r)
    for (std::int64_t c = 0; c < 16; ++c) {
      double sum = 0.0;
      for (std::int64_t k = 0; k < 4; ++k) sum += probs.data()[(k * 16 + r) * 16 + c];
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("context-aggregation decoder also restores full resolution") {
  EncoderSpec enc_spec;
  enc_spec.stage_strides = {2, 2, 1};
  enc_spec.feature_dim = 16;
  auto enc = build_encoder(enc_spec, 15);
  DecoderSpec spec;
  spec.style = DecoderStyle::deeplab_aspp;
  spec.num_classes = 2;
  auto dec = build_decoder(spec, 16, enc_spec.stride_product(), 16);
  const Tensor prob = segment_patch(*enc, enc_spec, *dec, spec, random_tensor({24, 24}, 85, 0.3));
  CHECK(prob.shape() == std::vector<std::int64_t>{24, 24});
}

TEST_CASE("encoder forward/backward trains end to end through every layer") {
  // Composite gradient check: random linear functional of encoder output.
  EncoderSpec spec;
  spec.stage_strides = {2, 2, 1};
  spec.feature_dim = 8;
  auto enc = build_encoder(spec, 19);
  enc->set_update_stats(false);
  const Tensor x = random_tensor({2, 1, 8, 8}, 87, 0.7);
  Tensor out = enc->forward(x, true);
  const Tensor weights = random_tensor(out.shape(), 88);

  std::vector<Parameter*> params;
  enc->collect(params);
  zero_grads(params);
  out = enc->forward(x, true);
  enc->backward(weights);

  const double eps = 1e-5;
  std::mt19937_64 pick(5);
  int checked = 0;
  for (Parameter* p : params) {
    if (!p->trainable || checked >= 24) continue;
    const std::int64_t i = std::int64_t(pick() % std::uint64_t(p->value.numel()));
    const double saved = p->value.data()[i];
    p->value.data()[i] = saved + eps;
    const double f_plus = weighted_sum(enc->forward(x, true), weights);
    p->value.data()[i] = saved - eps;
    const double f_minus = weighted_sum(enc->forward(x, true), weights);
    p->value.data()[i] = saved;
    const double fd = (f_plus - f_minus) / (2 * eps);
    CHECK(p->grad.data()[i] == doctest::Approx(fd).epsilon(1e-4).scale(1.0));
    ++checked;
  }
  CHECK(checked >= 10);
}

TEST_CASE("identical seeds build identical networks") {
  EncoderSpec spec;
  auto a = build_encoder(spec, 1234);
  auto b = build_encoder(spec, 1234);
  auto c = build_encoder(spec, 1235);
  std::vector<Parameter*> pa, pb, pc;
  a->collect(pa);
  b->collect(pb);
  c->collect(pc);
  CHECK(parameter_checksum(pa) == parameter_checksum(pb));
  CHECK(parameter_checksum(pa) != parameter_checksum(pc));
}
