// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "finescale/config.hpp"
#include "finescale/error.hpp"
#include "finescale/nets.hpp"
#include "finescale/synth.hpp"
#include "finescale/train.hpp"
#include "finescale/types.hpp"
#include "finescale/views.hpp"

using namespace finescale;
using namespace finescale::train;
namespace fs = std::filesystem;

namespace {

std::vector<ImageRecord> tiny_dataset(int count, std::uint64_t seed) {
  synth::SynthSpec spec = synth::make_default_spec(synth::SynthKind::thin_curves);
  spec.image_h = 32;
  spec.image_w = 32;
  spec.count = count;
  spec.seed = seed;
  auto records = synth::generate_dataset(spec);
  return records;
}

std::vector<ImageRecord> with_split(std::vector<ImageRecord> records, Split split) {
  for (ImageRecord& r : records) r.split = split;
  return records;
}

ValidatedConfig fast_config(SslMethod method, int epochs = 2) {
  ExperimentConfig c;
  c.seed = 3;
  c.ssl_method = method;
  c.sampling = SamplingStrategy::random;
  c.crop_divisor = 2;
  c.epochs = epochs;
  c.batch_size = 8;
  c.warmup_epochs = 1;
  c.encoder = EncoderArch::toy_cnn;
  c.encoder_strides = {2, 2, 1};
  c.feature_dim = 12;
  c.embed_dim = 8;
  c.aug_affine = false;  // keep unit runs fast
  c.finetune_epochs = 2;
  c.patches_per_image = 2;
  c.val_every = 1;
  c.label_fraction = 1.0;
  return validate_config(c);
}

std::uint64_t checkpoint_checksum(const std::string& dir) {
  LoadedEncoder enc = load_pretrained_encoder(dir);
  std::vector<nets::Parameter*> params;
  enc.encoder->collect(params);
  return nets::parameter_checksum(params);
}

}  // namespace

TEST_CASE("labeled subset size is the ceiling of the requested fraction") {
  std::vector<ImageRecord> records;
  for (int i = 0; i < 100; ++i) {
    ImageRecord r;
    r.id = "rec" + std::to_string(i);
    r.pixels = Tensor({8, 8});
    records.push_back(std::move(r));
  }
  CHECK(select_labeled_subset(records, 0.1, 7).size() == 10);
  CHECK(select_labeled_subset(records, 0.101, 7).size() == 11);
  CHECK(select_labeled_subset(records, 1.0, 7).size() == 100);
  CHECK(select_labeled_subset(records, 0.005, 7).size() == 1);

  records.resize(7);
  CHECK(select_labeled_subset(records, 0.5, 7).size() == 4);  // ceil(3.5)
}

TEST_CASE("labeled subset is deterministic and order-invariant") {
  std::vector<ImageRecord> records;
  for (int i = 0; i < 30; ++i) {
    ImageRecord r;
    r.id = "rec" + std::to_string(i);
    r.pixels = Tensor({8, 8});
    records.push_back(std::move(r));
  }
  auto ids_of = [](const std::vector<ImageRecord>& v) {
    std::set<std::string> out;
    for (const auto& r : v) out.insert(r.id);
    return out;
  };
  const auto first = ids_of(select_labeled_subset(records, 0.3, 11));
  CHECK(first == ids_of(select_labeled_subset(records, 0.3, 11)));

  std::vector<ImageRecord> reversed(records.rbegin(), records.rend());
  CHECK(first == ids_of(select_labeled_subset(reversed, 0.3, 11)));
  CHECK(first != ids_of(select_labeled_subset(records, 0.3, 12)));

  // Output preserves the input order.
  const auto subset = select_labeled_subset(records, 0.3, 11);
  std::vector<std::string> order;
  for (const auto& r : subset) order.push_back(r.id);
  std::vector<std::string> expected;
  for (const auto& r : records)
    if (first.count(r.id)) expected.push_back(r.id);
  CHECK(order == expected);
}

TEST_CASE("labeled subset rejects fractions outside (0, 1]") {
  std::vector<ImageRecord> records(3);
  CHECK_THROWS_AS(select_labeled_subset(records, 0.0, 1), Error);
  CHECK_THROWS_AS(select_labeled_subset(records, 1.5, 1), Error);
}

TEST_CASE("soft overlap loss: exact values and gradient") {
  Tensor pred({2, 2});
  pred.at(0, 0) = 1.0;
  pred.at(0, 1) = 0.0;
  pred.at(1, 0) = 0.5;
  pred.at(1, 1) = 0.0;
  LabelMap target(2, 2);
  target.at(0, 0) = 1;
  target.at(1, 1) = 1;
  // I = 1, P = 1.5, T = 2, eps = 1: loss = 1 - 3/4.5.
  Tensor grad;
  const double loss = dice_loss(pred, target, 1.0, &grad);
  CHECK(loss == doctest::Approx(1.0 - 3.0 / 4.5).epsilon(1e-12));

  // Central differences on every coordinate.
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double eps = 1e-6;
    Tensor plus = pred, minus = pred;
    plus.data()[i] += eps;
    minus.data()[i] -= eps;
    const double fd = (dice_loss(plus, target) - dice_loss(minus, target)) / (2 * eps);
    CHECK(grad.data()[i] == doctest::Approx(fd).epsilon(1e-6).scale(1.0));
  }

  // Perfect prediction with eps has a small positive residual; exact zero
  // pred/target pair scores loss 0 thanks to the epsilon.
  LabelMap empty(2, 2);
  Tensor zeros({2, 2});
  CHECK(dice_loss(zeros, empty) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
}

TEST_CASE("stitch stride stays inside [1, edge-1]") {
  CHECK(stitch_stride(16, 0.5) == 8);
  CHECK(stitch_stride(16, 0.99) == 15);
  CHECK(stitch_stride(16, 0.0001) == 1);
  CHECK(stitch_stride(2, 0.5) == 1);
}

TEST_CASE("pretraining is deterministic and resumable") {
  const fs::path base = "/tmp/finescale_test_pretrain";
  fs::remove_all(base);
  const auto records = with_split(tiny_dataset(6, 21), Split::pretrain);
  const ValidatedConfig config = fast_config(SslMethod::simclr, 2);

  PretrainOptions a;
  a.out_dir = (base / "a").string();
  const PretrainResult ra = pretrain(records, config, a);
  CHECK(ra.steps_run > 0);
  REQUIRE(!ra.loss_trace.empty());
  for (const double l : ra.loss_trace) CHECK(std::isfinite(l));

  PretrainOptions b;
  b.out_dir = (base / "b").string();
  const PretrainResult rb = pretrain(records, config, b);
  REQUIRE(ra.loss_trace.size() == rb.loss_trace.size());
  for (std::size_t i = 0; i < ra.loss_trace.size(); ++i)
    CHECK(ra.loss_trace[i] == doctest::Approx(rb.loss_trace[i]).epsilon(1e-12));
  CHECK(checkpoint_checksum(ra.checkpoint_dir) == checkpoint_checksum(rb.checkpoint_dir));

  // Interrupt after half the steps, then resume: same final parameters.
  PretrainOptions half;
  half.out_dir = (base / "c").string();
  half.max_steps = int(ra.loss_trace.size() / 2);
  const PretrainResult rc = pretrain(records, config, half);
  CHECK(rc.steps_run == half.max_steps);
  PretrainOptions rest;
  rest.out_dir = (base / "c2").string();
  rest.resume_from = rc.checkpoint_dir;
  const PretrainResult rd = pretrain(records, config, rest);
  CHECK(rd.steps_run == int(ra.loss_trace.size()) - rc.steps_run);
  CHECK(checkpoint_checksum(rd.checkpoint_dir) == checkpoint_checksum(ra.checkpoint_dir));

  // The second half of the loss trace matches the uninterrupted run.
  for (std::size_t i = 0; i < rd.loss_trace.size(); ++i)
    CHECK(rd.loss_trace[i] ==
          doctest::Approx(ra.loss_trace[std::size_t(rc.steps_run) + i]).epsilon(1e-9));
  fs::remove_all(base);
}

TEST_CASE("pretraining writes a replayable view log") {
  const fs::path base = "/tmp/finescale_test_viewlog";
  fs::remove_all(base);
  const auto records = with_split(tiny_dataset(4, 22), Split::pretrain);
  const ValidatedConfig config = fast_config(SslMethod::simclr, 1);
  PretrainOptions opts;
  opts.out_dir = (base / "run").string();
  opts.view_log_path = (base / "views.jsonl").string();
  pretrain(records, config, opts);

  std::ifstream in(opts.view_log_path);
  REQUIRE(in.good());
  const std::vector<views::ViewRecord> log = views::read_view_log(in);
  CHECK(!log.empty());
  for (const views::ViewRecord& rec : log) {
    const auto match = std::find_if(records.begin(), records.end(),
                                    [&](const ImageRecord& r) { return r.id == rec.source_id; });
    REQUIRE(match != records.end());
    const views::ViewPair pair = views::replay_view_pair(*match, rec);
    CHECK(pair.view1.all_finite());
    CHECK(pair.view1.dim(0) == rec.view_h);
  }
  fs::remove_all(base);
}

TEST_CASE("momentum-target pretraining keeps frozen targets at their initial value") {
  const fs::path base = "/tmp/finescale_test_byol";
  fs::remove_all(base);
  const auto records = with_split(tiny_dataset(4, 23), Split::pretrain);
  ExperimentConfig c = fast_config(SslMethod::byol, 1).get();
  c.byol_momentum = 1.0;  // target never moves
  const ValidatedConfig config = validate_config(c);
  PretrainOptions opts;
  opts.out_dir = (base / "run").string();
  const PretrainResult r = pretrain(records, config, opts);

  // The stored target tree must equal a freshly built online tree (identical
  // init seed), since momentum 1 froze it.
  std::ifstream in(fs::path(r.checkpoint_dir) / "manifest.json");
  REQUIRE(in.good());
  nlohmann::json manifest;
  in >> manifest;
  const std::uint64_t target_sum = manifest.at("target_checksum").get<std::uint64_t>();

  const nets::EncoderSpec spec = nets::encoder_spec_from_config(config);
  auto encoder = nets::build_encoder(spec, config->seed);
  nets::HeadSpec proj;
  proj.kind = nets::HeadSpec::Kind::projector;
  proj.layer_dims = {spec.feature_dim, config->embed_dim};
  auto projector = nets::build_head(proj, spec.feature_dim, config->seed, "projector");
  std::vector<nets::Parameter*> params;
  encoder->collect(params);
  projector->collect(params);
  CHECK(nets::parameter_checksum(params) == target_sum);
  fs::remove_all(base);
}

TEST_CASE("pretraining rejects impossible setups") {
  const auto records = with_split(tiny_dataset(4, 24), Split::pretrain);
  PretrainOptions opts;
  opts.out_dir = "/tmp/finescale_test_pretrain_err";

  // No objective selected.
  try {
    pretrain(records, fast_config(SslMethod::none), opts);
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
  // Empty input split.
  try {
    pretrain({}, fast_config(SslMethod::simclr), opts);
    FAIL("expected an empty-subset error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::empty_subset);
  }
  fs::remove_all(opts.out_dir);
}

TEST_CASE("fine-tuning learns, checkpoints and reloads") {
  const fs::path base = "/tmp/finescale_test_finetune";
  fs::remove_all(base);
  auto all = tiny_dataset(8, 25);
  const auto train_split = with_split({all.begin(), all.begin() + 6}, Split::train);
  const auto val_split = with_split({all.begin() + 6, all.end()}, Split::val);

  ExperimentConfig c = fast_config(SslMethod::none).get();
  c.finetune_epochs = 2;
  c.val_every = 1;
  const ValidatedConfig config = validate_config(c);

  FinetuneOptions opts;
  opts.out_dir = (base / "ft").string();
  const FinetuneResult r = finetune_segmentation(train_split, val_split, config, "", opts);
  CHECK(!r.loss_trace.empty());
  CHECK(r.best_epoch >= 0);
  CHECK(r.best_val_dice >= 0.0);

  LoadedSegmenter model = load_segmenter(r.checkpoint_dir);
  CHECK(model.patch_edge >= 8);
  const evalkit::PatchPredictor predict = make_patch_predictor(model);
  Tensor patch({model.patch_edge, model.patch_edge});
  for (std::int64_t i = 0; i < patch.numel(); ++i) patch.data()[i] = 0.5;
  const Tensor prob = predict(patch);
  CHECK(prob.dim(prob.ndim() - 1) == model.patch_edge);
  CHECK(prob.all_finite());
  fs::remove_all(base);
}

TEST_CASE("fixed tiny batch overfits: loss decreases over 50 full-batch steps") {
  const fs::path base = "/tmp/finescale_test_overfit";
  fs::remove_all(base);

  // One hand-built record; full-view sampling re-cuts the same centered
  // window every epoch, so each epoch is one gradient step on a fixed batch.
  ImageRecord rec;
  rec.id = "blob";
  rec.pixels = Tensor({16, 16});
  rec.mask = LabelMap(16, 16);
  for (std::int64_t r = 0; r < 16; ++r) {
    for (std::int64_t c = 0; c < 16; ++c) {
      const bool fg = (r - 8) * (r - 8) + (c - 8) * (c - 8) <= 9;
      rec.pixels[r * 16 + c] = fg ? 1.0 : 0.0;
      rec.mask->at(r, c) = fg ? 1 : 0;
    }
  }
  rec.split = Split::train;
  ImageRecord val = rec;
  val.split = Split::val;

  ExperimentConfig c = fast_config(SslMethod::none).get();
  c.sampling = SamplingStrategy::full_view;
  c.crop_divisor.reset();
  c.label_fraction = 1.0;
  c.finetune_epochs = 50;
  c.val_every = 50;
  const ValidatedConfig config = validate_config(c);

  FinetuneOptions opts;
  opts.out_dir = (base / "ft").string();
  const FinetuneResult r = finetune_segmentation({rec}, {val}, config, "", opts);
  REQUIRE(r.loss_trace.size() == 50);
  CHECK(r.loss_trace.back() < r.loss_trace.front());
  // Require a clear margin so the decrease cannot be numerical noise.
  CHECK(r.loss_trace.back() < 0.9 * r.loss_trace.front());
  fs::remove_all(base);
}

TEST_CASE("fine-tuning consumes a pretrained encoder checkpoint") {
  const fs::path base = "/tmp/finescale_test_ft_ckpt";
  fs::remove_all(base);
  const auto pre_records = with_split(tiny_dataset(6, 26), Split::pretrain);
  const ValidatedConfig config = fast_config(SslMethod::simclr, 1);
  PretrainOptions popts;
  popts.out_dir = (base / "pre").string();
  const PretrainResult pr = pretrain(pre_records, config, popts);

  auto all = tiny_dataset(6, 27);
  const auto train_split = with_split({all.begin(), all.begin() + 4}, Split::train);
  const auto val_split = with_split({all.begin() + 4, all.end()}, Split::val);

  FinetuneOptions fopts;
  fopts.out_dir = (base / "ft").string();
  const FinetuneResult fr =
      finetune_segmentation(train_split, val_split, config, pr.checkpoint_dir, fopts);
  CHECK(fs::exists(fs::path(fr.checkpoint_dir) / "manifest.json"));

  std::ifstream in(fs::path(fr.checkpoint_dir) / "manifest.json");
  nlohmann::json manifest;
  in >> manifest;
  CHECK(manifest.at("pretrain_checkpoint").get<std::string>() == pr.checkpoint_dir);
  fs::remove_all(base);
}

TEST_CASE("frozen encoders do not move during fine-tuning") {
  const fs::path base = "/tmp/finescale_test_freeze";
  fs::remove_all(base);
  const auto pre_records = with_split(tiny_dataset(6, 28), Split::pretrain);
  ExperimentConfig c = fast_config(SslMethod::simclr, 1).get();
  c.freeze_encoder = true;
  const ValidatedConfig config = validate_config(c);

  PretrainOptions popts;
  popts.out_dir = (base / "pre").string();
  const PretrainResult pr = pretrain(pre_records, config, popts);
  const std::uint64_t encoder_before = checkpoint_checksum(pr.checkpoint_dir);

  auto all = tiny_dataset(6, 29);
  const auto train_split = with_split({all.begin(), all.begin() + 4}, Split::train);
  const auto val_split = with_split({all.begin() + 4, all.end()}, Split::val);
  FinetuneOptions fopts;
  fopts.out_dir = (base / "ft").string();
  const FinetuneResult fr =
      finetune_segmentation(train_split, val_split, config, pr.checkpoint_dir, fopts);

  LoadedSegmenter model = load_segmenter(fr.checkpoint_dir);
  std::vector<nets::Parameter*> enc_params;
  model.encoder->collect(enc_params);
  CHECK(nets::parameter_checksum(enc_params) == encoder_before);
  fs::remove_all(base);
}

TEST_CASE("fine-tuning requires masks on the labeled split") {
  auto all = tiny_dataset(4, 30);
  auto train_split = with_split({all.begin(), all.begin() + 2}, Split::train);
  const auto val_split = with_split({all.begin() + 2, all.end()}, Split::val);
  train_split[0].mask.reset();
  FinetuneOptions opts;
  opts.out_dir = "/tmp/finescale_test_ft_nomask";
  try {
    finetune_segmentation(train_split, val_split, fast_config(SslMethod::none), "", opts);
    FAIL("expected a missing-mask error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::missing_mask);
  }
  fs::remove_all(opts.out_dir);
}

TEST_CASE("pretrain metrics log is well-formed JSONL") {
  const fs::path base = "/tmp/finescale_test_metrics";
  fs::remove_all(base);
  const auto records = with_split(tiny_dataset(4, 31), Split::pretrain);
  const ValidatedConfig config = fast_config(SslMethod::vicreg, 1);
  PretrainOptions opts;
  opts.out_dir = (base / "run").string();
  pretrain(records, config, opts);

  std::ifstream in(base / "run" / "metrics.jsonl");
  REQUIRE(in.good());
  std::string line;
  int steps = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    if (j.at("event").get<std::string>() == "step") {
      ++steps;
      CHECK(j.at("loss").is_number());
      CHECK(j.contains("components"));
      CHECK(j.at("lr").is_number());
    }
  }
  CHECK(steps > 0);
  fs::remove_all(base);
}
