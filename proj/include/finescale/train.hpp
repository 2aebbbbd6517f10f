// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "finescale/config.hpp"
#include "finescale/evalkit.hpp"
#include "finescale/nets.hpp"
#include "finescale/types.hpp"

namespace finescale::train {

/// Aligned image/label patch pair cut by one window.
struct LabeledPatch {
  Tensor pixels;
  LabelMap target;
  Window window;
  std::string source_id;
};

/// Deterministic seeded sample without replacement of ceil(fraction * n)
/// records. Selection is keyed on record ids, so it is invariant to input
/// order; the returned subset preserves the input order.
std::vector<ImageRecord> select_labeled_subset(const std::vector<ImageRecord>& records,
                                               double fraction, std::uint64_t seed);

/// Soft Dice loss 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps). If
/// `grad` is non-null it receives d(loss)/d(pred), same shape as pred.
double dice_loss(const Tensor& pred, const LabelMap& target, double epsilon = 1.0,
                 Tensor* grad = nullptr);

struct PretrainOptions {
  std::string out_dir;
  std::string resume_from;    // checkpoint directory to continue from
  int max_steps = 0;          // stop after this many optimizer steps (0 = run all epochs)
  std::string view_log_path;  // optional JSONL log of every sampled view pair
};

struct PretrainResult {
  std::string checkpoint_dir;
  std::vector<double> loss_trace;  // one entry per optimizer step this call ran
  double seconds_per_epoch = 0.0;
  int steps_run = 0;
};

/// SSL pretraining over the given records (the caller passes the pretrain
/// split). Writes metrics JSONL and a resumable checkpoint directory under
/// opts.out_dir; returns the final checkpoint path.
PretrainResult pretrain(const std::vector<ImageRecord>& records, const ValidatedConfig& config,
                        const PretrainOptions& opts);

struct FinetuneOptions {
  std::string out_dir;
};

struct FinetuneResult {
  std::string checkpoint_dir;
  double best_val_dice = 0.0;
  int best_epoch = -1;
  std::vector<double> loss_trace;
};

/// Fine-tunes a segmentation model on the labeled fraction of the train
/// split, tracking stitched validation Dice; the returned checkpoint holds
/// the best-validation parameters. An empty encoder_ckpt (or ssl_method =
/// none) starts from a randomly initialized encoder.
FinetuneResult finetune_segmentation(const std::vector<ImageRecord>& train_split,
                                     const std::vector<ImageRecord>& val_split,
                                     const ValidatedConfig& config,
                                     const std::string& encoder_ckpt, const FinetuneOptions& opts);

struct LoadedEncoder {
  nets::EncoderSpec spec;
  std::unique_ptr<nets::Sequential> encoder;
  std::int64_t patch_edge = 0;
  std::int64_t base_l = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t target_checksum = 0;  // byol only; 0 otherwise
};

LoadedEncoder load_pretrained_encoder(const std::string& ckpt_dir);

struct LoadedSegmenter {
  nets::EncoderSpec enc_spec;
  nets::DecoderSpec dec_spec;
  std::unique_ptr<nets::Sequential> encoder;
  std::unique_ptr<nets::Sequential> decoder;
  std::int64_t patch_edge = 0;
  int num_classes = 1;
};

LoadedSegmenter load_segmenter(const std::string& ckpt_dir);

/// Window-level predictor over a loaded segmentation model, suitable for
/// evalkit::stitch_predict.
evalkit::PatchPredictor make_patch_predictor(LoadedSegmenter& model);

/// Stitching stride for a window edge: floor(edge * fraction), clamped to
/// [1, edge - 1].
std::int64_t stitch_stride(std::int64_t edge, double fraction);

}  // namespace finescale::train
