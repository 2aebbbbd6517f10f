// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "finescale/config.hpp"
#include "finescale/evalkit.hpp"
#include "finescale/types.hpp"

namespace finescale::harness {

struct IngestResult {
  std::vector<ImageRecord> records;
  std::string dataset_name;
  double mean = 0.0;    // normalization stats over the raw pixel values
  double stddev = 1.0;
  std::int64_t base_l = 0;  // smallest image dimension in the dataset
};

/// Loads a dataset directory: manifest-driven when manifest.json is present,
/// otherwise discovers `<id>.png` / `<id>_mask.png` pairs (TIFF stacks expand
/// to one record per page). Splits come from the manifest, else from a
/// deterministic id hash. With normalize, intensities are shifted/scaled to
/// zero mean and unit variance over the whole dataset.
IngestResult ingest_dataset(const std::string& path, bool normalize = true,
                            bool require_masks = true);

/// Patch edge for a crop divisor: floor(base_l / divisor) floored to the
/// nearest multiple of the encoder stride product. TooSmall below 8 px.
std::int64_t resolve_patch_size(const std::vector<ImageRecord>& records, int divisor,
                                int stride_product);

/// Cartesian experiment grid over (ssl_method, sampling, crop_divisor, seed).
/// full_view cells ignore the divisor axis; cells whose derived configs
/// coincide are deduplicated.
struct SweepSpec {
  std::vector<SslMethod> methods;
  std::vector<SamplingStrategy> samplings;
  std::vector<int> crop_divisors;
  std::vector<std::uint64_t> seeds;
  ExperimentConfig base_config;
  std::string dataset_dir;
  std::string output_dir;
  bool average_methods = false;  // aggregate report rows across ssl methods
};

SweepSpec sweep_spec_from_json_string(const std::string& text);
std::string sweep_spec_to_json_string(const SweepSpec& spec);

struct RunRecord {
  std::string cell_id;
  std::string method;
  std::string sampling;
  std::string divisor;  // "2"/"4"/"8" or "full"
  std::uint64_t seed = 0;
  std::string status = "pending";  // pending | running | done | failed
  std::string error_text;
  double wall_time_s = 0.0;
  double mean_dice = 0.0;
  double mean_hd = 0.0;
  std::vector<evalkit::EvalRow> eval_rows;
  std::string pretrain_dir;
  std::string finetune_dir;
};

/// Expands the grid into per-cell derived configs. Every derived config is
/// validated; ConfigError propagates with the cell id attached.
std::vector<std::pair<std::string, ExperimentConfig>> expand_sweep(const SweepSpec& spec);

/// Runs every cell (pretrain when the method wants it, then finetune, then
/// stitched test evaluation). Cells already marked done in the sweep's
/// runs.jsonl are skipped; cell failures are recorded and the sweep goes on.
std::vector<RunRecord> run_sweep(const SweepSpec& spec);

std::vector<RunRecord> read_run_records(const std::string& path);

/// CSV + Markdown tables (per-seed rows plus mean +/- std aggregates, best
/// Dice highlighted, baselines grouped) and SVG line plots of Dice/HD versus
/// crop divisor per sampling strategy. NothingToReport without done cells.
void emit_report(const std::vector<RunRecord>& records, const std::string& out_dir,
                 bool average_methods = false);

}  // namespace finescale::harness
