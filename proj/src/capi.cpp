// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/finescale.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include <json.hpp>

#include "finescale/config.hpp"
#include "finescale/harness.hpp"
#include "finescale/synth.hpp"
#include "finescale/train.hpp"

struct finescale_config {
  finescale::ExperimentConfig value;
};

struct finescale_dataset {
  finescale::harness::IngestResult value;
};

namespace {

using nlohmann::json;

thread_local std::string g_last_error;

finescale_status status_from_kind(finescale::ErrorKind kind) {
  using finescale::ErrorKind;
  switch (kind) {
    case ErrorKind::config: return FINESCALE_ERR_CONFIG;
    case ErrorKind::shape: return FINESCALE_ERR_SHAPE;
    case ErrorKind::stride: return FINESCALE_ERR_STRIDE;
    case ErrorKind::infeasible_constraint: return FINESCALE_ERR_INFEASIBLE_CONSTRAINT;
    case ErrorKind::degenerate_batch: return FINESCALE_ERR_DEGENERATE_BATCH;
    case ErrorKind::zero_norm: return FINESCALE_ERR_ZERO_NORM;
    case ErrorKind::unknown_method: return FINESCALE_ERR_UNKNOWN_METHOD;
    case ErrorKind::structure_mismatch: return FINESCALE_ERR_STRUCTURE_MISMATCH;
    case ErrorKind::non_finite_loss: return FINESCALE_ERR_NON_FINITE_LOSS;
    case ErrorKind::non_finite_gradient: return FINESCALE_ERR_NON_FINITE_GRADIENT;
    case ErrorKind::empty_subset: return FINESCALE_ERR_EMPTY_SUBSET;
    case ErrorKind::spec: return FINESCALE_ERR_SPEC;
    case ErrorKind::io: return FINESCALE_ERR_IO;
    case ErrorKind::format: return FINESCALE_ERR_FORMAT;
    case ErrorKind::missing_mask: return FINESCALE_ERR_MISSING_MASK;
    case ErrorKind::inconsistent_shape: return FINESCALE_ERR_INCONSISTENT_SHAPE;
    case ErrorKind::too_small: return FINESCALE_ERR_TOO_SMALL;
    case ErrorKind::nothing_to_report: return FINESCALE_ERR_NOTHING_TO_REPORT;
    case ErrorKind::internal: return FINESCALE_ERR_INTERNAL;
  }
  return FINESCALE_ERR_INTERNAL;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out != nullptr) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

finescale_status invalid_argument(const char* what) {
  g_last_error = std::string("InvalidArgument: ") + what;
  return FINESCALE_ERR_INVALID_ARGUMENT;
}

/// Runs the body, translating exceptions into status codes.
template <typename Fn>
finescale_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    fn();
    return FINESCALE_OK;
  } catch (const finescale::Error& e) {
    g_last_error = e.what();
    return status_from_kind(e.kind());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return FINESCALE_ERR_INTERNAL;
  }
}

std::vector<finescale::ImageRecord> split_records(const finescale::harness::IngestResult& data,
                                                  finescale::Split split) {
  std::vector<finescale::ImageRecord> out;
  for (const finescale::ImageRecord& rec : data.records) {
    if (rec.split == split) out.push_back(rec);
  }
  return out;
}

}  // namespace

extern "C" {

const char* finescale_version(void) { return "0.1.0"; }

const char* finescale_last_error(void) { return g_last_error.c_str(); }

void finescale_string_free(char* s) { std::free(s); }

/* -- configuration ------------------------------------------------------- */

finescale_status finescale_config_create(finescale_config** out) {
  if (out == nullptr) return invalid_argument("out is null");
  return guarded([&] { *out = new finescale_config{finescale::ExperimentConfig{}}; });
}

finescale_status finescale_config_from_json(const char* json_text, finescale_config** out) {
  if (json_text == nullptr || out == nullptr) return invalid_argument("null argument");
  return guarded([&] {
    *out = new finescale_config{finescale::ExperimentConfig::from_json_string(json_text)};
  });
}

finescale_status finescale_config_load_file(const char* path, finescale_config** out) {
  if (path == nullptr || out == nullptr) return invalid_argument("null argument");
  return guarded([&] { *out = new finescale_config{finescale::load_config_file(path)}; });
}

finescale_status finescale_config_set(finescale_config* config, const char* key,
                                      const char* value) {
  if (config == nullptr || key == nullptr || value == nullptr) {
    return invalid_argument("null argument");
  }
  return guarded([&] { finescale::set_config_field(config->value, key, value); });
}

finescale_status finescale_config_to_json(const finescale_config* config, char** out_json) {
  if (config == nullptr || out_json == nullptr) return invalid_argument("null argument");
  return guarded([&] { *out_json = dup_string(config->value.to_json_string()); });
}

finescale_status finescale_config_validate(const finescale_config* config) {
  if (config == nullptr) return invalid_argument("config is null");
  return guarded([&] { finescale::validate_config(config->value); });
}

void finescale_config_free(finescale_config* config) { delete config; }

/* -- synthetic data ------------------------------------------------------ */

finescale_status finescale_synth_generate(const char* kind, int count, uint64_t seed,
                                          int64_t image_h, int64_t image_w, double density,
                                          const char* out_dir, char** out_manifest_path) {
  if (kind == nullptr || out_dir == nullptr) return invalid_argument("null argument");
  return guarded([&] {
    finescale::synth::SynthSpec spec =
        finescale::synth::make_default_spec(finescale::synth::synth_kind_from_name(kind));
    spec.count = count;
    spec.seed = seed;
    if (image_h > 0) spec.image_h = image_h;
    if (image_w > 0) spec.image_w = image_w;
    if (density > 0.0) spec.density = density;
    const std::vector<finescale::ImageRecord> records = finescale::synth::generate_dataset(spec);
    const std::string manifest = finescale::synth::write_dataset(records, spec, out_dir);
    if (out_manifest_path != nullptr) *out_manifest_path = dup_string(manifest);
  });
}

/* -- datasets ------------------------------------------------------------ */

finescale_status finescale_dataset_open(const char* path, int normalize,
                                        finescale_dataset** out) {
  if (path == nullptr || out == nullptr) return invalid_argument("null argument");
  return guarded([&] {
    *out = new finescale_dataset{finescale::harness::ingest_dataset(path, normalize != 0)};
  });
}

finescale_status finescale_dataset_info(const finescale_dataset* dataset, char** out_json) {
  if (dataset == nullptr || out_json == nullptr) return invalid_argument("null argument");
  return guarded([&] {
    int counts[4] = {0, 0, 0, 0};
    for (const finescale::ImageRecord& rec : dataset->value.records) {
      ++counts[static_cast<int>(rec.split)];
    }
    const json info{{"name", dataset->value.dataset_name},
                    {"records", dataset->value.records.size()},
                    {"splits",
                     {{"pretrain", counts[0]},
                      {"train", counts[1]},
                      {"val", counts[2]},
                      {"test", counts[3]}}},
                    {"base_l", dataset->value.base_l},
                    {"mean", dataset->value.mean},
                    {"stddev", dataset->value.stddev}};
    *out_json = dup_string(info.dump(2));
  });
}

void finescale_dataset_free(finescale_dataset* dataset) { delete dataset; }

/* -- training and evaluation --------------------------------------------- */

finescale_status finescale_pretrain(const finescale_config* config,
                                    const finescale_dataset* dataset, const char* out_dir,
                                    char** out_checkpoint_dir) {
  if (config == nullptr || dataset == nullptr || out_dir == nullptr) {
    return invalid_argument("null argument");
  }
  return guarded([&] {
    const finescale::ValidatedConfig validated = finescale::validate_config(config->value);
    finescale::train::PretrainOptions opts;
    opts.out_dir = out_dir;
    const finescale::train::PretrainResult result = finescale::train::pretrain(
        split_records(dataset->value, finescale::Split::pretrain), validated, opts);
    if (out_checkpoint_dir != nullptr) *out_checkpoint_dir = dup_string(result.checkpoint_dir);
  });
}

finescale_status finescale_finetune(const finescale_config* config,
                                    const finescale_dataset* dataset,
                                    const char* encoder_checkpoint, const char* out_dir,
                                    char** out_checkpoint_dir) {
  if (config == nullptr || dataset == nullptr || out_dir == nullptr) {
    return invalid_argument("null argument");
  }
  return guarded([&] {
    const finescale::ValidatedConfig validated = finescale::validate_config(config->value);
    finescale::train::FinetuneOptions opts;
    opts.out_dir = out_dir;
    const finescale::train::FinetuneResult result = finescale::train::finetune_segmentation(
        split_records(dataset->value, finescale::Split::train),
        split_records(dataset->value, finescale::Split::val), validated,
        encoder_checkpoint != nullptr ? encoder_checkpoint : "", opts);
    if (out_checkpoint_dir != nullptr) *out_checkpoint_dir = dup_string(result.checkpoint_dir);
  });
}

finescale_status finescale_evaluate(const finescale_config* config,
                                    const finescale_dataset* dataset, const char* seg_checkpoint,
                                    const char* split, char** out_summary_json) {
  if (config == nullptr || dataset == nullptr || seg_checkpoint == nullptr || split == nullptr) {
    return invalid_argument("null argument");
  }
  return guarded([&] {
    const finescale::ValidatedConfig validated = finescale::validate_config(config->value);
    finescale::train::LoadedSegmenter model = finescale::train::load_segmenter(seg_checkpoint);
    const finescale::evalkit::PatchPredictor predictor =
        finescale::train::make_patch_predictor(model);
    const std::int64_t stride =
        finescale::train::stitch_stride(model.patch_edge, validated->stride_fraction);
    finescale::evalkit::EvalRow row_template;
    row_template.dataset = dataset->value.dataset_name;
    row_template.method = finescale::ssl_method_name(validated->ssl_method);
    row_template.sampling = finescale::sampling_name(validated->sampling);
    row_template.patch_divisor = validated->crop_divisor
                                     ? "L/" + std::to_string(*validated->crop_divisor)
                                     : "full";
    row_template.seed = static_cast<std::int64_t>(validated->seed);
    const finescale::evalkit::EvalSummary summary = finescale::evalkit::evaluate_split(
        split_records(dataset->value, finescale::split_from_name(split)), predictor,
        model.patch_edge, model.patch_edge, stride, validated->threshold, validated->metric_cap,
        row_template);

    json rows = json::array();
    for (const finescale::evalkit::EvalRow& row : summary.rows) {
      rows.push_back(json{{"dataset", row.dataset},
                          {"method", row.method},
                          {"sampling", row.sampling},
                          {"patch_divisor", row.patch_divisor},
                          {"record_id", row.record_id},
                          {"dice", row.dice},
                          {"hd", row.hd},
                          {"seed", row.seed}});
    }
    const json out{{"rows", rows}, {"mean_dice", summary.mean_dice}, {"mean_hd", summary.mean_hd}};
    if (out_summary_json != nullptr) *out_summary_json = dup_string(out.dump(2));
  });
}

/* -- sweeps and reports --------------------------------------------------- */

finescale_status finescale_sweep_run(const char* sweep_spec_json, char** out_runs_json) {
  if (sweep_spec_json == nullptr) return invalid_argument("sweep_spec_json is null");
  return guarded([&] {
    const finescale::harness::SweepSpec spec =
        finescale::harness::sweep_spec_from_json_string(sweep_spec_json);
    const std::vector<finescale::harness::RunRecord> records = finescale::harness::run_sweep(spec);
    json out = json::array();
    for (const finescale::harness::RunRecord& rec : records) {
      out.push_back(json{{"cell_id", rec.cell_id},
                         {"status", rec.status},
                         {"error_text", rec.error_text},
                         {"mean_dice", rec.mean_dice},
                         {"mean_hd", rec.mean_hd},
                         {"wall_time_s", rec.wall_time_s}});
    }
    if (out_runs_json != nullptr) *out_runs_json = dup_string(out.dump(2));
  });
}

finescale_status finescale_report_emit(const char* runs_jsonl_path, const char* out_dir,
                                       int average_methods) {
  if (runs_jsonl_path == nullptr || out_dir == nullptr) return invalid_argument("null argument");
  return guarded([&] {
    const std::vector<finescale::harness::RunRecord> records =
        finescale::harness::read_run_records(runs_jsonl_path);
    finescale::harness::emit_report(records, out_dir, average_methods != 0);
  });
}

}  // extern "C"
