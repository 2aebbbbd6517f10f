/* Copyright (c) 2026 The finescale authors */
/* SPDX-License-Identifier: Apache-2.0 */

/* C interface to the finescale shared library. All functions return a
 * finescale_status; on any non-OK status finescale_last_error() holds a
 * human-readable message (thread-local, valid until the next API call on
 * that thread). Strings returned through char** out-parameters are owned by
 * the caller and must be released with finescale_string_free(). */

#ifndef FINESCALE_FINESCALE_H_
#define FINESCALE_FINESCALE_H_

#include <stdint.h>

#if defined(_WIN32)
#define FINESCALE_API __declspec(dllexport)
#else
#define FINESCALE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum finescale_status {
  FINESCALE_OK = 0,
  FINESCALE_ERR_CONFIG = 1,
  FINESCALE_ERR_SHAPE = 2,
  FINESCALE_ERR_STRIDE = 3,
  FINESCALE_ERR_INFEASIBLE_CONSTRAINT = 4,
  FINESCALE_ERR_DEGENERATE_BATCH = 5,
  FINESCALE_ERR_ZERO_NORM = 6,
  FINESCALE_ERR_UNKNOWN_METHOD = 7,
  FINESCALE_ERR_STRUCTURE_MISMATCH = 8,
  FINESCALE_ERR_NON_FINITE_LOSS = 9,
  FINESCALE_ERR_NON_FINITE_GRADIENT = 10,
  FINESCALE_ERR_EMPTY_SUBSET = 11,
  FINESCALE_ERR_SPEC = 12,
  FINESCALE_ERR_IO = 13,
  FINESCALE_ERR_FORMAT = 14,
  FINESCALE_ERR_MISSING_MASK = 15,
  FINESCALE_ERR_INCONSISTENT_SHAPE = 16,
  FINESCALE_ERR_TOO_SMALL = 17,
  FINESCALE_ERR_NOTHING_TO_REPORT = 18,
  FINESCALE_ERR_INTERNAL = 19,
  FINESCALE_ERR_INVALID_ARGUMENT = 20
} finescale_status;

/* Opaque experiment configuration (mutable; validated when used). */
typedef struct finescale_config finescale_config;
/* Opaque in-memory dataset with splits and normalization applied. */
typedef struct finescale_dataset finescale_dataset;

FINESCALE_API const char* finescale_version(void);
FINESCALE_API const char* finescale_last_error(void);
FINESCALE_API void finescale_string_free(char* s);

/* -- configuration ------------------------------------------------------- */

FINESCALE_API finescale_status finescale_config_create(finescale_config** out);
FINESCALE_API finescale_status finescale_config_from_json(const char* json_text,
                                                          finescale_config** out);
FINESCALE_API finescale_status finescale_config_load_file(const char* path,
                                                          finescale_config** out);
/* Sets one field by config key; the value is parsed as JSON, falling back
 * to a bare string. Returns FINESCALE_ERR_CONFIG for unknown keys. */
FINESCALE_API finescale_status finescale_config_set(finescale_config* config, const char* key,
                                                    const char* value);
FINESCALE_API finescale_status finescale_config_to_json(const finescale_config* config,
                                                        char** out_json);
/* Runs full validation without executing anything. */
FINESCALE_API finescale_status finescale_config_validate(const finescale_config* config);
FINESCALE_API void finescale_config_free(finescale_config* config);

/* -- synthetic data ------------------------------------------------------ */

/* kind: thin_curves | small_blobs | large_bands | large_regions.
 * image_h/image_w <= 0 and density <= 0 select kind defaults. Writes PNG
 * pairs plus manifest.json into out_dir. */
FINESCALE_API finescale_status finescale_synth_generate(const char* kind, int count,
                                                        uint64_t seed, int64_t image_h,
                                                        int64_t image_w, double density,
                                                        const char* out_dir,
                                                        char** out_manifest_path);

/* -- datasets ------------------------------------------------------------ */

FINESCALE_API finescale_status finescale_dataset_open(const char* path, int normalize,
                                                      finescale_dataset** out);
/* JSON summary: record count, per-split counts, base length, stats. */
FINESCALE_API finescale_status finescale_dataset_info(const finescale_dataset* dataset,
                                                      char** out_json);
FINESCALE_API void finescale_dataset_free(finescale_dataset* dataset);

/* -- training and evaluation --------------------------------------------- */

FINESCALE_API finescale_status finescale_pretrain(const finescale_config* config,
                                                  const finescale_dataset* dataset,
                                                  const char* out_dir,
                                                  char** out_checkpoint_dir);
/* encoder_checkpoint may be NULL or empty to fine-tune from random init. */
FINESCALE_API finescale_status finescale_finetune(const finescale_config* config,
                                                  const finescale_dataset* dataset,
                                                  const char* encoder_checkpoint,
                                                  const char* out_dir,
                                                  char** out_checkpoint_dir);
/* split: pretrain | train | val | test. Returns the evaluation summary
 * (per-record rows plus means) as JSON. */
FINESCALE_API finescale_status finescale_evaluate(const finescale_config* config,
                                                  const finescale_dataset* dataset,
                                                  const char* seg_checkpoint, const char* split,
                                                  char** out_summary_json);

/* -- sweeps and reports --------------------------------------------------- */

/* Runs (or resumes) the sweep described by the JSON spec; returns a JSON
 * array of run records. Cell failures are recorded, not raised. */
FINESCALE_API finescale_status finescale_sweep_run(const char* sweep_spec_json,
                                                   char** out_runs_json);
FINESCALE_API finescale_status finescale_report_emit(const char* runs_jsonl_path,
                                                     const char* out_dir, int average_methods);

#ifdef __cplusplus
}
#endif

#endif /* FINESCALE_FINESCALE_H_ */
