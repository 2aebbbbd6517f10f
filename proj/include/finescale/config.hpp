// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "finescale/error.hpp"

namespace finescale {

enum class SslMethod { simclr, byol, vicreg, none };
enum class SamplingStrategy { random, proximity, full_view };
enum class OptimizerKind { lars, sgd, adam };
enum class EncoderArch { toy_cnn, resnet18 };
enum class DecoderStyle { plain_upsample, deeplab_aspp };

const char* ssl_method_name(SslMethod m);
const char* sampling_name(SamplingStrategy s);
const char* optimizer_name(OptimizerKind o);
const char* encoder_name(EncoderArch a);
const char* decoder_name(DecoderStyle d);

SslMethod ssl_method_from_name(const std::string& name);
SamplingStrategy sampling_from_name(const std::string& name);
OptimizerKind optimizer_from_name(const std::string& name);
EncoderArch encoder_from_name(const std::string& name);
DecoderStyle decoder_from_name(const std::string& name);

/// Full experiment configuration. Field names match the JSON schema
/// (schema_version 1); see README for the documented file format.
struct ExperimentConfig {
  int schema_version = 1;
  std::uint64_t seed = 0;
  std::string dataset;  // optional path; CLI --data overrides

  SslMethod ssl_method = SslMethod::simclr;
  SamplingStrategy sampling = SamplingStrategy::random;
  std::optional<int> crop_divisor = 8;  // {2,4,8}; absent => full-view run
  std::optional<double> delta;          // proximity radius; absent => crop size
  double label_fraction = 0.1;

  int epochs = 100;
  int batch_size = 128;
  OptimizerKind optimizer = OptimizerKind::lars;
  double base_lr = 0.0;  // 0 => LARS recipe 0.3 * batch/256
  double momentum = 0.9;
  double weight_decay = 1e-6;
  double trust_coefficient = 1e-3;
  int warmup_epochs = 10;

  EncoderArch encoder = EncoderArch::toy_cnn;
  std::vector<int> encoder_strides = {2, 2, 1};  // toy_cnn stage strides
  int feature_dim = 64;
  int embed_dim = 32;
  DecoderStyle decoder = DecoderStyle::plain_upsample;

  double temperature = 0.5;
  double byol_momentum = 0.99;
  double vicreg_lambda = 25.0;
  double vicreg_mu = 25.0;
  double vicreg_nu = 1.0;
  double vicreg_gamma = 1.0;

  bool aug_flips = true;
  bool aug_intensity = true;
  bool aug_affine = true;
  double max_rotation_deg = 15.0;
  double max_shear_deg = 5.0;
  double affine_scale_lo = 0.9;
  double affine_scale_hi = 1.1;
  double intensity_scale_lo = 0.8;
  double intensity_scale_hi = 1.2;
  double intensity_shift_max = 0.1;

  int views_per_image = 1;
  int patches_per_image = 4;

  int finetune_epochs = 40;
  double finetune_lr = 1e-3;
  bool freeze_encoder = false;
  int val_every = 5;

  double metric_cap = 200.0;
  double threshold = 0.5;
  double stride_fraction = 0.5;

  int checkpoint_every = 0;  // epochs; 0 => final checkpoint only

  std::string to_json_string(int indent = 2) const;
  static ExperimentConfig from_json_string(const std::string& text);
};

/// Immutable configuration that passed validate_config. The wrapped value
/// is frozen; downstream code reads through get().
class ValidatedConfig {
 public:
  const ExperimentConfig& get() const { return config_; }
  const ExperimentConfig* operator->() const { return &config_; }

  /// FNV-1a of the canonical JSON serialization.
  std::uint64_t hash() const;

 private:
  friend ValidatedConfig validate_config(const ExperimentConfig& config);
  explicit ValidatedConfig(ExperimentConfig config) : config_(std::move(config)) {}
  ExperimentConfig config_;
};

/// Checks every config invariant and fills derived defaults. Throws a
/// config Error naming the first violated field.
ValidatedConfig validate_config(const ExperimentConfig& config);

/// Loads a config file, then applies FINESCALE_* environment overrides for
/// scalar fields (e.g. FINESCALE_SEED, FINESCALE_EPOCHS).
ExperimentConfig load_config_file(const std::string& path);

/// Applies the environment overrides to an in-memory config (exposed for
/// tests; load_config_file already calls it).
void apply_env_overrides(ExperimentConfig& config);

/// Sets a single field by its JSON key from a string value.
void set_config_field(ExperimentConfig& config, const std::string& key, const std::string& value);

}  // namespace finescale
