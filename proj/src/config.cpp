// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "finescale/rng.hpp"

namespace finescale {

using nlohmann::json;

const char* ssl_method_name(SslMethod m) {
  switch (m) {
    case SslMethod::simclr: return "simclr";
    case SslMethod::byol: return "byol";
    case SslMethod::vicreg: return "vicreg";
    case SslMethod::none: return "none";
  }
  return "?";
}

const char* sampling_name(SamplingStrategy s) {
  switch (s) {
    case SamplingStrategy::random: return "random";
    case SamplingStrategy::proximity: return "proximity";
    case SamplingStrategy::full_view: return "full_view";
  }
  return "?";
}

const char* optimizer_name(OptimizerKind o) {
  switch (o) {
    case OptimizerKind::lars: return "lars";
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adam: return "adam";
  }
  return "?";
}

const char* encoder_name(EncoderArch a) {
  switch (a) {
    case EncoderArch::toy_cnn: return "toy_cnn";
    case EncoderArch::resnet18: return "resnet18";
  }
  return "?";
}

const char* decoder_name(DecoderStyle d) {
  switch (d) {
    case DecoderStyle::plain_upsample: return "plain_upsample";
    case DecoderStyle::deeplab_aspp: return "deeplab_aspp";
  }
  return "?";
}

SslMethod ssl_method_from_name(const std::string& name) {
  if (name == "simclr") return SslMethod::simclr;
  if (name == "byol") return SslMethod::byol;
  if (name == "vicreg") return SslMethod::vicreg;
  if (name == "none") return SslMethod::none;
  throw Error(ErrorKind::config, "ssl_method");
}

SamplingStrategy sampling_from_name(const std::string& name) {
  if (name == "random") return SamplingStrategy::random;
  if (name == "proximity") return SamplingStrategy::proximity;
  if (name == "full_view") return SamplingStrategy::full_view;
  throw Error(ErrorKind::config, "sampling");
}

OptimizerKind optimizer_from_name(const std::string& name) {
  if (name == "lars") return OptimizerKind::lars;
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw Error(ErrorKind::config, "optimizer");
}

EncoderArch encoder_from_name(const std::string& name) {
  if (name == "toy_cnn") return EncoderArch::toy_cnn;
  if (name == "resnet18") return EncoderArch::resnet18;
  throw Error(ErrorKind::config, "encoder");
}

DecoderStyle decoder_from_name(const std::string& name) {
  if (name == "plain_upsample") return DecoderStyle::plain_upsample;
  if (name == "deeplab_aspp") return DecoderStyle::deeplab_aspp;
  throw Error(ErrorKind::config, "decoder");
}

namespace {

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["dataset"] = c.dataset;
  j["ssl_method"] = ssl_method_name(c.ssl_method);
  j["sampling"] = sampling_name(c.sampling);
  if (c.crop_divisor) {
    j["crop_divisor"] = *c.crop_divisor;
  } else {
    j["crop_divisor"] = nullptr;
  }
  if (c.delta) {
    j["delta"] = *c.delta;
  } else {
    j["delta"] = nullptr;
  }
  j["label_fraction"] = c.label_fraction;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["optimizer"] = optimizer_name(c.optimizer);
  j["base_lr"] = c.base_lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["trust_coefficient"] = c.trust_coefficient;
  j["warmup_epochs"] = c.warmup_epochs;
  j["encoder"] = encoder_name(c.encoder);
  j["encoder_strides"] = c.encoder_strides;
  j["feature_dim"] = c.feature_dim;
  j["embed_dim"] = c.embed_dim;
  j["decoder"] = decoder_name(c.decoder);
  j["temperature"] = c.temperature;
  j["byol_momentum"] = c.byol_momentum;
  j["vicreg_lambda"] = c.vicreg_lambda;
  j["vicreg_mu"] = c.vicreg_mu;
  j["vicreg_nu"] = c.vicreg_nu;
  j["vicreg_gamma"] = c.vicreg_gamma;
  j["aug_flips"] = c.aug_flips;
  j["aug_intensity"] = c.aug_intensity;
  j["aug_affine"] = c.aug_affine;
  j["max_rotation_deg"] = c.max_rotation_deg;
  j["max_shear_deg"] = c.max_shear_deg;
  j["affine_scale_lo"] = c.affine_scale_lo;
  j["affine_scale_hi"] = c.affine_scale_hi;
  j["intensity_scale_lo"] = c.intensity_scale_lo;
  j["intensity_scale_hi"] = c.intensity_scale_hi;
  j["intensity_shift_max"] = c.intensity_shift_max;
  j["views_per_image"] = c.views_per_image;
  j["patches_per_image"] = c.patches_per_image;
  j["finetune_epochs"] = c.finetune_epochs;
  j["finetune_lr"] = c.finetune_lr;
  j["freeze_encoder"] = c.freeze_encoder;
  j["val_every"] = c.val_every;
  j["metric_cap"] = c.metric_cap;
  j["threshold"] = c.threshold;
  j["stride_fraction"] = c.stride_fraction;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key) && !j.at(key).is_null()) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("schema_version", c.schema_version);
  get("seed", c.seed);
  get("dataset", c.dataset);
  if (j.contains("ssl_method")) c.ssl_method = ssl_method_from_name(j.at("ssl_method").get<std::string>());
  if (j.contains("sampling")) c.sampling = sampling_from_name(j.at("sampling").get<std::string>());
  if (j.contains("crop_divisor")) {
    const auto& v = j.at("crop_divisor");
    if (v.is_null() || (v.is_string() && v.get<std::string>() == "none")) {
      c.crop_divisor.reset();
    } else {
      c.crop_divisor = v.get<int>();
    }
  }
  if (j.contains("delta")) {
    const auto& v = j.at("delta");
    if (v.is_null()) {
      c.delta.reset();
    } else {
      c.delta = v.get<double>();
    }
  }
  get("label_fraction", c.label_fraction);
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_name(j.at("optimizer").get<std::string>());
  get("base_lr", c.base_lr);
  get("momentum", c.momentum);
  get("weight_decay", c.weight_decay);
  get("trust_coefficient", c.trust_coefficient);
  get("warmup_epochs", c.warmup_epochs);
  if (j.contains("encoder")) c.encoder = encoder_from_name(j.at("encoder").get<std::string>());
  get("encoder_strides", c.encoder_strides);
  get("feature_dim", c.feature_dim);
  get("embed_dim", c.embed_dim);
  if (j.contains("decoder")) c.decoder = decoder_from_name(j.at("decoder").get<std::string>());
  get("temperature", c.temperature);
  get("byol_momentum", c.byol_momentum);
  get("vicreg_lambda", c.vicreg_lambda);
  get("vicreg_mu", c.vicreg_mu);
  get("vicreg_nu", c.vicreg_nu);
  get("vicreg_gamma", c.vicreg_gamma);
  get("aug_flips", c.aug_flips);
  get("aug_intensity", c.aug_intensity);
  get("aug_affine", c.aug_affine);
  get("max_rotation_deg", c.max_rotation_deg);
  get("max_shear_deg", c.max_shear_deg);
  get("affine_scale_lo", c.affine_scale_lo);
  get("affine_scale_hi", c.affine_scale_hi);
  get("intensity_scale_lo", c.intensity_scale_lo);
  get("intensity_scale_hi", c.intensity_scale_hi);
  get("intensity_shift_max", c.intensity_shift_max);
  get("views_per_image", c.views_per_image);
  get("patches_per_image", c.patches_per_image);
  get("finetune_epochs", c.finetune_epochs);
  get("finetune_lr", c.finetune_lr);
  get("freeze_encoder", c.freeze_encoder);
  get("val_every", c.val_every);
  get("metric_cap", c.metric_cap);
  get("threshold", c.threshold);
  get("stride_fraction", c.stride_fraction);
  get("checkpoint_every", c.checkpoint_every);
  return c;
}

}  // namespace

std::string ExperimentConfig::to_json_string(int indent) const {
  return config_to_json(*this).dump(indent);
}

ExperimentConfig ExperimentConfig::from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("config parse failed: ") + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, std::string("config field type: ") + e.what());
  }
}

ValidatedConfig validate_config(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  auto fail = [](const char* field) -> void { throw Error(ErrorKind::config, field); };

  if (c.schema_version != 1) fail("schema_version");
  if (c.sampling != SamplingStrategy::full_view) {
    if (!c.crop_divisor) fail("crop_divisor");
    if (*c.crop_divisor != 2 && *c.crop_divisor != 4 && *c.crop_divisor != 8) fail("crop_divisor");
  }
  if (c.sampling == SamplingStrategy::proximity && c.delta && *c.delta <= 0.0) {
    // Eq-style strict inequality makes delta == 0 unsatisfiable.
    fail("delta");
  }
  if (!(c.label_fraction > 0.0 && c.label_fraction <= 1.0)) fail("label_fraction");
  if (c.epochs < 1) fail("epochs");
  if (c.batch_size < 1) fail("batch_size");
  if (c.base_lr < 0.0 || !std::isfinite(c.base_lr)) fail("base_lr");
  if (c.momentum < 0.0 || c.momentum >= 1.0) fail("momentum");
  if (c.weight_decay < 0.0) fail("weight_decay");
  if (c.trust_coefficient <= 0.0) fail("trust_coefficient");
  if (c.warmup_epochs < 0) fail("warmup_epochs");
  if (c.encoder_strides.empty()) fail("encoder_strides");
  for (int s : c.encoder_strides) {
    if (s != 1 && s != 2) fail("encoder_strides");
  }
  if (c.feature_dim < 1) fail("feature_dim");
  if (c.embed_dim < 2) fail("embed_dim");
  if (c.temperature <= 0.0) fail("temperature");
  if (c.byol_momentum < 0.0 || c.byol_momentum > 1.0) fail("byol_momentum");
  if (c.vicreg_lambda < 0.0 || c.vicreg_mu < 0.0 || c.vicreg_nu < 0.0) fail("vicreg_lambda");
  if (c.vicreg_gamma <= 0.0) fail("vicreg_gamma");
  if (c.affine_scale_lo <= 0.0 || c.affine_scale_hi < c.affine_scale_lo) fail("affine_scale_lo");
  if (c.intensity_scale_lo <= 0.0 || c.intensity_scale_hi < c.intensity_scale_lo) fail("intensity_scale_lo");
  if (c.intensity_shift_max < 0.0) fail("intensity_shift_max");
  if (c.max_rotation_deg < 0.0 || c.max_shear_deg < 0.0) fail("max_rotation_deg");
  if (c.views_per_image < 1) fail("views_per_image");
  if (c.patches_per_image < 1) fail("patches_per_image");
  if (c.finetune_epochs < 1) fail("finetune_epochs");
  if (c.finetune_lr <= 0.0) fail("finetune_lr");
  if (c.val_every < 1) fail("val_every");
  if (c.metric_cap <= 0.0) fail("metric_cap");
  if (c.threshold <= 0.0 || c.threshold >= 1.0) fail("threshold");
  if (c.stride_fraction <= 0.0 || c.stride_fraction >= 1.0) fail("stride_fraction");
  if (c.checkpoint_every < 0) fail("checkpoint_every");

  // Derived default: LARS recipe lr scaled by batch size.
  if (c.base_lr == 0.0) c.base_lr = 0.3 * static_cast<double>(c.batch_size) / 256.0;

  return ValidatedConfig(std::move(c));
}

std::uint64_t ValidatedConfig::hash() const {
  const std::string text = config_.to_json_string(0);
  return fnv1a64(text.data(), text.size());
}

void set_config_field(ExperimentConfig& config, const std::string& key, const std::string& value) {
  json j = config_to_json(config);
  if (!j.contains(key)) throw Error(ErrorKind::config, "unknown field '" + key + "'");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // bare strings (e.g. enum names) need no quoting
  }
  j[key] = parsed;
  config = config_from_json(j);
}

void apply_env_overrides(ExperimentConfig& config) {
  static const char* kScalarKeys[] = {
      "seed", "dataset", "ssl_method", "sampling", "crop_divisor", "delta", "label_fraction",
      "epochs", "batch_size", "optimizer", "base_lr", "momentum", "weight_decay",
      "trust_coefficient", "warmup_epochs", "encoder", "feature_dim", "embed_dim", "decoder",
      "temperature", "byol_momentum", "vicreg_lambda", "vicreg_mu", "vicreg_nu", "vicreg_gamma",
      "views_per_image", "patches_per_image", "finetune_epochs", "finetune_lr", "val_every",
      "metric_cap", "threshold", "stride_fraction", "checkpoint_every",
  };
  for (const char* key : kScalarKeys) {
    std::string env_name = "FINESCALE_";
    for (const char* p = key; *p; ++p) env_name.push_back(static_cast<char>(std::toupper(*p)));
    if (const char* value = std::getenv(env_name.c_str())) {
      set_config_field(config, key, value);
    }
  }
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  ExperimentConfig config = ExperimentConfig::from_json_string(buf.str());
  apply_env_overrides(config);
  return config;
}

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "ConfigError";
    case ErrorKind::shape: return "ShapeError";
    case ErrorKind::stride: return "StrideError";
    case ErrorKind::infeasible_constraint: return "InfeasibleConstraint";
    case ErrorKind::degenerate_batch: return "DegenerateBatch";
    case ErrorKind::zero_norm: return "ZeroNorm";
    case ErrorKind::unknown_method: return "UnknownMethod";
    case ErrorKind::structure_mismatch: return "StructureMismatch";
    case ErrorKind::non_finite_loss: return "NonFiniteLoss";
    case ErrorKind::non_finite_gradient: return "NonFiniteGradient";
    case ErrorKind::empty_subset: return "EmptySubset";
    case ErrorKind::spec: return "SpecError";
    case ErrorKind::io: return "IoError";
    case ErrorKind::format: return "FormatError";
    case ErrorKind::missing_mask: return "MissingMask";
    case ErrorKind::inconsistent_shape: return "InconsistentShape";
    case ErrorKind::too_small: return "TooSmall";
    case ErrorKind::nothing_to_report: return "NothingToReport";
    case ErrorKind::internal: return "InternalError";
  }
  return "Error";
}

}  // namespace finescale
