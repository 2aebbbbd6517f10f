// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "finescale/config.hpp"
#include "finescale/rng.hpp"
#include "finescale/tensor.hpp"

namespace finescale::nets {

/// Named trainable tensor with its gradient accumulator. Non-trainable
/// parameters (batch-norm running statistics) ride along for checkpointing,
/// EMA and checksums but are skipped by optimizers.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter(std::string n, Tensor v, bool t = true)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)), trainable(t) {}
};

/// Double-precision layer with explicit forward/backward. Each forward
/// caches what its backward needs; call order per step is forward once,
/// backward once.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool train) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect(std::vector<Parameter*>& out) { (void)out; }
  /// Enables or disables batch-norm running-stat updates in train mode.
  virtual void set_update_stats(bool update) { (void)update; }
};

class Sequential : public Layer {
 public:
  Sequential() = default;
  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(std::vector<Parameter*>& out) override;
  void set_update_stats(bool update) override;
  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

class Conv2d : public Layer {
 public:
  Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad,
         int dilation, std::uint64_t init_seed);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(std::vector<Parameter*>& out) override;
  std::int64_t out_extent(std::int64_t in, int kernel_extent) const;

 private:
  int in_ch_, out_ch_, kernel_, stride_, pad_, dilation_;
  Parameter weight_, bias_;
  Tensor input_;
};

class BatchNorm2d : public Layer {
 public:
  BatchNorm2d(const std::string& name, int channels);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(std::vector<Parameter*>& out) override;
  void set_update_stats(bool update) override { update_stats_ = update; }

 private:
  int channels_;
  Parameter gamma_, beta_, running_mean_, running_var_;
  Tensor normalized_;
  std::vector<double> inv_std_;
  bool train_mode_ = false;
  bool update_stats_ = true;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Tensor input_;
};

class MaxPool2d : public Layer {
 public:
  MaxPool2d(int kernel, int stride, int pad) : kernel_(kernel), stride_(stride), pad_(pad) {}
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  int kernel_, stride_, pad_;
  std::vector<std::int64_t> argmax_;
  std::vector<std::int64_t> in_shape_;
};

/// {N, C, H, W} -> {N, C} spatial mean.
class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  std::vector<std::int64_t> in_shape_;
};

class Linear : public Layer {
 public:
  Linear(const std::string& name, int in_dim, int out_dim, std::uint64_t init_seed);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(std::vector<Parameter*>& out) override;

 private:
  int in_dim_, out_dim_;
  Parameter weight_, bias_;
  Tensor input_;
};

/// Bilinear x2 upsampling with half-pixel centers; backward scatters the
/// interpolation weights.
class Upsample2x : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  std::vector<std::int64_t> in_shape_;
};

/// Two 3x3 convolutions with batch norm and an (optionally projected)
/// residual connection.
class BasicBlock : public Layer {
 public:
  BasicBlock(const std::string& name, int in_ch, int out_ch, int stride, std::uint64_t init_seed);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(std::vector<Parameter*>& out) override;
  void set_update_stats(bool update) override;

 private:
  Conv2d conv1_;
  BatchNorm2d bn1_;
  ReLU relu1_;
  Conv2d conv2_;
  BatchNorm2d bn2_;
  std::unique_ptr<Conv2d> proj_;
  std::unique_ptr<BatchNorm2d> proj_bn_;
  Tensor sum_;
};

/// Encoder shape contract: input spatial dims divide by the stride product,
/// output channels equal feature_dim.
struct EncoderSpec {
  EncoderArch arch = EncoderArch::toy_cnn;
  std::int64_t input_h = 0;  // 0 = any size divisible by the stride product
  std::int64_t input_w = 0;
  int feature_dim = 64;
  std::vector<int> stage_strides = {2, 2, 1};

  std::int64_t stride_product() const;
  void validate() const;
};

struct HeadSpec {
  enum class Kind { projector, predictor };
  Kind kind = Kind::projector;
  std::vector<int> layer_dims;  // output dim of each layer, in order
};

struct DecoderSpec {
  DecoderStyle style = DecoderStyle::plain_upsample;
  int num_classes = 1;
  std::int64_t output_h = 0;  // 0 = any size the feature map upsamples to
  std::int64_t output_w = 0;
};

EncoderSpec encoder_spec_from_config(const ValidatedConfig& config);

std::unique_ptr<Sequential> build_encoder(const EncoderSpec& spec, std::uint64_t seed);
std::unique_ptr<Sequential> build_head(const HeadSpec& spec, int in_dim, std::uint64_t seed,
                                       const std::string& prefix);
std::unique_ptr<Sequential> build_decoder(const DecoderSpec& spec, int in_channels,
                                          std::int64_t stride_product, std::uint64_t seed);

/// Forward through the encoder with the shape contract enforced. Input is
/// {N, 1, H, W} (or {H, W}, promoted to a singleton batch).
Tensor encode(Sequential& encoder, const EncoderSpec& spec, const Tensor& patch, bool train);

/// Forward through a head; input {N, in_dim}, output {N, out_dim}.
Tensor project(Sequential& head, const Tensor& pooled, bool train);

/// theta_t <- m * theta_t + (1 - m) * theta_o, elementwise over the whole
/// parameter tree (running statistics included).
void ema_update(std::vector<Parameter*>& target, const std::vector<Parameter*>& online,
                double momentum);

std::uint64_t parameter_checksum(const std::vector<Parameter*>& params);

void zero_grads(std::vector<Parameter*>& params);

/// sigma(F_psi(f_theta(x))) in eval mode. Binary decoders (num_classes <= 2
/// collapse to one logit channel) return an {h, w} sigmoid map; multiclass
/// returns {C, h, w} per-pixel softmax.
Tensor segment_patch(Sequential& encoder, const EncoderSpec& enc_spec, Sequential& decoder,
                     const DecoderSpec& dec_spec, const Tensor& patch);

Tensor sigmoid(const Tensor& logits);
/// Per-pixel softmax over the channel axis of {N, C, H, W}.
Tensor softmax_channels(const Tensor& logits);

/// Parameter blob serialization (names, shapes, raw doubles).
void save_params(const std::string& path, const std::vector<Parameter*>& params);
void load_params(const std::string& path, std::vector<Parameter*>& params);

}  // namespace finescale::nets
