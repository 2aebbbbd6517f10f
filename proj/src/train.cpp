// Copyright (c) 2026 The finescale authors
// SPDX-License-Identifier: Apache-2.0

#include "finescale/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "finescale/objectives.hpp"
#include "finescale/optim.hpp"
#include "finescale/views.hpp"

namespace finescale::train {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr std::int64_t kChunkViews = 32;   // micro-batch for memory-bounded passes
constexpr std::int64_t kFinetuneBatch = 16;

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::ofstream open_append(const std::string& path) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
  return out;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path + "'");
  out << text;
  if (!out) throw Error(ErrorKind::io, "failed writing '" + path + "'");
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot read '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return json::parse(buf.str());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, path + ": " + e.what());
  }
}

json encoder_spec_to_json(const nets::EncoderSpec& spec) {
  return json{{"arch", encoder_name(spec.arch)},
              {"feature_dim", spec.feature_dim},
              {"stage_strides", spec.stage_strides}};
}

nets::EncoderSpec encoder_spec_from_json(const json& j) {
  nets::EncoderSpec spec;
  spec.arch = encoder_from_name(j.at("arch").get<std::string>());
  spec.feature_dim = j.at("feature_dim").get<int>();
  spec.stage_strides = j.at("stage_strides").get<std::vector<int>>();
  return spec;
}

// ---------------------------------------------------------------------------
// SSL model assembly

struct SslModel {
  nets::EncoderSpec spec;
  std::unique_ptr<nets::Sequential> encoder;
  std::unique_ptr<nets::Sequential> projector;
  std::unique_ptr<nets::Sequential> predictor;         // byol only
  std::unique_ptr<nets::Sequential> target_encoder;    // byol only
  std::unique_ptr<nets::Sequential> target_projector;  // byol only
  nets::GlobalAvgPool gap;
  nets::GlobalAvgPool target_gap;
  std::vector<nets::Parameter*> online_params;  // optimized
  std::vector<nets::Parameter*> ema_source;     // encoder + projector
  std::vector<nets::Parameter*> target_params;
  int embed_dim = 0;
};

SslModel build_ssl_model(const ValidatedConfig& config) {
  SslModel m;
  m.spec = nets::encoder_spec_from_config(config);
  m.embed_dim = config->embed_dim;
  m.encoder = nets::build_encoder(m.spec, config->seed);
  nets::HeadSpec proj_spec{nets::HeadSpec::Kind::projector, {m.spec.feature_dim, m.embed_dim}};
  m.projector = nets::build_head(proj_spec, m.spec.feature_dim, config->seed, "projector");
  m.encoder->collect(m.online_params);
  m.projector->collect(m.online_params);
  m.ema_source = m.online_params;
  if (config->ssl_method == SslMethod::byol) {
    nets::HeadSpec pred_spec{nets::HeadSpec::Kind::predictor, {m.spec.feature_dim, m.embed_dim}};
    m.predictor = nets::build_head(pred_spec, m.embed_dim, config->seed, "predictor");
    m.predictor->collect(m.online_params);
    m.target_encoder = nets::build_encoder(m.spec, config->seed);
    m.target_projector = nets::build_head(proj_spec, m.spec.feature_dim, config->seed, "projector");
    m.target_encoder->collect(m.target_params);
    m.target_projector->collect(m.target_params);
    m.target_encoder->set_update_stats(false);
    m.target_projector->set_update_stats(false);
  }
  return m;
}

std::vector<std::pair<std::int64_t, std::int64_t>> chunk_ranges(std::int64_t total,
                                                                std::int64_t chunk) {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (std::int64_t lo = 0; lo < total; lo += chunk) {
    out.emplace_back(lo, std::min(total, lo + chunk));
  }
  return out;
}

Tensor slice_views(const Tensor& views, std::int64_t lo, std::int64_t hi) {
  const std::int64_t e1 = views.dim(2), e2 = views.dim(3);
  Tensor chunk({hi - lo, 1, e1, e2});
  std::copy(views.data() + lo * e1 * e2, views.data() + hi * e1 * e2, chunk.data());
  return chunk;
}

/// Online forward of one view chunk; writes embedding rows [lo, hi) of Z.
void online_forward(SslModel& m, const Tensor& views, std::int64_t lo, std::int64_t hi,
                    bool update_stats, Eigen::MatrixXd& z) {
  m.encoder->set_update_stats(update_stats);
  Tensor feat = nets::encode(*m.encoder, m.spec, slice_views(views, lo, hi), true);
  Tensor pooled = m.gap.forward(feat, true);
  Tensor emb = m.projector->forward(pooled, true);
  if (m.predictor) emb = m.predictor->forward(emb, true);
  for (std::int64_t r = lo; r < hi; ++r) {
    for (int c = 0; c < m.embed_dim; ++c) z(r, c) = emb.at(r - lo, c);
  }
}

void online_backward(SslModel& m, const Eigen::MatrixXd& grad, std::int64_t lo, std::int64_t hi) {
  Tensor g({hi - lo, m.embed_dim});
  for (std::int64_t r = lo; r < hi; ++r) {
    for (int c = 0; c < m.embed_dim; ++c) g.at(r - lo, c) = grad(r, c);
  }
  Tensor cur = g;
  if (m.predictor) cur = m.predictor->backward(cur);
  cur = m.projector->backward(cur);
  cur = m.gap.backward(cur);
  m.encoder->backward(cur);
}

void target_forward(SslModel& m, const Tensor& views, std::int64_t lo, std::int64_t hi,
                    Eigen::MatrixXd& t) {
  Tensor feat = nets::encode(*m.target_encoder, m.spec, slice_views(views, lo, hi), true);
  Tensor pooled = m.target_gap.forward(feat, true);
  Tensor emb = m.target_projector->forward(pooled, true);
  for (std::int64_t r = lo; r < hi; ++r) {
    for (int c = 0; c < m.embed_dim; ++c) t(r, c) = emb.at(r - lo, c);
  }
}

// ---------------------------------------------------------------------------
// Pretrain checkpointing

void save_pretrain_checkpoint(const std::string& dir, SslModel& model,
                              const optim::Optimizer& opt, const ValidatedConfig& config,
                              std::int64_t base_l, std::int64_t patch_edge, int epoch_next,
                              std::int64_t batch_next, std::int64_t global_step) {
  fs::create_directories(dir);
  nets::save_params(dir + "/params.bin", model.online_params);
  opt.save_state(dir + "/optim.bin");
  json manifest{{"schema_version", 1},
                {"kind", "pretrain"},
                {"config", json::parse(config.get().to_json_string(0))},
                {"config_hash", config.hash()},
                {"encoder", encoder_spec_to_json(model.spec)},
                {"embed_dim", model.embed_dim},
                {"method", ssl_method_name(config->ssl_method)},
                {"base_l", base_l},
                {"patch_edge", patch_edge},
                {"epoch_next", epoch_next},
                {"batch_next", batch_next},
                {"global_step", global_step},
                {"online_checksum", nets::parameter_checksum(model.online_params)},
                {"target_checksum",
                 model.target_params.empty() ? 0 : nets::parameter_checksum(model.target_params)}};
  if (!model.target_params.empty()) {
    nets::save_params(dir + "/target_params.bin", model.target_params);
  }
  write_text_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Dice helpers

// The batch is pooled into a single map per class before the Dice ratio is
// formed ("batch dice").  With sparse foreground, per-patch ratios give every
// empty patch its own epsilon-dominated denominator, which rewards predicting
// all-background; pooling keeps one shared denominator across the batch so
// false negatives on rare foreground stay expensive.
double batch_dice_loss(const Tensor& logits, const std::vector<const LabelMap*>& targets,
                       bool multiclass, Tensor* grad_logits) {
  const std::int64_t b = logits.dim(0), outc = logits.dim(1);
  const std::int64_t h = logits.dim(2), w = logits.dim(3);
  if (grad_logits != nullptr) *grad_logits = Tensor::zeros_like(logits);

  if (!multiclass) {
    Tensor p({b * h, w});
    LabelMap pooled(b * h, w);
    for (std::int64_t s = 0; s < b; ++s) {
      const LabelMap& target = *targets[static_cast<std::size_t>(s)];
      for (std::int64_t i = 0; i < h * w; ++i) {
        const double x = logits[(s * outc) * h * w + i];
        p[s * h * w + i] =
            x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        pooled.values[static_cast<std::size_t>(s * h * w + i)] =
            target.values[static_cast<std::size_t>(i)];
      }
    }
    Tensor gp;
    const double loss = dice_loss(p, pooled, 1.0, grad_logits != nullptr ? &gp : nullptr);
    if (grad_logits != nullptr) {
      for (std::int64_t s = 0; s < b; ++s) {
        for (std::int64_t i = 0; i < h * w; ++i) {
          const double pi = p[s * h * w + i];
          (*grad_logits)[(s * outc) * h * w + i] = gp[s * h * w + i] * pi * (1.0 - pi);
        }
      }
    }
    return loss;
  }

  Tensor probs = nets::softmax_channels(logits);
  Tensor gprob;
  if (grad_logits != nullptr) gprob = Tensor::zeros_like(probs);
  double total = 0.0;
  for (std::int64_t k = 0; k < outc; ++k) {
    Tensor pk({b * h, w});
    LabelMap tk(b * h, w);
    for (std::int64_t s = 0; s < b; ++s) {
      const LabelMap& target = *targets[static_cast<std::size_t>(s)];
      for (std::int64_t i = 0; i < h * w; ++i) {
        pk[s * h * w + i] = probs[(s * outc + k) * h * w + i];
        tk.values[static_cast<std::size_t>(s * h * w + i)] =
            target.values[static_cast<std::size_t>(i)] == k ? 1 : 0;
      }
    }
    Tensor gk;
    const double loss = dice_loss(pk, tk, 1.0, grad_logits != nullptr ? &gk : nullptr);
    total += loss / static_cast<double>(outc);
    if (grad_logits != nullptr) {
      for (std::int64_t s = 0; s < b; ++s) {
        for (std::int64_t i = 0; i < h * w; ++i) {
          gprob[(s * outc + k) * h * w + i] = gk[s * h * w + i] / static_cast<double>(outc);
        }
      }
    }
  }
  if (grad_logits != nullptr) {
    // Softmax backward per pixel: dz_k = p_k * (g_k - sum_j g_j p_j).
    for (std::int64_t s = 0; s < b; ++s) {
      for (std::int64_t i = 0; i < h * w; ++i) {
        double dot = 0.0;
        for (std::int64_t k = 0; k < outc; ++k) {
          dot += gprob[(s * outc + k) * h * w + i] * probs[(s * outc + k) * h * w + i];
        }
        for (std::int64_t k = 0; k < outc; ++k) {
          (*grad_logits)[(s * outc + k) * h * w + i] =
              probs[(s * outc + k) * h * w + i] * (gprob[(s * outc + k) * h * w + i] - dot);
        }
      }
    }
  }
  return total;
}

int infer_num_classes(const std::vector<ImageRecord>& a, const std::vector<ImageRecord>& b) {
  std::uint8_t max_label = 0;
  for (const auto* group : {&a, &b}) {
    for (const ImageRecord& rec : *group) {
      if (rec.mask) max_label = std::max(max_label, rec.mask->max_label());
    }
  }
  return static_cast<int>(max_label) + 1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public helpers

std::vector<ImageRecord> select_labeled_subset(const std::vector<ImageRecord>& records,
                                               double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorKind::config, "label_fraction");
  if (records.empty()) throw Error(ErrorKind::empty_subset, "no records to select from");
  const std::int64_t n = static_cast<std::int64_t>(records.size());
  const std::int64_t k = static_cast<std::int64_t>(
      std::ceil(fraction * static_cast<double>(n) - 1e-9));
  if (k < 1) throw Error(ErrorKind::empty_subset, "selection would be empty");

  // Key on ids so the pick is invariant to input order.
  std::vector<std::pair<std::string, std::int64_t>> keyed;
  keyed.reserve(records.size());
  for (std::int64_t i = 0; i < n; ++i) keyed.emplace_back(records[static_cast<std::size_t>(i)].id, i);
  std::sort(keyed.begin(), keyed.end());
  RngStream rng(seed, "labeled_subset");
  rng.shuffle(keyed);

  std::vector<bool> chosen(static_cast<std::size_t>(n), false);
  for (std::int64_t i = 0; i < k; ++i) {
    chosen[static_cast<std::size_t>(keyed[static_cast<std::size_t>(i)].second)] = true;
  }
  std::vector<ImageRecord> subset;
  subset.reserve(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < n; ++i) {
    if (chosen[static_cast<std::size_t>(i)]) subset.push_back(records[static_cast<std::size_t>(i)]);
  }
  return subset;
}

double dice_loss(const Tensor& pred, const LabelMap& target, double epsilon, Tensor* grad) {
  if (pred.ndim() != 2 || pred.dim(0) != target.rows || pred.dim(1) != target.cols) {
    throw Error(ErrorKind::shape, "prediction and target shapes differ");
  }
  double inter = 0.0, psum = 0.0, tsum = 0.0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double t = target.values[static_cast<std::size_t>(i)] != 0 ? 1.0 : 0.0;
    inter += pred[i] * t;
    psum += pred[i];
    tsum += t;
  }
  const double denom = psum + tsum + epsilon;
  const double loss = 1.0 - (2.0 * inter + epsilon) / denom;
  if (grad != nullptr) {
    *grad = Tensor({pred.dim(0), pred.dim(1)});
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
      const double t = target.values[static_cast<std::size_t>(i)] != 0 ? 1.0 : 0.0;
      (*grad)[i] = -(2.0 * t * denom - (2.0 * inter + epsilon)) / (denom * denom);
    }
  }
  return loss;
}

std::int64_t stitch_stride(std::int64_t edge, double fraction) {
  const std::int64_t s = static_cast<std::int64_t>(std::floor(static_cast<double>(edge) * fraction));
  return std::clamp<std::int64_t>(s, 1, edge - 1);
}

// ---------------------------------------------------------------------------
// Pretraining

PretrainResult pretrain(const std::vector<ImageRecord>& records, const ValidatedConfig& config,
                        const PretrainOptions& opts) {
  if (records.empty()) throw Error(ErrorKind::empty_subset, "pretrain split is empty");
  if (config->ssl_method == SslMethod::none) throw Error(ErrorKind::config, "ssl_method");
  for (const ImageRecord& rec : records) rec.validate();

  SslModel model = build_ssl_model(config);
  const std::int64_t base_l = dataset_base_length(records);
  const views::ViewGeometry geometry =
      views::resolve_view_geometry(config, base_l, model.spec.stride_product());
  const std::int64_t edge = geometry.view_h;

  auto optimizer = optim::make_optimizer(config->optimizer, model.online_params, config);
  const objectives::SslHyperparams hp = objectives::hyperparams_from_config(config);

  int epoch_start = 0;
  std::int64_t batch_start = 0, global_step = 0;
  if (!opts.resume_from.empty()) {
    const json manifest = read_json_file(opts.resume_from + "/manifest.json");
    if (manifest.at("kind").get<std::string>() != "pretrain") {
      throw Error(ErrorKind::format, "not a pretrain checkpoint");
    }
    if (manifest.at("config_hash").get<std::uint64_t>() != config.hash()) {
      throw Error(ErrorKind::config, "checkpoint config differs from the current config");
    }
    nets::load_params(opts.resume_from + "/params.bin", model.online_params);
    if (!model.target_params.empty()) {
      nets::load_params(opts.resume_from + "/target_params.bin", model.target_params);
    }
    optimizer->load_state(opts.resume_from + "/optim.bin");
    epoch_start = manifest.at("epoch_next").get<int>();
    batch_start = manifest.at("batch_next").get<std::int64_t>();
    global_step = manifest.at("global_step").get<std::int64_t>();
  }

  fs::create_directories(opts.out_dir);
  std::ofstream metrics = open_append(opts.out_dir + "/metrics.jsonl");
  std::unique_ptr<std::ofstream> view_log;
  if (!opts.view_log_path.empty()) {
    view_log = std::make_unique<std::ofstream>(opts.view_log_path, std::ios::app);
    if (!*view_log) throw Error(ErrorKind::io, "cannot write '" + opts.view_log_path + "'");
  }

  const std::int64_t n = static_cast<std::int64_t>(records.size());
  const std::int64_t slots = n * config->views_per_image;
  const std::int64_t batch = std::min<std::int64_t>(config->batch_size, slots);
  const std::int64_t num_batches = (slots + batch - 1) / batch;

  PretrainResult result;
  double epoch_seconds_total = 0.0;
  int epochs_timed = 0;
  int epoch_final = epoch_start;
  std::int64_t batch_final = batch_start;
  bool stopped_early = false;

  for (int epoch = epoch_start; epoch < config->epochs && !stopped_early; ++epoch) {
    const double lr =
        optim::cosine_warmup_lr(config->base_lr, epoch, config->epochs, config->warmup_epochs);
    std::vector<std::int64_t> order(static_cast<std::size_t>(slots));
    for (std::int64_t i = 0; i < slots; ++i) order[static_cast<std::size_t>(i)] = i % n;
    RngStream order_rng(config->seed, "pretrain/order/epoch" + std::to_string(epoch));
    order_rng.shuffle(order);

    const double epoch_t0 = now_ms();
    bool ran_any = false;
    for (std::int64_t b = (epoch == epoch_start ? batch_start : 0); b < num_batches; ++b) {
      const std::int64_t lo = b * batch, hi = std::min(slots, lo + batch);
      const std::int64_t pairs = hi - lo;
      if (config->ssl_method != SslMethod::byol && pairs < 2) continue;

      Tensor view_batch({2 * pairs, 1, edge, edge});
      for (std::int64_t j = 0; j < pairs; ++j) {
        const std::int64_t slot = lo + j;
        const ImageRecord& rec = records[static_cast<std::size_t>(order[static_cast<std::size_t>(slot)])];
        RngStream pair_rng(config->seed, "views/e" + std::to_string(epoch) + "/s" +
                                            std::to_string(slot));
        const views::ViewPair pair = views::make_view_pair(rec, config, geometry, pair_rng);
        if (view_log) views::append_view_log(*view_log, views::to_record(pair));
        std::copy(pair.view1.data(), pair.view1.data() + edge * edge,
                  view_batch.data() + (2 * j) * edge * edge);
        std::copy(pair.view2.data(), pair.view2.data() + edge * edge,
                  view_batch.data() + (2 * j + 1) * edge * edge);
      }

      const auto chunks = chunk_ranges(2 * pairs, kChunkViews);
      Eigen::MatrixXd z(2 * pairs, model.embed_dim);
      for (const auto& [clo, chi] : chunks) online_forward(model, view_batch, clo, chi, false, z);
      Eigen::MatrixXd targets;
      if (config->ssl_method == SslMethod::byol) {
        targets.resize(2 * pairs, model.embed_dim);
        for (const auto& [clo, chi] : chunks) target_forward(model, view_batch, clo, chi, targets);
      }

      Eigen::MatrixXd grad;
      const objectives::LossReport report = objectives::ssl_batch_loss(
          config->ssl_method, z, targets.size() > 0 ? &targets : nullptr, hp, &grad);
      if (!std::isfinite(report.total)) {
        json line{{"event", "abort"}, {"epoch", epoch}, {"step", global_step}, {"loss", "non-finite"}};
        metrics << line.dump() << '\n' << std::flush;
        throw Error(ErrorKind::non_finite_loss, "step " + std::to_string(global_step));
      }

      nets::zero_grads(model.online_params);
      const double step_t0 = now_ms();
      for (const auto& [clo, chi] : chunks) {
        online_forward(model, view_batch, clo, chi, true, z);
        online_backward(model, grad, clo, chi);
      }
      optimizer->step(lr);
      if (config->ssl_method == SslMethod::byol) {
        nets::ema_update(model.target_params, model.ema_source, config->byol_momentum);
      }

      ++global_step;
      ++result.steps_run;
      ran_any = true;
      result.loss_trace.push_back(report.total);
      json comps = json::object();
      for (const auto& [k, v] : report.components) comps[k] = v;
      json line{{"event", "step"},  {"epoch", epoch},          {"step", global_step},
                {"loss", report.total}, {"components", comps}, {"lr", lr},
                {"wall_ms", now_ms() - step_t0}};
      metrics << line.dump() << '\n';

      epoch_final = epoch;
      batch_final = b + 1;
      if (opts.max_steps > 0 && result.steps_run >= opts.max_steps) {
        stopped_early = true;
        break;
      }
    }
    if (!stopped_early) {
      if (epoch == epoch_start && !ran_any && num_batches > 0 && batch_start == 0) {
        throw Error(ErrorKind::degenerate_batch, "dataset too small for any training batch");
      }
      epoch_seconds_total += (now_ms() - epoch_t0) / 1000.0;
      ++epochs_timed;
      epoch_final = epoch;
      batch_final = num_batches;
      if (config->checkpoint_every > 0 && (epoch + 1) % config->checkpoint_every == 0 &&
          epoch + 1 < config->epochs) {
        save_pretrain_checkpoint(opts.out_dir + "/checkpoint", model, *optimizer, config, base_l,
                                 edge, epoch + 1, 0, global_step);
      }
    }
  }

  int epoch_next = epoch_final;
  std::int64_t batch_next = batch_final;
  if (batch_next >= num_batches) {
    ++epoch_next;
    batch_next = 0;
  }
  result.checkpoint_dir = opts.out_dir + "/checkpoint";
  save_pretrain_checkpoint(result.checkpoint_dir, model, *optimizer, config, base_l, edge,
                           epoch_next, batch_next, global_step);
  result.seconds_per_epoch = epochs_timed > 0 ? epoch_seconds_total / epochs_timed : 0.0;
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint loading

LoadedEncoder load_pretrained_encoder(const std::string& ckpt_dir) {
  const json manifest = read_json_file(ckpt_dir + "/manifest.json");
  if (manifest.at("kind").get<std::string>() != "pretrain") {
    throw Error(ErrorKind::format, "not a pretrain checkpoint: '" + ckpt_dir + "'");
  }
  LoadedEncoder out;
  out.spec = encoder_spec_from_json(manifest.at("encoder"));
  out.patch_edge = manifest.at("patch_edge").get<std::int64_t>();
  out.base_l = manifest.at("base_l").get<std::int64_t>();
  out.config_hash = manifest.at("config_hash").get<std::uint64_t>();
  out.target_checksum = manifest.at("target_checksum").get<std::uint64_t>();

  const int embed_dim = manifest.at("embed_dim").get<int>();
  const SslMethod method = ssl_method_from_name(manifest.at("method").get<std::string>());
  out.encoder = nets::build_encoder(out.spec, 0);
  nets::HeadSpec proj_spec{nets::HeadSpec::Kind::projector, {out.spec.feature_dim, embed_dim}};
  auto projector = nets::build_head(proj_spec, out.spec.feature_dim, 0, "projector");
  std::unique_ptr<nets::Sequential> predictor;
  std::vector<nets::Parameter*> params;
  out.encoder->collect(params);
  projector->collect(params);
  if (method == SslMethod::byol) {
    nets::HeadSpec pred_spec{nets::HeadSpec::Kind::predictor, {out.spec.feature_dim, embed_dim}};
    predictor = nets::build_head(pred_spec, embed_dim, 0, "predictor");
    predictor->collect(params);
  }
  nets::load_params(ckpt_dir + "/params.bin", params);
  return out;  // projection heads are pretraining-only and dropped here
}

// ---------------------------------------------------------------------------
// Fine-tuning

FinetuneResult finetune_segmentation(const std::vector<ImageRecord>& train_split,
                                     const std::vector<ImageRecord>& val_split,
                                     const ValidatedConfig& config,
                                     const std::string& encoder_ckpt, const FinetuneOptions& opts) {
  const std::vector<ImageRecord> subset =
      select_labeled_subset(train_split, config->label_fraction, config->seed);
  for (const ImageRecord& rec : subset) {
    if (!rec.mask) throw Error(ErrorKind::missing_mask, "record '" + rec.id + "'");
  }

  // Encoder: pretrained weights, or a fresh draw for the supervised path.
  nets::EncoderSpec spec;
  std::unique_ptr<nets::Sequential> encoder;
  std::int64_t patch_edge = 0;
  std::uint64_t pretrain_hash = 0;
  const bool from_checkpoint = config->ssl_method != SslMethod::none && !encoder_ckpt.empty();
  if (from_checkpoint) {
    LoadedEncoder loaded = load_pretrained_encoder(encoder_ckpt);
    if (loaded.spec.arch != config->encoder) {
      throw Error(ErrorKind::config, "encoder arch differs from the checkpoint");
    }
    spec = loaded.spec;
    encoder = std::move(loaded.encoder);
    patch_edge = loaded.patch_edge;
    pretrain_hash = loaded.config_hash;
  } else {
    spec = nets::encoder_spec_from_config(config);
    encoder = nets::build_encoder(spec, config->seed);
    std::vector<ImageRecord> all = subset;
    all.insert(all.end(), val_split.begin(), val_split.end());
    patch_edge =
        views::resolve_view_geometry(config, dataset_base_length(all), spec.stride_product())
            .view_h;
  }

  const int num_classes = infer_num_classes(subset, val_split);
  const bool multiclass = num_classes > 2;
  nets::DecoderSpec dec_spec{config->decoder, std::max(num_classes, 2), 0, 0};
  auto decoder = nets::build_decoder(dec_spec, spec.feature_dim, spec.stride_product(),
                                     config->seed);

  std::vector<nets::Parameter*> trained;
  decoder->collect(trained);
  if (!config->freeze_encoder) encoder->collect(trained);
  optim::Adam optimizer(trained, 0.0);

  std::vector<nets::Parameter*> all_params;
  encoder->collect(all_params);
  decoder->collect(all_params);

  fs::create_directories(opts.out_dir);
  std::ofstream metrics = open_append(opts.out_dir + "/metrics.jsonl");

  FinetuneResult result;
  result.best_val_dice = -1.0;
  std::vector<Tensor> best_values;
  auto snapshot_best = [&]() {
    best_values.clear();
    best_values.reserve(all_params.size());
    for (const nets::Parameter* p : all_params) best_values.push_back(p->value);
  };

  auto run_validation = [&](int epoch) {
    if (val_split.empty()) return;
    evalkit::PatchPredictor predictor = [&](const Tensor& patch) {
      return nets::segment_patch(*encoder, spec, *decoder, dec_spec, patch);
    };
    const std::int64_t stride = stitch_stride(patch_edge, config->stride_fraction);
    const evalkit::EvalSummary summary =
        evalkit::evaluate_split(val_split, predictor, patch_edge, patch_edge, stride,
                                config->threshold, config->metric_cap, evalkit::EvalRow{});
    json line{{"event", "val"}, {"epoch", epoch}, {"dice", summary.mean_dice},
              {"hd", summary.mean_hd}};
    metrics << line.dump() << '\n' << std::flush;
    if (summary.mean_dice > result.best_val_dice) {
      result.best_val_dice = summary.mean_dice;
      result.best_epoch = epoch;
      snapshot_best();
    }
  };

  const bool full_view = config->sampling == SamplingStrategy::full_view;
  const int patches_per_image = full_view ? 1 : config->patches_per_image;

  for (int epoch = 0; epoch < config->finetune_epochs; ++epoch) {
    std::vector<std::int64_t> order(subset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
    RngStream order_rng(config->seed, "finetune/order/epoch" + std::to_string(epoch));
    order_rng.shuffle(order);

    std::vector<LabeledPatch> patches;
    for (std::size_t slot = 0; slot < order.size(); ++slot) {
      const ImageRecord& rec = subset[static_cast<std::size_t>(order[slot])];
      RngStream patch_rng(config->seed, "finetune/patch/e" + std::to_string(epoch) + "/s" +
                                           std::to_string(slot));
      for (int k = 0; k < patches_per_image; ++k) {
        Window window;
        if (full_view) {
          window = Window{rec.height() / 2, rec.width() / 2, patch_edge, patch_edge};
        } else {
          window = views::sample_window_random(rec.height(), rec.width(), patch_edge, patch_edge,
                                               patch_rng);
        }
        patches.push_back(LabeledPatch{views::crop(rec.pixels, window),
                                       views::crop(*rec.mask, window), window, rec.id});
      }
    }

    double epoch_loss = 0.0;
    std::int64_t batches = 0;
    for (std::size_t lo = 0; lo < patches.size(); lo += kFinetuneBatch) {
      const std::size_t hi = std::min(patches.size(), lo + static_cast<std::size_t>(kFinetuneBatch));
      const std::int64_t b = static_cast<std::int64_t>(hi - lo);
      Tensor batch({b, 1, patch_edge, patch_edge});
      std::vector<const LabelMap*> targets;
      for (std::size_t i = lo; i < hi; ++i) {
        std::copy(patches[i].pixels.data(), patches[i].pixels.data() + patch_edge * patch_edge,
                  batch.data() + static_cast<std::int64_t>(i - lo) * patch_edge * patch_edge);
        targets.push_back(&patches[i].target);
      }

      const bool encoder_train = !config->freeze_encoder;
      Tensor features = nets::encode(*encoder, spec, batch, encoder_train);
      Tensor logits = decoder->forward(features, true);
      Tensor grad_logits;
      const double loss = batch_dice_loss(logits, targets, multiclass, &grad_logits);
      if (!std::isfinite(loss)) {
        json line{{"event", "abort"}, {"epoch", epoch}, {"loss", "non-finite"}};
        metrics << line.dump() << '\n' << std::flush;
        throw Error(ErrorKind::non_finite_loss, "fine-tune epoch " + std::to_string(epoch));
      }
      nets::zero_grads(all_params);
      Tensor grad_features = decoder->backward(grad_logits);
      if (!config->freeze_encoder) encoder->backward(grad_features);
      optimizer.step(config->finetune_lr);

      epoch_loss += loss;
      ++batches;
    }
    epoch_loss /= static_cast<double>(std::max<std::int64_t>(batches, 1));
    result.loss_trace.push_back(epoch_loss);
    json line{{"event", "epoch"}, {"epoch", epoch}, {"loss", epoch_loss}};
    metrics << line.dump() << '\n';

    if ((epoch + 1) % config->val_every == 0 || epoch + 1 == config->finetune_epochs) {
      run_validation(epoch);
    }
  }

  if (best_values.empty()) {
    snapshot_best();  // no validation ran; keep the final parameters
    result.best_epoch = config->finetune_epochs - 1;
  }
  for (std::size_t i = 0; i < all_params.size(); ++i) all_params[i]->value = best_values[i];

  result.checkpoint_dir = opts.out_dir + "/checkpoint";
  fs::create_directories(result.checkpoint_dir);
  nets::save_params(result.checkpoint_dir + "/params.bin", all_params);
  json manifest{{"schema_version", 1},
                {"kind", "segmentation"},
                {"config", json::parse(config.get().to_json_string(0))},
                {"config_hash", config.hash()},
                {"encoder", encoder_spec_to_json(spec)},
                {"decoder", decoder_name(config->decoder)},
                {"num_classes", num_classes},
                {"patch_edge", patch_edge},
                {"best_epoch", result.best_epoch},
                {"best_val_dice", result.best_val_dice},
                {"pretrain_checkpoint", from_checkpoint ? encoder_ckpt : ""},
                {"pretrain_hash", pretrain_hash}};
  write_text_file(result.checkpoint_dir + "/manifest.json", manifest.dump(2) + "\n");
  return result;
}

LoadedSegmenter load_segmenter(const std::string& ckpt_dir) {
  const json manifest = read_json_file(ckpt_dir + "/manifest.json");
  if (manifest.at("kind").get<std::string>() != "segmentation") {
    throw Error(ErrorKind::format, "not a segmentation checkpoint: '" + ckpt_dir + "'");
  }
  LoadedSegmenter out;
  out.enc_spec = encoder_spec_from_json(manifest.at("encoder"));
  out.num_classes = manifest.at("num_classes").get<int>();
  out.patch_edge = manifest.at("patch_edge").get<std::int64_t>();
  out.dec_spec = nets::DecoderSpec{decoder_from_name(manifest.at("decoder").get<std::string>()),
                                   std::max(out.num_classes, 2), 0, 0};
  out.encoder = nets::build_encoder(out.enc_spec, 0);
  out.decoder =
      nets::build_decoder(out.dec_spec, out.enc_spec.feature_dim, out.enc_spec.stride_product(), 0);
  std::vector<nets::Parameter*> params;
  out.encoder->collect(params);
  out.decoder->collect(params);
  nets::load_params(ckpt_dir + "/params.bin", params);
  return out;
}

evalkit::PatchPredictor make_patch_predictor(LoadedSegmenter& model) {
  return [&model](const Tensor& patch) {
    return nets::segment_patch(*model.encoder, model.enc_spec, *model.decoder, model.dec_spec,
                               patch);
  };
}

}  // namespace finescale::train
