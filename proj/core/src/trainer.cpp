#include "mse2d/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mse2d/errors.hpp"
#include "mse2d/ops.hpp"

namespace mse2d {

void TrainConfig::validate(const EncoderConfig& encoder) const {
  const std::size_t hidden = encoder.hidden_dim;
  if (dims.empty()) throw ConfigError("train config: dimension set is empty");
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] < 1 || dims[i] >= hidden) {
      throw ConfigError("train config: dim " + std::to_string(dims[i]) + " outside [1, " + std::to_string(hidden - 1) +
                        "]");
    }
    if (i > 0 && dims[i] <= dims[i - 1]) throw ConfigError("train config: dims must be strictly increasing");
  }
  const LossWeights& w = lambda;
  for (double v : {w.last_full, w.shallow_full, w.last_prefix, w.shallow_prefix, w.align}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("train config: loss weights must be finite and >= 0");
  }
  const LossWeights e = effective_weights();
  if (e.last_full + e.shallow_full + e.last_prefix + e.shallow_prefix + e.align <= 0.0) {
    throw ConfigError("train config: every loss weight is zero");
  }
  if ((e.shallow_full > 0 || e.shallow_prefix > 0 || e.align > 0) && encoder.num_layers < 2) {
    throw ConfigError("train config: shallow-layer terms need at least 2 layers");
  }
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train config: weight decay must be >= 0");
  if (!(tau > 0.0)) throw ConfigError("train config: tau must be positive");
  if (epochs == 0) throw ConfigError("train config: epochs must be positive");
  if (batch_size < 2) throw ConfigError("train config: batch size must be at least 2");
}

TrainConfig TrainConfig::resolved(const EncoderConfig& encoder) const {
  TrainConfig copy = *this;
  if (copy.dims.empty()) copy.dims = default_dim_set(encoder.hidden_dim).dims;
  return copy;
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = lambda;
  if (plain) return LossWeights{w.last_full, 0.0, 0.0, 0.0, 0.0};
  if (mrl_only) {
    w.shallow_full = 0.0;
    w.shallow_prefix = 0.0;
    w.align = 0.0;
  }
  if (disable_align) w.align = 0.0;
  if (disable_last_layer) {
    w.last_full = 0.0;
    w.last_prefix = 0.0;
  }
  return w;
}

DimSet default_dim_set(std::size_t hidden_dim) {
  DimSet out;
  // No power of two >= 8 lies strictly below D.
  if (hidden_dim <= 8) {
    if (hidden_dim < 2) throw ConfigError("default dims: hidden_dim must be at least 2");
    out.dims = {hidden_dim / 2};
    out.warning = "hidden_dim " + std::to_string(hidden_dim) + " <= 8; using {" + std::to_string(hidden_dim / 2) + "}";
    return out;
  }
  for (std::size_t d = 8; d < hidden_dim; d *= 2) out.dims.push_back(d);
  return out;
}

std::size_t sample_layer(Rng& rng, std::size_t num_layers) {
  if (num_layers < 2) throw ConfigError("sample_layer: need at least 2 layers, got " + std::to_string(num_layers));
  std::uniform_int_distribution<std::size_t> dist(1, num_layers - 1);
  return dist(rng);
}

std::size_t sample_dim(Rng& rng, std::span<const std::size_t> dims) {
  if (dims.empty()) throw ConfigError("sample_dim: empty dimension set");
  std::uniform_int_distribution<std::size_t> dist(0, dims.size() - 1);
  return dims[dist(rng)];
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> iota_from(std::size_t start, std::size_t count) {
  std::vector<std::size_t> v(count);
  std::iota(v.begin(), v.end(), start);
  return v;
}

// Mean of f(d) over the given dims; a single dim is returned unscaled.
template <typename Fn>
Tensor mean_over_dims(std::span<const std::size_t> dims, Fn&& fn) {
  Tensor total = fn(dims[0]);
  for (std::size_t i = 1; i < dims.size(); ++i) total = ops::add(total, fn(dims[i]));
  if (dims.size() == 1) return total;
  return ops::scale(total, 1.0 / static_cast<double>(dims.size()));
}

std::string describe(const TrainStepReport& r) {
  std::ostringstream os;
  os << "step " << r.step << " diverged: joint=" << r.joint << " L_N_D=" << r.components.last_full
     << " L_n_D=" << r.components.shallow_full << " L_N_d=" << r.components.last_prefix
     << " L_n_d=" << r.components.shallow_prefix << " L_align=" << r.components.align << " (n=" << r.layer;
  if (r.dim) os << ", d=" << *r.dim;
  os << ")";
  return os.str();
}

}  // namespace

TrainBatch make_batch(std::span<const TextPair> pairs, const Tokenizer& tokenizer) {
  TrainBatch batch;
  const std::size_t b = pairs.size();
  for (const TextPair& p : pairs) batch.sequences.push_back(tokenizer.encode(p.anchor));
  for (const TextPair& p : pairs) batch.sequences.push_back(tokenizer.encode(p.positive));
  batch.info.kind = SupervisionKind::in_batch_positives;
  batch.info.anchors = iota_from(0, b);
  batch.info.positives = iota_from(b, b);
  return batch;
}

TrainBatch make_batch(std::span<const TextTriplet> triplets, const Tokenizer& tokenizer) {
  TrainBatch batch;
  const std::size_t b = triplets.size();
  for (const TextTriplet& t : triplets) batch.sequences.push_back(tokenizer.encode(t.anchor));
  for (const TextTriplet& t : triplets) batch.sequences.push_back(tokenizer.encode(t.positive));
  for (const TextTriplet& t : triplets) batch.sequences.push_back(tokenizer.encode(t.negative));
  batch.info.kind = SupervisionKind::triplet;
  batch.info.anchors = iota_from(0, b);
  batch.info.positives = iota_from(b, b);
  batch.info.negatives = iota_from(2 * b, b);
  return batch;
}

TrainBatch make_batch(std::span<const ScoredPair> pairs, const Tokenizer& tokenizer, double score_scale) {
  if (!(score_scale > 0.0)) throw InputError("make_batch: score scale must be positive");
  TrainBatch batch;
  const std::size_t b = pairs.size();
  for (const ScoredPair& p : pairs) batch.sequences.push_back(tokenizer.encode(p.text_a));
  for (const ScoredPair& p : pairs) batch.sequences.push_back(tokenizer.encode(p.text_b));
  batch.info.kind = SupervisionKind::pair_score;
  batch.info.anchors = iota_from(0, b);
  batch.info.positives = iota_from(b, b);
  for (const ScoredPair& p : pairs) batch.info.scores.push_back(p.score / score_scale);
  return batch;
}

StepLoss compute_step_loss(const EncoderModel& model, const TrainBatch& batch, const TrainConfig& config,
                           std::size_t layer, std::span<const std::size_t> dims) {
  const LossWeights w = config.effective_weights();
  const std::size_t num_layers = model.num_layers();
  const bool needs_shallow = w.shallow_full > 0 || w.shallow_prefix > 0 || w.align > 0;
  const bool needs_dims = w.last_prefix > 0 || w.shallow_prefix > 0 || w.align > 0;
  if (needs_shallow && (layer < 1 || layer >= num_layers)) {
    throw InputError("step loss: shallow layer " + std::to_string(layer) + " outside [1, " +
                     std::to_string(num_layers - 1) + "]");
  }
  if (needs_dims && dims.empty()) throw InputError("step loss: no prefix dimension given");

  const std::vector<Tensor> states = forward_layers(model, pad_batch(batch.sequences, model.config()), num_layers);
  const Tensor& last = states[num_layers - 1];
  const Tensor shallow = needs_shallow ? states[layer - 1] : Tensor();
  const double tau = config.tau;

  StepLoss out;
  if (w.last_full > 0) out.last_full = base_loss(last, batch.info, tau);
  if (w.shallow_full > 0) out.shallow_full = base_loss(shallow, batch.info, tau);
  if (w.last_prefix > 0) {
    out.last_prefix = mean_over_dims(dims, [&](std::size_t d) { return base_loss(ops::slice_prefix(last, d), batch.info, tau); });
  }
  if (w.shallow_prefix > 0) {
    out.shallow_prefix =
        mean_over_dims(dims, [&](std::size_t d) { return base_loss(ops::slice_prefix(shallow, d), batch.info, tau); });
  }
  if (w.align > 0) {
    Tensor full_term = kl_alignment_loss(shallow, last, tau);
    Tensor prefix_term = mean_over_dims(dims, [&](std::size_t d) {
      return kl_alignment_loss(ops::slice_prefix(shallow, d), ops::slice_prefix(last, d), tau);
    });
    out.align = ops::add(full_term, prefix_term);
  }

  Tensor joint;
  auto accumulate = [&](const Tensor& term, double weight, double& component) {
    if (!term.defined()) return;
    component = term.item();
    Tensor weighted = ops::scale(term, weight);
    joint = joint.defined() ? ops::add(joint, weighted) : weighted;
  };
  accumulate(out.last_full, w.last_full, out.components.last_full);
  accumulate(out.shallow_full, w.shallow_full, out.components.shallow_full);
  accumulate(out.last_prefix, w.last_prefix, out.components.last_prefix);
  accumulate(out.shallow_prefix, w.shallow_prefix, out.components.shallow_prefix);
  accumulate(out.align, w.align, out.components.align);
  out.joint = joint;
  return out;
}

Trainer::Trainer(EncoderModel& model, TrainConfig config)
    : model_(model),
      config_(config.resolved(model.config())),
      weights_(config_.effective_weights()),
      optimizer_(model.parameters(), AdamWOptions{config_.learning_rate, 0.9, 0.999, 1e-8, config_.weight_decay}),
      sampling_rng_(make_stream(config_.seed, "sampling")) {
  config_.validate(model.config());
}

TrainStepReport Trainer::step(const TrainBatch& batch, std::size_t epoch) {
  TrainStepReport report;
  report.step = step_;
  report.epoch = epoch;
  const bool needs_shallow = weights_.shallow_full > 0 || weights_.shallow_prefix > 0 || weights_.align > 0;
  const bool needs_dims = weights_.last_prefix > 0 || weights_.shallow_prefix > 0 || weights_.align > 0;
  if (needs_shallow) report.layer = sample_layer(sampling_rng_, model_.num_layers());
  std::vector<std::size_t> dims;
  if (needs_dims) {
    if (config_.dim_mode == DimMode::sample_one) {
      dims.push_back(sample_dim(sampling_rng_, config_.dims));
      report.dim = dims.front();
    } else {
      dims = config_.dims;
    }
  }

  Tape tape;
  TapeScope scope(tape);
  StepLoss loss = compute_step_loss(model_, batch, config_, report.layer, dims);
  report.components = loss.components;
  report.joint = loss.joint.item();
  if (!std::isfinite(report.joint)) throw TrainingDiverged(describe(report), report);

  optimizer_.zero_grad();
  tape.backward(loss.joint);
  optimizer_.step();
  ++step_;
  return report;
}

// ---------------------------------------------------------------------------

namespace {

template <typename Example, typename MakeBatch>
std::vector<TrainStepReport> train_loop(EncoderModel& model, std::span<const Example> dataset,
                                        const TrainConfig& config, const TrainCallbacks& callbacks,
                                        MakeBatch&& make) {
  if (dataset.empty()) throw InputError("train: empty dataset");
  Trainer trainer(model, config);
  const TrainConfig& cfg = trainer.config();
  const Tokenizer tokenizer(model.config());
  Rng data_rng = make_stream(cfg.seed, "data");
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<TrainStepReport> reports;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), data_rng);
    for (std::size_t start = 0; start + 2 <= order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Example> chunk;
      for (std::size_t i = start; i < end; ++i) chunk.push_back(dataset[order[i]]);
      TrainStepReport report = trainer.step(make(std::span<const Example>(chunk), tokenizer), epoch);
      if (callbacks.on_step) callbacks.on_step(report);
      reports.push_back(report);
      if (callbacks.on_checkpoint && cfg.checkpoint_every > 0 && trainer.steps_taken() % cfg.checkpoint_every == 0) {
        callbacks.on_checkpoint(model, trainer.steps_taken());
      }
    }
  }
  if (reports.empty()) throw InputError("train: dataset too small for a batch of 2 examples");
  if (callbacks.on_checkpoint) callbacks.on_checkpoint(model, trainer.steps_taken());
  return reports;
}

}  // namespace

std::vector<TrainStepReport> train(EncoderModel& model, std::span<const TextPair> dataset, const TrainConfig& config,
                                   const TrainCallbacks& callbacks) {
  return train_loop(model, dataset, config, callbacks,
                    [](std::span<const TextPair> chunk, const Tokenizer& tok) { return make_batch(chunk, tok); });
}

std::vector<TrainStepReport> train(EncoderModel& model, std::span<const TextTriplet> dataset,
                                   const TrainConfig& config, const TrainCallbacks& callbacks) {
  return train_loop(model, dataset, config, callbacks,
                    [](std::span<const TextTriplet> chunk, const Tokenizer& tok) { return make_batch(chunk, tok); });
}

std::vector<TrainStepReport> train(EncoderModel& model, std::span<const ScoredPair> dataset, const TrainConfig& config,
                                   const TrainCallbacks& callbacks, double score_scale) {
  return train_loop(model, dataset, config, callbacks, [score_scale](std::span<const ScoredPair> chunk, const Tokenizer& tok) {
    return make_batch(chunk, tok, score_scale);
  });
}

}  // namespace mse2d
