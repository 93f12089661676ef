#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mse2d/data.hpp"
#include "mse2d/encoder.hpp"
#include "mse2d/objectives.hpp"
#include "mse2d/optimizer.hpp"
#include "mse2d/rng.hpp"

namespace mse2d {

inline constexpr double kFineTuneLearningRate = 5e-5;
inline constexpr double kScratchLearningRate = 1e-3;

enum class DimMode { sample_one, full_sweep };

// Weights of the five objectives in the joint loss.
struct LossWeights {
  double last_full = 1.0;       // L_N_D
  double shallow_full = 1.0;    // L_n_D
  double last_prefix = 1.0;     // L_N_d
  double shallow_prefix = 1.0;  // L_n_d
  double align = 1.0;           // L_align
  bool operator==(const LossWeights&) const = default;
};

struct TrainConfig {
  std::vector<std::size_t> dims;  // empty: default_dim_set(hidden_dim)
  LossWeights lambda;
  DimMode dim_mode = DimMode::sample_one;
  bool disable_align = false;
  bool disable_last_layer = false;
  bool mrl_only = false;
  bool plain = false;
  double learning_rate = kScratchLearningRate;
  double weight_decay = 0.01;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double tau = kDefaultTau;
  std::uint64_t seed = kDefaultSeed;
  std::size_t checkpoint_every = 0;  // 0: only at the end

  // Throws ConfigError. Requires resolved dims (see resolved()).
  void validate(const EncoderConfig& encoder) const;
  // Copy with dims materialized for the given encoder.
  TrainConfig resolved(const EncoderConfig& encoder) const;
  // Lambda after the ablation flags have zeroed their terms.
  LossWeights effective_weights() const;
};

struct DimSet {
  std::vector<std::size_t> dims;
  std::optional<std::string> warning;
};

// {8, 16, 32, ...} doubling while below D; D <= 8 falls back to {D / 2}.
DimSet default_dim_set(std::size_t hidden_dim);

// Uniform on [1, N - 1].
std::size_t sample_layer(Rng& rng, std::size_t num_layers);
// Uniform over dims.
std::size_t sample_dim(Rng& rng, std::span<const std::size_t> dims);

struct LossComponents {
  double last_full = 0.0;
  double shallow_full = 0.0;
  double last_prefix = 0.0;
  double shallow_prefix = 0.0;
  double align = 0.0;
};

struct TrainStepReport {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t layer = 0;           // sampled n; 0 when no n-indexed term is active
  std::optional<std::size_t> dim;  // sampled d; nullopt under full_sweep or when unused
  LossComponents components;
  double joint = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& message, TrainStepReport report)
      : std::runtime_error(message), report_(report) {}
  const TrainStepReport& report() const { return report_; }

 private:
  TrainStepReport report_;
};

// Sequences plus row-index supervision for one optimizer step.
struct TrainBatch {
  std::vector<TokenSequence> sequences;
  SupervisionInfo info;
};

// Rows [0, B) anchors, [B, 2B) positives (and [2B, 3B) negatives for triplets).
TrainBatch make_batch(std::span<const TextPair> pairs, const Tokenizer& tokenizer);
TrainBatch make_batch(std::span<const TextTriplet> triplets, const Tokenizer& tokenizer);
// Gold scores rescaled by `score_scale` into [0, 1].
TrainBatch make_batch(std::span<const ScoredPair> pairs, const Tokenizer& tokenizer, double score_scale = 1.0);

// The joint loss of one step, still attached to the active tape.
struct StepLoss {
  Tensor joint;
  Tensor last_full, shallow_full, last_prefix, shallow_prefix, align;  // undefined when not constructed
  LossComponents components;
};

// Builds the terms with non-zero effective weight for a given (n, d) choice.
// `dims` holds the single sampled d (sample_one) or the whole set
// (full_sweep). Terms with zero weight are never constructed.
StepLoss compute_step_loss(const EncoderModel& model, const TrainBatch& batch, const TrainConfig& config,
                           std::size_t layer, std::span<const std::size_t> dims);

// One 2DMSE optimizer step: forward, sample, loss, backward, update.
class Trainer {
 public:
  Trainer(EncoderModel& model, TrainConfig config);

  TrainStepReport step(const TrainBatch& batch, std::size_t epoch = 0);

  const TrainConfig& config() const { return config_; }
  std::size_t steps_taken() const { return step_; }

 private:
  EncoderModel& model_;
  TrainConfig config_;
  LossWeights weights_;
  AdamW optimizer_;
  Rng sampling_rng_;
  std::size_t step_ = 0;
};

struct TrainCallbacks {
  std::function<void(const TrainStepReport&)> on_step;
  // Called every checkpoint_every steps and once after the final step.
  std::function<void(const EncoderModel&, std::size_t step)> on_checkpoint;
};

// Shuffles with the "data" stream each epoch and steps over full batches of
// at least two examples. Mutates `model` in place.
std::vector<TrainStepReport> train(EncoderModel& model, std::span<const TextPair> dataset, const TrainConfig& config,
                                   const TrainCallbacks& callbacks = {});
std::vector<TrainStepReport> train(EncoderModel& model, std::span<const TextTriplet> dataset,
                                   const TrainConfig& config, const TrainCallbacks& callbacks = {});
std::vector<TrainStepReport> train(EncoderModel& model, std::span<const ScoredPair> dataset, const TrainConfig& config,
                                   const TrainCallbacks& callbacks = {}, double score_scale = 1.0);

}  // namespace mse2d
