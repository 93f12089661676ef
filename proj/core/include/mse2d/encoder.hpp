#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mse2d/tensor.hpp"

namespace mse2d {

inline constexpr std::uint64_t kDefaultSeed = 42;

struct EncoderConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_dim = 64;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 2048;
  std::size_t max_seq_len = 32;
  std::uint64_t seed = kDefaultSeed;

  // Throws ConfigError on inconsistent geometry.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

// Closed-form parameter count for `layers` blocks of the given geometry.
std::size_t parameter_count(const EncoderConfig& config, std::size_t layers);
inline std::size_t parameter_count(const EncoderConfig& config) {
  return parameter_count(config, config.num_layers);
}

// ---------------------------------------------------------------------------
// Tokenization

inline constexpr std::uint32_t kPadId = 0;
inline constexpr std::uint32_t kClsId = 1;
inline constexpr std::uint32_t kNumReservedIds = 2;

struct TokenSequence {
  std::vector<std::uint32_t> ids;  // ids[0] == kClsId
  bool operator==(const TokenSequence&) const = default;
};

// Lowercases, splits on whitespace, emits each punctuation character as its
// own token, hashes tokens into [kNumReservedIds, vocab_size), prepends CLS and
// truncates to max_seq_len.
class Tokenizer {
 public:
  Tokenizer(std::size_t vocab_size, std::size_t max_seq_len);
  explicit Tokenizer(const EncoderConfig& config) : Tokenizer(config.vocab_size, config.max_seq_len) {}

  TokenSequence encode(std::string_view text) const;
  std::uint32_t token_id(std::string_view token) const;

  // Lowercased word/punctuation pieces, before hashing or truncation.
  static std::vector<std::string> split(std::string_view text);

 private:
  std::size_t vocab_size_;
  std::size_t max_seq_len_;
};

// Padded, masked batch ready for the encoder.
struct EncodedBatch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;            // padded length
  std::vector<std::uint32_t> ids;     // batch_size * seq_len, kPadId padded
  std::vector<std::size_t> lengths;   // valid tokens per sequence
};

EncodedBatch pad_batch(std::span<const TokenSequence> sequences, const EncoderConfig& config);

// ---------------------------------------------------------------------------
// Model

struct LayerWeights {
  Tensor attn_norm_gain, attn_norm_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ffn_norm_gain, ffn_norm_bias;
  Tensor w1, b1, w2, b2;
  Tensor out_norm_gain, out_norm_bias;  // applied to the CLS state emitted by this layer
};

class EncoderModel {
 public:
  EncoderModel() = default;

  const EncoderConfig& config() const { return config_; }
  std::size_t num_layers() const { return layers_.size(); }
  std::size_t hidden_dim() const { return config_.hidden_dim; }

  const Tensor& token_embedding() const { return token_embedding_; }
  const Tensor& position_embedding() const { return position_embedding_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }

  // Embedding size a truncated export advertises; unset for ordinary models.
  const std::optional<std::size_t>& advertised_dim() const { return advertised_dim_; }
  void set_advertised_dim(std::optional<std::size_t> dim);
  std::size_t output_dim() const { return advertised_dim_.value_or(config_.hidden_dim); }

  // Stable, ordered (name, tensor) list; the checkpoint manifest order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  EncoderModel clone() const;
  void zero_grad();

  // Builds a model from named tensors (checkpoint load). Shapes are checked
  // against the config.
  static EncoderModel from_named_tensors(const EncoderConfig& config,
                                         std::vector<std::pair<std::string, Tensor>> tensors);

 private:
  friend EncoderModel init_model(const EncoderConfig& config);
  friend EncoderModel truncate_layers(const EncoderModel& model, std::size_t n);

  EncoderConfig config_;
  Tensor token_embedding_;
  Tensor position_embedding_;
  std::vector<LayerWeights> layers_;
  std::optional<std::size_t> advertised_dim_;
};

// Seeded N(0, 0.02) weights, zero biases, unit norm gains.
EncoderModel init_model(const EncoderConfig& config);

// Standalone copy holding only the first n layers.
EncoderModel truncate_layers(const EncoderModel& model, std::size_t n);

// Counts transformer block evaluations; lets callers verify early exit.
struct ForwardTrace {
  std::size_t blocks_evaluated = 0;
};

// CLS states (post per-layer norm) of layers 1..max_layers, each
// [batch x hidden]. Stops after max_layers blocks.
std::vector<Tensor> forward_layers(const EncoderModel& model, const EncodedBatch& batch, std::size_t max_layers,
                                   ForwardTrace* trace = nullptr);
std::vector<Tensor> forward_all_layers(const EncoderModel& model, const EncodedBatch& batch);
std::vector<Tensor> forward_all_layers(const EncoderModel& model, std::span<const TokenSequence> batch);

// First d components of layer n's CLS embedding (1-based n). Runs without a
// tape, so nothing is recorded even inside a training scope.
Tensor embed(const EncoderModel& model, std::span<const TokenSequence> batch, std::size_t layer, std::size_t dim);

}  // namespace mse2d
