#include "mse2d/encoder.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <random>

#include "mse2d/errors.hpp"
#include "mse2d/ops.hpp"
#include "mse2d/rng.hpp"

namespace mse2d {

void EncoderConfig::validate() const {
  if (num_layers == 0) throw ConfigError("encoder config: num_layers must be positive");
  if (hidden_dim == 0) throw ConfigError("encoder config: hidden_dim must be positive");
  if (num_heads == 0) throw ConfigError("encoder config: num_heads must be positive");
  if (hidden_dim % num_heads != 0) {
    throw ConfigError("encoder config: hidden_dim " + std::to_string(hidden_dim) + " is not a multiple of " +
                      std::to_string(num_heads) + " heads");
  }
  if (ffn_dim == 0) throw ConfigError("encoder config: ffn_dim must be positive");
  if (vocab_size <= kNumReservedIds) {
    throw ConfigError("encoder config: vocab_size must exceed the " + std::to_string(kNumReservedIds) +
                      " reserved ids");
  }
  if (max_seq_len < 2) throw ConfigError("encoder config: max_seq_len must be at least 2");
}

std::size_t parameter_count(const EncoderConfig& c, std::size_t layers) {
  const std::size_t d = c.hidden_dim, f = c.ffn_dim;
  const std::size_t embeddings = c.vocab_size * d + c.max_seq_len * d;
  const std::size_t norms = 3 * 2 * d;
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t ffn = d * f + f + f * d + d;
  return embeddings + layers * (norms + attention + ffn);
}

// ---------------------------------------------------------------------------

Tokenizer::Tokenizer(std::size_t vocab_size, std::size_t max_seq_len)
    : vocab_size_(vocab_size), max_seq_len_(max_seq_len) {
  if (vocab_size_ <= kNumReservedIds) throw ConfigError("tokenizer: vocab_size too small");
  if (max_seq_len_ < 2) throw ConfigError("tokenizer: max_seq_len must be at least 2");
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> pieces;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) pieces.push_back(std::move(current));
    current.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      pieces.emplace_back(1, raw);
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : raw);
    }
  }
  flush();
  return pieces;
}

std::uint32_t Tokenizer::token_id(std::string_view token) const {
  const std::uint64_t span = vocab_size_ - kNumReservedIds;
  return static_cast<std::uint32_t>(kNumReservedIds + fnv1a64(token) % span);
}

TokenSequence Tokenizer::encode(std::string_view text) const {
  const std::vector<std::string> pieces = split(text);
  if (pieces.empty()) throw InputError("tokenize: text is empty");
  TokenSequence seq;
  seq.ids.reserve(std::min(pieces.size() + 1, max_seq_len_));
  seq.ids.push_back(kClsId);
  for (const std::string& piece : pieces) {
    if (seq.ids.size() == max_seq_len_) break;
    seq.ids.push_back(token_id(piece));
  }
  return seq;
}

EncodedBatch pad_batch(std::span<const TokenSequence> sequences, const EncoderConfig& config) {
  if (sequences.empty()) throw InputError("encoder: empty batch");
  EncodedBatch batch;
  batch.batch_size = sequences.size();
  for (const TokenSequence& s : sequences) {
    if (s.ids.empty() || s.ids.front() != kClsId) throw InputError("encoder: sequence does not start with CLS");
    if (s.ids.size() > config.max_seq_len) {
      throw InputError("encoder: sequence of length " + std::to_string(s.ids.size()) + " exceeds max_seq_len " +
                       std::to_string(config.max_seq_len));
    }
    for (std::uint32_t id : s.ids) {
      if (id >= config.vocab_size) throw InputError("encoder: token id " + std::to_string(id) + " out of vocabulary");
    }
    batch.seq_len = std::max(batch.seq_len, s.ids.size());
  }
  batch.ids.assign(batch.batch_size * batch.seq_len, kPadId);
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    std::copy(sequences[b].ids.begin(), sequences[b].ids.end(), batch.ids.begin() + b * batch.seq_len);
    batch.lengths.push_back(sequences[b].ids.size());
  }
  return batch;
}

// ---------------------------------------------------------------------------

namespace {

struct LayerField {
  const char* name;
  Tensor LayerWeights::*member;
  bool matrix_in_out;  // true: [hidden x hidden]-like projection
};

// Manifest order within a layer.
constexpr LayerField kLayerFields[] = {
    {"attn_norm.gain", &LayerWeights::attn_norm_gain, false},
    {"attn_norm.bias", &LayerWeights::attn_norm_bias, false},
    {"attn.wq", &LayerWeights::wq, true},
    {"attn.bq", &LayerWeights::bq, false},
    {"attn.wk", &LayerWeights::wk, true},
    {"attn.bk", &LayerWeights::bk, false},
    {"attn.wv", &LayerWeights::wv, true},
    {"attn.bv", &LayerWeights::bv, false},
    {"attn.wo", &LayerWeights::wo, true},
    {"attn.bo", &LayerWeights::bo, false},
    {"ffn_norm.gain", &LayerWeights::ffn_norm_gain, false},
    {"ffn_norm.bias", &LayerWeights::ffn_norm_bias, false},
    {"ffn.w1", &LayerWeights::w1, true},
    {"ffn.b1", &LayerWeights::b1, false},
    {"ffn.w2", &LayerWeights::w2, true},
    {"ffn.b2", &LayerWeights::b2, false},
    {"out_norm.gain", &LayerWeights::out_norm_gain, false},
    {"out_norm.bias", &LayerWeights::out_norm_bias, false},
};

Shape layer_field_shape(const EncoderConfig& c, std::string_view field) {
  const std::size_t d = c.hidden_dim, f = c.ffn_dim;
  if (field == "ffn.w1") return {d, f};
  if (field == "ffn.b1") return {f};
  if (field == "ffn.w2") return {f, d};
  if (field.starts_with("attn.w")) return {d, d};
  return {d};
}

std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i) + "."; }

Tensor random_normal(Shape shape, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data), true);
}

}  // namespace

void EncoderModel::set_advertised_dim(std::optional<std::size_t> dim) {
  if (dim && (*dim < 1 || *dim > config_.hidden_dim)) {
    throw InputError("advertised_dim " + std::to_string(*dim) + " outside [1, " +
                     std::to_string(config_.hidden_dim) + "]");
  }
  advertised_dim_ = dim;
}

std::vector<std::pair<std::string, Tensor>> EncoderModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_embedding", token_embedding_);
  out.emplace_back("position_embedding", position_embedding_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (const LayerField& field : kLayerFields) out.emplace_back(layer_prefix(i) + field.name, layers_[i].*field.member);
  }
  return out;
}

std::vector<Tensor> EncoderModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t EncoderModel::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : parameters()) n += t.numel();
  return n;
}

EncoderModel EncoderModel::clone() const {
  EncoderModel copy;
  copy.config_ = config_;
  copy.advertised_dim_ = advertised_dim_;
  copy.token_embedding_ = token_embedding_.clone();
  copy.position_embedding_ = position_embedding_.clone();
  for (const LayerWeights& layer : layers_) {
    LayerWeights l;
    for (const LayerField& field : kLayerFields) l.*field.member = (layer.*field.member).clone();
    copy.layers_.push_back(std::move(l));
  }
  return copy;
}

void EncoderModel::zero_grad() {
  for (Tensor& t : parameters()) t.zero_grad();
}

EncoderModel EncoderModel::from_named_tensors(const EncoderConfig& config,
                                              std::vector<std::pair<std::string, Tensor>> tensors) {
  config.validate();
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : tensors) {
    if (!by_name.emplace(name, t).second) throw FormatError("duplicate tensor '" + name + "'");
  }
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw FormatError("tensor '" + name + "' has shape " + shape_to_string(it->second.shape()) + ", expected " +
                        shape_to_string(shape));
    }
    Tensor t = it->second;
    t.set_requires_grad(true);
    by_name.erase(it);
    return t;
  };
  EncoderModel m;
  m.config_ = config;
  m.token_embedding_ = take("token_embedding", {config.vocab_size, config.hidden_dim});
  m.position_embedding_ = take("position_embedding", {config.max_seq_len, config.hidden_dim});
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    LayerWeights l;
    for (const LayerField& field : kLayerFields) {
      l.*field.member = take(layer_prefix(i) + field.name, layer_field_shape(config, field.name));
    }
    m.layers_.push_back(std::move(l));
  }
  if (!by_name.empty()) throw FormatError("unexpected tensor '" + by_name.begin()->first + "'");
  return m;
}

EncoderModel init_model(const EncoderConfig& config) {
  config.validate();
  constexpr double kInitStd = 0.02;
  Rng rng = make_stream(config.seed, "init");
  EncoderModel m;
  m.config_ = config;
  m.token_embedding_ = random_normal({config.vocab_size, config.hidden_dim}, rng, kInitStd);
  m.position_embedding_ = random_normal({config.max_seq_len, config.hidden_dim}, rng, kInitStd);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    LayerWeights l;
    for (const LayerField& field : kLayerFields) {
      const std::string_view name = field.name;
      Shape shape = layer_field_shape(config, name);
      if (field.matrix_in_out) {
        l.*field.member = random_normal(std::move(shape), rng, kInitStd);
      } else if (name.ends_with(".gain")) {
        l.*field.member = Tensor::ones(std::move(shape), true);
      } else {
        l.*field.member = Tensor::zeros(std::move(shape), true);
      }
    }
    m.layers_.push_back(std::move(l));
  }
  return m;
}

EncoderModel truncate_layers(const EncoderModel& model, std::size_t n) {
  if (n < 1 || n > model.num_layers()) {
    throw InputError("truncate: n=" + std::to_string(n) + " outside [1, " + std::to_string(model.num_layers()) + "]");
  }
  EncoderModel copy = model.clone();
  copy.layers_.resize(n);
  copy.config_.num_layers = n;
  return copy;
}

// ---------------------------------------------------------------------------

std::vector<Tensor> forward_layers(const EncoderModel& model, const EncodedBatch& batch, std::size_t max_layers,
                                   ForwardTrace* trace) {
  const EncoderConfig& cfg = model.config();
  if (max_layers < 1 || max_layers > model.num_layers()) {
    throw InputError("forward: layer count " + std::to_string(max_layers) + " outside [1, " +
                     std::to_string(model.num_layers()) + "]");
  }
  if (batch.batch_size == 0 || batch.lengths.size() != batch.batch_size) throw InputError("forward: empty batch");
  if (batch.seq_len > cfg.max_seq_len) throw InputError("forward: sequence exceeds max_seq_len");

  const std::size_t rows = batch.batch_size * batch.seq_len;
  std::vector<std::size_t> token_rows(batch.ids.begin(), batch.ids.end());
  std::vector<std::size_t> position_rows(rows);
  for (std::size_t r = 0; r < rows; ++r) position_rows[r] = r % batch.seq_len;
  std::vector<std::size_t> cls_rows(batch.batch_size);
  for (std::size_t b = 0; b < batch.batch_size; ++b) cls_rows[b] = b * batch.seq_len;

  Tensor x = ops::add(ops::gather_rows(model.token_embedding(), token_rows),
                      ops::gather_rows(model.position_embedding(), position_rows));
  std::vector<Tensor> outputs;
  outputs.reserve(max_layers);
  for (std::size_t n = 0; n < max_layers; ++n) {
    const LayerWeights& w = model.layers()[n];
    Tensor h = ops::layer_norm(x, w.attn_norm_gain, w.attn_norm_bias);
    Tensor q = ops::add_bias(ops::matmul(h, w.wq), w.bq);
    Tensor k = ops::add_bias(ops::matmul(h, w.wk), w.bk);
    Tensor v = ops::add_bias(ops::matmul(h, w.wv), w.bv);
    Tensor a = ops::attention(q, k, v, batch.seq_len, batch.lengths, cfg.num_heads);
    x = ops::add(x, ops::add_bias(ops::matmul(a, w.wo), w.bo));
    h = ops::layer_norm(x, w.ffn_norm_gain, w.ffn_norm_bias);
    Tensor f = ops::gelu(ops::add_bias(ops::matmul(h, w.w1), w.b1));
    x = ops::add(x, ops::add_bias(ops::matmul(f, w.w2), w.b2));
    if (trace) ++trace->blocks_evaluated;
    outputs.push_back(ops::layer_norm(ops::gather_rows(x, cls_rows), w.out_norm_gain, w.out_norm_bias));
  }
  return outputs;
}

std::vector<Tensor> forward_all_layers(const EncoderModel& model, const EncodedBatch& batch) {
  return forward_layers(model, batch, model.num_layers());
}

std::vector<Tensor> forward_all_layers(const EncoderModel& model, std::span<const TokenSequence> batch) {
  return forward_all_layers(model, pad_batch(batch, model.config()));
}

Tensor embed(const EncoderModel& model, std::span<const TokenSequence> batch, std::size_t layer, std::size_t dim) {
  if (layer < 1 || layer > model.num_layers()) {
    throw InputError("embed: layer " + std::to_string(layer) + " outside [1, " + std::to_string(model.num_layers()) +
                     "]");
  }
  if (dim < 1 || dim > model.hidden_dim()) {
    throw InputError("embed: dim " + std::to_string(dim) + " outside [1, " + std::to_string(model.hidden_dim()) + "]");
  }
  NoGradScope no_grad;
  std::vector<Tensor> states = forward_layers(model, pad_batch(batch, model.config()), layer);
  return ops::slice_prefix(states.back(), dim);
}

}  // namespace mse2d
