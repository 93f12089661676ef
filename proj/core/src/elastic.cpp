#include "mse2d/elastic.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ostream>
#include <random>

#include "mse2d/errors.hpp"
#include "mse2d/rng.hpp"

namespace mse2d {

EncoderModel truncate_model(const EncoderModel& model, const TruncationSpec& spec) {
  if (spec.layers < 1 || spec.layers > model.num_layers()) {
    throw InputError("truncate: n=" + std::to_string(spec.layers) + " outside [1, " +
                     std::to_string(model.num_layers()) + "]");
  }
  const std::size_t max_dim = model.output_dim();
  if (spec.dim < 1 || spec.dim > max_dim) {
    throw InputError("truncate: d=" + std::to_string(spec.dim) + " outside [1, " + std::to_string(max_dim) + "]");
  }
  EncoderModel out = truncate_layers(model, spec.layers);
  out.set_advertised_dim(spec.dim);
  return out;
}

const LayerLatency& LatencyReport::at(std::size_t layer) const {
  for (const LayerLatency& l : layers) {
    if (l.layer == layer) return l;
  }
  throw InputError("latency report has no layer " + std::to_string(layer));
}

LatencyReport benchmark_layers(const EncoderModel& model, std::span<const std::size_t> layers,
                               const BenchmarkOptions& options) {
  if (layers.empty()) throw InputError("benchmark: no layers requested");
  if (options.num_batches < 10) throw ConfigError("benchmark: need at least 10 timed batches");
  if (options.batch_size < 1) throw ConfigError("benchmark: batch size must be positive");
  const EncoderConfig& cfg = model.config();
  if (options.tokens_per_sentence < 2 || options.tokens_per_sentence > cfg.max_seq_len) {
    throw ConfigError("benchmark: tokens_per_sentence outside [2, max_seq_len]");
  }
  std::vector<std::size_t> sorted(layers.begin(), layers.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (std::size_t n : sorted) {
    if (n < 1 || n > model.num_layers()) throw InputError("benchmark: layer " + std::to_string(n) + " out of range");
  }

  Rng rng = make_stream(options.seed, "bench");
  std::uniform_int_distribution<std::uint32_t> token(kNumReservedIds, static_cast<std::uint32_t>(cfg.vocab_size - 1));
  std::vector<TokenSequence> sentences(options.batch_size);
  for (TokenSequence& s : sentences) {
    s.ids.push_back(kClsId);
    while (s.ids.size() < options.tokens_per_sentence) s.ids.push_back(token(rng));
  }
  const EncodedBatch batch = pad_batch(sentences, cfg);

  // Layers are timed round-robin so slow drift in machine speed hits all of them alike.
  NoGradScope no_grad;
  std::vector<std::vector<double>> times(sorted.size());
  for (std::size_t i = 0; i < options.warmup_batches + options.num_batches; ++i) {
    for (std::size_t k = 0; k < sorted.size(); ++k) {
      const auto start = std::chrono::steady_clock::now();
      const std::vector<Tensor> out = forward_layers(model, batch, sorted[k]);
      const auto stop = std::chrono::steady_clock::now();
      if (i >= options.warmup_batches) times[k].push_back(std::chrono::duration<double>(stop - start).count());
    }
  }
  LatencyReport report;
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    std::vector<double>& t = times[k];
    std::sort(t.begin(), t.end());
    const std::size_t m = t.size();
    const double median = m % 2 ? t[m / 2] : 0.5 * (t[m / 2 - 1] + t[m / 2]);
    report.layers.push_back(LayerLatency{sorted[k], median, options.num_batches, options.batch_size, 1.0});
  }
  const double reference = report.layers.back().median_seconds;
  for (LayerLatency& l : report.layers) l.speedup = reference / l.median_seconds;
  report.layers.back().speedup = 1.0;
  return report;
}

void write_latency_csv(const LatencyReport& report, std::ostream& out) {
  out << "layer,median_seconds,speedup\n";
  char buf[96];
  for (const LayerLatency& l : report.layers) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.6g\n", l.layer, l.median_seconds, l.speedup);
    out << buf;
  }
}

}  // namespace mse2d
