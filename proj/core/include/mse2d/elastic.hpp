#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include "mse2d/encoder.hpp"

namespace mse2d {

struct TruncationSpec {
  std::size_t layers = 0;  // n, layers kept
  std::size_t dim = 0;     // d, advertised embedding size
};

// Standalone model with the first n layers (byte copies) advertising d.
// Hidden width stays D; d is applied as a read-time prefix slice.
EncoderModel truncate_model(const EncoderModel& model, const TruncationSpec& spec);

struct LayerLatency {
  std::size_t layer = 0;
  double median_seconds = 0.0;  // per batch
  std::size_t batches = 0;
  std::size_t batch_size = 0;
  double speedup = 1.0;  // time(deepest requested layer) / time(layer)
};

struct LatencyReport {
  std::vector<LayerLatency> layers;  // ascending layer
  const LayerLatency& at(std::size_t layer) const;
};

struct BenchmarkOptions {
  std::size_t batch_size = 32;
  std::size_t num_batches = 30;
  std::size_t warmup_batches = 3;
  std::size_t tokens_per_sentence = 16;  // including CLS
  std::uint64_t seed = kDefaultSeed;
};

// Median early-exit forward time per batch at each requested layer; warmup
// batches are excluded. Speedup is relative to the deepest requested layer.
LatencyReport benchmark_layers(const EncoderModel& model, std::span<const std::size_t> layers,
                               const BenchmarkOptions& options = {});

// CSV "layer,median_seconds,speedup".
void write_latency_csv(const LatencyReport& report, std::ostream& out);

}  // namespace mse2d
