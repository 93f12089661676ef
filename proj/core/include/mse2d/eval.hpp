#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mse2d/data.hpp"
#include "mse2d/encoder.hpp"

namespace mse2d {

// Fractional ranks (1-based); ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

// Pearson correlation of average ranks. Throws InputError on length mismatch,
// fewer than 2 points, or a constant side (correlation undefined).
double spearman(std::span<const double> x, std::span<const double> y);

struct EvalCell {
  std::size_t layer = 0;
  std::size_t dim = 0;
  double spearman = 0.0;
  std::size_t num_pairs = 0;
};

struct EvalReport {
  std::string model_id;
  std::string dataset_id;
  std::vector<EvalCell> cells;  // layer-major, dims ascending
  std::size_t skipped_pairs = 0;  // pairs whose text failed to tokenize

  const EvalCell& cell(std::size_t layer, std::size_t dim) const;
};

struct EvalOptions {
  std::size_t chunk_size = 64;  // sentences per forward pass
  std::size_t num_threads = 1;
  std::string model_id;
  std::string dataset_id;
};

// Spearman between gold and cos(embed(a, n, d), embed(b, n, d)) for every
// (n, d). Each sentence is embedded once per layer at full width and the
// prefixes are sliced from that.
EvalReport evaluate(const EncoderModel& model, std::span<const ScoredPair> pairs, std::span<const std::size_t> layers,
                    std::span<const std::size_t> dims, const EvalOptions& options = {});

// CSV "layer,dim,spearman,num_pairs"; spearman printed with 17 significant digits.
void write_report_csv(const EvalReport& report, std::ostream& out);

}  // namespace mse2d
