#include "mse2d/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <ostream>
#include <set>
#include <thread>

#include "mse2d/errors.hpp"

namespace mse2d {

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double midrank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = midrank;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw InputError("spearman: length mismatch (" + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + ")");
  }
  if (x.size() < 2) throw InputError("spearman: need at least 2 points");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw InputError("spearman: non-finite value");
  }
  const std::vector<double> rx = average_ranks(x);
  const std::vector<double> ry = average_ranks(y);
  const double n = static_cast<double>(rx.size());
  const double mean = (n + 1.0) / 2.0;  // midranks always average to (n + 1) / 2
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean, dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw InputError("spearman: constant input, correlation undefined");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

const EvalCell& EvalReport::cell(std::size_t layer, std::size_t dim) const {
  for (const EvalCell& c : cells) {
    if (c.layer == layer && c.dim == dim) return c;
  }
  throw InputError("eval report has no cell (" + std::to_string(layer) + ", " + std::to_string(dim) + ")");
}

namespace {

double prefix_cosine(const double* a, const double* b, std::size_t d) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    dot += a[j] * b[j];
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  if (na == 0.0 || nb == 0.0) throw InputError("eval: zero-norm embedding prefix");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

EvalReport evaluate(const EncoderModel& model, std::span<const ScoredPair> pairs, std::span<const std::size_t> layers,
                    std::span<const std::size_t> dims, const EvalOptions& options) {
  if (pairs.empty()) throw InputError("evaluate: no pairs");
  if (layers.empty() || dims.empty()) throw InputError("evaluate: empty layer or dim set");
  const std::size_t hidden = model.hidden_dim();
  for (std::size_t n : layers) {
    if (n < 1 || n > model.num_layers()) throw InputError("evaluate: layer " + std::to_string(n) + " out of range");
  }
  for (std::size_t d : dims) {
    if (d < 1 || d > hidden) throw InputError("evaluate: dim " + std::to_string(d) + " out of range");
  }
  const std::set<std::size_t> layer_set(layers.begin(), layers.end());
  const std::set<std::size_t> dim_set(dims.begin(), dims.end());
  const std::size_t max_layer = *layer_set.rbegin();

  EvalReport report;
  report.model_id = options.model_id;
  report.dataset_id = options.dataset_id;

  const Tokenizer tokenizer(model.config());
  std::vector<TokenSequence> sequences;  // [a_0, b_0, a_1, b_1, ...]
  std::vector<double> gold;
  for (const ScoredPair& p : pairs) {
    try {
      TokenSequence a = tokenizer.encode(p.text_a);
      TokenSequence b = tokenizer.encode(p.text_b);
      sequences.push_back(std::move(a));
      sequences.push_back(std::move(b));
      gold.push_back(p.score);
    } catch (const InputError&) {
      ++report.skipped_pairs;
    }
  }
  if (gold.empty()) throw InputError("evaluate: every pair failed to tokenize");

  // embeddings[n - 1] holds [sequences x hidden] at full width.
  std::vector<std::vector<double>> embeddings(max_layer, std::vector<double>(sequences.size() * hidden));
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk_size);
  const std::size_t num_chunks = (sequences.size() + chunk - 1) / chunk;
  auto run_chunk = [&](std::size_t c) {
    NoGradScope no_grad;
    const std::size_t begin = c * chunk;
    const std::size_t end = std::min(sequences.size(), begin + chunk);
    std::span<const TokenSequence> slice(sequences.data() + begin, end - begin);
    const std::vector<Tensor> states = forward_layers(model, pad_batch(slice, model.config()), max_layer);
    for (std::size_t n = 0; n < max_layer; ++n) {
      std::copy(states[n].data().begin(), states[n].data().end(), embeddings[n].begin() + begin * hidden);
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(options.num_threads, 1, num_chunks);
  if (workers == 1) {
    for (std::size_t c = 0; c < num_chunks; ++c) run_chunk(c);
  } else {
    std::vector<std::exception_ptr> failures(workers);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t c = w; c < num_chunks; c += workers) run_chunk(c);
          } catch (...) {
            failures[w] = std::current_exception();
          }
        });
      }
    }
    for (const auto& f : failures) {
      if (f) std::rethrow_exception(f);
    }
  }

  std::vector<double> predicted(gold.size());
  for (std::size_t n : layer_set) {
    const std::vector<double>& e = embeddings[n - 1];
    for (std::size_t d : dim_set) {
      for (std::size_t i = 0; i < gold.size(); ++i) {
        predicted[i] = prefix_cosine(e.data() + (2 * i) * hidden, e.data() + (2 * i + 1) * hidden, d);
      }
      report.cells.push_back(EvalCell{n, d, spearman(predicted, gold), gold.size()});
    }
  }
  return report;
}

void write_report_csv(const EvalReport& report, std::ostream& out) {
  out << "layer,dim,spearman,num_pairs\n";
  char buf[64];
  for (const EvalCell& c : report.cells) {
    std::snprintf(buf, sizeof(buf), "%.17g", c.spearman);
    out << c.layer << ',' << c.dim << ',' << buf << ',' << c.num_pairs << '\n';
  }
}

}  // namespace mse2d
