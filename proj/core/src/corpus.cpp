#include "mse2d/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "mse2d/errors.hpp"
#include "mse2d/rng.hpp"

namespace mse2d {

void SyntheticCorpusSpec::validate() const {
  if (num_clusters < 2) throw ConfigError("corpus spec: num_clusters must be at least 2");
  if (sentence_length < 1) throw ConfigError("corpus spec: sentence_length must be positive");
  if (vocab_per_cluster < sentence_length) {
    throw ConfigError("corpus spec: vocab_per_cluster " + std::to_string(vocab_per_cluster) +
                      " too small for sentences of " + std::to_string(sentence_length) + " distinct words");
  }
  if (pairs_per_cluster < 1) throw ConfigError("corpus spec: pairs_per_cluster must be positive");
  if (!(noise_rate >= 0.0 && noise_rate < 1.0)) throw ConfigError("corpus spec: noise_rate must be in [0, 1)");
}

std::string cluster_word(std::size_t cluster, std::size_t index) {
  return "c" + std::to_string(cluster) + "w" + std::to_string(index);
}

std::string filler_word(std::size_t index) { return "f" + std::to_string(index); }

namespace {

class SentenceSampler {
 public:
  SentenceSampler(const SyntheticCorpusSpec& spec, Rng& rng) : spec_(spec), rng_(rng) {}

  // Word indices (within the cluster) of a fresh sentence, distinct words.
  std::vector<std::size_t> draw_words() {
    std::uniform_int_distribution<std::size_t> len_dist(std::max<std::size_t>(1, spec_.sentence_length / 2),
                                                        spec_.sentence_length);
    const std::size_t len = len_dist(rng_);
    std::vector<std::size_t> pool(spec_.vocab_per_cluster);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < len; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng_)]);
    }
    pool.resize(len);
    return pool;
  }

  std::string render(std::size_t cluster, const std::vector<std::size_t>& words) {
    std::bernoulli_distribution noisy(spec_.noise_rate);
    std::uniform_int_distribution<std::size_t> any_filler(0, spec_.num_clusters * spec_.vocab_per_cluster - 1);
    std::string out;
    for (std::size_t w : words) {
      std::string token;
      if (noisy(rng_)) {
        token = filler_word(any_filler(rng_));
      } else {
        token = cluster_word(cluster, w);
      }
      if (!out.empty()) out.push_back(' ');
      out += token;
    }
    return out;
  }

  std::string sentence(std::size_t cluster) { return render(cluster, draw_words()); }

  // Two sentences of one cluster sharing at least one word type before noise is applied.
  TextPair positive_pair(std::size_t cluster) {
    std::vector<std::size_t> anchor = draw_words();
    std::vector<std::size_t> positive = draw_words();
    std::uniform_int_distribution<std::size_t> pick(0, anchor.size() - 1);
    const std::size_t shared = anchor[pick(rng_)];
    if (std::find(positive.begin(), positive.end(), shared) == positive.end()) positive.front() = shared;
    return TextPair{render(cluster, anchor), render(cluster, positive)};
  }

 private:
  const SyntheticCorpusSpec& spec_;
  Rng& rng_;
};

}  // namespace

SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec) {
  spec.validate();
  Rng rng = make_stream(spec.seed, "corpus");
  SentenceSampler sampler(spec, rng);
  SyntheticCorpus corpus;
  for (std::size_t c = 0; c < spec.num_clusters; ++c) {
    for (std::size_t i = 0; i < spec.pairs_per_cluster; ++i) {
      corpus.train.push_back(sampler.positive_pair(c));
    }
  }
  std::uniform_int_distribution<std::size_t> other_cluster(0, spec.num_clusters - 2);
  for (std::size_t c = 0; c < spec.num_clusters; ++c) {
    for (std::size_t i = 0; i < spec.eval_pairs_per_cluster; ++i) {
      corpus.eval.push_back(ScoredPair{sampler.sentence(c), sampler.sentence(c), 1.0});
      std::size_t other = other_cluster(rng);
      if (other >= c) ++other;
      corpus.eval.push_back(ScoredPair{sampler.sentence(c), sampler.sentence(other), 0.0});
    }
  }
  return corpus;
}

}  // namespace mse2d
