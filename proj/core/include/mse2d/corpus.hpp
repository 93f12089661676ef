#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mse2d/data.hpp"
#include "mse2d/encoder.hpp"

namespace mse2d {

// Clustered toy corpus: each cluster owns a disjoint word list; sentences are
// drawn from one cluster's words, with noise_rate of the tokens swapped for
// filler words that belong to no cluster (pool of num_clusters *
// vocab_per_cluster).
struct SyntheticCorpusSpec {
  std::size_t num_clusters = 8;
  std::size_t vocab_per_cluster = 24;
  std::size_t pairs_per_cluster = 32;
  double noise_rate = 0.1;
  std::uint64_t seed = kDefaultSeed;
  std::size_t sentence_length = 16;         // words per sentence, at most
  std::size_t eval_pairs_per_cluster = 64;  // same-cluster pairs; as many cross-cluster pairs

  void validate() const;
  bool operator==(const SyntheticCorpusSpec&) const = default;
};

struct SyntheticCorpus {
  std::vector<TextPair> train;   // positives share a cluster
  std::vector<ScoredPair> eval;  // gold 1.0 same cluster, 0.0 cross cluster
};

SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec);

// Word j of cluster c.
std::string cluster_word(std::size_t cluster, std::size_t index);
// Noise word j; belongs to no cluster.
std::string filler_word(std::size_t index);

}  // namespace mse2d
