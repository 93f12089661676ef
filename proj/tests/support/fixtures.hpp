#pragma once

#include <unistd.h>

#include <atomic>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mse2d/encoder.hpp"
#include "mse2d/tensor.hpp"

namespace mse2d::testing {

// Scratch directory removed on scope exit.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static std::atomic<int> counter{0};
    path = std::filesystem::temp_directory_path() /
           ("mse2d_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline EncoderConfig tiny_config(std::uint64_t seed = kDefaultSeed) {
  EncoderConfig c;
  c.num_layers = 2;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.vocab_size = 64;
  c.max_seq_len = 8;
  c.seed = seed;
  return c;
}

// Random token sequences: CLS followed by 1..max_seq_len-1 ids.
inline std::vector<TokenSequence> random_sequences(const EncoderConfig& config, std::size_t count,
                                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(2, config.max_seq_len);
  std::uniform_int_distribution<std::uint32_t> id(kNumReservedIds, static_cast<std::uint32_t>(config.vocab_size - 1));
  std::vector<TokenSequence> out(count);
  for (TokenSequence& s : out) {
    s.ids.push_back(kClsId);
    const std::size_t n = len(rng);
    while (s.ids.size() < n) s.ids.push_back(id(rng));
  }
  return out;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

inline bool same_parameters(const EncoderModel& a, const EncoderModel& b) {
  auto pa = a.named_parameters();
  auto pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first || !bitwise_equal(pa[i].second, pb[i].second)) return false;
  }
  return true;
}

// Columns [0, d) of a row-major matrix.
inline Tensor column_prefix(const Tensor& m, std::size_t d) {
  const std::size_t rows = m.shape()[0], cols = m.shape()[1];
  std::vector<double> out;
  out.reserve(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < d; ++c) out.push_back(m.data()[r * cols + c]);
  }
  return Tensor({rows, d}, std::move(out));
}

}  // namespace mse2d::testing
