#pragma once

#include <string>

namespace mse2d {

// Scored sentence pair for STS-style evaluation (gold on any monotone scale).
struct ScoredPair {
  std::string text_a;
  std::string text_b;
  double score = 0.0;
  bool operator==(const ScoredPair&) const = default;
};

// Anchor and its designated positive; other pairs in a batch act as negatives.
struct TextPair {
  std::string anchor;
  std::string positive;
  bool operator==(const TextPair&) const = default;
};

struct TextTriplet {
  std::string anchor;
  std::string positive;
  std::string negative;
  bool operator==(const TextTriplet&) const = default;
};

}  // namespace mse2d
