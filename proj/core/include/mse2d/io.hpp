#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mse2d/data.hpp"
#include "mse2d/encoder.hpp"

namespace mse2d {

// Writes to a sibling temp file, then renames over `path`.
void atomic_write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// JSON-lines datasets. Blank lines are skipped; any other malformed line is a
// FormatError naming the source and 1-based line number.

std::vector<ScoredPair> parse_pairs(std::istream& in, std::string_view source = "<stream>");
std::vector<TextPair> parse_positives(std::istream& in, std::string_view source = "<stream>");
std::vector<TextTriplet> parse_triplets(std::istream& in, std::string_view source = "<stream>");

std::vector<ScoredPair> load_pairs(const std::filesystem::path& path);
std::vector<TextPair> load_positives(const std::filesystem::path& path);
std::vector<TextTriplet> load_triplets(const std::filesystem::path& path);

// {"text_a", "text_b", "score"} per line.
std::string format_pairs(std::span<const ScoredPair> pairs);
// {"anchor", "positive"} per line.
std::string format_positives(std::span<const TextPair> pairs);
// {"anchor", "positive", "negative"} per line.
std::string format_triplets(std::span<const TextTriplet> triplets);

void save_pairs(const std::filesystem::path& path, std::span<const ScoredPair> pairs);
void save_positives(const std::filesystem::path& path, std::span<const TextPair> pairs);
void save_triplets(const std::filesystem::path& path, std::span<const TextTriplet> triplets);

// ---------------------------------------------------------------------------
// Checkpoints
//
//   bytes [0, 8)    magic "MSE2DCKP"
//   bytes [8, 16)   header length H, little-endian uint64
//   bytes [16, 16+H) JSON header
//   remainder       payload: little-endian float64 tensors, contiguous, in
//                   manifest order; byte_offset is relative to payload start

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "MSE2DCKP";

struct TensorEntry {
  std::string name;
  Shape shape;
  std::uint64_t byte_offset = 0;
  bool operator==(const TensorEntry&) const = default;
};

struct CheckpointHeader {
  int format_version = kCheckpointFormatVersion;
  EncoderConfig config;
  std::vector<TensorEntry> tensors;
  std::uint64_t payload_bytes = 0;
  std::optional<std::size_t> advertised_dim;
};

CheckpointHeader make_checkpoint_header(const EncoderModel& model);
std::string serialize_checkpoint(const EncoderModel& model);
// Validates the header fully before allocating any tensor storage.
CheckpointHeader parse_checkpoint_header(std::string_view bytes);
EncoderModel deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path);
EncoderModel load_checkpoint(const std::filesystem::path& path);

}  // namespace mse2d
