#include "mse2d/io.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "mse2d/errors.hpp"

namespace mse2d {

using json = nlohmann::json;
namespace fs = std::filesystem;

void atomic_write_file(const fs::path& path, std::string_view bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw std::runtime_error("write to " + tmp.string() + " failed");
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

namespace {

template <typename Row, typename FromJson>
std::vector<Row> parse_lines(std::istream& in, std::string_view source, FromJson&& from_json) {
  std::vector<Row> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = std::string(source) + ":" + std::to_string(line_no);
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!obj.is_object()) throw FormatError(where + ": expected a JSON object");
    rows.push_back(from_json(obj, where));
  }
  return rows;
}

std::string string_field(const json& obj, const char* field, const std::string& where) {
  auto it = obj.find(field);
  if (it == obj.end()) throw FormatError(where + ": missing field '" + field + "'");
  if (!it->is_string()) throw FormatError(where + ": field '" + field + "' must be a string");
  return it->get<std::string>();
}

double number_field(const json& obj, const char* field, const std::string& where) {
  auto it = obj.find(field);
  if (it == obj.end()) throw FormatError(where + ": missing field '" + field + "'");
  if (!it->is_number()) throw FormatError(where + ": field '" + field + "' must be a number");
  return it->get<double>();
}

template <typename Parse>
auto load_with(const fs::path& path, Parse&& parse) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse(in, path.string());
}

template <typename Row, typename ToJson>
std::string format_lines(std::span<const Row> rows, ToJson&& to_json) {
  std::string out;
  for (const Row& r : rows) {
    out += to_json(r).dump();
    out.push_back('\n');
  }
  return out;
}

}  // namespace

std::vector<ScoredPair> parse_pairs(std::istream& in, std::string_view source) {
  return parse_lines<ScoredPair>(in, source, [](const json& o, const std::string& where) {
    return ScoredPair{string_field(o, "text_a", where), string_field(o, "text_b", where),
                      number_field(o, "score", where)};
  });
}

std::vector<TextPair> parse_positives(std::istream& in, std::string_view source) {
  return parse_lines<TextPair>(in, source, [](const json& o, const std::string& where) {
    return TextPair{string_field(o, "anchor", where), string_field(o, "positive", where)};
  });
}

std::vector<TextTriplet> parse_triplets(std::istream& in, std::string_view source) {
  return parse_lines<TextTriplet>(in, source, [](const json& o, const std::string& where) {
    return TextTriplet{string_field(o, "anchor", where), string_field(o, "positive", where),
                       string_field(o, "negative", where)};
  });
}

std::vector<ScoredPair> load_pairs(const fs::path& path) {
  return load_with(path, [](std::istream& in, const std::string& src) { return parse_pairs(in, src); });
}

std::vector<TextPair> load_positives(const fs::path& path) {
  return load_with(path, [](std::istream& in, const std::string& src) { return parse_positives(in, src); });
}

std::vector<TextTriplet> load_triplets(const fs::path& path) {
  return load_with(path, [](std::istream& in, const std::string& src) { return parse_triplets(in, src); });
}

std::string format_pairs(std::span<const ScoredPair> pairs) {
  return format_lines(pairs, [](const ScoredPair& p) {
    json o;
    o["text_a"] = p.text_a;
    o["text_b"] = p.text_b;
    o["score"] = p.score;
    return o;
  });
}

std::string format_positives(std::span<const TextPair> pairs) {
  return format_lines(pairs, [](const TextPair& p) {
    json o;
    o["anchor"] = p.anchor;
    o["positive"] = p.positive;
    return o;
  });
}

std::string format_triplets(std::span<const TextTriplet> triplets) {
  return format_lines(triplets, [](const TextTriplet& t) {
    json o;
    o["anchor"] = t.anchor;
    o["positive"] = t.positive;
    o["negative"] = t.negative;
    return o;
  });
}

void save_pairs(const fs::path& path, std::span<const ScoredPair> pairs) { atomic_write_file(path, format_pairs(pairs)); }

void save_positives(const fs::path& path, std::span<const TextPair> pairs) {
  atomic_write_file(path, format_positives(pairs));
}

void save_triplets(const fs::path& path, std::span<const TextTriplet> triplets) {
  atomic_write_file(path, format_triplets(triplets));
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kPreambleBytes = 16;

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

json config_to_json(const EncoderConfig& c) {
  json j;
  j["num_layers"] = c.num_layers;
  j["hidden_dim"] = c.hidden_dim;
  j["num_heads"] = c.num_heads;
  j["ffn_dim"] = c.ffn_dim;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["seed"] = c.seed;
  return j;
}

std::uint64_t unsigned_field(const json& obj, const char* field) {
  auto it = obj.find(field);
  if (it == obj.end()) throw FormatError(std::string("checkpoint header: missing '") + field + "'");
  if (!it->is_number_unsigned()) throw FormatError(std::string("checkpoint header: '") + field + "' must be unsigned");
  return it->get<std::uint64_t>();
}

EncoderConfig config_from_json(const json& j) {
  if (!j.is_object()) throw FormatError("checkpoint header: 'config' must be an object");
  EncoderConfig c;
  c.num_layers = unsigned_field(j, "num_layers");
  c.hidden_dim = unsigned_field(j, "hidden_dim");
  c.num_heads = unsigned_field(j, "num_heads");
  c.ffn_dim = unsigned_field(j, "ffn_dim");
  c.vocab_size = unsigned_field(j, "vocab_size");
  c.max_seq_len = unsigned_field(j, "max_seq_len");
  c.seed = unsigned_field(j, "seed");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  return c;
}

}  // namespace

CheckpointHeader make_checkpoint_header(const EncoderModel& model) {
  CheckpointHeader h;
  h.config = model.config();
  h.advertised_dim = model.advertised_dim();
  for (const auto& [name, t] : model.named_parameters()) {
    h.tensors.push_back(TensorEntry{name, t.shape(), h.payload_bytes});
    h.payload_bytes += t.numel() * sizeof(double);
  }
  return h;
}

std::string serialize_checkpoint(const EncoderModel& model) {
  const CheckpointHeader h = make_checkpoint_header(model);
  json header;
  header["format_version"] = h.format_version;
  header["config"] = config_to_json(h.config);
  header["payload_bytes"] = h.payload_bytes;
  if (h.advertised_dim) header["advertised_dim"] = *h.advertised_dim;
  json tensors = json::array();
  for (const TensorEntry& e : h.tensors) {
    tensors.push_back(json{{"tensor_name", e.name}, {"shape", e.shape}, {"byte_offset", e.byte_offset}});
  }
  header["tensors"] = std::move(tensors);
  const std::string header_text = header.dump();

  std::string out;
  out.reserve(kPreambleBytes + header_text.size() + h.payload_bytes);
  out.append(kCheckpointMagic);
  put_u64_le(out, header_text.size());
  out += header_text;
  for (const auto& [name, t] : model.named_parameters()) {
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put_u64_le(out, bits);
    }
  }
  return out;
}

CheckpointHeader parse_checkpoint_header(std::string_view bytes) {
  if (bytes.size() < kPreambleBytes) throw FormatError("checkpoint: file shorter than its preamble");
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) throw FormatError("checkpoint: bad magic");
  const std::uint64_t header_len = get_u64_le(bytes.data() + 8);
  if (header_len > bytes.size() - kPreambleBytes) throw FormatError("checkpoint: header length exceeds file size");
  json header;
  try {
    header = json::parse(bytes.substr(kPreambleBytes, header_len));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint: malformed header (") + e.what() + ")");
  }
  if (!header.is_object()) throw FormatError("checkpoint: header is not an object");

  CheckpointHeader h;
  const std::uint64_t version = unsigned_field(header, "format_version");
  if (version != static_cast<std::uint64_t>(kCheckpointFormatVersion)) {
    throw FormatError("checkpoint: format_version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointFormatVersion) + ")");
  }
  auto cfg = header.find("config");
  if (cfg == header.end()) throw FormatError("checkpoint header: missing 'config'");
  h.config = config_from_json(*cfg);
  h.payload_bytes = unsigned_field(header, "payload_bytes");
  if (header.contains("advertised_dim")) h.advertised_dim = unsigned_field(header, "advertised_dim");

  auto list = header.find("tensors");
  if (list == header.end() || !list->is_array()) throw FormatError("checkpoint header: missing 'tensors' array");
  std::uint64_t expected_offset = 0;
  for (const json& entry : *list) {
    if (!entry.is_object()) throw FormatError("checkpoint header: tensor entry is not an object");
    TensorEntry e;
    auto name = entry.find("tensor_name");
    if (name == entry.end() || !name->is_string()) throw FormatError("checkpoint header: tensor without a name");
    e.name = name->get<std::string>();
    auto shape = entry.find("shape");
    if (shape == entry.end() || !shape->is_array()) throw FormatError("checkpoint header: '" + e.name + "' has no shape");
    std::uint64_t elements = 1;
    for (const json& s : *shape) {
      if (!s.is_number_unsigned() || s.get<std::uint64_t>() == 0) {
        throw FormatError("checkpoint header: '" + e.name + "' has an invalid extent");
      }
      const std::uint64_t extent = s.get<std::uint64_t>();
      if (elements > std::numeric_limits<std::uint64_t>::max() / 8 / extent) {
        throw FormatError("checkpoint header: '" + e.name + "' is too large");
      }
      elements *= extent;
      e.shape.push_back(extent);
    }
    e.byte_offset = unsigned_field(entry, "byte_offset");
    if (e.byte_offset != expected_offset) {
      throw FormatError("checkpoint header: '" + e.name + "' at offset " + std::to_string(e.byte_offset) +
                        ", expected " + std::to_string(expected_offset));
    }
    const std::uint64_t size = elements * 8;
    if (size > h.payload_bytes - std::min(h.payload_bytes, expected_offset) || expected_offset > h.payload_bytes) {
      throw FormatError("checkpoint header: '" + e.name + "' extends past the declared payload");
    }
    expected_offset += size;
    h.tensors.push_back(std::move(e));
  }
  if (expected_offset != h.payload_bytes) {
    throw FormatError("checkpoint header: manifest covers " + std::to_string(expected_offset) + " bytes but payload_bytes is " +
                      std::to_string(h.payload_bytes));
  }
  const std::uint64_t available = bytes.size() - kPreambleBytes - header_len;
  if (available != h.payload_bytes) {
    throw FormatError("checkpoint: payload holds " + std::to_string(available) + " bytes, header declares " +
                      std::to_string(h.payload_bytes));
  }
  return h;
}

EncoderModel deserialize_checkpoint(std::string_view bytes) {
  const CheckpointHeader h = parse_checkpoint_header(bytes);
  const char* payload = bytes.data() + kPreambleBytes + get_u64_le(bytes.data() + 8);
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const TensorEntry& e : h.tensors) {
    std::vector<double> data(shape_numel(e.shape));
    const char* p = payload + e.byte_offset;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::uint64_t bits = get_u64_le(p + 8 * i);
      std::memcpy(&data[i], &bits, sizeof bits);
    }
    tensors.emplace_back(e.name, Tensor(e.shape, std::move(data), true));
  }
  EncoderModel model = EncoderModel::from_named_tensors(h.config, std::move(tensors));
  try {
    model.set_advertised_dim(h.advertised_dim);
  } catch (const InputError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  return model;
}

void save_checkpoint(const EncoderModel& model, const fs::path& path) {
  atomic_write_file(path, serialize_checkpoint(model));
}

EncoderModel load_checkpoint(const fs::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace mse2d
