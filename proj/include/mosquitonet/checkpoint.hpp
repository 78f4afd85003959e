#pragma once

// Checkpoint layout (all integers little-endian u32):
//   "MQTO" | version | config length | config text (UTF-8 key = value)
//   | tensor count | { name length | name | rank | dims... | f32 data... }*
//   | CRC-32 of every preceding byte

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "mosquitonet/model.hpp"

namespace mqnet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'M', 'Q', 'T', 'O'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::string model_id_string(std::uint32_t checksum) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", checksum);
  return buf;
}

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (size_ - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(MosquitoNet& model) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(model.config().to_text());
  const auto state = model.state();
  w.u32(static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, tensor] : state) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(tensor->rank()));
    for (std::size_t d : tensor->shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : tensor->values()) w.f32(v);
  }
  const std::uint32_t crc = crc32_of(w.bytes().data(), w.bytes().size());
  w.u32(crc);
  return std::move(w.bytes());
}

struct LoadedCheckpoint {
  MosquitoNet model;
  std::uint32_t checksum = 0;
  std::string model_id() const { return model_id_string(checksum); }
};

/// Parses a checkpoint image. When `expected` is given, the stored
/// configuration must match it exactly.
inline LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                               const std::optional<ModelConfig>& expected = std::nullopt) {
  if (bytes.size() < 12 || !std::equal(kCheckpointMagic, kCheckpointMagic + 4, bytes.begin())) {
    throw CheckpointError("not a checkpoint file (bad magic or too short)");
  }
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader tail(bytes.data() + body, 4);
  const std::uint32_t stored_crc = tail.u32();
  const std::uint32_t actual_crc = crc32_of(bytes.data(), body);
  if (stored_crc != actual_crc) {
    throw CheckpointError("checkpoint integrity check failed (stored crc " + model_id_string(stored_crc) +
                          ", computed " + model_id_string(actual_crc) + ")");
  }

  detail::ByteReader r(bytes.data() + 4, body - 4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  ModelConfig config;
  try {
    config = ModelConfig::from_text(r.str());
    config.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  if (expected && !(*expected == config)) {
    throw CheckpointError("checkpoint config does not match the expected model configuration");
  }

  LoadedCheckpoint out;
  out.model = MosquitoNet::build(config, RngSeed{0});
  auto state = out.model.state();
  const std::uint32_t count = r.u32();
  if (count != state.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, model needs " +
                          std::to_string(state.size()));
  }
  for (auto& [name, tensor] : state) {
    const std::string stored = r.str();
    if (stored != name) throw CheckpointError("checkpoint tensor '" + stored + "' where '" + name + "' expected");
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    if (shape != tensor->shape()) {
      throw CheckpointError("checkpoint tensor '" + name + "' has shape " + to_string(shape) + ", expected " +
                            to_string(tensor->shape()));
    }
    r.need(tensor->size() * 4);
    for (float& v : tensor->values()) v = r.f32();
  }
  if (r.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint tensors");
  for (auto& block : out.model.blocks()) {
    block.norm.set_running_stats(block.norm.running_mean, block.norm.running_var);
  }
  out.checksum = stored_crc;
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes via a temporary sibling and renames, so a failed save never leaves
/// a partial checkpoint behind. Returns the checksum.
inline std::uint32_t save_checkpoint(MosquitoNet& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
  detail::ByteReader tail(bytes.data() + bytes.size() - 4, 4);
  return tail.u32();
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                        const std::optional<ModelConfig>& expected = std::nullopt) {
  std::vector<std::uint8_t> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const std::runtime_error& e) {
    throw CheckpointError(e.what());
  }
  return deserialize_checkpoint(bytes, expected);
}

}  // namespace mqnet
