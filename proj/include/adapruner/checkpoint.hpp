#pragma once

#include "adapruner/model.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace adapruner {

// Little-endian binary encoding shared by model and adapter checkpoints.
class ByteWriter {
 public:
  void magic(std::string_view tag);
  void u32(std::uint32_t v);
  void i64(std::int64_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> values);
  void str(std::string_view s);

  const std::vector<unsigned char>& bytes() const { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  void expect_magic(std::string_view tag);
  std::uint32_t u32();
  std::int64_t i64();
  std::uint64_t u64();
  double f64();
  void f64s(std::span<double> out);
  std::string str();
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const unsigned char> take(std::size_t n);

  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes);

// Model container: "ADPR", u32 format version, ModelConfig, per-layer
// (heads, d_ff), then every tensor of Params::tensors() as f64 LE.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<unsigned char> serialize_model(const TransformerLM& model);
TransformerLM deserialize_model(std::span<const unsigned char> bytes);
void save_model(const TransformerLM& model, const std::filesystem::path& path);
TransformerLM load_model(const std::filesystem::path& path);

// Content hash of the serialized container.
std::string model_fingerprint(const TransformerLM& model);

}  // namespace adapruner
