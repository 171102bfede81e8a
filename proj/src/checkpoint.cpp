#include "adapruner/checkpoint.hpp"

#include "adapruner/common.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace adapruner {

void ByteWriter::magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void ByteWriter::i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::f64s(std::span<const double> values) {
  bytes_.reserve(bytes_.size() + 8 * values.size());
  for (double v : values) f64(v);
}

void ByteWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  magic(s);
}

std::span<const unsigned char> ByteReader::take(std::size_t n) {
  if (bytes_.size() - pos_ < n) throw ConfigError("truncated binary container");
  auto out = bytes_.subspan(pos_, n);
  pos_ += n;
  return out;
}

void ByteReader::expect_magic(std::string_view tag) {
  auto got = take(tag.size());
  if (!std::equal(got.begin(), got.end(), tag.begin())) {
    throw ConfigError("bad magic: expected '" + std::string(tag) + "'");
  }
}

std::uint32_t ByteReader::u32() {
  auto b = take(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  auto b = take(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::int64_t ByteReader::i64() { return static_cast<std::int64_t>(u64()); }

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

void ByteReader::f64s(std::span<double> out) {
  for (double& v : out) v = f64();
}

std::string ByteReader::str() {
  const std::uint32_t n = u32();
  auto b = take(n);
  return {b.begin(), b.end()};
}

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RuntimeError("short write to " + path.string());
}

std::vector<unsigned char> serialize_model(const TransformerLM& model) {
  const auto& c = model.config;
  ByteWriter w;
  w.magic("ADPR");
  w.u32(kCheckpointVersion);
  w.i64(c.vocab_size);
  w.i64(c.d_model);
  w.i64(c.n_layers);
  w.i64(c.n_heads);
  w.i64(c.d_ff);
  w.i64(c.max_seq_len);
  w.i64(c.prune_begin);
  w.i64(c.prune_end);
  w.u64(c.seed);
  for (int l = 0; l < c.n_layers; ++l) {
    w.i64(model.heads(l));
    w.i64(model.ff(l));
  }
  for (const auto& t : model.params.tensors()) w.f64s(t.values());
  return w.bytes();
}

TransformerLM deserialize_model(std::span<const unsigned char> bytes) {
  ByteReader r(bytes);
  r.expect_magic("ADPR");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig c;
  auto dim = [&](const char* what) {
    const std::int64_t v = r.i64();
    if (v < 0 || v > (std::int64_t{1} << 30)) {
      throw ConfigError(std::string("checkpoint field ") + what + " out of range");
    }
    return static_cast<int>(v);
  };
  c.vocab_size = dim("vocab_size");
  c.d_model = dim("d_model");
  c.n_layers = dim("n_layers");
  c.n_heads = dim("n_heads");
  c.d_ff = dim("d_ff");
  c.max_seq_len = dim("max_seq_len");
  c.prune_begin = dim("prune_begin");
  c.prune_end = dim("prune_end");
  c.seed = r.u64();
  c.validate();

  TransformerLM model = init_model(c);
  const int hd = c.head_dim();
  for (int l = 0; l < c.n_layers; ++l) {
    const int heads = dim("heads");
    const int ff = dim("ff");
    if (heads > c.n_heads || ff > c.d_ff) throw ConfigError("layer shape exceeds config");
    auto& layer = model.params.layers[l];
    layer.w_q.resize(c.d_model, heads * hd);
    layer.w_k.resize(c.d_model, heads * hd);
    layer.w_v.resize(c.d_model, heads * hd);
    layer.w_o.resize(heads * hd, c.d_model);
    layer.w_up.resize(c.d_model, ff);
    layer.w_down.resize(ff, c.d_model);
  }
  for (auto& t : model.params.tensors()) r.f64s(t.values());
  if (!r.done()) throw ConfigError("trailing bytes after checkpoint tensors");
  return model;
}

void save_model(const TransformerLM& model, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_model(model));
}

TransformerLM load_model(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return deserialize_model(bytes);
}

std::string model_fingerprint(const TransformerLM& model) {
  const auto bytes = serialize_model(model);
  return Fingerprint().add_bytes(bytes.data(), bytes.size()).hex();
}

}  // namespace adapruner
