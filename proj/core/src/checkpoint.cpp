#include "murag/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace murag {

namespace binary {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void put_string16(std::string& out, const std::string& s) {
  if (s.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("string too long: " + s.substr(0, 32));
  put_u16(out, static_cast<std::uint16_t>(s.size()));
  out += s;
}

std::string Reader::raw(std::size_t n) {
  if (bytes_.size() - pos_ < n) throw FormatError("truncated input");
  std::string s = bytes_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::uint8_t Reader::u8() { return static_cast<std::uint8_t>(raw(1)[0]); }

std::uint16_t Reader::u16() {
  const auto s = raw(2);
  return static_cast<std::uint16_t>(static_cast<std::uint8_t>(s[0]) | (static_cast<std::uint8_t>(s[1]) << 8));
}

std::uint32_t Reader::u32() {
  const auto s = raw(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(s[static_cast<std::size_t>(i)]);
  return v;
}

float Reader::f32() { return std::bit_cast<float>(u32()); }

std::string Reader::string16() { return raw(u16()); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace binary

const CheckpointTensor& Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw FormatError("checkpoint has no tensor named '" + name + "'");
}

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  std::string out = "MRGK";
  binary::put_u32(out, kCheckpointVersion);
  binary::put_u32(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& t : checkpoint.tensors) {
    if (t.shape.size() > 255) throw FormatError("rank too large for '" + t.name + "'");
    if (shape_size(t.shape) != t.values.size()) throw FormatError("value count mismatch for '" + t.name + "'");
    binary::put_string16(out, t.name);
    binary::put_u8(out, static_cast<std::uint8_t>(t.shape.size()));
    for (auto e : t.shape) binary::put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.values) binary::put_f32(out, v);
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  binary::Reader in(bytes);
  if (in.raw(4) != "MRGK") throw FormatError("not a checkpoint (bad magic)");
  const auto version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = in.string16();
    const auto rank = in.u8();
    for (std::uint8_t r = 0; r < rank; ++r) t.shape.push_back(in.u32());
    const auto n = shape_size(t.shape);
    if (n > bytes.size()) throw FormatError("implausible tensor size for '" + t.name + "'");
    t.values.resize(n);
    for (auto& v : t.values) v = in.f32();
    ck.tensors.push_back(std::move(t));
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  binary::write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(binary::read_file(path)); }

template <typename T>
Checkpoint make_checkpoint(const ParameterList<T>& params) {
  Checkpoint ck;
  for (const auto& p : params) {
    CheckpointTensor t{p.name, p.tensor.shape(), {}};
    t.values.reserve(p.tensor.size());
    for (T v : p.tensor.data()) t.values.push_back(static_cast<float>(v));
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

template <typename T>
void restore_checkpoint(const Checkpoint& checkpoint, ParameterList<T>& params) {
  if (checkpoint.tensors.size() != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(checkpoint.tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (auto& p : params) {
    const auto& t = checkpoint.find(p.name);
    if (t.shape != p.tensor.shape()) {
      throw FormatError("shape mismatch for '" + p.name + "': checkpoint " + shape_string(t.shape) + ", model " +
                        shape_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(t.values[i]);
  }
}

template Checkpoint make_checkpoint(const ParameterList<float>&);
template Checkpoint make_checkpoint(const ParameterList<double>&);
template void restore_checkpoint(const Checkpoint&, ParameterList<float>&);
template void restore_checkpoint(const Checkpoint&, ParameterList<double>&);

Digest sha256(std::string_view bytes) {
  Digest d{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), d.data(), &len, EVP_sha256(), nullptr) != 1 || len != d.size()) {
    throw std::runtime_error("sha256 failed");
  }
  return d;
}

std::string to_hex(const Digest& digest) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  for (auto b : digest) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 0xf]);
  }
  return s;
}

}  // namespace murag
