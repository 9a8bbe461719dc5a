#pragma once

// Named-tensor container used for checkpoints and precomputed audio features.
//
//   header : "PHQF" | version u32 | tensor count u32 | json length u32 | json bytes
//   tensor : name length u32 | UTF-8 name | dtype u32 (1 = f32) | rank u32 |
//            rank x dim u32 | row-major f32 payload
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "phqfuse/error.hpp"
#include "phqfuse/lora.hpp"
#include "phqfuse/tensor.hpp"

namespace phqfuse::io {

inline constexpr char kMagic[4] = {'P', 'H', 'Q', 'F'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 1;

struct TensorFile {
  std::string config_json = "{}";
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.tensor;
    return nullptr;
  }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(msg + " at offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) fail(std::string("truncated file while reading ") + what);
  }

  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const TensorFile& file) {
  std::set<std::string> names;
  for (const auto& t : file.tensors)
    if (!names.insert(t.name).second) throw ContractError("duplicate tensor name '" + t.name + "'");
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  detail::put_u32(out, kVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(file.tensors.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(file.config_json.size()));
  out.insert(out.end(), file.config_json.begin(), file.config_json.end());
  for (const auto& [name, t] : file.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, kDtypeF32);
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline TensorFile deserialize(const std::vector<std::uint8_t>& buf) {
  detail::Reader rd(buf);
  if (rd.bytes(4, "magic") != std::string(kMagic, 4)) throw FormatError("bad magic at offset 0");
  const auto version = rd.u32("version");
  if (version != kVersion)
    throw FormatError("unsupported version " + std::to_string(version) + " at offset 4");
  const auto count = rd.u32("tensor count");
  TensorFile file;
  file.config_json = rd.bytes(rd.u32("config length"), "config json");
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = rd.offset();
    std::string name = rd.bytes(rd.u32("name length"), "tensor name");
    if (!names.insert(name).second) rd.fail("duplicate tensor name '" + name + "'");
    const auto dtype = rd.u32("dtype");
    if (dtype != kDtypeF32) rd.fail("unknown dtype tag " + std::to_string(dtype));
    const auto rank = rd.u32("rank");
    if (rank == 0 || rank > 8) rd.fail("invalid rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = rd.u32("dimension");
      if (d == 0) rd.fail("zero dimension in tensor '" + name + "'");
      shape.push_back(d);
      numel *= d;
    }
    if (numel * 4 > buf.size()) rd.fail("tensor '" + name + "' larger than file");
    std::vector<float> data(numel);
    for (auto& v : data) v = std::bit_cast<float>(rd.u32("payload"));
    try {
      file.tensors.push_back({std::move(name), Tensor::from(std::move(shape), std::move(data))});
    } catch (const NumericError& e) {
      throw FormatError(std::string("non-finite payload in tensor starting at offset ") + std::to_string(start));
    }
  }
  if (!rd.done()) rd.fail("trailing bytes after " + std::to_string(count) + " tensors");
  return file;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline void save(const TensorFile& file, const std::filesystem::path& path) { write_bytes(path, serialize(file)); }

inline TensorFile load(const std::filesystem::path& path) { return deserialize(read_bytes(path)); }

}  // namespace phqfuse::io
