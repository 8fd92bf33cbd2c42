#pragma once

// Named-tensor checkpoint file:
//   magic "DEERCKP1", u32 version, u64 tensor count, then per tensor:
//   u32 name length, name bytes, u32 rank, u64 dims..., float32 data.
// All integers and floats little-endian. Data is stored as float32 even when
// the in-memory scalar type is double.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "deer/common.hpp"
#include "deer/tensor.hpp"

namespace deer {

inline constexpr char kCheckpointMagic[8] = {'D', 'E', 'E', 'R', 'C', 'K', 'P', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& buf, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;
  explicit ByteReader(const std::string& b) : buf(b) {}
  void need(size_t n) const {
    if (pos + n > buf.size()) throw InputError("checkpoint truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
  std::string buf;
  buf.append(kCheckpointMagic, 8);
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u64(buf, uint64_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(buf, uint32_t(name.size()));
    buf.append(name);
    detail::put_u32(buf, uint32_t(t.shape().size()));
    for (int64_t d : t.shape()) detail::put_u64(buf, uint64_t(d));
    for (int64_t i = 0; i < t.numel(); ++i) detail::put_f32(buf, float(t.data()[i]));
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("cannot write checkpoint: " + path);
  os.write(buf.data(), std::streamsize(buf.size()));
  if (!os) throw InputError("short write on checkpoint: " + path);
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  detail::ByteReader r(buf);
  std::string magic = r.bytes(8);
  if (std::memcmp(magic.data(), kCheckpointMagic, 8) != 0) throw InputError("bad checkpoint magic in " + path);
  uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw InputError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  uint64_t count = r.u64();
  std::vector<std::pair<std::string, Tensor<T>>> out;
  out.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t name_len = r.u32();
    std::string name = r.bytes(name_len);
    uint32_t rank = r.u32();
    Shape shape(rank);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = int64_t(r.u64());
      numel *= shape[d];
    }
    std::vector<T> data(static_cast<size_t>(numel));
    for (int64_t e = 0; e < numel; ++e) data[size_t(e)] = T(r.f32());
    out.emplace_back(std::move(name), Tensor<T>::from(std::move(shape), std::move(data)));
  }
  if (r.pos != buf.size()) throw InputError("trailing bytes in checkpoint " + path);
  return out;
}

}  // namespace deer
