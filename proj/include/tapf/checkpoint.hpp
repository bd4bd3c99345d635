#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "tapf/codec.hpp"
#include "tapf/errors.hpp"
#include "tapf/io_bytes.hpp"

namespace tapf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct RawTensor {
  std::string name;
  std::uint8_t dtype = 1;  // 0 = f32, 1 = f64
  std::vector<std::uint32_t> dims;
  std::vector<double> values;  // widened for inspection; bits preserved per dtype
};

template <class T>
std::string serialize_checkpoint(const ParamRegistry<T>& reg) {
  std::string out;
  out += "TAPF";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, std::uint32_t(reg.items().size()));
  for (const auto& e : reg.items()) {
    if (e.name.size() > 0xffff)
      throw ContractError("checkpoint: tensor name too long: " + e.name);
    detail::put_u16(out, std::uint16_t(e.name.size()));
    out += e.name;
    out.push_back(sizeof(T) == 4 ? char(0) : char(1));
    const auto& shape = e.tensor.shape();
    out.push_back(char(shape.size()));
    for (std::size_t d : shape) detail::put_u32(out, std::uint32_t(d));
    for (T v : e.tensor.data()) {
      if constexpr (sizeof(T) == 4) {
        std::uint32_t bits;
        float f = float(v);
        std::memcpy(&bits, &f, 4);
        detail::put_u32(out, bits);
      } else {
        std::uint64_t bits;
        double f = double(v);
        std::memcpy(&bits, &f, 8);
        detail::put_u64(out, bits);
      }
    }
  }
  return out;
}

inline std::vector<RawTensor> parse_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes, "checkpoint");
  const char* magic = r.take(4, "magic");
  if (std::memcmp(magic, "TAPF", 4) != 0)
    throw FormatError("checkpoint: bad magic", 0);
  std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
  std::uint32_t count = r.u32("tensor count");
  std::vector<RawTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    RawTensor t;
    std::uint16_t name_len = r.u16("name length");
    const char* name = r.take(name_len, "name");
    t.name.assign(name, name_len);
    std::size_t dtype_pos = r.pos();
    t.dtype = r.u8("dtype tag");
    if (t.dtype > 1)
      throw FormatError("checkpoint: unknown dtype tag " + std::to_string(t.dtype),
                        dtype_pos);
    std::uint8_t rank = r.u8("rank");
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      t.dims.push_back(r.u32("dimension"));
      if (t.dims.back() != 0 &&
          numel > std::numeric_limits<std::size_t>::max() / t.dims.back())
        throw FormatError("checkpoint: dimension product overflows", r.pos());
      numel *= t.dims.back();
    }
    // Check the advertised size against the actual payload before allocating,
    // so corrupt headers fail structurally instead of via bad_alloc.
    std::size_t elem = t.dtype == 0 ? 4 : 8;
    if (numel > (bytes.size() - r.pos()) / elem)
      throw FormatError("checkpoint: tensor '" + t.name +
                            "' payload exceeds remaining bytes",
                        r.pos());
    t.values.resize(numel);
    for (std::size_t j = 0; j < numel; ++j) {
      if (t.dtype == 0) {
        std::uint32_t bits = r.u32("payload");
        float f;
        std::memcpy(&f, &bits, 4);
        t.values[j] = double(f);
      } else {
        std::uint64_t bits = r.u64("payload");
        double f;
        std::memcpy(&f, &bits, 8);
        t.values[j] = f;
      }
    }
    tensors.push_back(std::move(t));
  }
  if (!r.done())
    throw FormatError("checkpoint: trailing bytes after last tensor", r.pos());
  return tensors;
}

template <class T>
void save_checkpoint(const std::string& path, const ParamRegistry<T>& reg) {
  detail::write_file_bytes(path, serialize_checkpoint(reg));
}

inline std::vector<RawTensor> read_checkpoint(const std::string& path) {
  return parse_checkpoint(detail::read_file_bytes(path));
}

// Loads values into an already-built registry. Every registry entry must be
// present with matching dims; dtype may differ (f32 widens exactly, f64
// narrows by rounding).
template <class T>
void load_checkpoint(const std::string& path, ParamRegistry<T>& reg) {
  auto tensors = read_checkpoint(path);
  if (tensors.size() != reg.items().size())
    throw ConfigError("checkpoint: file has " + std::to_string(tensors.size()) +
                      " tensors, registry expects " +
                      std::to_string(reg.items().size()));
  for (auto& e : reg.items()) {
    const RawTensor* found = nullptr;
    for (const auto& t : tensors)
      if (t.name == e.name) {
        found = &t;
        break;
      }
    if (!found)
      throw ConfigError("checkpoint: missing tensor '" + e.name + "'");
    const auto& shape = e.tensor.shape();
    bool dims_ok = found->dims.size() == shape.size();
    for (std::size_t i = 0; dims_ok && i < shape.size(); ++i)
      dims_ok = found->dims[i] == shape[i];
    if (!dims_ok)
      throw ShapeError("checkpoint: tensor '" + e.name + "' has mismatched dims");
    auto& data = e.tensor.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (found->dtype == 0)
        data[i] = T(float(found->values[i]));
      else
        data[i] = T(found->values[i]);
    }
  }
}

}  // namespace tapf
