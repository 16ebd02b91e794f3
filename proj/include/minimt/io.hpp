#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace minimt {

// Binary parameter container shared by f32 model files, quantized model
// files, and checkpoints:
//   magic "SQNT", u32 version = 1,
//   u32 config length + UTF-8 JSON config block,
//   u32 parameter count, then per parameter:
//     u16 name length + UTF-8 name,
//     u8 dtype (0 = f32, 1 = int8), u8 rank, u32 dims[rank],
//     f32 scale (int8 only), raw little-endian payload.
// Round-trips bit-exactly.

struct ParamRecord {
  std::string name;
  std::uint8_t dtype = 0;  // 0 = f32, 1 = int8
  std::vector<std::uint32_t> dims;
  float scale = 0.0f;  // int8 only
  std::vector<std::uint8_t> payload;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

struct ParamFile {
  std::string config_json;
  std::vector<ParamRecord> params;

  const ParamRecord* find(const std::string& name) const;
};

void write_param_file(const std::string& path, const ParamFile& file);
ParamFile read_param_file(const std::string& path);

}  // namespace minimt
