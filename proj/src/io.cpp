#include "minimt/io.hpp"

#include <cstring>
#include <fstream>

#include "minimt/errors.hpp"

namespace minimt {

namespace {

constexpr char kMagic[4] = {'S', 'Q', 'N', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));  // little-endian host assumed
}

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t len) {
    need(len);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), len);
    pos_ += len;
    return s;
  }

  std::vector<std::uint8_t> get_bytes(std::size_t len) {
    need(len);
    std::vector<std::uint8_t> b(data_ + pos_, data_ + pos_ + len);
    pos_ += len;
    return b;
  }

  bool done() const { return pos_ == size_; }

 private:
  void need(std::size_t n) {
    if (pos_ + n > size_) throw FormatError("truncated parameter file");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace

const ParamRecord* ParamFile::find(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return &p;
  return nullptr;
}

void write_param_file(const std::string& path, const ParamFile& file) {
  std::string out;
  out.append(kMagic, 4);
  put(out, kVersion);
  put(out, static_cast<std::uint32_t>(file.config_json.size()));
  out += file.config_json;
  put(out, static_cast<std::uint32_t>(file.params.size()));
  for (const auto& p : file.params) {
    if (p.name.size() > 0xffff) throw FormatError("parameter name too long");
    put(out, static_cast<std::uint16_t>(p.name.size()));
    out += p.name;
    put(out, p.dtype);
    put(out, static_cast<std::uint8_t>(p.dims.size()));
    for (auto d : p.dims) put(out, d);
    if (p.dtype == 1) put(out, p.scale);
    std::size_t elem = p.dtype == 0 ? 4 : 1;
    if (p.payload.size() != p.numel() * elem)
      throw FormatError("payload size mismatch for " + p.name);
    out.append(reinterpret_cast<const char*>(p.payload.data()),
               p.payload.size());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path);
}

ParamFile read_param_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  Reader r(bytes.data(), bytes.size());
  std::string magic = r.get_string(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw FormatError("bad magic in " + path);
  std::uint32_t version = r.get<std::uint32_t>();
  if (version != kVersion)
    throw FormatError("unsupported file version " + std::to_string(version));
  ParamFile out;
  std::uint32_t cfg_len = r.get<std::uint32_t>();
  out.config_json = r.get_string(cfg_len);
  std::uint32_t count = r.get<std::uint32_t>();
  out.params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ParamRecord p;
    std::uint16_t name_len = r.get<std::uint16_t>();
    p.name = r.get_string(name_len);
    p.dtype = r.get<std::uint8_t>();
    if (p.dtype > 1) throw FormatError("unknown dtype tag for " + p.name);
    std::uint8_t rank = r.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d)
      p.dims.push_back(r.get<std::uint32_t>());
    if (p.dtype == 1) p.scale = r.get<float>();
    std::size_t elem = p.dtype == 0 ? 4 : 1;
    p.payload = r.get_bytes(p.numel() * elem);
    out.params.push_back(std::move(p));
  }
  if (!r.done()) throw FormatError("trailing bytes in " + path);
  return out;
}

}  // namespace minimt
