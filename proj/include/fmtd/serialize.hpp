#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fmtd/model.hpp"

namespace fmtd {

// Layout (all integers little-endian):
//   "FMTD" | u32 version | u32 len + UTF-8 descriptor | u32 tensor count |
//   per tensor: u32 len + name, u8 dtype (0 = f32), u8 rank, rank x u32 dims, payload |
//   u32 CRC32 of every preceding byte
inline constexpr char kMagic[4] = {'F', 'M', 'T', 'D'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  std::uint8_t u8() {
    need(1);
    return p_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* at = p_ + pos_;
    pos_ += n;
    return at;
  }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  void need(std::size_t k) const {
    if (k > n_ - pos_) throw format_error(format_error::kind::truncated, "fMTD file is truncated");
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// A descriptor string plus named f32 tensors; the on-disk unit for models and suites.
struct TensorBundle {
  std::string descriptor;
  std::vector<NamedTensor<float>> tensors;
  friend bool operator==(const TensorBundle&, const TensorBundle&) = default;
};

inline std::vector<std::uint8_t> encode_bundle(const TensorBundle& bundle) {
  detail::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kFormatVersion);
  w.str(bundle.descriptor);
  w.u32(static_cast<std::uint32_t>(bundle.tensors.size()));
  for (const auto& [name, t] : bundle.tensors) {
    w.str(name);
    w.u8(kDtypeF32);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.dims()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.values()) w.u32(std::bit_cast<std::uint32_t>(v));
  }
  const std::uint32_t crc = crc32_of(w.buffer().data(), w.buffer().size());
  w.u32(crc);
  return std::move(w.buffer());
}

inline TensorBundle decode_bundle(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw format_error(format_error::kind::bad_magic, "not an fMTD model (bad magic)");
  detail::ByteReader r(bytes.data() + 4, bytes.size() - 4);
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw format_error(format_error::kind::version, "unsupported fMTD format version " + std::to_string(version) +
                                                        " (expected " + std::to_string(kFormatVersion) + ")");
  TensorBundle out;
  out.descriptor = r.str();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor<float> nt;
    nt.name = r.str();
    const std::uint8_t dtype = r.u8();
    if (dtype != kDtypeF32)
      throw format_error(format_error::kind::malformed, "tensor '" + nt.name + "' has unknown dtype code " +
                                                            std::to_string(dtype));
    const std::uint8_t rank = r.u8();
    std::vector<std::size_t> dims(rank);
    std::size_t n = 1;
    for (auto& d : dims) {
      d = r.u32();
      if (d != 0 && n > r.remaining() / d) throw format_error(format_error::kind::truncated, "fMTD file is truncated");
      n *= d;
    }
    if (n > r.remaining() / 4) throw format_error(format_error::kind::truncated, "fMTD file is truncated");
    const std::uint8_t* payload = r.take(n * 4);
    std::vector<float> data(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(payload[4 * k + b]) << (8 * b);
      data[k] = std::bit_cast<float>(u);
    }
    nt.tensor = Tensor<float>(std::move(dims), std::move(data));
    out.tensors.push_back(std::move(nt));
  }
  const std::uint32_t stored = r.u32();
  if (r.remaining() != 0)
    throw format_error(format_error::kind::malformed, "trailing bytes after fMTD checksum");
  const std::uint32_t actual = crc32_of(bytes.data(), bytes.size() - 4);
  if (stored != actual)
    throw format_error(format_error::kind::checksum,
                       "fMTD checksum mismatch (stored " + hex32(stored) + ", computed " + hex32(actual) + ")");
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("write failed for " + path.string());
}

inline std::vector<std::uint8_t> encode_model(const Model& model) {
  model.check_consistent();
  return encode_bundle({model.arch.to_string(), model.tensors});
}

inline Model decode_model(const std::vector<std::uint8_t>& bytes) {
  TensorBundle b = decode_bundle(bytes);
  Model m{ArchitectureSpec::parse(b.descriptor), std::move(b.tensors), {}};
  m.check_consistent();
  return m;
}

inline void save_model(const Model& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_model(model));
}

inline Model load_model(const std::filesystem::path& path) { return decode_model(read_file_bytes(path)); }

/// CRC32 of the serialized model, as 8 hex digits; identifies a model across artifacts.
inline std::string model_hash(const Model& model) {
  const auto bytes = encode_model(model);
  return hex32(crc32_of(bytes.data(), bytes.size()));
}

}  // namespace fmtd
