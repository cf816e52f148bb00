#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "coldal/errors.hpp"
#include "coldal/grid.hpp"

namespace coldal {

// CAL3D volume container.
//
//   magic   6 bytes  43 41 4C 33 44 00
//   version u16      1
//   kind    u8       0 = Volume3D, 1 = LabelMap, 2 = ProbMap
//   channels u32     1 for volumes; class count for labels; C for prob maps
//   dims    u32 x3   D, H, W
//   spacing f32 x3
//   payload          f32 (kinds 0/2) or u8 (kind 1), C order, channel-major
//
// Everything little-endian. Label payloads are u8 on disk, so label maps
// with 256+ classes (connected-component outputs can get there) are not
// serializable and writing one is a FormatError.

namespace detail {

inline void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}
inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

  void need(std::size_t n) const {
    if (pos_ + n > n_) throw TruncationError("unexpected end of payload");
  }
  std::uint8_t u8() {
    need(1);
    return p_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(p_[pos_] | (p_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, p_ + pos_, n);
    pos_ += n;
  }
  bool at_end() const { return pos_ == n_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

constexpr std::uint8_t kVolumeMagic[6] = {0x43, 0x41, 0x4C, 0x33, 0x44, 0x00};
constexpr std::uint16_t kVolumeVersion = 1;

inline void check_magic(ByteReader& r, const std::uint8_t (&magic)[6], const char* what) {
  std::uint8_t seen[6];
  try {
    r.raw(seen, 6);
  } catch (const TruncationError&) {
    throw MagicError(std::string(what) + ": file too short for magic");
  }
  if (std::memcmp(seen, magic, 6) != 0)
    throw MagicError(std::string(what) + ": magic mismatch");
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& path,
                       const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

inline void put_grid_header(std::vector<std::uint8_t>& out, std::uint8_t kind,
                            std::uint32_t channels, Size3 size,
                            const std::array<float, 3>& spacing) {
  put_bytes(out, kVolumeMagic, 6);
  put_u16(out, kVolumeVersion);
  out.push_back(kind);
  put_u32(out, channels);
  put_u32(out, static_cast<std::uint32_t>(size.d));
  put_u32(out, static_cast<std::uint32_t>(size.h));
  put_u32(out, static_cast<std::uint32_t>(size.w));
  for (float s : spacing) put_f32(out, s);
}

struct GridHeader {
  std::uint8_t kind;
  std::uint32_t channels;
  Size3 size;
  std::array<float, 3> spacing;
};

inline GridHeader read_grid_header(ByteReader& r) {
  check_magic(r, kVolumeMagic, "CAL3D");
  const std::uint16_t version = r.u16();
  if (version != kVolumeVersion)
    throw VersionError("CAL3D: unsupported version " + std::to_string(version));
  GridHeader h;
  h.kind = r.u8();
  if (h.kind > 2) throw FormatError("CAL3D: unknown kind " + std::to_string(h.kind));
  h.channels = r.u32();
  h.size.d = static_cast<int>(r.u32());
  h.size.h = static_cast<int>(r.u32());
  h.size.w = static_cast<int>(r.u32());
  if (h.size.d < 1 || h.size.h < 1 || h.size.w < 1 || h.channels < 1)
    throw FormatError("CAL3D: degenerate dims");
  for (float& s : h.spacing) s = r.f32();
  return h;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_volume(const Volume3D& v) {
  validate(v);
  std::vector<std::uint8_t> out;
  detail::put_grid_header(out, 0, 1, v.size, v.spacing);
  for (float x : v.data) detail::put_f32(out, x);
  return out;
}

inline std::vector<std::uint8_t> encode_label(const LabelMap& m) {
  validate(m);
  if (m.num_classes > 256)
    throw FormatError("CAL3D: label map with > 256 classes is not serializable");
  std::vector<std::uint8_t> out;
  detail::put_grid_header(out, 1, m.num_classes, m.size, {1.0f, 1.0f, 1.0f});
  for (std::uint32_t x : m.data) out.push_back(static_cast<std::uint8_t>(x));
  return out;
}

inline std::vector<std::uint8_t> encode_prob(const ProbMap& p) {
  validate(p);
  std::vector<std::uint8_t> out;
  detail::put_grid_header(out, 2, static_cast<std::uint32_t>(p.channels), p.size,
                          {1.0f, 1.0f, 1.0f});
  for (float x : p.data) detail::put_f32(out, x);
  return out;
}

inline Volume3D decode_volume(const std::vector<std::uint8_t>& bytes,
                              std::string id = {}) {
  detail::ByteReader r(bytes.data(), bytes.size());
  const auto h = detail::read_grid_header(r);
  if (h.kind != 0) throw FormatError("CAL3D: expected kind 0 (Volume3D)");
  if (h.channels != 1) throw FormatError("CAL3D: Volume3D must have 1 channel");
  Volume3D v;
  v.id = std::move(id);
  v.size = h.size;
  v.spacing = h.spacing;
  v.data.resize(static_cast<std::size_t>(h.size.voxels()));
  for (float& x : v.data) x = r.f32();
  if (!r.at_end()) throw TruncationError("CAL3D: trailing bytes after payload");
  validate(v);
  return v;
}

inline LabelMap decode_label(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes.data(), bytes.size());
  const auto h = detail::read_grid_header(r);
  if (h.kind != 1) throw FormatError("CAL3D: expected kind 1 (LabelMap)");
  LabelMap m;
  m.size = h.size;
  m.num_classes = h.channels;
  m.data.resize(static_cast<std::size_t>(h.size.voxels()));
  for (std::uint32_t& x : m.data) x = r.u8();
  if (!r.at_end()) throw TruncationError("CAL3D: trailing bytes after payload");
  validate(m);
  return m;
}

inline ProbMap decode_prob(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes.data(), bytes.size());
  const auto h = detail::read_grid_header(r);
  if (h.kind != 2) throw FormatError("CAL3D: expected kind 2 (ProbMap)");
  ProbMap p;
  p.channels = static_cast<int>(h.channels);
  p.size = h.size;
  p.data.resize(static_cast<std::size_t>(h.channels) * h.size.voxels());
  for (float& x : p.data) x = r.f32();
  if (!r.at_end()) throw TruncationError("CAL3D: trailing bytes after payload");
  validate(p);
  return p;
}

inline void write_volume(const std::filesystem::path& path, const Volume3D& v) {
  detail::write_file(path, encode_volume(v));
}
inline Volume3D read_volume(const std::filesystem::path& path) {
  return decode_volume(detail::read_file(path), path.stem().string());
}

inline void write_label(const std::filesystem::path& path, const LabelMap& m) {
  detail::write_file(path, encode_label(m));
}
inline LabelMap read_label(const std::filesystem::path& path) {
  return decode_label(detail::read_file(path));
}

inline void write_prob(const std::filesystem::path& path, const ProbMap& p) {
  detail::write_file(path, encode_prob(p));
}
inline ProbMap read_prob(const std::filesystem::path& path) {
  return decode_prob(detail::read_file(path));
}

}  // namespace coldal
