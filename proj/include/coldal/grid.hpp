#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace coldal {

struct Size3 {
  int d = 0, h = 0, w = 0;

  friend bool operator==(const Size3&, const Size3&) = default;

  std::int64_t voxels() const {
    return static_cast<std::int64_t>(d) * h * w;
  }
  bool fits_inside(const Size3& outer) const {
    return d <= outer.d && h <= outer.h && w <= outer.w;
  }
};

inline std::int64_t grid_index(const Size3& s, int d, int h, int w) {
  return (static_cast<std::int64_t>(d) * s.h + h) * s.w + w;
}

// Raw scalar grid (HU-like intensities). C order, w fastest. Spacing is
// metadata only; nothing here resamples.
struct Volume3D {
  std::string id;
  Size3 size;
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  std::vector<float> data;

  float at(int d, int h, int w) const { return data[grid_index(size, d, h, w)]; }
  float& at(int d, int h, int w) { return data[grid_index(size, d, h, w)]; }
};

// Integer class grid paired with a Volume3D of the same shape.
struct LabelMap {
  Size3 size;
  std::uint32_t num_classes = 2;
  std::vector<std::uint32_t> data;

  std::uint32_t at(int d, int h, int w) const {
    return data[grid_index(size, d, h, w)];
  }
  std::uint32_t& at(int d, int h, int w) {
    return data[grid_index(size, d, h, w)];
  }
};

// Per-class probability grid, channel-major over the same lattice.
struct ProbMap {
  int channels = 0;
  Size3 size;
  std::vector<float> data;

  std::int64_t index(int c, int d, int h, int w) const {
    return (static_cast<std::int64_t>(c) * size.d + d) * size.h * size.w +
           static_cast<std::int64_t>(h) * size.w + w;
  }
  float at(int c, int d, int h, int w) const { return data[index(c, d, h, w)]; }
  float& at(int c, int d, int h, int w) { return data[index(c, d, h, w)]; }
};

// Cubic (or box) window cut out of a volume, optionally with its label cut.
struct Patch {
  Size3 origin;
  Size3 size;
  std::vector<float> image;
  std::optional<std::vector<std::uint32_t>> label;
};

inline void validate(const Volume3D& v) {
  if (v.size.d < 1 || v.size.h < 1 || v.size.w < 1)
    throw std::invalid_argument("Volume3D: dims must be >= 1");
  if (v.data.size() != static_cast<std::size_t>(v.size.voxels()))
    throw std::invalid_argument("Volume3D: payload size mismatch");
  for (float s : v.spacing)
    if (!(s > 0.0f)) throw std::invalid_argument("Volume3D: spacing must be > 0");
  for (float x : v.data)
    if (!std::isfinite(x)) throw std::invalid_argument("Volume3D: non-finite value");
}

inline void validate(const LabelMap& m) {
  if (m.size.d < 1 || m.size.h < 1 || m.size.w < 1)
    throw std::invalid_argument("LabelMap: dims must be >= 1");
  if (m.num_classes < 2) throw std::invalid_argument("LabelMap: num_classes must be >= 2");
  if (m.data.size() != static_cast<std::size_t>(m.size.voxels()))
    throw std::invalid_argument("LabelMap: payload size mismatch");
  for (std::uint32_t v : m.data)
    if (v >= m.num_classes) throw std::invalid_argument("LabelMap: class index out of range");
}

inline void validate(const ProbMap& p) {
  if (p.channels < 1) throw std::invalid_argument("ProbMap: channels must be >= 1");
  if (p.data.size() != static_cast<std::size_t>(p.channels) * p.size.voxels())
    throw std::invalid_argument("ProbMap: payload size mismatch");
  const std::int64_t n = p.size.voxels();
  for (std::int64_t v = 0; v < n; ++v) {
    double sum = 0.0;
    for (int c = 0; c < p.channels; ++c) {
      const float x = p.data[static_cast<std::int64_t>(c) * n + v];
      if (!(x >= 0.0f && x <= 1.0f))
        throw std::invalid_argument("ProbMap: value outside [0,1]");
      sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-4)
      throw std::invalid_argument("ProbMap: per-voxel channel sum not 1");
  }
}

// Clip to [level - width/2, level + width/2], then map affinely to [0,1].
inline Volume3D window_normalize(const Volume3D& v, float level, float width) {
  if (!std::isfinite(level) || !std::isfinite(width))
    throw std::invalid_argument("window_normalize: non-finite level/width");
  if (!(width > 0.0f))
    throw std::invalid_argument("window_normalize: width must be > 0");
  const float lo = level - width / 2.0f;
  Volume3D out = v;
  for (float& x : out.data) {
    float t = (x - lo) / width;
    x = t < 0.0f ? 0.0f : (t > 1.0f ? 1.0f : t);
  }
  return out;
}

inline Patch extract_patch(const Volume3D& v, const LabelMap* lbl,
                           Size3 origin, Size3 size) {
  if (size.d < 1 || size.h < 1 || size.w < 1)
    throw std::out_of_range("extract_patch: size components must be >= 1");
  if (origin.d < 0 || origin.h < 0 || origin.w < 0 ||
      origin.d + size.d > v.size.d || origin.h + size.h > v.size.h ||
      origin.w + size.w > v.size.w)
    throw std::out_of_range("extract_patch: window exceeds volume extent");
  if (lbl && !(lbl->size == v.size))
    throw std::invalid_argument("extract_patch: label shape mismatch");

  Patch p;
  p.origin = origin;
  p.size = size;
  p.image.resize(static_cast<std::size_t>(size.voxels()));
  if (lbl) p.label.emplace(static_cast<std::size_t>(size.voxels()));
  std::size_t k = 0;
  for (int d = 0; d < size.d; ++d)
    for (int h = 0; h < size.h; ++h)
      for (int w = 0; w < size.w; ++w, ++k) {
        p.image[k] = v.at(origin.d + d, origin.h + h, origin.w + w);
        if (lbl)
          (*p.label)[k] = lbl->at(origin.d + d, origin.h + h, origin.w + w);
      }
  return p;
}

// Center the original data with floor bias toward low indices; fill the rest.
inline Volume3D pad_to(const Volume3D& v, Size3 size, float fill) {
  if (!v.size.fits_inside(size))
    throw std::invalid_argument("pad_to: target smaller than volume extent");
  if (v.size == size) return v;

  Volume3D out;
  out.id = v.id;
  out.size = size;
  out.spacing = v.spacing;
  out.data.assign(static_cast<std::size_t>(size.voxels()), fill);
  const int od = (size.d - v.size.d) / 2;
  const int oh = (size.h - v.size.h) / 2;
  const int ow = (size.w - v.size.w) / 2;
  for (int d = 0; d < v.size.d; ++d)
    for (int h = 0; h < v.size.h; ++h)
      for (int w = 0; w < v.size.w; ++w)
        out.at(od + d, oh + h, ow + w) = v.at(d, h, w);
  return out;
}

// Offset of the original data inside pad_to(v, size) output.
inline Size3 pad_offset(const Size3& from, const Size3& to) {
  return {(to.d - from.d) / 2, (to.h - from.h) / 2, (to.w - from.w) / 2};
}

inline LabelMap argmax_labels(const ProbMap& p) {
  LabelMap out;
  out.size = p.size;
  out.num_classes = static_cast<std::uint32_t>(p.channels);
  const std::int64_t n = p.size.voxels();
  out.data.resize(static_cast<std::size_t>(n));
  for (std::int64_t v = 0; v < n; ++v) {
    int best = 0;
    float best_p = p.data[v];
    for (int c = 1; c < p.channels; ++c) {
      const float x = p.data[static_cast<std::int64_t>(c) * n + v];
      if (x > best_p) {
        best_p = x;
        best = c;
      }
    }
    out.data[v] = static_cast<std::uint32_t>(best);
  }
  return out;
}

}  // namespace coldal
