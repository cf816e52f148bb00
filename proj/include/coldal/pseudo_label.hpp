#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "coldal/grid.hpp"

namespace coldal {

// Cold-start proxy labels: intensity thresholding inside a CT window plus
// connected-component analysis, keeping only the largest blobs.

inline LabelMap threshold_mask(const Volume3D& v, float lo, float hi) {
  if (lo > hi) throw std::invalid_argument("threshold_mask: lo > hi");
  LabelMap m;
  m.size = v.size;
  m.num_classes = 2;
  m.data.resize(v.data.size());
  for (std::size_t i = 0; i < v.data.size(); ++i)
    m.data[i] = (v.data[i] >= lo && v.data[i] <= hi) ? 1u : 0u;
  return m;
}

struct ComponentResult {
  LabelMap labels;                  // 0 = background, components 1..K
  std::vector<std::uint64_t> sizes;  // sizes[id-1] = voxel count
};

namespace detail {

// Union-find with path halving.
inline std::uint32_t uf_find(std::vector<std::uint32_t>& parent, std::uint32_t x) {
  while (parent[x] != x) {
    parent[x] = parent[parent[x]];
    x = parent[x];
  }
  return x;
}

inline void uf_union(std::vector<std::uint32_t>& parent, std::uint32_t a,
                     std::uint32_t b) {
  a = uf_find(parent, a);
  b = uf_find(parent, b);
  if (a != b) parent[std::max(a, b)] = std::min(a, b);
}

}  // namespace detail

// Two-pass labeling: a raster scan unions each foreground voxel with its
// already-visited neighbors, then a second pass maps union-find roots to
// dense ids in first-encounter scan order. Connectivity is 6 (faces) or
// 26 (faces, edges, corners).
inline ComponentResult connected_components(const LabelMap& mask, int connectivity) {
  if (connectivity != 6 && connectivity != 26)
    throw std::invalid_argument("connected_components: connectivity must be 6 or 26");
  for (std::uint32_t v : mask.data)
    if (v > 1)
      throw std::invalid_argument("connected_components: input must be binary");

  // Offsets to neighbors that precede the current voxel in scan order.
  std::vector<std::array<int, 3>> prior;
  if (connectivity == 6) {
    prior = {{-1, 0, 0}, {0, -1, 0}, {0, 0, -1}};
  } else {
    for (int dd = -1; dd <= 1; ++dd)
      for (int dh = -1; dh <= 1; ++dh)
        for (int dw = -1; dw <= 1; ++dw) {
          if (dd < 0 || (dd == 0 && dh < 0) || (dd == 0 && dh == 0 && dw < 0))
            prior.push_back({dd, dh, dw});
        }
  }

  const Size3 s = mask.size;
  std::vector<std::uint32_t> provisional(mask.data.size(), 0);
  std::vector<std::uint32_t> parent(1, 0);  // parent[0] unused

  for (int d = 0; d < s.d; ++d)
    for (int h = 0; h < s.h; ++h)
      for (int w = 0; w < s.w; ++w) {
        const std::int64_t i = grid_index(s, d, h, w);
        if (mask.data[i] == 0) continue;
        std::uint32_t label = 0;
        for (const auto& off : prior) {
          const int nd = d + off[0], nh = h + off[1], nw = w + off[2];
          if (nd < 0 || nh < 0 || nw < 0 || nd >= s.d || nh >= s.h || nw >= s.w)
            continue;
          const std::uint32_t nl = provisional[grid_index(s, nd, nh, nw)];
          if (nl == 0) continue;
          if (label == 0)
            label = nl;
          else if (nl != label)
            detail::uf_union(parent, label, nl);
        }
        if (label == 0) {
          label = static_cast<std::uint32_t>(parent.size());
          parent.push_back(label);
        }
        provisional[i] = label;
      }

  ComponentResult out;
  out.labels.size = s;
  out.labels.data.assign(mask.data.size(), 0);
  std::vector<std::uint32_t> dense(parent.size(), 0);
  std::uint32_t next = 0;
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    if (provisional[i] == 0) continue;
    const std::uint32_t root = detail::uf_find(parent, provisional[i]);
    if (dense[root] == 0) {
      dense[root] = ++next;
      out.sizes.push_back(0);
    }
    out.labels.data[i] = dense[root];
    ++out.sizes[dense[root] - 1];
  }
  out.labels.num_classes = next + 1 < 2 ? 2 : next + 1;
  return out;
}

// Threshold inside the (level, width) window, then keep the keep_top
// largest components as foreground.
inline LabelMap make_pseudo_label(const Volume3D& v, float level, float width,
                                  int connectivity, std::uint32_t keep_top) {
  if (keep_top < 1) throw std::invalid_argument("make_pseudo_label: keep_top must be >= 1");
  const LabelMap mask =
      threshold_mask(v, level - width / 2.0f, level + width / 2.0f);
  const ComponentResult cc = connected_components(mask, connectivity);

  std::vector<std::uint32_t> ids(cc.sizes.size());
  std::iota(ids.begin(), ids.end(), 1u);
  std::sort(ids.begin(), ids.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (cc.sizes[a - 1] != cc.sizes[b - 1]) return cc.sizes[a - 1] > cc.sizes[b - 1];
    return a < b;
  });
  if (ids.size() > keep_top) ids.resize(keep_top);

  std::vector<char> keep(cc.sizes.size() + 1, 0);
  for (std::uint32_t id : ids) keep[id] = 1;

  LabelMap out;
  out.size = v.size;
  out.num_classes = 2;
  out.data.resize(mask.data.size());
  for (std::size_t i = 0; i < mask.data.size(); ++i)
    out.data[i] = keep[cc.labels.data[i]] ? 1u : 0u;
  return out;
}

}  // namespace coldal
