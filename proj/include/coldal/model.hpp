#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "coldal/autograd.hpp"
#include "coldal/errors.hpp"
#include "coldal/grid.hpp"
#include "coldal/params.hpp"
#include "coldal/rng.hpp"

namespace coldal {

// Small U-Net style encoder-decoder with residual blocks and dropout at the
// end of every level on both paths. Channel width doubles per level; the
// decoder upsamples (nearest neighbor) and concatenates the encoder skip.
// A residual block is two convs with an identity skip around the second.

enum class ForwardMode { train, eval, mc_dropout };
enum class Provenance : std::uint8_t { proxy = 0, supervised = 1, semi = 2 };

struct ModelConfig {
  int levels = 2;
  int base_channels = 8;
  int in_channels = 1;
  int out_channels = 2;
  double dropout_rate = 0.2;
  bool residual_blocks = true;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  if (c.levels < 1) throw std::invalid_argument("ModelConfig: levels must be >= 1");
  if (c.base_channels < 1) throw std::invalid_argument("ModelConfig: base_channels must be >= 1");
  if (c.in_channels != 1) throw std::invalid_argument("ModelConfig: in_channels must be 1");
  if (c.out_channels < 2) throw std::invalid_argument("ModelConfig: out_channels must be >= 2");
  if (!(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0))
    throw std::invalid_argument("ModelConfig: dropout_rate must be in [0,1)");
}

// Extents the forward pass can accept must be divisible by this.
inline int extent_divisor(const ModelConfig& c) { return 1 << (c.levels - 1); }

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
};

inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  validate(cfg);
  std::vector<ParamSpec> out;
  auto conv = [&](const std::string& base, int co, int ci, int k) {
    out.push_back({base + ".w", {co, ci, k, k, k}});
    out.push_back({base + ".b", {co}});
  };
  int prev = cfg.in_channels;
  for (int i = 0; i < cfg.levels; ++i) {
    const int ch = cfg.base_channels << i;
    conv("enc" + std::to_string(i) + ".conv_in", ch, prev, 3);
    if (cfg.residual_blocks) conv("enc" + std::to_string(i) + ".conv_res", ch, ch, 3);
    prev = ch;
  }
  for (int i = cfg.levels - 2; i >= 0; --i) {
    const int ch = cfg.base_channels << i;
    const int deeper = cfg.base_channels << (i + 1);
    conv("dec" + std::to_string(i) + ".conv_in", ch, deeper + ch, 3);
    if (cfg.residual_blocks) conv("dec" + std::to_string(i) + ".conv_res", ch, ch, 3);
  }
  conv("head", cfg.out_channels, cfg.base_channels, 1);
  return out;
}

// Fan-in scaled normal init for conv kernels, zero biases. Streams are
// keyed per parameter name, so values do not depend on enumeration order.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams p;
  for (const auto& spec : param_specs(cfg)) {
    NamedTensorT<float> t;
    t.name = spec.name;
    t.shape = spec.shape;
    t.v.resize(static_cast<std::size_t>(t.numel()));
    if (spec.shape.size() == 1) {
      std::fill(t.v.begin(), t.v.end(), 0.0f);
    } else {
      const int fan_in = spec.shape[1] * spec.shape[2] * spec.shape[3] * spec.shape[4];
      const double std_dev = std::sqrt(2.0 / fan_in);
      Rng rng(derive_key(seed, hash_str(spec.name)));
      for (float& x : t.v) x = static_cast<float>(std_dev * rng.normal());
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

namespace detail {

template <class S>
TensorT<S>* unet_block(GraphT<S>& g, const ParamSetT<S>& params, ParamSetT<S>* grads,
                       const std::string& base, bool residual, TensorT<S>* x) {
  auto gref = [&](const std::string& n) -> NamedTensorT<S>* {
    return grads ? &grads->at(n) : nullptr;
  };
  TensorT<S>* t = g.relu(g.conv3(x, params.at(base + ".conv_in.w"),
                                 params.at(base + ".conv_in.b"),
                                 gref(base + ".conv_in.w"), gref(base + ".conv_in.b")));
  if (residual) {
    TensorT<S>* t2 = g.conv3(t, params.at(base + ".conv_res.w"),
                             params.at(base + ".conv_res.b"),
                             gref(base + ".conv_res.w"), gref(base + ".conv_res.b"));
    t = g.relu(g.add(t2, t));
  }
  return t;
}

// Returns per-voxel softmax probabilities. Dropout sites are keyed by
// (seed, site index) in construction order.
template <class S>
TensorT<S>* unet_forward(GraphT<S>& g, const ModelConfig& cfg,
                         const ParamSetT<S>& params, ParamSetT<S>* grads,
                         TensorT<S>* x, bool use_dropout, std::uint64_t seed) {
  const int div = extent_divisor(cfg);
  if (x->shape[1] % div || x->shape[2] % div || x->shape[3] % div)
    throw std::invalid_argument("forward: patch extent must be divisible by 2^(levels-1)");
  if (x->shape[0] != cfg.in_channels)
    throw std::invalid_argument("forward: input channel mismatch");

  int site = 0;
  auto drop = [&](TensorT<S>* t) {
    const std::uint64_t key = derive_key(seed, static_cast<std::uint64_t>(site++));
    if (!use_dropout || cfg.dropout_rate == 0.0) return t;
    return g.dropout(t, cfg.dropout_rate, key);
  };

  std::vector<TensorT<S>*> skips;
  TensorT<S>* cur = x;
  for (int i = 0; i < cfg.levels; ++i) {
    if (i > 0) cur = g.avgpool2(cur);
    cur = drop(unet_block(g, params, grads, "enc" + std::to_string(i),
                          cfg.residual_blocks, cur));
    skips.push_back(cur);
  }
  for (int i = cfg.levels - 2; i >= 0; --i) {
    TensorT<S>* up = g.upsample2(cur);
    cur = g.concat_channels(up, skips[static_cast<std::size_t>(i)]);
    cur = drop(unet_block(g, params, grads, "dec" + std::to_string(i),
                          cfg.residual_blocks, cur));
  }
  TensorT<S>* logits =
      g.conv3(cur, params.at("head.w"), params.at("head.b"),
              grads ? &grads->at("head.w") : nullptr,
              grads ? &grads->at("head.b") : nullptr);
  return g.softmax_channels(logits);
}

}  // namespace detail

// One recorded training step: any number of forward passes may be combined
// into a single scalar loss, then backward() returns the gradients. Using
// backward() without a recorded forward, or twice, is a logic error.
template <class S>
class TrainGraphT {
 public:
  TrainGraphT(const ModelConfig& cfg, const ParamSetT<S>& params)
      : cfg_(cfg), params_(params), grads_(zeros_like(params)), graph_(true) {}

  GraphT<S>& graph() { return graph_; }

  TensorT<S>* forward(std::span<const float> image, Size3 size,
                      std::uint64_t dropout_seed, bool use_dropout = true) {
    TensorT<S>* x = graph_.leaf_from({cfg_.in_channels, size.d, size.h, size.w}, image);
    TensorT<S>* p = detail::unet_forward(graph_, cfg_, params_, &grads_, x,
                                         use_dropout, dropout_seed);
    forward_done_ = true;
    return p;
  }

  ParamSetT<S> backward(TensorT<S>* loss) {
    if (!forward_done_)
      throw std::logic_error("TrainGraph::backward: no recorded forward pass");
    graph_.backward(loss);
    return std::move(grads_);
  }

 private:
  ModelConfig cfg_;
  const ParamSetT<S>& params_;
  ParamSetT<S> grads_;
  GraphT<S> graph_;
  bool forward_done_ = false;
};

using TrainGraph = TrainGraphT<float>;

inline ProbMap probmap_from(const TensorT<float>& t) {
  ProbMap p;
  p.channels = t.shape[0];
  p.size = {t.shape[1], t.shape[2], t.shape[3]};
  p.data.assign(t.val.begin(), t.val.end());
  return p;
}

// Whole-patch inference. Train and mc_dropout modes apply inverted dropout
// seeded by `seed`; eval is deterministic.
inline ProbMap forward(const ModelConfig& cfg, const ModelParams& params,
                       const Patch& patch, ForwardMode mode, std::uint64_t seed = 0) {
  GraphT<float> g(false);
  TensorT<float>* x =
      g.leaf_from({cfg.in_channels, patch.size.d, patch.size.h, patch.size.w}, patch.image);
  const bool use_dropout = mode != ForwardMode::eval;
  TensorT<float>* p = detail::unet_forward(g, cfg, params, static_cast<ParamSetT<float>*>(nullptr),
                                           x, use_dropout, seed);
  return probmap_from(*p);
}

// --- Adam ------------------------------------------------------------------

struct AdamMoments {
  ModelParams m;
  ModelParams v;
};

inline AdamMoments init_moments(const ModelParams& params) {
  return {zeros_like(params), zeros_like(params)};
}

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// Standard Adam with bias correction by `step` (1-based). Math runs in
// double; parameters and moments are stored back as f32 so checkpoints
// round-trip exactly.
inline void adam_step(ModelParams& params, AdamMoments& moments,
                      const Gradients& grads, double lr, std::uint64_t step) {
  if (step < 1) throw std::invalid_argument("adam_step: step must be >= 1");
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
  for (std::size_t ti = 0; ti < params.tensors.size(); ++ti) {
    auto& p = params.tensors[ti];
    const auto& g = grads.tensors[ti];
    auto& m = moments.m.tensors[ti];
    auto& v = moments.v.tensors[ti];
    if (g.name != p.name || g.v.size() != p.v.size())
      throw std::invalid_argument("adam_step: gradient/parameter mismatch at " + p.name);
    for (std::size_t i = 0; i < p.v.size(); ++i) {
      const double gi = static_cast<double>(g.v[i]);
      if (!std::isfinite(gi))
        throw DivergenceError("adam_step: non-finite gradient in " + p.name);
      const double mi = kAdamBeta1 * m.v[i] + (1.0 - kAdamBeta1) * gi;
      const double vi = kAdamBeta2 * v.v[i] + (1.0 - kAdamBeta2) * gi * gi;
      m.v[i] = static_cast<float>(mi);
      v.v[i] = static_cast<float>(vi);
      const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + kAdamEps);
      const double next = static_cast<double>(p.v[i]) - update;
      if (!std::isfinite(next))
        throw DivergenceError("adam_step: non-finite parameter in " + p.name);
      p.v[i] = static_cast<float>(next);
    }
  }
}

// --- warm start --------------------------------------------------------------

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  AdamMoments moments;
  std::uint64_t step = 0;
  Provenance provenance = Provenance::supervised;
};

// Copy every tensor by name from the source checkpoint. When out_channels
// differ, the head layer is freshly initialized instead; any other shape or
// name mismatch is an incompatibility.
inline ModelParams warm_start(const ModelConfig& target, const Checkpoint& source,
                              std::uint64_t head_seed = 0) {
  validate(target);
  const bool head_differs = target.out_channels != source.config.out_channels;
  ModelParams out = init_params(target, head_seed);
  std::vector<std::string> offending;
  for (auto& t : out.tensors) {
    const bool is_head = t.name.rfind("head.", 0) == 0;
    if (is_head && head_differs) continue;  // keep fresh init
    const auto* src = source.params.find(t.name);
    if (!src || src->shape != t.shape) {
      offending.push_back(t.name);
      continue;
    }
    t.v = src->v;
  }
  if (!offending.empty()) {
    std::string msg = "warm_start: incompatible tensors:";
    for (const auto& n : offending) msg += " " + n;
    throw IncompatibleParamsError(msg);
  }
  return out;
}

// --- sliding window -----------------------------------------------------------

// Tile the volume with overlapping windows, run one forward per window and
// average the per-voxel probabilities. The volume is zero-padded up to the
// window size if needed and the result cropped back; every voxel ends up
// covered by at least one window.
inline ProbMap sliding_window_predict(const ModelConfig& cfg, const ModelParams& params,
                                      const Volume3D& v, Size3 patch_size,
                                      double overlap, ForwardMode mode = ForwardMode::eval,
                                      std::uint64_t seed = 0) {
  if (!(overlap >= 0.0 && overlap < 1.0))
    throw std::invalid_argument("sliding_window_predict: overlap must be in [0,1)");
  if (patch_size.d < 1 || patch_size.h < 1 || patch_size.w < 1)
    throw std::out_of_range("sliding_window_predict: bad patch size");

  const Size3 padded_size{std::max(v.size.d, patch_size.d),
                          std::max(v.size.h, patch_size.h),
                          std::max(v.size.w, patch_size.w)};
  if (!patch_size.fits_inside(padded_size))
    throw std::out_of_range("sliding_window_predict: patch larger than padded volume");
  const Volume3D padded = pad_to(v, padded_size, 0.0f);

  auto positions = [&](int extent, int patch, int stride) {
    std::vector<int> out;
    for (int p = 0; p + patch < extent; p += stride) out.push_back(p);
    out.push_back(extent - patch);
    return out;
  };
  auto stride_of = [&](int patch) {
    return std::max(1, static_cast<int>(std::lround(patch * (1.0 - overlap))));
  };
  const auto pd = positions(padded_size.d, patch_size.d, stride_of(patch_size.d));
  const auto ph = positions(padded_size.h, patch_size.h, stride_of(patch_size.h));
  const auto pw = positions(padded_size.w, patch_size.w, stride_of(patch_size.w));

  const int C = cfg.out_channels;
  const std::int64_t n = padded_size.voxels();
  std::vector<double> acc(static_cast<std::size_t>(C) * n, 0.0);
  std::vector<std::int32_t> cnt(static_cast<std::size_t>(n), 0);

  std::uint64_t window_index = 0;
  for (int od : pd)
    for (int oh : ph)
      for (int ow : pw) {
        const Patch patch = extract_patch(padded, nullptr, {od, oh, ow}, patch_size);
        const ProbMap prob =
            forward(cfg, params, patch, mode, derive_key(seed, window_index++));
        std::int64_t k = 0;
        for (int d = 0; d < patch_size.d; ++d)
          for (int h = 0; h < patch_size.h; ++h)
            for (int w = 0; w < patch_size.w; ++w, ++k) {
              const std::int64_t gi = grid_index(padded_size, od + d, oh + h, ow + w);
              ++cnt[static_cast<std::size_t>(gi)];
              for (int c = 0; c < C; ++c)
                acc[static_cast<std::size_t>(c * n + gi)] +=
                    static_cast<double>(prob.data[static_cast<std::size_t>(
                        c * patch_size.voxels() + k)]);
            }
      }

  ProbMap out;
  out.channels = C;
  out.size = v.size;
  out.data.resize(static_cast<std::size_t>(C) * v.size.voxels());
  const Size3 off = pad_offset(v.size, padded_size);
  // counts are identical across channels; divide once per voxel
  for (int c = 0; c < C; ++c)
    for (int d = 0; d < v.size.d; ++d)
      for (int h = 0; h < v.size.h; ++h)
        for (int w = 0; w < v.size.w; ++w) {
          const std::int64_t gi = grid_index(padded_size, off.d + d, off.h + h, off.w + w);
          out.at(c, d, h, w) = static_cast<float>(acc[static_cast<std::size_t>(c * n + gi)] /
                                                  cnt[static_cast<std::size_t>(gi)]);
        }
  return out;
}

}  // namespace coldal
