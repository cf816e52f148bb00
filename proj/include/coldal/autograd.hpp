#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "coldal/params.hpp"
#include "coldal/rng.hpp"

namespace coldal {

// Minimal reverse-mode autodiff over rank-4 tensors (channels, depth,
// height, width). The graph is rebuilt for every training step: each op
// computes its output eagerly and, when the graph is recording, pushes a
// backward closure onto a tape that is replayed in reverse. Parameters are
// not graph nodes; conv ops capture (value, grad) pointers directly.
//
// Loss terms accumulate in 64-bit reals regardless of the compute scalar.

template <class S>
struct TensorT {
  std::array<int, 4> shape{0, 0, 0, 0};  // c, d, h, w
  std::vector<S> val;
  std::vector<S> grad;  // allocated only while recording
  bool tracked = false;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2] * shape[3];
  }
  std::int64_t spatial() const {
    return static_cast<std::int64_t>(shape[1]) * shape[2] * shape[3];
  }
};

constexpr double kDiceSmooth = 1e-5;
constexpr double kLogFloor = 1e-12;

template <class S>
class GraphT {
 public:
  using Tensor = TensorT<S>;

  explicit GraphT(bool recording) : recording_(recording) {}

  bool recording() const { return recording_; }

  Tensor* leaf(std::array<int, 4> shape, std::vector<S> values, bool tracked) {
    Tensor* t = alloc(shape, tracked && recording_);
    if (values.size() != static_cast<std::size_t>(t->numel()))
      throw std::invalid_argument("leaf: value count does not match shape");
    t->val = std::move(values);
    return t;
  }

  Tensor* leaf_from(std::array<int, 4> shape, std::span<const float> values,
                    bool tracked = false) {
    Tensor* t = alloc(shape, tracked && recording_);
    if (values.size() != static_cast<std::size_t>(t->numel()))
      throw std::invalid_argument("leaf_from: value count does not match shape");
    for (std::size_t i = 0; i < values.size(); ++i) t->val[i] = static_cast<S>(values[i]);
    return t;
  }

  // 3D convolution with odd cubic kernels and same zero padding.
  // w shape: (co, ci, k, k, k); b shape: (co). gw/gb may be null when the
  // graph is not recording (or the parameter is frozen).
  Tensor* conv3(Tensor* x, const NamedTensorT<S>& w, const NamedTensorT<S>& b,
                NamedTensorT<S>* gw, NamedTensorT<S>* gb) {
    if (w.shape.size() != 5 || w.shape[2] != w.shape[3] || w.shape[2] != w.shape[4])
      throw std::invalid_argument("conv3: weight must be (co, ci, k, k, k)");
    const int co = w.shape[0], ci = w.shape[1], k = w.shape[2];
    if (k % 2 == 0) throw std::invalid_argument("conv3: kernel must be odd");
    if (x->shape[0] != ci) throw std::invalid_argument("conv3: channel mismatch");
    if (static_cast<int>(b.v.size()) != co)
      throw std::invalid_argument("conv3: bias size mismatch");

    const int D = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int p = k / 2;
    Tensor* y = alloc({co, D, H, W}, true);

    const std::vector<S> xpad = pad_by(*x, p);
    const int PD = D + 2 * p, PH = H + 2 * p, PW = W + 2 * p;

    for (int oc = 0; oc < co; ++oc) {
      S* yc = y->val.data() + static_cast<std::int64_t>(oc) * D * H * W;
      const S bias = b.v[oc];
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(D) * H * W; ++i) yc[i] = bias;
      for (int ic = 0; ic < ci; ++ic) {
        const S* xc = xpad.data() + static_cast<std::int64_t>(ic) * PD * PH * PW;
        for (int kd = 0; kd < k; ++kd)
          for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) {
              const S wv = w.v[(((static_cast<std::int64_t>(oc) * ci + ic) * k + kd) * k + kh) * k + kw];
              for (int od = 0; od < D; ++od)
                for (int oh = 0; oh < H; ++oh) {
                  const S* src = xc + (static_cast<std::int64_t>(od + kd) * PH + (oh + kh)) * PW + kw;
                  S* dst = yc + (static_cast<std::int64_t>(od) * H + oh) * W;
                  for (int ow = 0; ow < W; ++ow) dst[ow] += wv * src[ow];
                }
            }
      }
    }

    if (recording_) {
      tape_.push_back([this, x, y, &w, gw, gb, co, ci, k, D, H, W, p, xpad]() {
        const int PD = D + 2 * p, PH = H + 2 * p, PW = W + 2 * p;
        if (gb) {
          for (int oc = 0; oc < co; ++oc) {
            double acc = 0.0;
            const S* gy = y->grad.data() + static_cast<std::int64_t>(oc) * D * H * W;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(D) * H * W; ++i)
              acc += static_cast<double>(gy[i]);
            gb->v[oc] += static_cast<S>(acc);
          }
        }
        if (gw) {
          for (int oc = 0; oc < co; ++oc) {
            const S* gy = y->grad.data() + static_cast<std::int64_t>(oc) * D * H * W;
            for (int ic = 0; ic < ci; ++ic) {
              const S* xc = xpad.data() + static_cast<std::int64_t>(ic) * PD * PH * PW;
              for (int kd = 0; kd < k; ++kd)
                for (int kh = 0; kh < k; ++kh)
                  for (int kw = 0; kw < k; ++kw) {
                    double acc = 0.0;
                    for (int od = 0; od < D; ++od)
                      for (int oh = 0; oh < H; ++oh) {
                        const S* src = xc + (static_cast<std::int64_t>(od + kd) * PH + (oh + kh)) * PW + kw;
                        const S* g = gy + (static_cast<std::int64_t>(od) * H + oh) * W;
                        for (int ow = 0; ow < W; ++ow) acc += static_cast<double>(g[ow]) * src[ow];
                      }
                    gw->v[(((static_cast<std::int64_t>(oc) * ci + ic) * k + kd) * k + kh) * k + kw] +=
                        static_cast<S>(acc);
                  }
            }
          }
        }
        if (x->tracked) {
          // dL/dx is a correlation of the padded output grad with the
          // spatially flipped kernel.
          const std::vector<S> gpad = pad_grad_by(*y, p);
          for (int ic = 0; ic < ci; ++ic) {
            S* gx = x->grad.data() + static_cast<std::int64_t>(ic) * D * H * W;
            for (int oc = 0; oc < co; ++oc) {
              const S* gc = gpad.data() + static_cast<std::int64_t>(oc) * PD * PH * PW;
              for (int kd = 0; kd < k; ++kd)
                for (int kh = 0; kh < k; ++kh)
                  for (int kw = 0; kw < k; ++kw) {
                    const S wv = w.v[(((static_cast<std::int64_t>(oc) * ci + ic) * k + (k - 1 - kd)) * k +
                                      (k - 1 - kh)) * k + (k - 1 - kw)];
                    for (int id = 0; id < D; ++id)
                      for (int ih = 0; ih < H; ++ih) {
                        const S* src = gc + (static_cast<std::int64_t>(id + kd) * PH + (ih + kh)) * PW + kw;
                        S* dst = gx + (static_cast<std::int64_t>(id) * H + ih) * W;
                        for (int iw = 0; iw < W; ++iw) dst[iw] += wv * src[iw];
                      }
                  }
            }
          }
        }
      });
    }
    return y;
  }

  Tensor* relu(Tensor* x) {
    Tensor* y = alloc(x->shape, true);
    for (std::int64_t i = 0; i < x->numel(); ++i)
      y->val[i] = x->val[i] > S(0) ? x->val[i] : S(0);
    if (recording_ && x->tracked) {
      tape_.push_back([x, y]() {
        for (std::int64_t i = 0; i < x->numel(); ++i)
          if (x->val[i] > S(0)) x->grad[i] += y->grad[i];
      });
    }
    return y;
  }

  Tensor* add(Tensor* a, Tensor* b) {
    if (a->shape != b->shape) throw std::invalid_argument("add: shape mismatch");
    Tensor* y = alloc(a->shape, true);
    for (std::int64_t i = 0; i < a->numel(); ++i) y->val[i] = a->val[i] + b->val[i];
    if (recording_) {
      tape_.push_back([a, b, y]() {
        if (a->tracked)
          for (std::int64_t i = 0; i < a->numel(); ++i) a->grad[i] += y->grad[i];
        if (b->tracked)
          for (std::int64_t i = 0; i < b->numel(); ++i) b->grad[i] += y->grad[i];
      });
    }
    return y;
  }

  Tensor* concat_channels(Tensor* a, Tensor* b) {
    if (a->shape[1] != b->shape[1] || a->shape[2] != b->shape[2] ||
        a->shape[3] != b->shape[3])
      throw std::invalid_argument("concat: spatial shape mismatch");
    Tensor* y = alloc({a->shape[0] + b->shape[0], a->shape[1], a->shape[2], a->shape[3]}, true);
    std::copy(a->val.begin(), a->val.end(), y->val.begin());
    std::copy(b->val.begin(), b->val.end(), y->val.begin() + a->numel());
    if (recording_) {
      tape_.push_back([a, b, y]() {
        if (a->tracked)
          for (std::int64_t i = 0; i < a->numel(); ++i) a->grad[i] += y->grad[i];
        if (b->tracked)
          for (std::int64_t i = 0; i < b->numel(); ++i) b->grad[i] += y->grad[i + a->numel()];
      });
    }
    return y;
  }

  Tensor* avgpool2(Tensor* x) {
    const int C = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
    if (D % 2 || H % 2 || W % 2)
      throw std::invalid_argument("avgpool2: dims must be even");
    Tensor* y = alloc({C, D / 2, H / 2, W / 2}, true);
    for (int c = 0; c < C; ++c)
      for (int od = 0; od < D / 2; ++od)
        for (int oh = 0; oh < H / 2; ++oh)
          for (int ow = 0; ow < W / 2; ++ow) {
            S acc = S(0);
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int csh = 0; csh < 2; ++csh)
                  acc += at(*x, c, 2 * od + a, 2 * oh + b, 2 * ow + csh);
            at(*y, c, od, oh, ow) = acc / S(8);
          }
    if (recording_ && x->tracked) {
      tape_.push_back([x, y, C, D, H, W]() {
        for (int c = 0; c < C; ++c)
          for (int od = 0; od < D / 2; ++od)
            for (int oh = 0; oh < H / 2; ++oh)
              for (int ow = 0; ow < W / 2; ++ow) {
                const S gg = grad_at(*y, c, od, oh, ow) / S(8);
                for (int a = 0; a < 2; ++a)
                  for (int b = 0; b < 2; ++b)
                    for (int cs = 0; cs < 2; ++cs)
                      grad_at(*x, c, 2 * od + a, 2 * oh + b, 2 * ow + cs) += gg;
              }
      });
    }
    return y;
  }

  Tensor* upsample2(Tensor* x) {  // nearest neighbor
    const int C = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
    Tensor* y = alloc({C, 2 * D, 2 * H, 2 * W}, true);
    for (int c = 0; c < C; ++c)
      for (int d = 0; d < 2 * D; ++d)
        for (int h = 0; h < 2 * H; ++h)
          for (int w = 0; w < 2 * W; ++w)
            at(*y, c, d, h, w) = at(*x, c, d / 2, h / 2, w / 2);
    if (recording_ && x->tracked) {
      tape_.push_back([x, y, C, D, H, W]() {
        for (int c = 0; c < C; ++c)
          for (int d = 0; d < 2 * D; ++d)
            for (int h = 0; h < 2 * H; ++h)
              for (int w = 0; w < 2 * W; ++w)
                grad_at(*x, c, d / 2, h / 2, w / 2) += grad_at(*y, c, d, h, w);
      });
    }
    return y;
  }

  // Inverted dropout with a stateless keyed mask, so forward and backward
  // (and any finite-difference probe) see the same mask for the same key.
  Tensor* dropout(Tensor* x, double rate, std::uint64_t mask_key) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (rate == 0.0) return x;
    Tensor* y = alloc(x->shape, true);
    const S scale = static_cast<S>(1.0 / (1.0 - rate));
    for (std::int64_t i = 0; i < x->numel(); ++i) {
      const bool keep = unit_at(mask_key, static_cast<std::uint64_t>(i)) >= rate;
      y->val[i] = keep ? x->val[i] * scale : S(0);
    }
    if (recording_ && x->tracked) {
      tape_.push_back([x, y, rate, scale, mask_key]() {
        for (std::int64_t i = 0; i < x->numel(); ++i) {
          const bool keep = unit_at(mask_key, static_cast<std::uint64_t>(i)) >= rate;
          if (keep) x->grad[i] += y->grad[i] * scale;
        }
      });
    }
    return y;
  }

  Tensor* softmax_channels(Tensor* x) {
    const int C = x->shape[0];
    const std::int64_t n = x->spatial();
    Tensor* y = alloc(x->shape, true);
    for (std::int64_t v = 0; v < n; ++v) {
      S mx = x->val[v];
      for (int c = 1; c < C; ++c) mx = std::max(mx, x->val[c * n + v]);
      S sum = S(0);
      for (int c = 0; c < C; ++c) {
        const S e = std::exp(x->val[c * n + v] - mx);
        y->val[c * n + v] = e;
        sum += e;
      }
      for (int c = 0; c < C; ++c) y->val[c * n + v] /= sum;
    }
    if (recording_ && x->tracked) {
      tape_.push_back([x, y, C, n]() {
        for (std::int64_t v = 0; v < n; ++v) {
          double dot = 0.0;
          for (int c = 0; c < C; ++c)
            dot += static_cast<double>(y->grad[c * n + v]) * y->val[c * n + v];
          for (int c = 0; c < C; ++c)
            x->grad[c * n + v] += y->val[c * n + v] *
                                  (y->grad[c * n + v] - static_cast<S>(dot));
        }
      });
    }
    return y;
  }

  // DiceCE against integer class labels: mean soft Dice over classes
  // (optionally skipping background) plus mean voxelwise cross-entropy,
  // weighted 1:1.
  Tensor* dice_ce_hard(Tensor* p, std::span<const std::uint32_t> target,
                       bool include_background = true) {
    const int C = p->shape[0];
    const std::int64_t n = p->spatial();
    if (static_cast<std::int64_t>(target.size()) != n)
      throw std::invalid_argument("dice_ce_hard: target size mismatch");
    for (std::uint32_t t : target)
      if (static_cast<int>(t) >= C)
        throw std::invalid_argument("dice_ce_hard: target class out of range");

    const int c0 = include_background ? 0 : 1;
    const int n_inc = C - c0;
    std::vector<double> sum_p(C, 0.0), sum_y(C, 0.0), sum_py(C, 0.0);
    double ce = 0.0;
    for (std::int64_t v = 0; v < n; ++v) {
      const int t = static_cast<int>(target[v]);
      for (int c = 0; c < C; ++c) {
        const double pv = static_cast<double>(p->val[c * n + v]);
        sum_p[c] += pv;
        if (c == t) {
          sum_y[c] += 1.0;
          sum_py[c] += pv;
        }
      }
      ce -= std::log(std::max(static_cast<double>(p->val[t * n + v]), kLogFloor));
    }
    ce /= static_cast<double>(n);

    double dice = 0.0;
    std::vector<double> num(C), den(C);
    for (int c = 0; c < C; ++c) {
      num[c] = 2.0 * sum_py[c] + kDiceSmooth;
      den[c] = sum_p[c] + sum_y[c] + kDiceSmooth;
      if (c >= c0) dice += 1.0 - num[c] / den[c];
    }
    dice /= static_cast<double>(n_inc);

    Tensor* loss = scalar(static_cast<S>(dice + ce));
    if (recording_ && p->tracked) {
      std::vector<std::uint32_t> tgt(target.begin(), target.end());
      tape_.push_back([p, loss, tgt = std::move(tgt), num, den, C, n, c0, n_inc]() {
        const S g = loss->grad[0];
        for (std::int64_t v = 0; v < n; ++v) {
          const int t = static_cast<int>(tgt[v]);
          for (int c = 0; c < C; ++c) {
            double d = 0.0;
            if (c >= c0) {
              const double y = (c == t) ? 1.0 : 0.0;
              d += (num[c] - 2.0 * y * den[c]) / (den[c] * den[c]) / n_inc;
            }
            if (c == t) {
              const double pv = static_cast<double>(p->val[c * n + v]);
              if (pv > kLogFloor) d -= 1.0 / (n * pv);
            }
            p->grad[c * n + v] += g * static_cast<S>(d);
          }
        }
      });
    }
    return loss;
  }

  // DiceCE against a soft probability target (consistency training). The
  // target may itself be a tracked tensor when bidirectional gradients are
  // wanted; by default it is treated as a constant.
  Tensor* dice_ce_soft(Tensor* p, Tensor* target, bool include_background = true) {
    if (p->shape != target->shape)
      throw std::invalid_argument("dice_ce_soft: shape mismatch");
    const int C = p->shape[0];
    const std::int64_t n = p->spatial();
    const int c0 = include_background ? 0 : 1;
    const int n_inc = C - c0;

    std::vector<double> sum_p(C, 0.0), sum_y(C, 0.0), sum_py(C, 0.0);
    double ce = 0.0;
    for (int c = 0; c < C; ++c)
      for (std::int64_t v = 0; v < n; ++v) {
        const double pv = static_cast<double>(p->val[c * n + v]);
        const double yv = static_cast<double>(target->val[c * n + v]);
        sum_p[c] += pv;
        sum_y[c] += yv;
        sum_py[c] += pv * yv;
        ce -= yv * std::log(std::max(pv, kLogFloor));
      }
    ce /= static_cast<double>(n);

    double dice = 0.0;
    std::vector<double> num(C), den(C);
    for (int c = 0; c < C; ++c) {
      num[c] = 2.0 * sum_py[c] + kDiceSmooth;
      den[c] = sum_p[c] + sum_y[c] + kDiceSmooth;
      if (c >= c0) dice += 1.0 - num[c] / den[c];
    }
    dice /= static_cast<double>(n_inc);

    Tensor* loss = scalar(static_cast<S>(dice + ce));
    if (recording_ && (p->tracked || target->tracked)) {
      tape_.push_back([p, target, loss, num, den, C, n, c0, n_inc]() {
        const S g = loss->grad[0];
        for (int c = 0; c < C; ++c)
          for (std::int64_t v = 0; v < n; ++v) {
            const double pv = static_cast<double>(p->val[c * n + v]);
            const double yv = static_cast<double>(target->val[c * n + v]);
            if (p->tracked) {
              double d = 0.0;
              if (c >= c0)
                d += (num[c] - 2.0 * yv * den[c]) / (den[c] * den[c]) / n_inc;
              if (pv > kLogFloor) d -= yv / (n * pv);
              p->grad[c * n + v] += g * static_cast<S>(d);
            }
            if (target->tracked) {
              double d = 0.0;
              if (c >= c0)
                d += (num[c] - 2.0 * pv * den[c]) / (den[c] * den[c]) / n_inc;
              d -= std::log(std::max(pv, kLogFloor)) / n;
              target->grad[c * n + v] += g * static_cast<S>(d);
            }
          }
      });
    }
    return loss;
  }

  Tensor* scalar(S value) {
    Tensor* t = alloc({1, 1, 1, 1}, true);
    t->val[0] = value;
    return t;
  }

  // a*x + b*y over scalar nodes; y may be null (then the result is a*x).
  Tensor* weighted_sum(double a, Tensor* x, double b, Tensor* y) {
    check_scalar(x);
    if (y) check_scalar(y);
    Tensor* out = scalar(static_cast<S>(a * static_cast<double>(x->val[0]) +
                                        (y ? b * static_cast<double>(y->val[0]) : 0.0)));
    if (recording_) {
      tape_.push_back([a, b, x, y, out]() {
        if (x->tracked) x->grad[0] += static_cast<S>(a) * out->grad[0];
        if (y && y->tracked) y->grad[0] += static_cast<S>(b) * out->grad[0];
      });
    }
    return out;
  }

  Tensor* mean_scalars(const std::vector<Tensor*>& xs) {
    if (xs.empty()) throw std::invalid_argument("mean_scalars: empty");
    double acc = 0.0;
    for (Tensor* x : xs) {
      check_scalar(x);
      acc += static_cast<double>(x->val[0]);
    }
    Tensor* out = scalar(static_cast<S>(acc / xs.size()));
    if (recording_) {
      tape_.push_back([xs, out]() {
        const S g = out->grad[0] / static_cast<S>(xs.size());
        for (Tensor* x : xs)
          if (x->tracked) x->grad[0] += g;
      });
    }
    return out;
  }

  void backward(Tensor* loss) {
    if (!recording_)
      throw std::logic_error("backward: no recorded forward (graph not recording)");
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    check_scalar(loss);
    if (!loss->tracked) throw std::logic_error("backward: loss is not tracked");
    loss->grad[0] = S(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    consumed_ = true;
  }

 private:
  static S& at(Tensor& t, int c, int d, int h, int w) {
    return t.val[((static_cast<std::int64_t>(c) * t.shape[1] + d) * t.shape[2] + h) * t.shape[3] + w];
  }
  static S& grad_at(Tensor& t, int c, int d, int h, int w) {
    return t.grad[((static_cast<std::int64_t>(c) * t.shape[1] + d) * t.shape[2] + h) * t.shape[3] + w];
  }

  static void check_scalar(Tensor* t) {
    if (t->numel() != 1) throw std::logic_error("expected scalar node");
  }

  Tensor* alloc(std::array<int, 4> shape, bool tracked) {
    nodes_.emplace_back();
    Tensor& t = nodes_.back();
    t.shape = shape;
    t.val.assign(static_cast<std::size_t>(t.numel()), S(0));
    t.tracked = tracked && recording_;
    if (t.tracked) t.grad.assign(t.val.size(), S(0));
    return &t;
  }

  static std::vector<S> pad_by(const Tensor& x, int p) {
    return pad_impl(x.val, x.shape, p);
  }
  static std::vector<S> pad_grad_by(const Tensor& x, int p) {
    return pad_impl(x.grad, x.shape, p);
  }
  static std::vector<S> pad_impl(const std::vector<S>& v, std::array<int, 4> sh, int p) {
    const int C = sh[0], D = sh[1], H = sh[2], W = sh[3];
    const int PD = D + 2 * p, PH = H + 2 * p, PW = W + 2 * p;
    std::vector<S> out(static_cast<std::size_t>(C) * PD * PH * PW, S(0));
    for (int c = 0; c < C; ++c)
      for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h) {
          const S* src = v.data() + ((static_cast<std::int64_t>(c) * D + d) * H + h) * W;
          S* dst = out.data() + ((static_cast<std::int64_t>(c) * PD + d + p) * PH + h + p) * PW + p;
          std::copy(src, src + W, dst);
        }
    return out;
  }

  std::deque<Tensor> nodes_;
  std::vector<std::function<void()>> tape_;
  bool recording_;
  bool consumed_ = false;
};

}  // namespace coldal
