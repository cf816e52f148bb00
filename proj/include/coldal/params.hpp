#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace coldal {

template <class S>
struct NamedTensorT {
  std::string name;
  std::vector<int> shape;
  std::vector<S> v;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int s : shape) n *= s;
    return n;
  }
};

// Ordered set of named parameter tensors. Also used for gradients and
// optimizer moments, which are parameter-shaped by construction.
template <class S>
struct ParamSetT {
  std::vector<NamedTensorT<S>> tensors;

  NamedTensorT<S>* find(const std::string& name) {
    for (auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  const NamedTensorT<S>* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  NamedTensorT<S>& at(const std::string& name) {
    auto* t = find(name);
    if (!t) throw std::invalid_argument("no parameter named " + name);
    return *t;
  }
  const NamedTensorT<S>& at(const std::string& name) const {
    auto* t = find(name);
    if (!t) throw std::invalid_argument("no parameter named " + name);
    return *t;
  }
};

// Parameters are stored in 32-bit floats (and serialized as such); compute
// may run in float or double via the scalar template parameter.
using ModelParams = ParamSetT<float>;
using Gradients = ParamSetT<float>;

template <class To, class From>
ParamSetT<To> convert(const ParamSetT<From>& in) {
  ParamSetT<To> out;
  out.tensors.reserve(in.tensors.size());
  for (const auto& t : in.tensors) {
    NamedTensorT<To> o;
    o.name = t.name;
    o.shape = t.shape;
    o.v.reserve(t.v.size());
    for (From x : t.v) o.v.push_back(static_cast<To>(x));
    out.tensors.push_back(std::move(o));
  }
  return out;
}

template <class S>
ParamSetT<S> zeros_like(const ParamSetT<S>& in) {
  ParamSetT<S> out;
  out.tensors.reserve(in.tensors.size());
  for (const auto& t : in.tensors) {
    NamedTensorT<S> o;
    o.name = t.name;
    o.shape = t.shape;
    o.v.assign(t.v.size(), S(0));
    out.tensors.push_back(std::move(o));
  }
  return out;
}

template <class S>
bool all_finite(const ParamSetT<S>& p) {
  for (const auto& t : p.tensors)
    for (S x : t.v)
      if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

}  // namespace coldal
