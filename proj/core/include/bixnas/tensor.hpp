#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "bixnas/common.hpp"
#include "bixnas/rng.hpp"

namespace bixnas {

struct TensorShape {
  i64 b = 0, c = 0, h = 0, w = 0;

  i64 numel() const { return b * c * h * w; }
  bool operator==(const TensorShape&) const = default;

  std::string str() const {
    return std::to_string(b) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

// Dense 4-D tensor (batch, channels, height, width), row-major innermost w.
template <class S>
struct Tensor {
  TensorShape shape{};
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(TensorShape s) : shape(s), data(static_cast<std::size_t>(s.numel()), S(0)) {}

  static Tensor zeros(TensorShape s) { return Tensor(s); }

  static Tensor full(TensorShape s, S v) {
    Tensor t(s);
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor randn(TensorShape s, Rng& rng, double stddev = 1.0) {
    Tensor t(s);
    for (auto& x : t.data) x = static_cast<S>(rng.normal() * stddev);
    return t;
  }

  static Tensor scalar(S v) { return full({1, 1, 1, 1}, v); }

  i64 numel() const { return shape.numel(); }

  i64 index(i64 b, i64 c, i64 h, i64 w) const {
    return ((b * shape.c + c) * shape.h + h) * shape.w + w;
  }

  S& at(i64 b, i64 c, i64 h, i64 w) { return data[static_cast<std::size_t>(index(b, c, h, w))]; }
  S at(i64 b, i64 c, i64 h, i64 w) const {
    return data[static_cast<std::size_t>(index(b, c, h, w))];
  }

  bool all_finite() const {
    for (S v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }
};

template <class S>
u64 digest(const Tensor<S>& t) {
  u64 h = fnv1a64(&t.shape, sizeof(t.shape));
  return fnv1a64(t.data.data(), t.data.size() * sizeof(S), h);
}

template <class To, class From>
Tensor<To> cast(const Tensor<From>& t) {
  Tensor<To> out(t.shape);
  for (std::size_t i = 0; i < t.data.size(); ++i) out.data[i] = static_cast<To>(t.data[i]);
  return out;
}

// Integer class-index map (batch, height, width); targets and predictions.
struct IndexMap {
  i64 b = 0, h = 0, w = 0;
  std::vector<std::int32_t> v;

  IndexMap() = default;
  IndexMap(i64 b_, i64 h_, i64 w_) : b(b_), h(h_), w(w_), v(static_cast<std::size_t>(b_ * h_ * w_), 0) {}

  i64 numel() const { return b * h * w; }
  std::int32_t& at(i64 bi, i64 y, i64 x) { return v[static_cast<std::size_t>((bi * h + y) * w + x)]; }
  std::int32_t at(i64 bi, i64 y, i64 x) const {
    return v[static_cast<std::size_t>((bi * h + y) * w + x)];
  }
  bool operator==(const IndexMap&) const = default;
};

inline u64 digest(const IndexMap& m) {
  u64 h = fnv1a64(&m.b, sizeof(m.b));
  h = fnv1a64(&m.h, sizeof(m.h), h);
  h = fnv1a64(&m.w, sizeof(m.w), h);
  return fnv1a64(m.v.data(), m.v.size() * sizeof(std::int32_t), h);
}

}  // namespace bixnas
