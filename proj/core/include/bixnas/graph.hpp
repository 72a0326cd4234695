#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bixnas/tensor.hpp"

namespace bixnas {

// Trainable parameter. One Param object may be referenced by many graph
// leaves (weight sharing across iterations); backward accumulates into the
// shared grad buffer.
template <class S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;

  Param(std::string n, Tensor<S> v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), S(0)); }
};

template <class S>
using ParamPtr = std::shared_ptr<Param<S>>;

// Channel-wise normalization running statistics (buffers, not parameters).
template <class S>
struct NormStats {
  Tensor<S> running_mean;
  Tensor<S> running_var;

  explicit NormStats(i64 channels = 0)
      : running_mean({1, channels, 1, 1}), running_var(Tensor<S>::full({1, channels, 1, 1}, S(1))) {}
};

enum class Op {
  kInput,
  kParam,
  kAdd,
  kMul,
  kScale,
  kSum,
  kRelu,
  kConv2d,
  kBilinearResize,
  kMaxPool2,
  kAverage,
  kBatchNorm,
  kSoftmaxColumns,
  kHardOneHotSt,
  kSelectAverage,
  kCrossEntropy,
};

// Reverse-mode tape over eagerly evaluated nodes. Node ids are creation
// order, so every node's inputs have smaller ids and one reverse sweep
// suffices for backward.
template <class S>
class Graph {
 public:
  using NodeId = std::int32_t;

  // Set false to skip the per-op finiteness sweep (hot inner loops in
  // benchmarks); training keeps it on so NaN/Inf surfaces at the op that
  // produced it.
  bool check_finite = true;

  NodeId input(Tensor<S> value) {
    Node n;
    n.op = Op::kInput;
    n.value = std::move(value);
    return push(std::move(n));
  }

  NodeId param(const ParamPtr<S>& p) {
    Node n;
    n.op = Op::kParam;
    n.param = p;
    n.value = p->value;
    return push(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) {
    const Tensor<S>&va = value(a), &vb = value(b);
    if (!(va.shape == vb.shape)) throw ConfigError("add: shape mismatch " + va.shape.str() + " vs " + vb.shape.str());
    Node n;
    n.op = Op::kAdd;
    n.in = {a, b};
    n.value = va;
    for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] += vb.data[i];
    return push(std::move(n));
  }

  NodeId mul(NodeId a, NodeId b) {
    const Tensor<S>&va = value(a), &vb = value(b);
    if (!(va.shape == vb.shape)) throw ConfigError("mul: shape mismatch " + va.shape.str() + " vs " + vb.shape.str());
    Node n;
    n.op = Op::kMul;
    n.in = {a, b};
    n.value = va;
    for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= vb.data[i];
    return push(std::move(n));
  }

  NodeId scale(NodeId a, S s) {
    Node n;
    n.op = Op::kScale;
    n.in = {a};
    n.scalar = s;
    n.value = value(a);
    for (auto& v : n.value.data) v *= s;
    return push(std::move(n));
  }

  NodeId sum(NodeId a) {
    Node n;
    n.op = Op::kSum;
    n.in = {a};
    S acc = 0;
    for (S v : value(a).data) acc += v;
    n.value = Tensor<S>::scalar(acc);
    return push(std::move(n));
  }

  NodeId relu(NodeId a) {
    Node n;
    n.op = Op::kRelu;
    n.in = {a};
    n.value = value(a);
    for (auto& v : n.value.data) v = v > S(0) ? v : S(0);
    return push(std::move(n));
  }

  // weight (Cout, Cin, k, k), bias (1, Cout, 1, 1), square kernel.
  NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride = 1, int padding = 0) {
    const Tensor<S>& in = value(x);
    const Tensor<S>& wt = value(w);
    const Tensor<S>& bs = value(b);
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
    if (wt.shape.h != wt.shape.w) throw ConfigError("conv2d: kernel must be square");
    if (wt.shape.c != in.shape.c)
      throw ConfigError("conv2d: input channels " + std::to_string(in.shape.c) +
                        " != weight Cin " + std::to_string(wt.shape.c));
    if (!(bs.shape == TensorShape{1, wt.shape.b, 1, 1}))
      throw ConfigError("conv2d: bias shape must be 1x" + std::to_string(wt.shape.b) + "x1x1");
    const i64 k = wt.shape.h;
    const i64 oh = (in.shape.h + 2 * padding - k) / stride + 1;
    const i64 ow = (in.shape.w + 2 * padding - k) / stride + 1;
    if (oh < 1 || ow < 1) throw ConfigError("conv2d: empty output for input " + in.shape.str());

    Node n;
    n.op = Op::kConv2d;
    n.in = {x, w, b};
    n.stride = stride;
    n.padding = padding;
    n.value = Tensor<S>({in.shape.b, wt.shape.b, oh, ow});
    conv_forward(in, wt, bs, n.value, stride, padding);
    return push(std::move(n));
  }

  // Align-corners bilinear interpolation; identity target dims short-circuit
  // to a bit-exact copy.
  NodeId bilinear_resize(NodeId x, i64 out_h, i64 out_w) {
    const Tensor<S>& in = value(x);
    if (out_h < 1 || out_w < 1) throw ConfigError("bilinear_resize: target dims must be >= 1");
    Node n;
    n.op = Op::kBilinearResize;
    n.in = {x};
    if (out_h == in.shape.h && out_w == in.shape.w) {
      n.value = in;
    } else {
      n.value = Tensor<S>({in.shape.b, in.shape.c, out_h, out_w});
      resize_forward(in, n.value);
    }
    return push(std::move(n));
  }

  NodeId max_pool2(NodeId x) {
    const Tensor<S>& in = value(x);
    if (in.shape.h % 2 != 0 || in.shape.w % 2 != 0)
      throw ConfigError("max_pool2: spatial dims must be even, got " + in.shape.str());
    Node n;
    n.op = Op::kMaxPool2;
    n.in = {x};
    n.value = Tensor<S>({in.shape.b, in.shape.c, in.shape.h / 2, in.shape.w / 2});
    n.arg.resize(static_cast<std::size_t>(n.value.numel()));
    const i64 H = in.shape.h, W = in.shape.w;
    i64 o = 0;
    for (i64 bc = 0; bc < in.shape.b * in.shape.c; ++bc) {
      const S* src = in.data.data() + bc * H * W;
      for (i64 y = 0; y < H; y += 2) {
        for (i64 x2 = 0; x2 < W; x2 += 2) {
          i64 best = y * W + x2;
          S bv = src[best];
          const std::array<i64, 3> cands{y * W + x2 + 1, (y + 1) * W + x2, (y + 1) * W + x2 + 1};
          for (i64 c : cands) {
            if (src[c] > bv) {
              bv = src[c];
              best = c;
            }
          }
          n.value.data[static_cast<std::size_t>(o)] = bv;
          n.arg[static_cast<std::size_t>(o)] = bc * H * W + best;
          ++o;
        }
      }
    }
    return push(std::move(n));
  }

  // Element-wise arithmetic mean of same-shaped tensors.
  NodeId average(std::span<const NodeId> xs) {
    if (xs.empty()) throw ConfigError("average: empty input list");
    const TensorShape shape = value(xs[0]).shape;
    for (NodeId id : xs) {
      if (!(value(id).shape == shape))
        throw ConfigError("average: shape mismatch " + value(id).shape.str() + " vs " + shape.str());
    }
    Node n;
    n.op = Op::kAverage;
    n.extra_in.assign(xs.begin(), xs.end());
    n.value = Tensor<S>(shape);
    const S inv = S(1) / static_cast<S>(xs.size());
    for (NodeId id : xs) {
      const auto& d = value(id).data;
      for (std::size_t i = 0; i < d.size(); ++i) n.value.data[i] += d[i];
    }
    for (auto& v : n.value.data) v *= inv;
    return push(std::move(n));
  }

  NodeId average(std::initializer_list<NodeId> xs) {
    return average(std::span<const NodeId>(xs.begin(), xs.size()));
  }

  // Channel-wise normalization. Training uses batch statistics over
  // (B, H, W) and updates the running buffers in place; eval reads them.
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, NormStats<S>* stats, bool training,
                    S momentum = S(0.1), S eps = S(1e-5)) {
    const Tensor<S>& in = value(x);
    const i64 C = in.shape.c;
    if (!(value(gamma).shape == TensorShape{1, C, 1, 1}) ||
        !(value(beta).shape == TensorShape{1, C, 1, 1}))
      throw ConfigError("batch_norm: gamma/beta must be 1x" + std::to_string(C) + "x1x1");
    if (stats == nullptr || stats->running_mean.shape.c != C)
      throw ConfigError("batch_norm: stats channel mismatch");

    Node n;
    n.op = Op::kBatchNorm;
    n.in = {x, gamma, beta};
    n.training = training;
    n.value = Tensor<S>(in.shape);
    n.saved_a = Tensor<S>(in.shape);          // xhat
    n.saved_b = Tensor<S>({1, C, 1, 1});      // inv_std per channel
    const i64 plane = in.shape.h * in.shape.w;
    const i64 nred = in.shape.b * plane;
    const Tensor<S>& g = value(gamma);
    const Tensor<S>& be = value(beta);
    for (i64 c = 0; c < C; ++c) {
      S mean, var;
      if (training) {
        S acc = 0;
        for (i64 b = 0; b < in.shape.b; ++b) {
          const S* p = in.data.data() + (b * C + c) * plane;
          for (i64 i = 0; i < plane; ++i) acc += p[i];
        }
        mean = acc / static_cast<S>(nred);
        S vacc = 0;
        for (i64 b = 0; b < in.shape.b; ++b) {
          const S* p = in.data.data() + (b * C + c) * plane;
          for (i64 i = 0; i < plane; ++i) {
            const S d = p[i] - mean;
            vacc += d * d;
          }
        }
        var = vacc / static_cast<S>(nred);
        auto& rm = stats->running_mean.data[static_cast<std::size_t>(c)];
        auto& rv = stats->running_var.data[static_cast<std::size_t>(c)];
        rm = (S(1) - momentum) * rm + momentum * mean;
        rv = (S(1) - momentum) * rv + momentum * var;
      } else {
        mean = stats->running_mean.data[static_cast<std::size_t>(c)];
        var = stats->running_var.data[static_cast<std::size_t>(c)];
      }
      const S inv = S(1) / std::sqrt(var + eps);
      n.saved_b.data[static_cast<std::size_t>(c)] = inv;
      const S gc = g.data[static_cast<std::size_t>(c)];
      const S bc = be.data[static_cast<std::size_t>(c)];
      for (i64 b = 0; b < in.shape.b; ++b) {
        const S* p = in.data.data() + (b * C + c) * plane;
        S* xh = n.saved_a.data.data() + (b * C + c) * plane;
        S* out = n.value.data.data() + (b * C + c) * plane;
        for (i64 i = 0; i < plane; ++i) {
          xh[i] = (p[i] - mean) * inv;
          out[i] = gc * xh[i] + bc;
        }
      }
    }
    return push(std::move(n));
  }

  // Per-column softmax of (m + noise) / tau over the row dimension.
  // m is (1, 1, N, K); the optional noise is a constant, not a node.
  NodeId softmax_columns(NodeId m, S tau, const Tensor<S>* noise = nullptr) {
    if (tau <= S(0)) throw ConfigError("softmax_columns: temperature must be > 0");
    const Tensor<S>& in = value(m);
    if (noise != nullptr && !(noise->shape == in.shape))
      throw ConfigError("softmax_columns: noise shape mismatch");
    const i64 N = in.shape.h, K = in.shape.w;
    Node n;
    n.op = Op::kSoftmaxColumns;
    n.in = {m};
    n.scalar = tau;
    n.value = Tensor<S>(in.shape);
    for (i64 j = 0; j < K; ++j) {
      S mx = -std::numeric_limits<S>::infinity();
      for (i64 r = 0; r < N; ++r) {
        const S z = logit(in, noise, r, j, K) / tau;
        if (z > mx) mx = z;
      }
      S denom = 0;
      for (i64 r = 0; r < N; ++r) {
        const S e = std::exp(logit(in, noise, r, j, K) / tau - mx);
        n.value.data[static_cast<std::size_t>(r * K + j)] = e;
        denom += e;
      }
      for (i64 r = 0; r < N; ++r) n.value.data[static_cast<std::size_t>(r * K + j)] /= denom;
    }
    return push(std::move(n));
  }

  // Per-column hard one-hot at the argmax (lowest row wins ties) with a
  // straight-through backward: the gradient passes to the soft input
  // unchanged.
  NodeId hard_onehot_st(NodeId soft) {
    const Tensor<S>& in = value(soft);
    const i64 N = in.shape.h, K = in.shape.w;
    Node n;
    n.op = Op::kHardOneHotSt;
    n.in = {soft};
    n.value = Tensor<S>(in.shape);
    for (i64 j = 0; j < K; ++j) {
      i64 best = 0;
      S bv = in.data[static_cast<std::size_t>(j)];
      for (i64 r = 1; r < N; ++r) {
        const S v = in.data[static_cast<std::size_t>(r * K + j)];
        if (v > bv) {
          bv = v;
          best = r;
        }
      }
      n.value.data[static_cast<std::size_t>(best * K + j)] = S(1);
    }
    return push(std::move(n));
  }

  // Fuses N same-shaped streams through a hard one-hot selection matrix
  // (N rows, K columns): each column votes for one stream, duplicates
  // collapse, and the unique selected streams are averaged. Backward sends
  // 1/|unique| to each selected stream and routes the soft selection
  // gradient through the one-hot input so straight-through training of the
  // selection logits works.
  NodeId select_average(std::span<const NodeId> streams, NodeId onehot) {
    if (streams.empty()) throw ConfigError("select_average: no streams");
    const Tensor<S>& sel = value(onehot);
    const i64 N = sel.shape.h, K = sel.shape.w;
    if (static_cast<i64>(streams.size()) != N)
      throw ConfigError("select_average: stream count != selection rows");
    const TensorShape shape = value(streams[0]).shape;
    for (NodeId id : streams) {
      if (!(value(id).shape == shape)) throw ConfigError("select_average: stream shape mismatch");
    }

    Node n;
    n.op = Op::kSelectAverage;
    n.extra_in.assign(streams.begin(), streams.end());
    n.in = {onehot};
    n.arg.resize(static_cast<std::size_t>(K));
    std::vector<i64> count(static_cast<std::size_t>(N), 0);
    for (i64 j = 0; j < K; ++j) {
      i64 sel_row = -1;
      for (i64 r = 0; r < N; ++r) {
        if (sel.data[static_cast<std::size_t>(r * K + j)] == S(1)) {
          sel_row = r;
          break;
        }
      }
      if (sel_row < 0) throw ConfigError("select_average: column without one-hot entry");
      n.arg[static_cast<std::size_t>(j)] = sel_row;
      ++count[static_cast<std::size_t>(sel_row)];
    }
    std::vector<i64> unique;
    for (i64 r = 0; r < N; ++r) {
      if (count[static_cast<std::size_t>(r)] > 0) unique.push_back(r);
    }
    n.value = Tensor<S>(shape);
    const S inv = S(1) / static_cast<S>(unique.size());
    for (i64 u : unique) {
      const auto& d = value(streams[static_cast<std::size_t>(u)]).data;
      for (std::size_t i = 0; i < d.size(); ++i) n.value.data[i] += d[i];
    }
    for (auto& v : n.value.data) v *= inv;
    return push(std::move(n));
  }

  // Mean per-pixel negative log-softmax likelihood over (B, H, W).
  NodeId cross_entropy(NodeId logits, const IndexMap& target) {
    const Tensor<S>& in = value(logits);
    if (in.shape.b != target.b || in.shape.h != target.h || in.shape.w != target.w)
      throw ConfigError("cross_entropy: logits " + in.shape.str() + " vs target " +
                        std::to_string(target.b) + "x" + std::to_string(target.h) + "x" +
                        std::to_string(target.w));
    const i64 C = in.shape.c;
    for (auto t : target.v) {
      if (t < 0 || t >= C) throw DataError("cross_entropy: class index " + std::to_string(t) + " out of range [0," + std::to_string(C) + ")");
    }
    Node n;
    n.op = Op::kCrossEntropy;
    n.in = {logits};
    n.target = target;
    n.saved_a = Tensor<S>(in.shape);  // softmax probabilities
    const i64 plane = in.shape.h * in.shape.w;
    double loss = 0;
    for (i64 b = 0; b < in.shape.b; ++b) {
      for (i64 p = 0; p < plane; ++p) {
        S mx = -std::numeric_limits<S>::infinity();
        for (i64 c = 0; c < C; ++c) mx = std::max(mx, in.data[static_cast<std::size_t>((b * C + c) * plane + p)]);
        S denom = 0;
        for (i64 c = 0; c < C; ++c) {
          const S e = std::exp(in.data[static_cast<std::size_t>((b * C + c) * plane + p)] - mx);
          n.saved_a.data[static_cast<std::size_t>((b * C + c) * plane + p)] = e;
          denom += e;
        }
        for (i64 c = 0; c < C; ++c) n.saved_a.data[static_cast<std::size_t>((b * C + c) * plane + p)] /= denom;
        const i64 t = target.v[static_cast<std::size_t>(b * plane + p)];
        loss -= std::log(static_cast<double>(n.saved_a.data[static_cast<std::size_t>((b * C + t) * plane + p)]));
      }
    }
    n.value = Tensor<S>::scalar(static_cast<S>(loss / static_cast<double>(in.shape.b * plane)));
    return push(std::move(n));
  }

  const Tensor<S>& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss. Parameter gradients accumulate into
  // the shared Param buffers; intermediate node gradients are freed as the
  // sweep passes them.
  void backward(NodeId loss) {
    Node& ln = nodes_[static_cast<std::size_t>(loss)];
    if (ln.value.numel() != 1) throw UsageError("backward: loss must be scalar");
    for (auto& n : nodes_) n.grad.data.clear();
    ln.grad = Tensor<S>::full({1, 1, 1, 1}, S(1));
    for (i64 id = loss; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.data.empty()) continue;
      propagate(n);
      if (n.op == Op::kParam) {
        auto& pg = n.param->grad.data;
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad.data[i];
      }
      n.grad.data.clear();
      n.grad.data.shrink_to_fit();
    }
  }

 private:
  struct Node {
    Op op = Op::kInput;
    std::array<NodeId, 3> in{-1, -1, -1};
    std::vector<NodeId> extra_in;
    Tensor<S> value;
    Tensor<S> grad;
    ParamPtr<S> param;
    int stride = 1, padding = 0;
    S scalar{};
    bool training = false;
    std::vector<i64> arg;   // maxpool winners / select_average column picks
    Tensor<S> saved_a, saved_b;
    IndexMap target;
  };

  std::vector<Node> nodes_;

  static S logit(const Tensor<S>& m, const Tensor<S>* noise, i64 r, i64 j, i64 K) {
    const auto idx = static_cast<std::size_t>(r * K + j);
    return noise ? m.data[idx] + noise->data[idx] : m.data[idx];
  }

  NodeId push(Node&& n) {
    if (check_finite && !n.value.all_finite())
      throw NumericError("non-finite value produced by op " + std::to_string(static_cast<int>(n.op)));
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  Tensor<S>& grad_buffer(NodeId id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor<S>(n.value.shape);
    return n.grad;
  }

  static void conv_forward(const Tensor<S>& in, const Tensor<S>& wt, const Tensor<S>& bs,
                           Tensor<S>& out, int stride, int padding) {
    const i64 B = in.shape.b, Ci = in.shape.c, H = in.shape.h, W = in.shape.w;
    const i64 Co = wt.shape.b, k = wt.shape.h;
    const i64 OH = out.shape.h, OW = out.shape.w;
    for (i64 b = 0; b < B; ++b) {
      for (i64 co = 0; co < Co; ++co) {
        S* op = out.data.data() + (b * Co + co) * OH * OW;
        const S bias = bs.data[static_cast<std::size_t>(co)];
        for (i64 i = 0; i < OH * OW; ++i) op[i] = bias;
        for (i64 ci = 0; ci < Ci; ++ci) {
          const S* ip = in.data.data() + (b * Ci + ci) * H * W;
          const S* wp = wt.data.data() + (co * Ci + ci) * k * k;
          for (i64 kh = 0; kh < k; ++kh) {
            for (i64 kw = 0; kw < k; ++kw) {
              const S wv = wp[kh * k + kw];
              for (i64 oh = 0; oh < OH; ++oh) {
                const i64 ih = oh * stride - padding + kh;
                if (ih < 0 || ih >= H) continue;
                const i64 lo = ow_lo(padding, kw, stride);
                const i64 hi = ow_hi(W, padding, kw, stride, OW);
                S* orow = op + oh * OW;
                const S* irow = ip + ih * W - padding + kw;
                if (stride == 1) {
                  for (i64 ow = lo; ow <= hi; ++ow) orow[ow] += wv * irow[ow];
                } else {
                  for (i64 ow = lo; ow <= hi; ++ow) orow[ow] += wv * irow[ow * stride];
                }
              }
            }
          }
        }
      }
    }
  }

  static i64 ow_lo(int padding, i64 kw, int stride) {
    const i64 num = padding - kw;
    if (num <= 0) return 0;
    return (num + stride - 1) / stride;
  }

  static i64 ow_hi(i64 W, int padding, i64 kw, int stride, i64 OW) {
    // largest ow with ow*stride - padding + kw <= W-1
    const i64 num = W - 1 + padding - kw;
    if (num < 0) return -1;
    return std::min(OW - 1, num / stride);
  }

  static void resize_forward(const Tensor<S>& in, Tensor<S>& out) {
    const i64 H = in.shape.h, W = in.shape.w;
    const i64 OH = out.shape.h, OW = out.shape.w;
    const double sy = (OH > 1 && H > 1) ? static_cast<double>(H - 1) / static_cast<double>(OH - 1) : 0.0;
    const double sx = (OW > 1 && W > 1) ? static_cast<double>(W - 1) / static_cast<double>(OW - 1) : 0.0;
    for (i64 bc = 0; bc < in.shape.b * in.shape.c; ++bc) {
      const S* src = in.data.data() + bc * H * W;
      S* dst = out.data.data() + bc * OH * OW;
      for (i64 oy = 0; oy < OH; ++oy) {
        const double fy = sy * static_cast<double>(oy);
        const i64 y0 = static_cast<i64>(fy);
        const i64 y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - static_cast<double>(y0);
        for (i64 ox = 0; ox < OW; ++ox) {
          const double fx = sx * static_cast<double>(ox);
          const i64 x0 = static_cast<i64>(fx);
          const i64 x1 = std::min(x0 + 1, W - 1);
          const double wx = fx - static_cast<double>(x0);
          const double v = (1 - wy) * ((1 - wx) * src[y0 * W + x0] + wx * src[y0 * W + x1]) +
                           wy * ((1 - wx) * src[y1 * W + x0] + wx * src[y1 * W + x1]);
          dst[oy * OW + ox] = static_cast<S>(v);
        }
      }
    }
  }

  void propagate(Node& n) {
    const Tensor<S>& g = n.grad;
    switch (n.op) {
      case Op::kInput:
      case Op::kParam:
        break;
      case Op::kAdd: {
        for (int i = 0; i < 2; ++i) {
          auto& dst = grad_buffer(n.in[static_cast<std::size_t>(i)]).data;
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g.data[j];
        }
        break;
      }
      case Op::kMul: {
        const auto& va = value(n.in[0]).data;
        const auto& vb = value(n.in[1]).data;
        auto& da = grad_buffer(n.in[0]).data;
        auto& db = grad_buffer(n.in[1]).data;
        for (std::size_t j = 0; j < da.size(); ++j) {
          da[j] += g.data[j] * vb[j];
          db[j] += g.data[j] * va[j];
        }
        break;
      }
      case Op::kScale: {
        auto& da = grad_buffer(n.in[0]).data;
        for (std::size_t j = 0; j < da.size(); ++j) da[j] += g.data[j] * n.scalar;
        break;
      }
      case Op::kSum: {
        auto& da = grad_buffer(n.in[0]).data;
        const S gv = g.data[0];
        for (auto& v : da) v += gv;
        break;
      }
      case Op::kRelu: {
        const auto& va = value(n.in[0]).data;
        auto& da = grad_buffer(n.in[0]).data;
        for (std::size_t j = 0; j < da.size(); ++j) {
          if (va[j] > S(0)) da[j] += g.data[j];
        }
        break;
      }
      case Op::kConv2d:
        conv_backward(n);
        break;
      case Op::kBilinearResize:
        resize_backward(n);
        break;
      case Op::kMaxPool2: {
        auto& da = grad_buffer(n.in[0]).data;
        for (std::size_t o = 0; o < n.arg.size(); ++o) da[static_cast<std::size_t>(n.arg[o])] += g.data[o];
        break;
      }
      case Op::kAverage: {
        const S inv = S(1) / static_cast<S>(n.extra_in.size());
        for (NodeId id : n.extra_in) {
          auto& dst = grad_buffer(id).data;
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g.data[j] * inv;
        }
        break;
      }
      case Op::kBatchNorm:
        batch_norm_backward(n);
        break;
      case Op::kSoftmaxColumns: {
        const Tensor<S>& y = n.value;
        const i64 N = y.shape.h, K = y.shape.w;
        auto& dm = grad_buffer(n.in[0]).data;
        for (i64 j = 0; j < K; ++j) {
          S dot = 0;
          for (i64 r = 0; r < N; ++r) {
            const auto idx = static_cast<std::size_t>(r * K + j);
            dot += g.data[idx] * y.data[idx];
          }
          for (i64 r = 0; r < N; ++r) {
            const auto idx = static_cast<std::size_t>(r * K + j);
            dm[idx] += y.data[idx] * (g.data[idx] - dot) / n.scalar;
          }
        }
        break;
      }
      case Op::kHardOneHotSt: {
        auto& da = grad_buffer(n.in[0]).data;
        for (std::size_t j = 0; j < da.size(); ++j) da[j] += g.data[j];
        break;
      }
      case Op::kSelectAverage:
        select_average_backward(n);
        break;
      case Op::kCrossEntropy: {
        const i64 C = n.saved_a.shape.c;
        const i64 plane = n.saved_a.shape.h * n.saved_a.shape.w;
        const i64 B = n.saved_a.shape.b;
        const S scale = g.data[0] / static_cast<S>(B * plane);
        auto& dl = grad_buffer(n.in[0]).data;
        for (i64 b = 0; b < B; ++b) {
          for (i64 p = 0; p < plane; ++p) {
            const i64 t = n.target.v[static_cast<std::size_t>(b * plane + p)];
            for (i64 c = 0; c < C; ++c) {
              const auto idx = static_cast<std::size_t>((b * C + c) * plane + p);
              S d = n.saved_a.data[idx];
              if (c == t) d -= S(1);
              dl[idx] += d * scale;
            }
          }
        }
        break;
      }
    }
  }

  void conv_backward(Node& n) {
    const Tensor<S>& in = value(n.in[0]);
    const Tensor<S>& wt = value(n.in[1]);
    const Tensor<S>& g = n.grad;
    Tensor<S>& din = grad_buffer(n.in[0]);
    Tensor<S>& dw = grad_buffer(n.in[1]);
    Tensor<S>& db = grad_buffer(n.in[2]);
    const i64 B = in.shape.b, Ci = in.shape.c, H = in.shape.h, W = in.shape.w;
    const i64 Co = wt.shape.b, k = wt.shape.h;
    const i64 OH = g.shape.h, OW = g.shape.w;
    const int stride = n.stride, padding = n.padding;
    for (i64 b = 0; b < B; ++b) {
      for (i64 co = 0; co < Co; ++co) {
        const S* gp = g.data.data() + (b * Co + co) * OH * OW;
        S dbacc = 0;
        for (i64 i = 0; i < OH * OW; ++i) dbacc += gp[i];
        db.data[static_cast<std::size_t>(co)] += dbacc;
        for (i64 ci = 0; ci < Ci; ++ci) {
          const S* ip = in.data.data() + (b * Ci + ci) * H * W;
          S* dip = din.data.data() + (b * Ci + ci) * H * W;
          const S* wp = wt.data.data() + (co * Ci + ci) * k * k;
          S* dwp = dw.data.data() + (co * Ci + ci) * k * k;
          for (i64 kh = 0; kh < k; ++kh) {
            for (i64 kw = 0; kw < k; ++kw) {
              const S wv = wp[kh * k + kw];
              S dwacc = 0;
              for (i64 oh = 0; oh < OH; ++oh) {
                const i64 ih = oh * stride - padding + kh;
                if (ih < 0 || ih >= H) continue;
                const i64 lo = ow_lo(padding, kw, stride);
                const i64 hi = ow_hi(W, padding, kw, stride, OW);
                const S* grow = gp + oh * OW;
                const S* irow = ip + ih * W - padding + kw;
                S* dirow = dip + ih * W - padding + kw;
                for (i64 ow = lo; ow <= hi; ++ow) {
                  const S gv = grow[ow];
                  dwacc += gv * irow[ow * stride];
                  dirow[ow * stride] += wv * gv;
                }
              }
              dwp[kh * k + kw] += dwacc;
            }
          }
        }
      }
    }
  }

  void resize_backward(Node& n) {
    const Tensor<S>& in = value(n.in[0]);
    const Tensor<S>& g = n.grad;
    Tensor<S>& din = grad_buffer(n.in[0]);
    const i64 H = in.shape.h, W = in.shape.w;
    const i64 OH = g.shape.h, OW = g.shape.w;
    if (OH == H && OW == W) {
      for (std::size_t j = 0; j < din.data.size(); ++j) din.data[j] += g.data[j];
      return;
    }
    const double sy = (OH > 1 && H > 1) ? static_cast<double>(H - 1) / static_cast<double>(OH - 1) : 0.0;
    const double sx = (OW > 1 && W > 1) ? static_cast<double>(W - 1) / static_cast<double>(OW - 1) : 0.0;
    for (i64 bc = 0; bc < in.shape.b * in.shape.c; ++bc) {
      S* dst = din.data.data() + bc * H * W;
      const S* gp = g.data.data() + bc * OH * OW;
      for (i64 oy = 0; oy < OH; ++oy) {
        const double fy = sy * static_cast<double>(oy);
        const i64 y0 = static_cast<i64>(fy);
        const i64 y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - static_cast<double>(y0);
        for (i64 ox = 0; ox < OW; ++ox) {
          const double fx = sx * static_cast<double>(ox);
          const i64 x0 = static_cast<i64>(fx);
          const i64 x1 = std::min(x0 + 1, W - 1);
          const double wx = fx - static_cast<double>(x0);
          const S gv = gp[oy * OW + ox];
          dst[y0 * W + x0] += static_cast<S>((1 - wy) * (1 - wx)) * gv;
          dst[y0 * W + x1] += static_cast<S>((1 - wy) * wx) * gv;
          dst[y1 * W + x0] += static_cast<S>(wy * (1 - wx)) * gv;
          dst[y1 * W + x1] += static_cast<S>(wy * wx) * gv;
        }
      }
    }
  }

  void batch_norm_backward(Node& n) {
    const Tensor<S>& g = n.grad;
    const Tensor<S>& xhat = n.saved_a;
    const Tensor<S>& inv_std = n.saved_b;
    const Tensor<S>& gamma = value(n.in[1]);
    Tensor<S>& dx = grad_buffer(n.in[0]);
    Tensor<S>& dgamma = grad_buffer(n.in[1]);
    Tensor<S>& dbeta = grad_buffer(n.in[2]);
    const i64 B = g.shape.b, C = g.shape.c;
    const i64 plane = g.shape.h * g.shape.w;
    const i64 nred = B * plane;
    for (i64 c = 0; c < C; ++c) {
      const S gc = gamma.data[static_cast<std::size_t>(c)];
      const S inv = inv_std.data[static_cast<std::size_t>(c)];
      S sum_g = 0, sum_gx = 0;
      for (i64 b = 0; b < B; ++b) {
        const S* gp = g.data.data() + (b * C + c) * plane;
        const S* xp = xhat.data.data() + (b * C + c) * plane;
        for (i64 i = 0; i < plane; ++i) {
          sum_g += gp[i];
          sum_gx += gp[i] * xp[i];
        }
      }
      dbeta.data[static_cast<std::size_t>(c)] += sum_g;
      dgamma.data[static_cast<std::size_t>(c)] += sum_gx;
      if (n.training) {
        const S k1 = gc * inv / static_cast<S>(nred);
        for (i64 b = 0; b < B; ++b) {
          const S* gp = g.data.data() + (b * C + c) * plane;
          const S* xp = xhat.data.data() + (b * C + c) * plane;
          S* dp = dx.data.data() + (b * C + c) * plane;
          for (i64 i = 0; i < plane; ++i) {
            dp[i] += k1 * (static_cast<S>(nred) * gp[i] - sum_g - xp[i] * sum_gx);
          }
        }
      } else {
        const S k = gc * inv;
        for (i64 b = 0; b < B; ++b) {
          const S* gp = g.data.data() + (b * C + c) * plane;
          S* dp = dx.data.data() + (b * C + c) * plane;
          for (i64 i = 0; i < plane; ++i) dp[i] += k * gp[i];
        }
      }
    }
  }

  void select_average_backward(Node& n) {
    const Tensor<S>& g = n.grad;
    const i64 N = static_cast<i64>(n.extra_in.size());
    const i64 K = static_cast<i64>(n.arg.size());
    std::vector<i64> count(static_cast<std::size_t>(N), 0);
    for (i64 v : n.arg) ++count[static_cast<std::size_t>(v)];
    i64 n_unique = 0;
    for (i64 c : count) n_unique += (c > 0) ? 1 : 0;
    const S inv_u = S(1) / static_cast<S>(n_unique);
    // streams: hard path only
    for (i64 r = 0; r < N; ++r) {
      if (count[static_cast<std::size_t>(r)] == 0) continue;
      auto& dst = grad_buffer(n.extra_in[static_cast<std::size_t>(r)]).data;
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += g.data[j] * inv_u;
    }
    // selection matrix: d out / d sel[r, j] = w_j * <g, x_r>
    std::vector<S> a(static_cast<std::size_t>(N), S(0));
    for (i64 r = 0; r < N; ++r) {
      const auto& xd = value(n.extra_in[static_cast<std::size_t>(r)]).data;
      S acc = 0;
      for (std::size_t j = 0; j < xd.size(); ++j) acc += g.data[j] * xd[j];
      a[static_cast<std::size_t>(r)] = acc;
    }
    auto& dsel = grad_buffer(n.in[0]).data;
    for (i64 j = 0; j < K; ++j) {
      const i64 sj = n.arg[static_cast<std::size_t>(j)];
      const S wj = inv_u / static_cast<S>(count[static_cast<std::size_t>(sj)]);
      for (i64 r = 0; r < N; ++r) dsel[static_cast<std::size_t>(r * K + j)] += wj * a[static_cast<std::size_t>(r)];
    }
  }
};

}  // namespace bixnas
