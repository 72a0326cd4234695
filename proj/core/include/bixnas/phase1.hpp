#pragma once

#include <vector>

#include "bixnas/tasks.hpp"

namespace bixnas {

// Zero-initialized N x (N-2) selection matrices, one per searching block
// (uniform selection probability at search start).
template <class S>
SelectionSet<S> make_selection_matrices(const SuperNetConfig& cfg, double tau = 1.0) {
  if (cfg.streams() < 3) throw ConfigError("selection matrices need N >= 3 incoming streams");
  SelectionSet<S> sel;
  sel.tau = tau;
  for (i64 t = 2; t <= cfg.stages(); ++t) {
    for (i64 l = 1; l <= cfg.levels; ++l) {
      const BlockKey k{t, l};
      sel.matrices[k] = std::make_shared<Param<S>>(
          "sel." + k.str(), Tensor<S>({1, 1, cfg.streams(), cfg.columns()}));
    }
  }
  return sel;
}

// Noise-free candidate extraction: unique per-column argmax rows, ties to
// the lowest row; result is sorted and satisfies 1 <= |C| <= N-2.
template <class S>
std::vector<i64> extract_candidates(const Tensor<S>& m) {
  const i64 N = m.shape.h, K = m.shape.w;
  if (K < 1 || N < 3) throw ConfigError("extract_candidates: matrix must be N x (N-2), N >= 3");
  std::set<i64> rows;
  for (i64 j = 0; j < K; ++j) {
    i64 best = 0;
    S bv = m.data[static_cast<std::size_t>(j)];
    for (i64 r = 1; r < N; ++r) {
      const S v = m.data[static_cast<std::size_t>(r * K + j)];
      if (v > bv) {
        bv = v;
        best = r;
      }
    }
    rows.insert(best);
  }
  return {rows.begin(), rows.end()};
}

template <class S>
Topology extract_all_candidates(const SuperNetConfig&, const SelectionSet<S>& sel) {
  Topology t;
  for (const auto& [k, m] : sel.matrices) t.active[k] = extract_candidates(m->value);
  return t;
}

// Per-block fresh Gumbel noise shaped like the selection matrices.
template <class S>
std::map<BlockKey, Tensor<S>> sample_gumbel_noise(const SuperNetConfig& cfg, Rng& rng) {
  std::map<BlockKey, Tensor<S>> out;
  for (i64 t = 2; t <= cfg.stages(); ++t) {
    for (i64 l = 1; l <= cfg.levels; ++l) {
      Tensor<S> n({1, 1, cfg.streams(), cfg.columns()});
      for (auto& v : n.data) v = static_cast<S>(rng.gumbel());
      out[{t, l}] = std::move(n);
    }
  }
  return out;
}

struct Phase1Config {
  TrainSchedule schedule;  // defaults: 30 epochs, lr 1e-3, inverse-time 3e-3
  double tau = 1.0;
};

struct Phase1Result {
  SelectionSet<float> selection;
  Topology candidates;
  std::vector<EpochLog> log;
  TensorMap state;  // weights + norm stats + selection matrices
};

// Joint optimization: one Adam over SuperNet weights and all selection
// matrices together; Gumbel noise on training steps, pure argmax at eval.
Phase1Result train_phase1(SuperNet<float>& net, const Dataset& data, const Phase1Config& cfg,
                          u64 seed, i64 threads = 1);

}  // namespace bixnas
