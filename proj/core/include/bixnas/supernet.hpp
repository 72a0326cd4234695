#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "bixnas/graph.hpp"
#include "bixnas/rng.hpp"

namespace bixnas {

// The searchable network family: 2T extraction stages (odd = encode, even =
// decode) over L resolution levels. Level l runs at input_hw >> (l-1) with
// base_width * multiplier^(l-1) channels. Encoder/decoder blocks at the same
// level are one weight-bearing object reused by every iteration.
struct SuperNetConfig {
  i64 levels = 3;      // L
  i64 iterations = 2;  // T
  i64 in_channels = 3;
  i64 num_classes = 2;
  i64 base_width = 8;
  i64 width_multiplier = 2;
  double bn_momentum = 0.1;

  i64 stages() const { return 2 * iterations; }
  i64 streams() const { return levels + 1; }  // N incoming streams per searching block
  i64 columns() const { return streams() - 2; }
  bool encode_stage(i64 t) const { return t % 2 == 1; }

  i64 width(i64 level) const {
    i64 w = base_width;
    for (i64 i = 1; i < level; ++i) w *= width_multiplier;
    return w;
  }

  void validate() const {
    if (levels < 2) throw ConfigError("levels must be >= 2, got " + std::to_string(levels));
    if (iterations < 1) throw ConfigError("iterations must be >= 1, got " + std::to_string(iterations));
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (base_width < 1 || width_multiplier < 1) throw ConfigError("channel widths must be positive");
  }
};

struct BlockKey {
  i64 stage = 0;  // 1..2T; 0 is reserved for the stem
  i64 level = 0;  // 1..L

  auto operator<=>(const BlockKey&) const = default;
  std::string str() const { return std::to_string(stage) + "." + std::to_string(level); }
};

// Incoming stream order of a searching block (stage >= 2), N = L + 1:
//   i in [0, L): cross-stage skip from (stage-1, level i+1), bilinear-aligned
//   i == L:      within-stage sequential input --
//                encode level > 1: (stage, level-1) max-pooled
//                decode level < L: (stage, level+1) bilinear-upsampled
//                entry blocks:     (stage-1, level), same resolution
// Selection-matrix rows follow this order.
inline constexpr i64 kSeqStream(i64 levels) { return levels; }

inline BlockKey stream_source(const SuperNetConfig& cfg, BlockKey block, i64 stream) {
  if (block.stage < 2) throw ConfigError("stream_source: not a searching block: " + block.str());
  if (stream < 0 || stream > cfg.levels)
    throw ConfigError("stream index out of range: " + std::to_string(stream));
  if (stream < cfg.levels) return {block.stage - 1, stream + 1};
  const bool enc = cfg.encode_stage(block.stage);
  const bool entry = enc ? (block.level == 1) : (block.level == cfg.levels);
  if (entry) return {block.stage - 1, block.level};
  return {block.stage, enc ? block.level - 1 : block.level + 1};
}

// Active incoming streams per searching block. The dense topology activates
// all N streams everywhere; genomes and candidate sets are sparse subsets.
struct Topology {
  std::map<BlockKey, std::vector<i64>> active;

  bool operator==(const Topology&) const = default;

  const std::vector<i64>& streams_of(BlockKey k) const {
    auto it = active.find(k);
    if (it == active.end()) throw ConfigError("topology: missing block " + k.str());
    return it->second;
  }
};

inline Topology dense_topology(const SuperNetConfig& cfg) {
  Topology t;
  std::vector<i64> all;
  for (i64 i = 0; i < cfg.streams(); ++i) all.push_back(i);
  for (i64 stage = 2; stage <= cfg.stages(); ++stage)
    for (i64 level = 1; level <= cfg.levels; ++level) t.active[{stage, level}] = all;
  return t;
}

inline void validate_topology(const SuperNetConfig& cfg, const Topology& topo) {
  for (i64 stage = 2; stage <= cfg.stages(); ++stage) {
    for (i64 level = 1; level <= cfg.levels; ++level) {
      const BlockKey k{stage, level};
      auto it = topo.active.find(k);
      if (it == topo.active.end()) throw ConfigError("topology: missing block " + k.str());
      if (it->second.empty()) throw ConfigError("topology: block " + k.str() + " has an empty active stream set");
      i64 prev = -1;
      for (i64 s : it->second) {
        if (s < 0 || s >= cfg.streams())
          throw ConfigError("topology: block " + k.str() + " stream " + std::to_string(s) + " out of range");
        if (s <= prev) throw ConfigError("topology: block " + k.str() + " streams must be sorted unique");
        prev = s;
      }
    }
  }
}

// a's per-block streams all contained in b's (same block set).
inline bool topology_subset(const Topology& a, const Topology& b) {
  if (a.active.size() != b.active.size()) return false;
  for (const auto& [k, sa] : a.active) {
    auto it = b.active.find(k);
    if (it == b.active.end()) return false;
    for (i64 s : sa) {
      if (!std::binary_search(it->second.begin(), it->second.end(), s)) return false;
    }
  }
  return true;
}

// Canonical string for deterministic comparisons / tie-breaks.
inline std::string topology_key(const Topology& t) {
  std::string out;
  for (const auto& [k, streams] : t.active) {
    out += k.str();
    out += ':';
    for (std::size_t i = 0; i < streams.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(streams[i]);
    }
    out += ';';
  }
  return out;
}

// ---- Execution planning -------------------------------------------------
// A plan is built once from (config, topology, stage window) and shared by
// the forward pass and the MAC counter, so the two can never disagree about
// which blocks run.

enum class Align { kNone, kBilinear, kMaxPool };

struct RouteStep {
  i64 stream = -1;      // -1 for the stage-1 chain edge
  BlockKey source;      // stage 0 = stem output
  Align align = Align::kNone;
  std::string proj;     // base name of the 1x1 projection params, "" if none
};

struct BlockStep {
  BlockKey key;
  std::vector<RouteStep> routes;
};

struct ExecutionPlan {
  i64 from_stage = 1;   // first stage executed; sources in from_stage-1 are replayed
  i64 upto_stage = 0;   // 0 = run through the classification head
  std::vector<BlockStep> steps;
};

inline std::vector<i64> stage_level_order(const SuperNetConfig& cfg, i64 stage) {
  std::vector<i64> order;
  if (cfg.encode_stage(stage)) {
    for (i64 l = 1; l <= cfg.levels; ++l) order.push_back(l);
  } else {
    for (i64 l = cfg.levels; l >= 1; --l) order.push_back(l);
  }
  return order;
}

inline std::string route_proj_name(BlockKey target, i64 stream) {
  if (stream < 0) return "proj." + target.str() + ".seq";
  return "proj." + target.str() + "." + std::to_string(stream);
}

inline ExecutionPlan build_plan(const SuperNetConfig& cfg, const Topology& topo,
                                i64 from_stage = 1, i64 upto_stage = 0) {
  cfg.validate();
  validate_topology(cfg, topo);
  const i64 S = cfg.stages();
  if (from_stage < 1 || from_stage > S) throw UsageError("plan: from_stage out of range");
  if (upto_stage != 0 && (upto_stage < from_stage || upto_stage > S))
    throw UsageError("plan: upto_stage out of range");

  // Reachability backward from the roots; a block not consumed downstream is
  // never executed.
  std::set<BlockKey> needed;
  std::vector<BlockKey> frontier;
  auto require = [&](BlockKey k) {
    if (k.stage < from_stage) return;  // replayed feature or stem input
    if (needed.insert(k).second) frontier.push_back(k);
  };
  if (upto_stage == 0) {
    require({S, 1});
  } else {
    for (i64 l = 1; l <= cfg.levels; ++l) require({upto_stage, l});
  }
  while (!frontier.empty()) {
    const BlockKey k = frontier.back();
    frontier.pop_back();
    if (k.stage == 1) {
      if (k.level > 1) require({1, k.level - 1});
      continue;
    }
    for (i64 s : topo.streams_of(k)) require(stream_source(cfg, k, s));
  }

  ExecutionPlan plan;
  plan.from_stage = from_stage;
  plan.upto_stage = upto_stage;
  const i64 last = upto_stage == 0 ? S : upto_stage;
  for (i64 t = from_stage; t <= last; ++t) {
    for (i64 l : stage_level_order(cfg, t)) {
      const BlockKey k{t, l};
      if (!needed.count(k)) continue;
      BlockStep step;
      step.key = k;
      if (t == 1) {
        RouteStep r;
        if (l == 1) {
          r.source = {0, 0};  // stem
          r.align = Align::kNone;
        } else {
          r.source = {1, l - 1};
          r.align = Align::kMaxPool;
          r.proj = route_proj_name(k, -1);
        }
        step.routes.push_back(std::move(r));
      } else {
        for (i64 s : topo.streams_of(k)) {
          RouteStep r;
          r.stream = s;
          r.source = stream_source(cfg, k, s);
          if (s == kSeqStream(cfg.levels)) {
            const bool enc = cfg.encode_stage(t);
            const bool entry = enc ? (l == 1) : (l == cfg.levels);
            r.align = entry ? Align::kNone : (enc ? Align::kMaxPool : Align::kBilinear);
          } else {
            r.align = (s + 1 == l) ? Align::kNone : Align::kBilinear;
          }
          r.proj = route_proj_name(k, s);
          step.routes.push_back(std::move(r));
        }
      }
      plan.steps.push_back(std::move(step));
    }
  }
  return plan;
}

// ---- Instrumentation ----------------------------------------------------

struct ForwardAudit {
  std::map<i64, i64> stage_forwards;           // stage -> times that stage ran
  std::map<std::string, i64> block_forwards;   // block key -> applications
  i64 backward_calls = 0;

  void merge(const ForwardAudit& o) {
    for (auto& [k, v] : o.stage_forwards) stage_forwards[k] += v;
    for (auto& [k, v] : o.block_forwards) block_forwards[k] += v;
    backward_calls += o.backward_calls;
  }

  i64 total_stage_forwards() const {
    i64 n = 0;
    for (auto& [k, v] : stage_forwards) n += v;
    return n;
  }
};

// Collects digests of the skipped features crossing one stage boundary:
// every route whose source lives in `boundary_stage` and whose target lives
// in `boundary_stage + 1` records a hash of the raw source tensor.
struct FairnessProbe {
  i64 boundary_stage = 0;
  struct Rec {
    BlockKey block;
    i64 stream;
    u64 digest;
  };
  std::vector<Rec> recs;
};

// Phase-1 selection matrices, keyed by searching block; rows follow the
// stream order documented at stream_source.
template <class S>
struct SelectionSet {
  std::map<BlockKey, ParamPtr<S>> matrices;
  double tau = 1.0;
};

template <class S>
struct RunOptions {
  bool training = false;
  // When set, searching blocks fuse through the hard selection matrices
  // (requires a dense plan so all N streams exist); otherwise the plan's
  // active streams are element-wise averaged.
  const SelectionSet<S>* selection = nullptr;
  const std::map<BlockKey, Tensor<S>>* noise = nullptr;  // per-block Gumbel noise
  ForwardAudit* audit = nullptr;
  FairnessProbe* probe = nullptr;
};

// ---- The SuperNet -------------------------------------------------------

template <class S>
class SuperNet {
 public:
  SuperNet(SuperNetConfig cfg, u64 seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "supernet_init", 0));
    // stem: 1x1 projection of the raw input to the level-1 width
    add_linear("stem", cfg_.in_channels, cfg_.width(1), rng);
    for (i64 l = 1; l <= cfg_.levels; ++l) add_block("enc." + std::to_string(l), cfg_.width(l), rng);
    for (i64 l = 1; l <= cfg_.levels; ++l) add_block("dec." + std::to_string(l), cfg_.width(l), rng);
    add_linear("head", cfg_.width(1), cfg_.num_classes, rng);
    // stage-1 chain projections
    for (i64 l = 2; l <= cfg_.levels; ++l)
      add_linear(route_proj_name({1, l}, -1), cfg_.width(l - 1), cfg_.width(l), rng);
    // per-route projections of every searching block (dense superset; sparse
    // topologies simply leave some unused)
    for (i64 t = 2; t <= cfg_.stages(); ++t) {
      for (i64 l : stage_level_order(cfg_, t)) {
        const BlockKey k{t, l};
        for (i64 s = 0; s < cfg_.streams(); ++s) {
          const BlockKey src = stream_source(cfg_, k, s);
          add_linear(route_proj_name(k, s), cfg_.width(src.level), cfg_.width(l), rng);
        }
      }
    }
  }

  const SuperNetConfig& config() const { return cfg_; }
  const std::vector<ParamPtr<S>>& params() const { return params_; }

  ParamPtr<S> param(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }

  // Distinct weight-bearing block identity (weight-sharing assertion hook):
  // the level-l encoder used at every odd stage is this one object.
  ParamPtr<S> block_conv1(bool encoder, i64 level) const {
    return param((encoder ? "enc." : "dec.") + std::to_string(level) + ".conv1.w");
  }

  template <class Map>
  void snapshot_state(Map& out) const {
    for (const auto& p : params_) out[p->name] = cast<double>(p->value);
    for (const auto& [name, st] : stats_) {
      out[name + ".rm"] = cast<double>(st.running_mean);
      out[name + ".rv"] = cast<double>(st.running_var);
    }
  }

  template <class Map>
  void restore_state(const Map& in) {
    for (const auto& p : params_) {
      auto it = in.find(p->name);
      if (it == in.end()) throw DataError("checkpoint missing parameter: " + p->name);
      if (!(it->second.shape == p->value.shape))
        throw DataError("checkpoint shape mismatch for " + p->name);
      p->value = cast<S>(it->second);
    }
    for (auto& [name, st] : stats_) {
      auto rm = in.find(name + ".rm");
      auto rv = in.find(name + ".rv");
      if (rm == in.end() || rv == in.end()) throw DataError("checkpoint missing norm stats: " + name);
      st.running_mean = cast<S>(rm->second);
      st.running_var = cast<S>(rv->second);
    }
  }

  // Full forward through the classification head.
  typename Graph<S>::NodeId forward(Graph<S>& g, typename Graph<S>::NodeId input,
                                    const Topology& topo, const RunOptions<S>& opt = {}) {
    const ExecutionPlan plan = build_plan(cfg_, topo, 1, 0);
    auto feats = run(g, plan, input, nullptr, opt);
    return head_of(g, feats, opt);
  }

  typename Graph<S>::NodeId forward(Graph<S>& g, const ExecutionPlan& plan,
                                    typename Graph<S>::NodeId input, const RunOptions<S>& opt = {}) {
    if (plan.upto_stage != 0 || plan.from_stage != 1)
      throw UsageError("forward: plan must span stem to head");
    auto feats = run(g, plan, input, nullptr, opt);
    return head_of(g, feats, opt);
  }

  // Per-level features after stage `upto` (level index 1..L -> vector slot 0..L-1).
  std::vector<typename Graph<S>::NodeId> stage_outputs(Graph<S>& g, typename Graph<S>::NodeId input,
                                                       const Topology& topo, i64 upto,
                                                       const RunOptions<S>& opt = {}) {
    if (upto < 1 || upto > cfg_.stages()) throw UsageError("stage_outputs: stage out of range");
    const ExecutionPlan plan = build_plan(cfg_, topo, 1, upto);
    auto feats = run(g, plan, input, nullptr, opt);
    std::vector<typename Graph<S>::NodeId> out;
    for (i64 l = 1; l <= cfg_.levels; ++l) out.push_back(feats.at({upto, l}));
    return out;
  }

  // Resume after `prev_stage` whose per-level features are supplied; returns
  // head logits. prev_stage 0 degenerates to a full forward.
  typename Graph<S>::NodeId forward_from(Graph<S>& g,
                                         const std::vector<typename Graph<S>::NodeId>& prev,
                                         i64 prev_stage, const Topology& topo,
                                         const RunOptions<S>& opt = {},
                                         typename Graph<S>::NodeId input = -1) {
    if (prev_stage < 0 || prev_stage >= cfg_.stages()) throw UsageError("forward_from: stage out of range");
    if (prev_stage == 0) {
      if (input < 0) throw UsageError("forward_from: full replay needs the input node");
      return forward(g, input, topo, opt);
    }
    if (static_cast<i64>(prev.size()) != cfg_.levels)
      throw UsageError("forward_from: need one feature per level");
    const ExecutionPlan plan = build_plan(cfg_, topo, prev_stage + 1, 0);
    auto feats = run(g, plan, -1, &prev, opt);
    return head_of(g, feats, opt);
  }

  NormStats<S>& stats(const std::string& name) { return stats_.at(name); }

 private:
  using NodeId = typename Graph<S>::NodeId;

  SuperNetConfig cfg_;
  std::vector<ParamPtr<S>> params_;
  std::map<std::string, ParamPtr<S>> by_name_;
  std::map<std::string, NormStats<S>> stats_;

  ParamPtr<S> add_param(const std::string& name, Tensor<S> value) {
    auto p = std::make_shared<Param<S>>(name, std::move(value));
    params_.push_back(p);
    by_name_[name] = p;
    return p;
  }

  // 1x1 conv with bias, linear (no activation): stem, head, route projections.
  void add_linear(const std::string& base, i64 cin, i64 cout, Rng& rng) {
    const S stddev = static_cast<S>(std::sqrt(1.0 / static_cast<double>(cin)));
    add_param(base + ".w", Tensor<S>::randn({cout, cin, 1, 1}, rng, stddev));
    add_param(base + ".b", Tensor<S>({1, cout, 1, 1}));
  }

  // [conv3x3 -> norm -> relu] x2, width-preserving.
  void add_block(const std::string& base, i64 width, Rng& rng) {
    const S stddev = static_cast<S>(std::sqrt(2.0 / static_cast<double>(width * 9)));
    for (int i = 1; i <= 2; ++i) {
      const std::string conv = base + ".conv" + std::to_string(i);
      const std::string bn = base + ".bn" + std::to_string(i);
      add_param(conv + ".w", Tensor<S>::randn({width, width, 3, 3}, rng, stddev));
      add_param(conv + ".b", Tensor<S>({1, width, 1, 1}));
      add_param(bn + ".g", Tensor<S>::full({1, width, 1, 1}, S(1)));
      add_param(bn + ".b", Tensor<S>({1, width, 1, 1}));
      stats_.emplace(bn, NormStats<S>(width));
    }
  }

  NodeId apply_projection(Graph<S>& g, NodeId x, const std::string& base) {
    return g.conv2d(x, g.param(param(base + ".w")), g.param(param(base + ".b")), 1, 0);
  }

  NodeId apply_block(Graph<S>& g, NodeId x, const std::string& base, bool training) {
    for (int i = 1; i <= 2; ++i) {
      const std::string conv = base + ".conv" + std::to_string(i);
      const std::string bn = base + ".bn" + std::to_string(i);
      x = g.conv2d(x, g.param(param(conv + ".w")), g.param(param(conv + ".b")), 1, 1);
      x = g.batch_norm(x, g.param(param(bn + ".g")), g.param(param(bn + ".b")), &stats_.at(bn),
                       training, static_cast<S>(cfg_.bn_momentum));
      x = g.relu(x);
    }
    return x;
  }

  NodeId head_of(Graph<S>& g, const std::map<BlockKey, NodeId>& feats, const RunOptions<S>&) {
    const NodeId top = feats.at({cfg_.stages(), 1});
    return g.conv2d(top, g.param(param("head.w")), g.param(param("head.b")), 1, 0);
  }

  std::map<BlockKey, NodeId> run(Graph<S>& g, const ExecutionPlan& plan, NodeId input,
                                 const std::vector<NodeId>* replay, const RunOptions<S>& opt) {
    std::map<BlockKey, NodeId> feats;
    i64 in_h = 0, in_w = 0;
    if (plan.from_stage == 1) {
      if (input < 0) throw UsageError("run: missing input node");
      const TensorShape& is = g.value(input).shape;
      if (is.c != cfg_.in_channels)
        throw ConfigError("input has " + std::to_string(is.c) + " channels, expected " +
                          std::to_string(cfg_.in_channels));
      const i64 div = i64(1) << (cfg_.levels - 1);
      if (is.h % div != 0 || is.w % div != 0)
        throw ConfigError("input spatial dims must be divisible by " + std::to_string(div) +
                          ", got " + is.str());
      in_h = is.h;
      in_w = is.w;
      feats[{0, 0}] = g.conv2d(input, g.param(param("stem.w")), g.param(param("stem.b")), 1, 0);
    } else {
      const TensorShape& fs = g.value((*replay)[0]).shape;
      in_h = fs.h;
      in_w = fs.w;
      for (i64 l = 1; l <= cfg_.levels; ++l) feats[{plan.from_stage - 1, l}] = (*replay)[static_cast<std::size_t>(l - 1)];
    }
    auto level_h = [&](i64 l) { return in_h >> (l - 1); };
    auto level_w = [&](i64 l) { return in_w >> (l - 1); };

    std::set<i64> stages_touched;
    for (const BlockStep& step : plan.steps) {
      const BlockKey k = step.key;
      std::vector<NodeId> streams;
      for (const RouteStep& r : step.routes) {
        NodeId src = feats.at(r.source);
        if (opt.probe && k.stage == opt.probe->boundary_stage + 1 && r.source.stage == opt.probe->boundary_stage)
          opt.probe->recs.push_back({k, r.stream, digest(g.value(src))});
        NodeId x = src;
        switch (r.align) {
          case Align::kNone:
            break;
          case Align::kMaxPool:
            x = g.max_pool2(x);
            break;
          case Align::kBilinear:
            x = g.bilinear_resize(x, level_h(k.level), level_w(k.level));
            break;
        }
        if (!r.proj.empty()) x = apply_projection(g, x, r.proj);
        streams.push_back(x);
      }

      NodeId fused;
      const bool searching = k.stage >= 2;
      if (searching && opt.selection != nullptr) {
        if (static_cast<i64>(streams.size()) != cfg_.streams())
          throw UsageError("selection fusion requires a dense plan at block " + k.str());
        const auto& m = opt.selection->matrices.at(k);
        const Tensor<S>* noise = nullptr;
        if (opt.noise) {
          auto it = opt.noise->find(k);
          if (it != opt.noise->end()) noise = &it->second;
        }
        NodeId soft = g.softmax_columns(g.param(m), static_cast<S>(opt.selection->tau), noise);
        NodeId hard = g.hard_onehot_st(soft);
        fused = g.select_average(std::span<const NodeId>(streams.data(), streams.size()), hard);
      } else {
        fused = g.average(std::span<const NodeId>(streams.data(), streams.size()));
      }

      const std::string block_name =
          (cfg_.encode_stage(k.stage) ? "enc." : "dec.") + std::to_string(k.level);
      feats[k] = apply_block(g, fused, block_name, opt.training);
      if (opt.audit) {
        ++opt.audit->block_forwards[k.str()];
        stages_touched.insert(k.stage);
      }
    }
    if (opt.audit) {
      for (i64 t : stages_touched) ++opt.audit->stage_forwards[t];
    }
    return feats;
  }
};

}  // namespace bixnas
