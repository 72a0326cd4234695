#include "bixnas/complexity.hpp"

#include <boost/multiprecision/cpp_int.hpp>

namespace bixnas {

namespace {

using BigInt = boost::multiprecision::cpp_int;

BigInt binomial(i64 n, i64 k) {
  if (k < 0 || k > n) return 0;
  BigInt r = 1;
  for (i64 i = 1; i <= k; ++i) {
    r *= (n - k + i);
    r /= i;
  }
  return r;
}

BigInt search_space_big(i64 N, i64 L, i64 T) {
  if (N < 3) throw ConfigError("search space needs N >= 3 (no valid subset size), got N=" + std::to_string(N));
  if (L < 1 || T < 1) throw ConfigError("search space needs L >= 1 and T >= 1");
  BigInt per_block = 0;
  for (i64 k = 1; k <= N - 2; ++k) per_block += binomial(N, k);
  const i64 blocks = L * (2 * T - 1);
  BigInt out = 1;
  for (i64 i = 0; i < blocks; ++i) out *= per_block;
  return out;
}

}  // namespace

std::string search_space_size(i64 N, i64 L, i64 T) { return search_space_big(N, L, T).str(); }

u64 search_space_size_u64(i64 N, i64 L, i64 T) {
  const BigInt v = search_space_big(N, L, T);
  if (v > BigInt(std::numeric_limits<u64>::max()))
    throw NumericError("search space size exceeds 64 bits; use the string form");
  return static_cast<u64>(v);
}

MacsReport macs(const SuperNetConfig& cfg, const Topology& topo, const TensorShape& input_shape) {
  cfg.validate();
  if (input_shape.c != cfg.in_channels)
    throw ConfigError("macs: input channels " + std::to_string(input_shape.c) + " != config " +
                      std::to_string(cfg.in_channels));
  const i64 div = i64(1) << (cfg.levels - 1);
  if (input_shape.h % div != 0 || input_shape.w % div != 0)
    throw ConfigError("macs: input spatial dims must be divisible by " + std::to_string(div));

  const ExecutionPlan plan = build_plan(cfg, topo, 1, 0);
  const u64 B = static_cast<u64>(input_shape.b);
  auto lh = [&](i64 l) { return static_cast<u64>(input_shape.h >> (l - 1)); };
  auto lw = [&](i64 l) { return static_cast<u64>(input_shape.w >> (l - 1)); };
  auto width = [&](i64 l) { return static_cast<u64>(cfg.width(l)); };

  MacsReport rep;
  rep.per_block["stem"] =
      B * static_cast<u64>(cfg.in_channels) * width(1) * lh(1) * lw(1);
  for (const BlockStep& step : plan.steps) {
    const i64 l = step.key.level;
    u64 m = 0;
    for (const RouteStep& r : step.routes) {
      const u64 src_c = r.source.stage == 0 ? static_cast<u64>(cfg.in_channels) : width(r.source.level);
      if (r.align == Align::kBilinear) m += 4 * B * src_c * lh(l) * lw(l);
      if (!r.proj.empty()) m += B * src_c * width(l) * lh(l) * lw(l);
    }
    // two 3x3 convs + two channel-wise normalizations
    m += 2 * B * width(l) * width(l) * 9 * lh(l) * lw(l);
    m += 2 * B * width(l) * lh(l) * lw(l);
    rep.per_block[step.key.str()] = m;
    rep.executed.push_back(step.key.str());
  }
  rep.per_block["head"] =
      B * width(1) * static_cast<u64>(cfg.num_classes) * lh(1) * lw(1);
  for (const auto& [k, v] : rep.per_block) rep.total += v;
  return rep;
}

u64 param_count(const SuperNetConfig& cfg, const Topology& topo) {
  cfg.validate();
  const ExecutionPlan plan = build_plan(cfg, topo, 1, 0);
  auto width = [&](i64 l) { return static_cast<u64>(cfg.width(l)); };

  std::set<std::string> blocks;  // "enc.l" / "dec.l" actually executed somewhere
  u64 total = 0;
  for (const BlockStep& step : plan.steps) {
    blocks.insert((cfg.encode_stage(step.key.stage) ? "enc." : "dec.") +
                  std::to_string(step.key.level));
    for (const RouteStep& r : step.routes) {
      if (r.proj.empty()) continue;
      const u64 cin = width(r.source.level);
      const u64 cout = width(step.key.level);
      total += cin * cout + cout;  // 1x1 weight + bias
    }
    // block params are added once per distinct block below
  }
  for (const std::string& b : blocks) {
    const i64 level = std::stoll(b.substr(4));
    const u64 w = width(level);
    total += 2 * (w * w * 9 + w);  // two 3x3 convs with bias
    total += 2 * (2 * w);          // two norms, gamma + beta
  }
  // stem and head are on every path from input to logits
  total += static_cast<u64>(cfg.in_channels) * width(1) + width(1);
  total += width(1) * static_cast<u64>(cfg.num_classes) + static_cast<u64>(cfg.num_classes);
  return total;
}

CostAuditReport cost_formula_audit(i64 T, i64 s, i64 pair, const ForwardAudit& shared,
                                   const ForwardAudit& naive) {
  if (T < 1 || s < 1 || pair < 1 || pair > 2 * T - 1)
    throw UsageError("cost audit: invalid T/s/pair");
  if (shared.stage_forwards.empty() && naive.stage_forwards.empty())
    throw UsageError("cost audit: no instrumentation counts supplied");

  CostAuditReport rep;
  rep.iterations = T;
  rep.population = s;
  rep.pair = pair;
  const i64 stages = 2 * T;

  rep.shared_forwards = shared.total_stage_forwards();
  rep.shared_backwards = shared.backward_calls;
  rep.shared_predicted_forwards = (pair - 1) + (stages - pair + 1) * s;
  rep.shared_matches = rep.shared_forwards == rep.shared_predicted_forwards && rep.shared_backwards == 1;

  rep.naive_forwards = naive.total_stage_forwards();
  rep.naive_backward_stage_equiv = naive.backward_calls * stages;
  rep.naive_predicted_forwards = stages * s;
  rep.naive_matches = rep.naive_forwards == rep.naive_predicted_forwards &&
                      rep.naive_backward_stage_equiv == rep.naive_predicted_forwards;

  rep.formula_forwards_head_t = pair + (stages - pair) * s;
  rep.measured_speedup = rep.shared_forwards > 0
                             ? static_cast<double>(rep.naive_forwards) / static_cast<double>(rep.shared_forwards)
                             : 0.0;
  return rep;
}

}  // namespace bixnas
