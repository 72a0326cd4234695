// Microbenchmarks for the hot paths: convolution kernels, a full desk-scale
// train step, plan construction, and Pareto selection. Run with
// --benchmark_filter=<regex> to narrow.
#include <benchmark/benchmark.h>

#include "bixnas/graph.hpp"
#include "bixnas/optim.hpp"
#include "bixnas/phase2.hpp"
#include "bixnas/supernet.hpp"

using namespace bixnas;

namespace {

SuperNetConfig desk_config() {
  SuperNetConfig cfg;
  cfg.levels = 3;
  cfg.iterations = 2;
  return cfg;
}

Tensor<float> randn_t(TensorShape s, u64 seed) {
  Rng rng(seed);
  return Tensor<float>::randn(s, rng);
}

}  // namespace

static void BM_Conv2dForward(benchmark::State& state) {
  const auto x = randn_t({2, 8, 16, 16}, 1);
  const auto w = randn_t({16, 8, 3, 3}, 2);
  const auto b = randn_t({1, 16, 1, 1}, 3);
  for (auto _ : state) {
    Graph<float> g;
    auto y = g.conv2d(g.input(x), g.input(w), g.input(b), 1, 1);
    benchmark::DoNotOptimize(g.value(y).data.data());
  }
}
BENCHMARK(BM_Conv2dForward);

static void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto x = randn_t({2, 8, 16, 16}, 1);
  auto w = std::make_shared<Param<float>>("w", randn_t({16, 8, 3, 3}, 2));
  auto b = std::make_shared<Param<float>>("b", randn_t({1, 16, 1, 1}, 3));
  for (auto _ : state) {
    Graph<float> g;
    auto y = g.conv2d(g.input(x), g.param(w), g.param(b), 1, 1);
    auto loss = g.sum(g.mul(y, y));
    g.backward(loss);
    benchmark::DoNotOptimize(w->grad.data.data());
    w->zero_grad();
    b->zero_grad();
  }
}
BENCHMARK(BM_Conv2dForwardBackward);

static void BM_BuildPlanDense(benchmark::State& state) {
  const SuperNetConfig cfg = desk_config();
  const Topology topo = dense_topology(cfg);
  for (auto _ : state) {
    ExecutionPlan plan = build_plan(cfg, topo, 1, 0);
    benchmark::DoNotOptimize(plan.steps.data());
  }
}
BENCHMARK(BM_BuildPlanDense);

static void BM_SuperNetEvalForward(benchmark::State& state) {
  const SuperNetConfig cfg = desk_config();
  SuperNet<float> net(cfg, 7);
  const Topology topo = dense_topology(cfg);
  const auto x = randn_t({1, cfg.in_channels, 16, 16}, 8);
  for (auto _ : state) {
    Graph<float> g;
    auto logits = net.forward(g, g.input(x), topo);
    benchmark::DoNotOptimize(g.value(logits).data.data());
  }
}
BENCHMARK(BM_SuperNetEvalForward);

static void BM_SuperNetTrainStep(benchmark::State& state) {
  const SuperNetConfig cfg = desk_config();
  SuperNet<float> net(cfg, 7);
  const Topology topo = dense_topology(cfg);
  const auto x = randn_t({2, cfg.in_channels, 16, 16}, 8);
  IndexMap masks(2, 16, 16);
  Rng mrng(9);
  for (auto& v : masks.v) v = static_cast<std::int32_t>(mrng.uniform_int(0, cfg.num_classes - 1));
  Adam<float> opt(net.params(), 1e-3f);
  RunOptions<float> run;
  run.training = true;
  for (auto _ : state) {
    Graph<float> g;
    auto loss = g.cross_entropy(net.forward(g, g.input(x), topo, run), masks);
    g.backward(loss);
    opt.step();
    benchmark::DoNotOptimize(g.value(loss).data.data());
  }
}
BENCHMARK(BM_SuperNetTrainStep);

static void BM_ParetoSelect(benchmark::State& state) {
  Rng rng(11);
  std::vector<ParetoRecord> pop;
  for (i64 i = 0; i < state.range(0); ++i) {
    ParetoRecord r;
    r.id = i;
    r.miou = rng.uniform01();
    r.macs_count = static_cast<u64>(rng.uniform_int(100, 600));
    r.key = std::string(1, static_cast<char>('a' + rng.uniform_int(0, 3)));
    pop.push_back(r);
  }
  for (auto _ : state) {
    auto kept = pareto_select(pop, 2);
    benchmark::DoNotOptimize(kept.data());
  }
}
BENCHMARK(BM_ParetoSelect)->Arg(20)->Arg(200);

static void BM_MacsReport(benchmark::State& state) {
  const SuperNetConfig cfg = desk_config();
  const Topology topo = dense_topology(cfg);
  for (auto _ : state) {
    auto rep = macs(cfg, topo, {1, 3, 16, 16});
    benchmark::DoNotOptimize(rep.total);
  }
}
BENCHMARK(BM_MacsReport);

BENCHMARK_MAIN();
