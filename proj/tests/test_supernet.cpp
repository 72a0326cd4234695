#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "bixnas/checkpoint.hpp"
#include "bixnas/supernet.hpp"
#include "testutil.hpp"

using namespace bixnas;
using namespace testutil;

namespace {

SuperNetConfig desk_config(i64 levels = 3, i64 iterations = 2, i64 width = 8) {
  SuperNetConfig cfg;
  cfg.levels = levels;
  cfg.iterations = iterations;
  cfg.base_width = width;
  return cfg;
}

Tensor<float> randn_f(TensorShape shape, u64 seed) {
  Rng rng(seed);
  Tensor<float> t(shape);
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

}  // namespace

TEST_CASE("configuration-derived counts") {
  SuperNetConfig big = desk_config(4, 3);
  CHECK(big.stages() == 6);
  CHECK(big.streams() == 5);   // L cross-stage skips + the sequential input
  CHECK(big.columns() == 3);   // N - 2
  CHECK(big.levels * (2 * big.iterations - 1) == 20);  // searching blocks

  SuperNetConfig tiny = desk_config(2, 1);
  CHECK(tiny.stages() == 2);
  CHECK(tiny.streams() == 3);
  CHECK(tiny.columns() == 1);
  CHECK(tiny.levels * (2 * tiny.iterations - 1) == 2);

  SuperNetConfig desk = desk_config();
  CHECK(desk.width(1) == 8);
  CHECK(desk.width(2) == 16);
  CHECK(desk.width(3) == 32);
  CHECK(desk.encode_stage(1));
  CHECK_FALSE(desk.encode_stage(2));
  CHECK(desk.encode_stage(3));
  CHECK(kSeqStream(desk.levels) == 3);
}

TEST_CASE("stream sources: cross skips from the previous stage, seq within the stage") {
  const SuperNetConfig cfg = desk_config();
  // cross streams i -> (stage-1, i+1), any block
  for (i64 i = 0; i < cfg.levels; ++i) CHECK(stream_source(cfg, {3, 2}, i) == BlockKey{2, i + 1});
  // encode stage, level > 1: seq comes from the level below at the same stage
  CHECK(stream_source(cfg, {3, 2}, 3) == BlockKey{3, 1});
  // encode entry (level 1): seq enters from the previous stage at the same level
  CHECK(stream_source(cfg, {3, 1}, 3) == BlockKey{2, 1});
  // decode stage, level < L: seq comes from the level above at the same stage
  CHECK(stream_source(cfg, {2, 2}, 3) == BlockKey{2, 3});
  // decode entry (level L): seq enters from the previous stage
  CHECK(stream_source(cfg, {2, 3}, 3) == BlockKey{1, 3});
  CHECK_THROWS_AS(stream_source(cfg, {1, 1}, 0), ConfigError);
  CHECK_THROWS_AS(stream_source(cfg, {2, 1}, 4), ConfigError);
}

TEST_CASE("dense forward executes every block of every stage exactly once") {
  const SuperNetConfig cfg = desk_config();
  SuperNet<float> net(cfg, 42);
  Graph<float> g;
  ForwardAudit audit;
  RunOptions<float> opt;
  opt.audit = &audit;
  const auto logits = net.forward(g, g.input(randn_f({2, 3, 16, 16}, 1)), dense_topology(cfg), opt);

  CHECK(g.value(logits).shape == TensorShape{2, 2, 16, 16});
  i64 applications = 0;
  for (const auto& [k, v] : audit.block_forwards) applications += v;
  CHECK(applications == 2 * cfg.iterations * cfg.levels);  // 12
  for (i64 t = 1; t <= cfg.stages(); ++t) CHECK(audit.stage_forwards.at(t) == 1);
}

TEST_CASE("parameter names are unique and iteration reuse shares the same objects") {
  const SuperNetConfig cfg = desk_config();
  SuperNet<float> net(cfg, 7);
  std::set<std::string> names;
  for (const auto& p : net.params()) names.insert(p->name);
  CHECK(names.size() == net.params().size());
  CHECK(net.block_conv1(true, 2).get() == net.block_conv1(true, 2).get());
  CHECK(net.block_conv1(true, 2).get() != net.block_conv1(false, 2).get());
}

TEST_CASE("weight sharing: a block's weights shape one output at every iteration it runs") {
  const SuperNetConfig cfg = desk_config();
  SuperNet<float> net(cfg, 7);
  const Topology dense = dense_topology(cfg);
  const auto input = randn_f({1, 3, 16, 16}, 2);

  const auto outputs_at = [&](i64 stage) {
    Graph<float> g;
    auto feats = net.stage_outputs(g, g.input(input), dense, stage);
    return digest(g.value(feats[0]));
  };
  const u64 s1_before = outputs_at(1), s3_before = outputs_at(3);
  // Perturb the shared level-1 encoder convolution: both encode iterations
  // (stages 1 and 3) must move.
  net.block_conv1(true, 1)->value.data[0] += 0.5f;
  CHECK(outputs_at(1) != s1_before);
  CHECK(outputs_at(3) != s3_before);
}

TEST_CASE("head/tail split replays the exact full forward in eval mode") {
  const SuperNetConfig cfg = desk_config();
  SuperNet<float> net(cfg, 21);
  const Topology dense = dense_topology(cfg);
  const auto input = randn_f({2, 3, 16, 16}, 3);

  Graph<float> g1;
  const u64 full = digest(g1.value(net.forward(g1, g1.input(input), dense)));

  for (const i64 cut : {1, 2, 3}) {
    CAPTURE(cut);
    Graph<float> g2;
    const auto mid = net.stage_outputs(g2, g2.input(input), dense, cut);
    const u64 split = digest(g2.value(net.forward_from(g2, mid, cut, dense)));
    CHECK(split == full);
  }
}

TEST_CASE("plans prune blocks that cannot reach the head") {
  const SuperNetConfig cfg = desk_config();
  Topology topo = dense_topology(cfg);
  topo.active[{4, 1}] = {0};  // final block keeps only the skip from (3,1)

  SuperNet<float> net(cfg, 5);
  Graph<float> g;
  ForwardAudit audit;
  RunOptions<float> opt;
  opt.audit = &audit;
  net.forward(g, g.input(randn_f({1, 3, 16, 16}, 4)), topo, opt);
  // the final stage's level-2/3 blocks fed only the cut seq chain
  CHECK(audit.block_forwards.count("4.2") == 0);
  CHECK(audit.block_forwards.count("4.3") == 0);
  CHECK(audit.block_forwards.at("4.1") == 1);
  CHECK(audit.block_forwards.at("3.1") == 1);

  const ExecutionPlan plan = build_plan(cfg, topo, 1, 0);
  std::set<std::string> planned;
  for (const auto& s : plan.steps) planned.insert(s.key.str());
  CHECK(planned.count("4.2") == 0);
  CHECK(planned.count("4.1") == 1);
}

TEST_CASE("topology validation rejects malformed stream sets") {
  const SuperNetConfig cfg = desk_config();
  Topology t = dense_topology(cfg);
  SUBCASE("unsorted") {
    t.active[{2, 1}] = {2, 0};
    CHECK_THROWS_AS(validate_topology(cfg, t), ConfigError);
  }
  SUBCASE("duplicate") {
    t.active[{2, 1}] = {1, 1};
    CHECK_THROWS_AS(validate_topology(cfg, t), ConfigError);
  }
  SUBCASE("empty") {
    t.active[{2, 1}] = {};
    CHECK_THROWS_AS(validate_topology(cfg, t), ConfigError);
  }
  SUBCASE("stream out of range") {
    t.active[{2, 1}] = {0, 4};
    CHECK_THROWS_AS(validate_topology(cfg, t), ConfigError);
  }
  SUBCASE("missing block") {
    t.active.erase({3, 2});
    CHECK_THROWS_AS(validate_topology(cfg, t), ConfigError);
  }
  SUBCASE("dense is valid") { validate_topology(cfg, dense_topology(cfg)); }
}

TEST_CASE("same seed builds identical nets, different seeds differ") {
  const SuperNetConfig cfg = desk_config();
  SuperNet<float> a(cfg, 99), b(cfg, 99), c(cfg, 100);
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    all_equal = all_equal && a.params()[i]->value.data == b.params()[i]->value.data;
    any_diff = any_diff || a.params()[i]->value.data != c.params()[i]->value.data;
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("state snapshot/restore round-trips weights and norm buffers exactly") {
  const SuperNetConfig cfg = desk_config();
  SuperNet<float> net(cfg, 11);
  const Topology dense = dense_topology(cfg);
  // drift the running stats away from init
  for (int i = 0; i < 3; ++i) {
    Graph<float> g;
    RunOptions<float> opt;
    opt.training = true;
    net.forward(g, g.input(randn_f({2, 3, 16, 16}, 50 + i)), dense, opt);
  }
  TensorMap state;
  net.snapshot_state(state);

  const auto eval_digest = [&] {
    Graph<float> g;
    return digest(g.value(net.forward(g, g.input(randn_f({1, 3, 16, 16}, 60)), dense)));
  };
  const u64 before = eval_digest();
  SuperNet<float> other(cfg, 12);
  other.restore_state(state);
  TensorMap state2;
  other.snapshot_state(state2);
  CHECK(state.size() == state2.size());
  for (const auto& [k, v] : state) CHECK(v.data == state2.at(k).data);

  net.block_conv1(true, 1)->value.data[0] += 1.0f;
  CHECK(eval_digest() != before);
  net.restore_state(state);
  CHECK(eval_digest() == before);
}

TEST_CASE("full desk supernet gradients pass a finite-difference check in double") {
  const SuperNetConfig cfg = desk_config();
  SuperNet<double> net(cfg, 33);
  const Topology dense = dense_topology(cfg);
  const auto input = randn_t({2, 3, 8, 8}, 70);
  IndexMap target(2, 8, 8);
  Rng rng(71);
  for (auto& v : target.v) v = static_cast<std::int32_t>(rng.uniform_int(0, cfg.num_classes - 1));

  const auto forward = [&](bool back) {
    Graph<double> g;
    RunOptions<double> opt;
    opt.training = true;
    const auto loss = g.cross_entropy(net.forward(g, g.input(input), dense, opt), target);
    if (back) g.backward(loss);
    return g.value(loss).data[0];
  };
  // Normalization centers activations at zero, so a coarse step keeps landing
  // on relu kinks; eps 1e-7 stays on one side and atol absorbs differencing
  // noise on the true-zero gradients (conv biases cancelled by normalization).
  const auto res = fd_check(net.params(), [&] { return forward(false); }, [&] { forward(true); },
                            /*eps=*/1e-7, /*coords_cap=*/3, /*seed=*/72, /*atol=*/1e-8);
  CHECK(res.checked > 300);
  CHECK(res.max_rel_err < 1e-4);
}
