#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <tuple>

#include "bixnas/phase2.hpp"
#include "testutil.hpp"

using namespace bixnas;
using namespace testutil;

namespace {

SuperNetConfig desk_config() {
  SuperNetConfig cfg;
  cfg.levels = 3;
  cfg.iterations = 2;
  return cfg;
}

// Reference Pareto selection straight from the definition: quadratic
// dominance scan, then the documented ordering and capacity truncation.
std::vector<i64> pareto_oracle(const std::vector<ParetoRecord>& pop, i64 cap) {
  std::vector<i64> front;
  for (std::size_t i = 0; i < pop.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < pop.size(); ++j) {
      if (i == j) continue;
      const auto& a = pop[j];
      const auto& b = pop[i];
      const bool weakly = a.miou >= b.miou && a.macs_count <= b.macs_count;
      const bool strict = a.miou > b.miou || a.macs_count < b.macs_count;
      if (weakly && strict) {
        dominated = true;
        break;
      }
    }
    if (!dominated) front.push_back(static_cast<i64>(i));
  }
  std::stable_sort(front.begin(), front.end(), [&](i64 x, i64 y) {
    const auto& a = pop[static_cast<std::size_t>(x)];
    const auto& b = pop[static_cast<std::size_t>(y)];
    return std::make_tuple(-a.miou, a.macs_count, a.key, a.id) <
           std::make_tuple(-b.miou, b.macs_count, b.key, b.id);
  });
  if (static_cast<i64>(front.size()) > cap) front.resize(static_cast<std::size_t>(cap));
  return front;
}

}  // namespace

TEST_CASE("pareto retention agrees with the brute-force oracle on 1000 populations") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    CAPTURE(trial);
    const i64 n = rng.uniform_int(1, 20);
    const i64 cap = rng.uniform_int(1, 3);
    std::vector<ParetoRecord> pop;
    for (i64 i = 0; i < n; ++i) {
      ParetoRecord r;
      r.id = i;
      // coarse grids force plenty of exact ties in both objectives
      r.miou = static_cast<double>(rng.uniform_int(0, 8)) / 8.0;
      r.macs_count = static_cast<u64>(rng.uniform_int(1, 6)) * 100;
      r.key = std::string(1, static_cast<char>('a' + rng.uniform_int(0, 3)));
      pop.push_back(r);
    }
    const auto got = pareto_select(pop, cap);
    CHECK(got == pareto_oracle(pop, cap));
    CHECK(static_cast<i64>(got.size()) <= cap);
    CHECK(got.size() >= 1);
  }
}

TEST_CASE("pareto retention caps the front at the retention capacity") {
  // mutually non-dominating staircase: every record is on the front
  std::vector<ParetoRecord> pop;
  for (i64 i = 0; i < 10; ++i)
    pop.push_back({i, 1.0 - 0.05 * static_cast<double>(i), static_cast<u64>(1000 - 50 * i), "k"});
  const auto kept = pareto_select(pop, 2);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0] == 0);  // highest fitness first
  CHECK(kept[1] == 1);
  CHECK_THROWS_AS(pareto_select({}, 2), UsageError);
  CHECK_THROWS_AS(pareto_select(pop, 0), UsageError);
}

TEST_CASE("subset sampling is uniform over sizes then combinations") {
  const std::vector<i64> cands{2, 3, 7};
  Rng rng(99);
  std::map<std::vector<i64>, i64> freq;
  const int draws = 30000;
  for (int i = 0; i < draws; ++i) {
    const auto s = sample_subset(cands, rng);
    REQUIRE(!s.empty());
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
    for (i64 v : s) CHECK(std::binary_search(cands.begin(), cands.end(), v));
    ++freq[s];
  }
  // P(S) = (1/|C|) * 1/C(|C|, |S|): 1/9 for each size-1 and size-2 set, 1/3 full
  const auto p = [&](std::vector<i64> s) {
    return static_cast<double>(freq[s]) / static_cast<double>(draws);
  };
  CHECK(std::abs(p({2}) - 1.0 / 9) < 0.02);
  CHECK(std::abs(p({3}) - 1.0 / 9) < 0.02);
  CHECK(std::abs(p({7}) - 1.0 / 9) < 0.02);
  CHECK(std::abs(p({2, 3}) - 1.0 / 9) < 0.02);
  CHECK(std::abs(p({2, 7}) - 1.0 / 9) < 0.02);
  CHECK(std::abs(p({3, 7}) - 1.0 / 9) < 0.02);
  CHECK(std::abs(p({2, 3, 7}) - 1.0 / 3) < 0.02);

  Rng r2(5);
  for (int i = 0; i < 20; ++i) CHECK(sample_subset({4}, r2) == std::vector<i64>{4});
  CHECK_THROWS_AS(sample_subset({}, r2), ConfigError);
}

TEST_CASE("pair sampling draws one subset per block of the fed stage") {
  const SuperNetConfig cfg = desk_config();
  const Topology cands = dense_topology(cfg);
  Rng rng(3);
  const auto subs = sample_pair_subsets(cfg, cands, 2, rng);
  REQUIRE(subs.size() == static_cast<std::size_t>(cfg.levels));
  for (i64 l = 1; l <= cfg.levels; ++l) {
    const BlockKey k{3, l};
    REQUIRE(subs.count(k) == 1);
    CHECK(!subs.at(k).empty());
  }
  CHECK_THROWS_AS(sample_pair_subsets(cfg, cands, 0, rng), UsageError);
  CHECK_THROWS_AS(sample_pair_subsets(cfg, cands, cfg.stages(), rng), UsageError);
}

TEST_CASE("topology composition stitches candidates, the sampled pair and evolved pairs") {
  const SuperNetConfig cfg = desk_config();  // stages 1..4, pairs 1..3
  const Topology cands = dense_topology(cfg);

  std::map<BlockKey, std::vector<i64>> subsets;
  for (i64 l = 1; l <= cfg.levels; ++l) subsets[{3, l}] = {l - 1};
  std::map<i64, std::map<BlockKey, std::vector<i64>>> evolved;
  for (i64 l = 1; l <= cfg.levels; ++l) evolved[3][{4, l}] = {0, 3};

  const Topology t = compose_topology(cfg, cands, 2, subsets, evolved);
  for (i64 l = 1; l <= cfg.levels; ++l) {
    CHECK(t.streams_of({2, l}) == cands.streams_of({2, l}));  // earlier pair: candidates
    CHECK(t.streams_of({3, l}) == std::vector<i64>{l - 1});   // the pair under search
    CHECK(t.streams_of({4, l}) == std::vector<i64>{0, 3});    // later pair: frozen winner
  }
  CHECK_THROWS_AS(compose_topology(cfg, cands, 1, subsets, {}), ConfigError);

  // pair 0: the final genome is evolved everywhere
  std::map<i64, std::map<BlockKey, std::vector<i64>>> all;
  for (i64 p = 1; p <= 3; ++p)
    for (i64 l = 1; l <= cfg.levels; ++l) all[p][{p + 1, l}] = {1};
  const Topology genome = compose_topology(cfg, cands, 0, {}, all);
  for (const auto& [k, s] : genome.active) CHECK(s == std::vector<i64>{1});
}

TEST_CASE("fairness verification passes consistent traces and localizes violations") {
  FairnessTrace trace;
  for (i64 step = 0; step < 3; ++step)
    for (i64 tail = 0; tail < 2; ++tail)
      for (i64 stream = 0; stream < 2; ++stream)
        trace.rows.push_back({step, tail, BlockKey{4, 1}, stream, 7000 + static_cast<u64>(step * 2 + stream)});

  const FairnessReport ok = verify_fairness(trace);
  CHECK(ok.pass);
  CHECK(ok.steps == 3);
  CHECK(ok.comparisons == 6);  // 3 steps x 2 streams, second tail vs first

  // corrupt one observation: tail 1, step 1, stream 0
  auto bad = trace;
  for (auto& r : bad.rows)
    if (r.step == 1 && r.tail == 1 && r.stream == 0) r.digest = 1;
  const FairnessReport rep = verify_fairness(bad);
  CHECK(!rep.pass);
  CHECK(rep.step == 1);
  CHECK(rep.block == BlockKey{4, 1});
  CHECK(rep.stream == 0);
  CHECK(rep.tail_a == 0);
  CHECK(rep.tail_b == 1);
  CHECK(rep.digest_a == 7002);
  CHECK(rep.digest_b == 1);
  CHECK(rep.comparisons == 6);

  CHECK_THROWS_AS(verify_fairness(FairnessTrace{}), UsageError);
}

namespace {

// Two tail topologies that agree everywhere except the blocks of stage
// pair+1, where they pick different (overlapping) stream subsets.
std::vector<Topology> diverse_tails(const SuperNetConfig& cfg, i64 pair) {
  const Topology cands = dense_topology(cfg);
  std::map<i64, std::map<BlockKey, std::vector<i64>>> evolved;
  for (i64 p = pair + 1; p <= cfg.stages() - 1; ++p)
    for (i64 l = 1; l <= cfg.levels; ++l) evolved[p][{p + 1, l}] = {0, 1, 2};

  std::map<BlockKey, std::vector<i64>> sa, sb;
  for (i64 l = 1; l <= cfg.levels; ++l) {
    sa[{pair + 1, l}] = {0, 1};
    sb[{pair + 1, l}] = {0, 2};
  }
  return {compose_topology(cfg, cands, pair, sa, evolved),
          compose_topology(cfg, cands, pair, sb, evolved)};
}

}  // namespace

TEST_CASE("shared-head step: early stages run once, tail stages once per tail, one backward") {
  const SuperNetConfig cfg = desk_config();
  const Dataset data = synth_blobs(8, 16, cfg.num_classes, 21, cfg.in_channels);
  const Tensor<float> images = stack_images(data, data.train_idx, 0, 4);
  const IndexMap masks = stack_masks(data, data.train_idx, 0, 4);

  for (i64 pair = 1; pair <= cfg.stages() - 1; ++pair) {
    CAPTURE(pair);
    SuperNet<float> net(cfg, 77);
    Adam<float> opt(net.params(), 1e-3f);
    const auto topos = diverse_tails(cfg, pair);
    const i64 s = static_cast<i64>(topos.size());

    ForwardAudit audit;
    const auto r = train_step_shared(net, opt, pair, topos, images, masks, &audit);
    CHECK(std::isfinite(r.mean_loss));
    CHECK(r.excluded == 0);

    for (i64 stage = 1; stage <= cfg.stages(); ++stage) {
      CAPTURE(stage);
      CHECK(audit.stage_forwards.at(stage) == (stage < pair ? 1 : s));
    }
    CHECK(audit.total_stage_forwards() == (pair - 1) + (cfg.stages() - pair + 1) * s);
    CHECK(audit.backward_calls == 1);
  }
}

TEST_CASE("naive baseline: every tail pays the full forward and its own backward") {
  const SuperNetConfig cfg = desk_config();
  const Dataset data = synth_blobs(8, 16, cfg.num_classes, 22, cfg.in_channels);
  const Tensor<float> images = stack_images(data, data.train_idx, 0, 4);
  const IndexMap masks = stack_masks(data, data.train_idx, 0, 4);

  SuperNet<float> donor(cfg, 78);
  TensorMap init;
  donor.snapshot_state(init);
  const auto topos = diverse_tails(cfg, 2);
  NaiveBaseline naive(cfg, init, topos, 1e-3, 78);
  CHECK(naive.tails() == 2);

  ForwardAudit audit;
  naive.step(images, masks, 2, &audit);
  CHECK(audit.total_stage_forwards() == cfg.stages() * static_cast<i64>(topos.size()));
  for (i64 stage = 1; stage <= cfg.stages(); ++stage)
    CHECK(audit.stage_forwards.at(stage) == static_cast<i64>(topos.size()));
  CHECK(audit.backward_calls == static_cast<i64>(topos.size()));
}

TEST_CASE("shared training shows every tail identical skip features; naive training does not") {
  const SuperNetConfig cfg = desk_config();
  const Dataset data = synth_blobs(8, 16, cfg.num_classes, 23, cfg.in_channels);
  const Tensor<float> images = stack_images(data, data.train_idx, 0, 4);
  const IndexMap masks = stack_masks(data, data.train_idx, 0, 4);
  const i64 pair = 3;
  const auto topos = diverse_tails(cfg, pair);

  SuperNet<float> net(cfg, 31);
  TensorMap init;
  net.snapshot_state(init);

  FairnessTrace shared;
  Adam<float> opt(net.params(), 1e-3f);
  for (i64 step = 0; step < 3; ++step)
    train_step_shared(net, opt, pair, topos, images, masks, nullptr, &shared, step);
  const FairnessReport ok = verify_fairness(shared);
  CHECK(ok.pass);
  CHECK(ok.steps == 3);
  CHECK(ok.comparisons > 0);

  FairnessTrace drift;
  NaiveBaseline naive(cfg, init, topos, 1e-3, 31);
  for (i64 step = 0; step < 3; ++step) naive.step(images, masks, pair, nullptr, &drift, step);
  const FairnessReport rep = verify_fairness(drift);
  CHECK(!rep.pass);
  // identical initial weights: the first step is still fair, drift starts after
  // the per-tail updates diverge
  CHECK(rep.step >= 1);
  CHECK(rep.block.stage == pair + 1);
  CHECK(rep.digest_a != rep.digest_b);
}

TEST_CASE("progressive search produces a valid sparse genome and honest bookkeeping") {
  const SuperNetConfig cfg = desk_config();
  const Dataset data = synth_blobs(12, 16, cfg.num_classes, 900, cfg.in_channels);
  const Topology cands = dense_topology(cfg);

  Phase2Config p2;
  p2.samples = 2;
  p2.retain = 2;
  p2.epochs_per_pair = 1;
  p2.collect_trace = true;

  SuperNet<float> net(cfg, 900);
  const Phase2Result res = run_progressive_search(net, cands, data, p2, 900);

  validate_topology(cfg, res.genome);
  CHECK(topology_subset(res.genome, cands));

  // pairs iterate last to first; population = samples * retained parents
  std::map<i64, i64> pop, retained;
  for (const auto& [pair, t] : res.tails) {
    ++pop[pair];
    retained[pair] += t.retained ? 1 : 0;
    CHECK(!t.subsets.empty());
    for (const auto& [k, s] : t.subsets) {
      CHECK(k.stage == pair + 1);
      CHECK(!s.empty());
      CHECK(topology_subset(Topology{{{k, s}}}, Topology{{{k, cands.streams_of(k)}}}));
    }
    CHECK(t.fitness >= 0.0);
    CHECK(t.fitness <= 1.0);
    CHECK(t.macs_count > 0);
  }
  CHECK(pop.at(3) == p2.samples);  // first searched pair: a single seed parent
  for (const auto& [pair, n] : pop) {
    CAPTURE(pair);
    CHECK(retained.at(pair) >= 1);
    CHECK(retained.at(pair) <= p2.retain);
    CHECK(n <= p2.samples * p2.retain);
  }
  CHECK(res.epochs.size() == static_cast<std::size_t>(cfg.stages() - 1));
  CHECK(res.shared_audits.size() == static_cast<std::size_t>(cfg.stages() - 1));
  CHECK(!res.trace.rows.empty());
  CHECK(verify_fairness(res.trace).pass);

  // the genome found never costs more than the dense candidate superset
  const TensorShape in{1, data.channels, data.hw, data.hw};
  CHECK(macs(cfg, res.genome, in).total <= macs(cfg, cands, in).total);

  const auto rerun = [&] {
    SuperNet<float> n2(cfg, 900);
    return run_progressive_search(n2, cands, data, p2, 900);
  };
  const Phase2Result again = rerun();
  CHECK(topology_key(again.genome) == topology_key(res.genome));
  REQUIRE(again.tails.size() == res.tails.size());
  for (std::size_t i = 0; i < res.tails.size(); ++i) {
    CHECK(again.tails[i].second.fitness == res.tails[i].second.fitness);
    CHECK(again.tails[i].second.macs_count == res.tails[i].second.macs_count);
  }
}
