#include "bixnas/phase2.hpp"

#include <algorithm>
#include <tuple>

namespace bixnas {

std::vector<i64> pareto_select(const std::vector<ParetoRecord>& pop, i64 cap) {
  if (pop.empty()) throw UsageError("pareto_select: empty population");
  if (cap < 1) throw UsageError("pareto_select: cap must be >= 1");
  const auto dominates = [](const ParetoRecord& a, const ParetoRecord& b) {
    return a.miou >= b.miou && a.macs_count <= b.macs_count &&
           (a.miou > b.miou || a.macs_count < b.macs_count);
  };
  std::vector<i64> front;
  for (std::size_t i = 0; i < pop.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < pop.size() && !dominated; ++j) {
      if (i != j && dominates(pop[j], pop[i])) dominated = true;
    }
    if (!dominated) front.push_back(static_cast<i64>(i));
  }
  std::sort(front.begin(), front.end(), [&](i64 a, i64 b) {
    const ParetoRecord&ra = pop[static_cast<std::size_t>(a)], &rb = pop[static_cast<std::size_t>(b)];
    if (ra.miou != rb.miou) return ra.miou > rb.miou;
    if (ra.macs_count != rb.macs_count) return ra.macs_count < rb.macs_count;
    if (ra.key != rb.key) return ra.key < rb.key;
    return ra.id < rb.id;
  });
  if (static_cast<i64>(front.size()) > cap) front.resize(static_cast<std::size_t>(cap));
  return front;
}

std::vector<i64> sample_subset(const std::vector<i64>& candidates, Rng& rng) {
  if (candidates.empty()) throw ConfigError("sample_subset: empty candidate set");
  const i64 n = rng.uniform_int(1, static_cast<i64>(candidates.size()));
  std::vector<i64> pool = candidates;
  rng.shuffle_prefix(pool, n);
  pool.resize(static_cast<std::size_t>(n));
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::map<BlockKey, std::vector<i64>> sample_pair_subsets(const SuperNetConfig& cfg,
                                                         const Topology& candidates, i64 pair,
                                                         Rng& rng) {
  if (pair < 1 || pair > cfg.stages() - 1) throw UsageError("sample_pair_subsets: pair out of range");
  std::map<BlockKey, std::vector<i64>> out;
  for (i64 l = 1; l <= cfg.levels; ++l) {
    const BlockKey k{pair + 1, l};
    out[k] = sample_subset(candidates.streams_of(k), rng);
  }
  return out;
}

FairnessReport verify_fairness(const FairnessTrace& trace) {
  if (trace.rows.empty()) throw UsageError("verify_fairness: empty trace");
  FairnessReport rep;
  std::set<i64> steps;
  // (step, stage, level, stream) -> (digest, tail) of the first observation
  std::map<std::tuple<i64, i64, i64, i64>, std::pair<u64, i64>> first;
  for (const auto& row : trace.rows) {
    steps.insert(row.step);
    const auto key = std::make_tuple(row.step, row.block.stage, row.block.level, row.stream);
    auto it = first.find(key);
    if (it == first.end()) {
      first.emplace(key, std::make_pair(row.digest, row.tail));
      continue;
    }
    ++rep.comparisons;
    if (rep.pass && it->second.first != row.digest) {
      rep.pass = false;
      rep.step = row.step;
      rep.block = row.block;
      rep.stream = row.stream;
      rep.tail_a = it->second.second;
      rep.tail_b = row.tail;
      rep.digest_a = it->second.first;
      rep.digest_b = row.digest;
    }
  }
  rep.steps = static_cast<i64>(steps.size());
  return rep;
}

Topology compose_topology(const SuperNetConfig& cfg, const Topology& candidates, i64 pair,
                          const std::map<BlockKey, std::vector<i64>>& subsets,
                          const std::map<i64, std::map<BlockKey, std::vector<i64>>>& evolved) {
  Topology topo;
  for (i64 stage = 2; stage <= cfg.stages(); ++stage) {
    const i64 p = stage - 1;  // the pair feeding this stage; pair==0 means all evolved
    for (i64 l = 1; l <= cfg.levels; ++l) {
      const BlockKey k{stage, l};
      if (pair != 0 && p == pair) {
        auto s = subsets.find(k);
        if (s == subsets.end())
          throw ConfigError("compose_topology: missing subset for block " + k.str());
        topo.active[k] = s->second;
      } else if (pair != 0 && p < pair) {
        topo.active[k] = candidates.streams_of(k);
      } else {
        auto it = evolved.find(p);
        if (it == evolved.end())
          throw ConfigError("compose_topology: missing evolved pair " + std::to_string(p));
        topo.active[k] = it->second.at(k);
      }
    }
  }
  return topo;
}

SharedStepResult train_step_shared(SuperNet<float>& net, Adam<float>& opt, i64 pair,
                                   const std::vector<Topology>& tail_topos,
                                   const Tensor<float>& images, const IndexMap& masks,
                                   ForwardAudit* audit, FairnessTrace* trace, i64 step_index) {
  if (tail_topos.empty()) throw UsageError("train_step_shared: no tails");
  Graph<float> g;
  const auto x = g.input(images);

  RunOptions<float> head_opt;
  head_opt.training = true;
  head_opt.audit = audit;
  std::vector<Graph<float>::NodeId> head_feats;
  if (pair > 1) head_feats = net.stage_outputs(g, x, tail_topos[0], pair - 1, head_opt);

  std::vector<Graph<float>::NodeId> losses;
  i64 excluded = 0;
  for (std::size_t i = 0; i < tail_topos.size(); ++i) {
    FairnessProbe probe;
    probe.boundary_stage = pair;
    RunOptions<float> tail_opt;
    tail_opt.training = true;
    tail_opt.audit = audit;
    tail_opt.probe = trace ? &probe : nullptr;
    try {
      Graph<float>::NodeId logits =
          pair > 1 ? net.forward_from(g, head_feats, pair - 1, tail_topos[i], tail_opt)
                   : net.forward(g, x, tail_topos[i], tail_opt);
      losses.push_back(g.cross_entropy(logits, masks));
    } catch (const NumericError&) {
      ++excluded;
      continue;
    }
    if (trace) {
      for (const auto& rec : probe.recs)
        trace->rows.push_back({step_index, static_cast<i64>(i), rec.block, rec.stream, rec.digest});
    }
  }
  if (losses.empty()) throw NumericError("train_step_shared: every tail produced a non-finite loss");

  const auto mean = g.average(std::span<const Graph<float>::NodeId>(losses.data(), losses.size()));
  opt.zero_grad();
  g.backward(mean);
  if (audit) ++audit->backward_calls;
  opt.step();
  return {static_cast<double>(g.value(mean).data[0]), excluded};
}

NaiveBaseline::NaiveBaseline(const SuperNetConfig& cfg, const TensorMap& init_state,
                             std::vector<Topology> tail_topos, double lr, u64 seed)
    : topos_(std::move(tail_topos)) {
  if (topos_.empty()) throw UsageError("naive baseline: no tails");
  for (std::size_t i = 0; i < topos_.size(); ++i) {
    auto net = std::make_unique<SuperNet<float>>(cfg, derive_seed(seed, "naive", static_cast<u64>(i)));
    net->restore_state(init_state);
    opts_.push_back(std::make_unique<Adam<float>>(net->params(), static_cast<float>(lr)));
    nets_.push_back(std::move(net));
  }
}

double NaiveBaseline::step(const Tensor<float>& images, const IndexMap& masks, i64 pair,
                           ForwardAudit* audit, FairnessTrace* trace, i64 step_index) {
  double loss_sum = 0;
  for (std::size_t i = 0; i < nets_.size(); ++i) {
    Graph<float> g;
    const auto x = g.input(images);
    FairnessProbe probe;
    probe.boundary_stage = pair;
    RunOptions<float> ro;
    ro.training = true;
    ro.audit = audit;
    ro.probe = trace ? &probe : nullptr;
    const auto logits = nets_[i]->forward(g, x, topos_[i], ro);
    const auto loss = g.cross_entropy(logits, masks);
    loss_sum += static_cast<double>(g.value(loss).data[0]);
    if (trace) {
      for (const auto& rec : probe.recs)
        trace->rows.push_back({step_index, static_cast<i64>(i), rec.block, rec.stream, rec.digest});
    }
    opts_[i]->zero_grad();
    g.backward(loss);
    if (audit) ++audit->backward_calls;
    opts_[i]->step();
  }
  return loss_sum / static_cast<double>(nets_.size());
}

Phase2Result run_progressive_search(SuperNet<float>& net, const Topology& candidates,
                                    const Dataset& data, const Phase2Config& cfg, u64 seed) {
  cfg.validate();
  const SuperNetConfig& sc = net.config();
  validate_topology(sc, candidates);
  if (data.train_idx.empty() || data.val_idx.empty())
    throw ConfigError("phase 2: dataset has empty splits");

  struct Parent {
    std::map<i64, std::map<BlockKey, std::vector<i64>>> evolved;
  };
  std::vector<Parent> parents{Parent{}};

  Phase2Result res;
  i64 next_id = 0;
  for (i64 pair = sc.stages() - 1; pair >= 1; --pair) {
    Rng rng(derive_seed(seed, "p2.sample", static_cast<u64>(pair)));
    std::vector<SampledTail> tails;
    std::vector<Topology> topos;
    for (std::size_t p = 0; p < parents.size(); ++p) {
      for (i64 k = 0; k < cfg.samples; ++k) {
        SampledTail t;
        t.id = next_id++;
        t.parent = static_cast<i64>(p);
        t.subsets = sample_pair_subsets(sc, candidates, pair, rng);
        topos.push_back(compose_topology(sc, candidates, pair, t.subsets, parents[p].evolved));
        tails.push_back(std::move(t));
      }
    }

    Adam<float> opt(net.params(), static_cast<float>(cfg.lr0));
    std::vector<i64> order = data.train_idx;
    i64 global_step = 0;
    for (i64 epoch = 0; epoch < cfg.epochs_per_pair; ++epoch) {
      const double lr = step_decay_lr(cfg.lr0, cfg.step_factor, cfg.step_every, epoch);
      opt.set_lr(static_cast<float>(lr));
      Rng shuffle_rng(derive_seed(seed, "p2.shuffle",
                                  static_cast<u64>(pair) * 1000003ull + static_cast<u64>(epoch)));
      shuffle_rng.shuffle(order);
      double loss_sum = 0;
      i64 steps = 0, excluded = 0;
      for (i64 from = 0; from < static_cast<i64>(order.size()); from += cfg.batch) {
        const i64 count = std::min<i64>(cfg.batch, static_cast<i64>(order.size()) - from);
        const Tensor<float> images = stack_images(data, order, from, count);
        const IndexMap masks = stack_masks(data, order, from, count);
        ForwardAudit batch_audit;
        const bool instrument = epoch == 0 && from == 0;
        const SharedStepResult r = train_step_shared(
            net, opt, pair, topos, images, masks, instrument ? &batch_audit : nullptr,
            cfg.collect_trace ? &res.trace : nullptr, global_step++);
        if (instrument) res.shared_audits.emplace_back(pair, batch_audit);
        loss_sum += r.mean_loss;
        excluded += r.excluded;
        ++steps;
      }
      res.epochs.push_back({pair, epoch, lr, loss_sum / static_cast<double>(steps), excluded});
    }

    // fitness = validation mIoU of the induced full architecture, eval mode;
    // cost = exact MACs of that architecture
    parallel_for(static_cast<i64>(tails.size()), cfg.threads, [&](i64 i) {
      const auto ui = static_cast<std::size_t>(i);
      const EvalResult ev = evaluate(net, topos[ui], data, data.val_idx, cfg.batch, 1);
      tails[ui].fitness = ev.miou;
      tails[ui].macs_count = macs(sc, topos[ui], {1, data.channels, data.hw, data.hw}).total;
    });

    std::vector<ParetoRecord> records;
    for (std::size_t i = 0; i < tails.size(); ++i)
      records.push_back({static_cast<i64>(i), tails[i].fitness, tails[i].macs_count,
                         topology_key(topos[i])});
    const std::vector<i64> kept = pareto_select(records, cfg.retain);

    std::vector<Parent> next;
    for (i64 idx : kept) {
      const auto ui = static_cast<std::size_t>(idx);
      tails[ui].retained = true;
      Parent np = parents[static_cast<std::size_t>(tails[ui].parent)];
      np.evolved[pair] = tails[ui].subsets;
      next.push_back(std::move(np));
    }
    for (auto& t : tails) res.tails.emplace_back(pair, std::move(t));
    parents = std::move(next);
  }

  res.genome = compose_topology(sc, candidates, 0, {}, parents[0].evolved);
  validate_topology(sc, res.genome);
  return res;
}

}  // namespace bixnas
