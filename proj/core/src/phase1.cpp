#include "bixnas/phase1.hpp"

namespace bixnas {

namespace {

// Eval-mode selection forward over the validation split (hard argmax, no noise).
EvalResult evaluate_selection(SuperNet<float>& net, const SelectionSet<float>& sel,
                              const Dataset& data, const std::vector<i64>& idx, i64 batch,
                              i64 threads) {
  const Topology dense = dense_topology(net.config());
  const ExecutionPlan plan = build_plan(net.config(), dense, 1, 0);
  const i64 n_batches = (static_cast<i64>(idx.size()) + batch - 1) / batch;

  struct Counts {
    std::vector<i64> inter, pred, target;
  };
  std::vector<Counts> parts(static_cast<std::size_t>(n_batches));
  parallel_for(n_batches, threads, [&](i64 bi) {
    const i64 from = bi * batch;
    const i64 count = std::min<i64>(batch, static_cast<i64>(idx.size()) - from);
    Graph<float> g;
    auto x = g.input(stack_images(data, idx, from, count));
    RunOptions<float> opt;
    opt.selection = &sel;  // eval: no noise, hard argmax
    auto logits = net.forward(g, plan, x, opt);
    const IndexMap pred = argmax_classes(g.value(logits));
    const IndexMap target = stack_masks(data, idx, from, count);
    Counts& c = parts[static_cast<std::size_t>(bi)];
    c.inter.assign(static_cast<std::size_t>(data.classes), 0);
    c.pred.assign(static_cast<std::size_t>(data.classes), 0);
    c.target.assign(static_cast<std::size_t>(data.classes), 0);
    for (std::size_t i = 0; i < pred.v.size(); ++i) {
      ++c.pred[static_cast<std::size_t>(pred.v[i])];
      ++c.target[static_cast<std::size_t>(target.v[i])];
      if (pred.v[i] == target.v[i]) ++c.inter[static_cast<std::size_t>(pred.v[i])];
    }
  });
  std::vector<i64> inter(static_cast<std::size_t>(data.classes)),
      predc(static_cast<std::size_t>(data.classes)), targetc(static_cast<std::size_t>(data.classes));
  for (const auto& p : parts) {
    for (std::size_t c = 0; c < inter.size(); ++c) {
      inter[c] += p.inter[c];
      predc[c] += p.pred[c];
      targetc[c] += p.target[c];
    }
  }
  double iou_sum = 0, dice_sum = 0;
  i64 present = 0;
  for (std::size_t c = 0; c < inter.size(); ++c) {
    const i64 uni = predc[c] + targetc[c] - inter[c];
    if (uni == 0) continue;
    iou_sum += static_cast<double>(inter[c]) / static_cast<double>(uni);
    dice_sum += 2.0 * static_cast<double>(inter[c]) / static_cast<double>(predc[c] + targetc[c]);
    ++present;
  }
  if (present == 0) return {0.0, 0.0};
  return {iou_sum / static_cast<double>(present), dice_sum / static_cast<double>(present)};
}

}  // namespace

Phase1Result train_phase1(SuperNet<float>& net, const Dataset& data, const Phase1Config& cfg,
                          u64 seed, i64 threads) {
  cfg.schedule.validate();
  if (data.train_idx.empty() || data.val_idx.empty())
    throw ConfigError("phase 1: dataset has empty splits");

  Phase1Result res;
  res.selection = make_selection_matrices<float>(net.config(), cfg.tau);

  // single parameter group: SuperNet weights and selection matrices together
  std::vector<ParamPtr<float>> params = net.params();
  for (auto& [k, m] : res.selection.matrices) params.push_back(m);
  Adam<float> opt(params, static_cast<float>(cfg.schedule.lr0));

  const Topology dense = dense_topology(net.config());
  const ExecutionPlan plan = build_plan(net.config(), dense, 1, 0);

  std::vector<i64> order = data.train_idx;
  for (i64 epoch = 0; epoch < cfg.schedule.epochs; ++epoch) {
    const double lr = cfg.schedule.lr_at(epoch);
    opt.set_lr(static_cast<float>(lr));
    Rng shuffle_rng(derive_seed(seed, "p1.shuffle", static_cast<u64>(epoch)));
    shuffle_rng.shuffle(order);
    double loss_sum = 0;
    i64 steps = 0;
    for (i64 from = 0; from < static_cast<i64>(order.size()); from += cfg.schedule.batch) {
      const i64 count = std::min<i64>(cfg.schedule.batch, static_cast<i64>(order.size()) - from);
      Rng noise_rng(derive_seed(seed, "p1.noise",
                                static_cast<u64>(epoch) * 1000003ull + static_cast<u64>(steps)));
      const auto noise = sample_gumbel_noise<float>(net.config(), noise_rng);
      Graph<float> g;
      auto x = g.input(stack_images(data, order, from, count));
      RunOptions<float> ro;
      ro.training = true;
      ro.selection = &res.selection;
      ro.noise = &noise;
      typename Graph<float>::NodeId logits;
      try {
        logits = net.forward(g, plan, x, ro);
      } catch (const NumericError& e) {
        throw NumericError("phase 1 diverged at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(steps) + ": " + e.what());
      }
      auto loss = g.cross_entropy(logits, stack_masks(data, order, from, count));
      loss_sum += static_cast<double>(g.value(loss).data[0]);
      ++steps;
      opt.zero_grad();
      g.backward(loss);
      opt.step();
    }
    const EvalResult ev = evaluate_selection(net, res.selection, data, data.val_idx,
                                             cfg.schedule.batch, threads);
    res.log.push_back({epoch, lr, loss_sum / static_cast<double>(steps), ev.miou, ev.dice});
  }

  res.candidates = extract_all_candidates(net.config(), res.selection);
  net.snapshot_state(res.state);
  for (const auto& [k, m] : res.selection.matrices) res.state[m->name] = cast<double>(m->value);
  return res;
}

}  // namespace bixnas
