#include "bixnas/tasks.hpp"

#include <cmath>

namespace bixnas {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Signed "ellipse distance": <= 1 means inside; used for both the exact
// mask and the soft intensity falloff.
double ellipse_d2(const Blob& b, double px, double py) {
  const double dx = px - b.cx, dy = py - b.cy;
  const double c = std::cos(b.angle), s = std::sin(b.angle);
  const double u = dx * c + dy * s;
  const double v = -dx * s + dy * c;
  return (u / b.rx) * (u / b.rx) + (v / b.ry) * (v / b.ry);
}

// Deterministic distinct-ish per-class/channel intensity.
double palette(i64 cls, i64 ch) {
  return 0.35 + 0.5 * static_cast<double>((cls * 31 + ch * 17) % 7) / 6.0;
}

}  // namespace

IndexMap rasterize_blobs(const std::vector<Blob>& blobs, i64 hw) {
  IndexMap mask(1, hw, hw);
  for (const Blob& b : blobs) {
    for (i64 y = 0; y < hw; ++y) {
      for (i64 x = 0; x < hw; ++x) {
        if (ellipse_d2(b, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5) <= 1.0)
          mask.v[static_cast<std::size_t>(y * hw + x)] = static_cast<std::int32_t>(b.cls);
      }
    }
  }
  return mask;
}

Dataset synth_blobs(i64 n, i64 hw, i64 classes, u64 seed, i64 channels) {
  if (classes < 2) throw ConfigError("synth_blobs: need at least 2 classes (background + foreground)");
  if (n < 5) throw ConfigError("synth_blobs: need at least 5 images for the splits");
  if (hw < 8) throw ConfigError("synth_blobs: hw too small");
  if (channels < 1) throw ConfigError("synth_blobs: channels must be >= 1");

  Dataset ds;
  ds.hw = hw;
  ds.channels = channels;
  ds.classes = classes;
  ds.seed = seed;

  for (i64 i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "synth", static_cast<u64>(i)));
    std::vector<Blob> blobs;
    for (i64 cls = 1; cls < classes; ++cls) {
      const i64 count = rng.uniform_int(1, 2);
      for (i64 j = 0; j < count; ++j) {
        Blob b;
        b.cls = cls;
        b.rx = rng.uniform(static_cast<double>(hw) / 6.0, static_cast<double>(hw) / 4.0);
        b.ry = rng.uniform(static_cast<double>(hw) / 6.0, static_cast<double>(hw) / 4.0);
        const double margin = std::max(b.rx, b.ry) + 1.0;
        b.cx = rng.uniform(margin, static_cast<double>(hw) - margin);
        b.cy = rng.uniform(margin, static_cast<double>(hw) - margin);
        b.angle = rng.uniform(0.0, kPi);
        blobs.push_back(b);
      }
    }

    Tensor<float> img({1, channels, hw, hw});
    const double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0);
    const double phx = rng.uniform(0.0, 2 * kPi), phy = rng.uniform(0.0, 2 * kPi);
    std::vector<double> base(static_cast<std::size_t>(channels));
    for (auto& b : base) b = rng.uniform(0.15, 0.4);
    for (i64 c = 0; c < channels; ++c) {
      for (i64 y = 0; y < hw; ++y) {
        for (i64 x = 0; x < hw; ++x) {
          double v = base[static_cast<std::size_t>(c)] +
                     0.08 * std::sin(2 * kPi * fx * x / hw + phx) * std::sin(2 * kPi * fy * y / hw + phy) +
                     0.04 * rng.uniform(-1.0, 1.0);
          for (const Blob& b : blobs) {
            const double d2 = ellipse_d2(b, x + 0.5, y + 0.5);
            // smooth step across the boundary: near 1 inside, 0 outside
            v += palette(b.cls, c) / (1.0 + std::exp((d2 - 1.0) * 8.0));
          }
          img.at(0, c, y, x) = static_cast<float>(v);
        }
      }
    }
    auto_contrast(img);
    ds.images.push_back(std::move(img));
    ds.masks.push_back(rasterize_blobs(blobs, hw));
    ds.shapes.push_back(std::move(blobs));
  }

  // 60/20/20 split, seed-deterministic
  std::vector<i64> order(static_cast<std::size_t>(n));
  for (i64 i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng split_rng(derive_seed(seed, "split", 0));
  split_rng.shuffle(order);
  const i64 n_val = std::max<i64>(1, n / 5);
  const i64 n_test = std::max<i64>(1, n / 5);
  for (i64 i = 0; i < n; ++i) {
    if (i < n_val) ds.val_idx.push_back(order[static_cast<std::size_t>(i)]);
    else if (i < n_val + n_test) ds.test_idx.push_back(order[static_cast<std::size_t>(i)]);
    else ds.train_idx.push_back(order[static_cast<std::size_t>(i)]);
  }
  std::sort(ds.val_idx.begin(), ds.val_idx.end());
  std::sort(ds.test_idx.begin(), ds.test_idx.end());
  std::sort(ds.train_idx.begin(), ds.train_idx.end());
  return ds;
}

namespace {

struct OverlapCounts {
  std::vector<i64> inter, pred, target;
  explicit OverlapCounts(i64 classes)
      : inter(static_cast<std::size_t>(classes)), pred(static_cast<std::size_t>(classes)),
        target(static_cast<std::size_t>(classes)) {}

  void add(const IndexMap& p, const IndexMap& t, i64 classes) {
    if (!(p.b == t.b && p.h == t.h && p.w == t.w)) throw UsageError("metric: shape mismatch");
    for (std::size_t i = 0; i < p.v.size(); ++i) {
      const i64 pc = p.v[i], tc = t.v[i];
      if (pc < 0 || pc >= classes || tc < 0 || tc >= classes)
        throw UsageError("metric: class index out of range");
      ++pred[static_cast<std::size_t>(pc)];
      ++target[static_cast<std::size_t>(tc)];
      if (pc == tc) ++inter[static_cast<std::size_t>(pc)];
    }
  }

  double mean_iou() const {
    double sum = 0;
    i64 present = 0;
    for (std::size_t c = 0; c < inter.size(); ++c) {
      const i64 uni = pred[c] + target[c] - inter[c];
      if (uni == 0) continue;  // class absent from both maps
      sum += static_cast<double>(inter[c]) / static_cast<double>(uni);
      ++present;
    }
    return present == 0 ? 0.0 : sum / static_cast<double>(present);
  }

  double mean_dice() const {
    double sum = 0;
    i64 present = 0;
    for (std::size_t c = 0; c < inter.size(); ++c) {
      const i64 denom = pred[c] + target[c];
      if (denom == 0) continue;
      sum += 2.0 * static_cast<double>(inter[c]) / static_cast<double>(denom);
      ++present;
    }
    return present == 0 ? 0.0 : sum / static_cast<double>(present);
  }

  void merge(const OverlapCounts& o) {
    for (std::size_t c = 0; c < inter.size(); ++c) {
      inter[c] += o.inter[c];
      pred[c] += o.pred[c];
      target[c] += o.target[c];
    }
  }
};

}  // namespace

double miou(const IndexMap& pred, const IndexMap& target, i64 classes) {
  OverlapCounts oc(classes);
  oc.add(pred, target, classes);
  return oc.mean_iou();
}

double dice(const IndexMap& pred, const IndexMap& target, i64 classes) {
  OverlapCounts oc(classes);
  oc.add(pred, target, classes);
  return oc.mean_dice();
}

Tensor<float> stack_images(const Dataset& data, const std::vector<i64>& idx, i64 from, i64 count) {
  Tensor<float> out({count, data.channels, data.hw, data.hw});
  const i64 per = data.channels * data.hw * data.hw;
  for (i64 i = 0; i < count; ++i) {
    const auto& src = data.images[static_cast<std::size_t>(idx[static_cast<std::size_t>(from + i)])];
    std::copy(src.data.begin(), src.data.end(), out.data.begin() + i * per);
  }
  return out;
}

IndexMap stack_masks(const Dataset& data, const std::vector<i64>& idx, i64 from, i64 count) {
  IndexMap out(count, data.hw, data.hw);
  const i64 per = data.hw * data.hw;
  for (i64 i = 0; i < count; ++i) {
    const auto& src = data.masks[static_cast<std::size_t>(idx[static_cast<std::size_t>(from + i)])];
    std::copy(src.v.begin(), src.v.end(), out.v.begin() + i * per);
  }
  return out;
}

EvalResult evaluate(SuperNet<float>& net, const Topology& topo, const Dataset& data,
                    const std::vector<i64>& idx, i64 batch, i64 threads) {
  if (idx.empty()) throw UsageError("evaluate: empty index list");
  const i64 n_batches = (static_cast<i64>(idx.size()) + batch - 1) / batch;
  std::vector<OverlapCounts> parts(static_cast<std::size_t>(n_batches), OverlapCounts(data.classes));
  const ExecutionPlan plan = build_plan(net.config(), topo, 1, 0);
  parallel_for(n_batches, threads, [&](i64 bi) {
    const i64 from = bi * batch;
    const i64 count = std::min<i64>(batch, static_cast<i64>(idx.size()) - from);
    Graph<float> g;
    auto x = g.input(stack_images(data, idx, from, count));
    RunOptions<float> opt;  // eval mode
    auto logits = net.forward(g, plan, x, opt);
    parts[static_cast<std::size_t>(bi)].add(argmax_classes(g.value(logits)),
                                            stack_masks(data, idx, from, count), data.classes);
  });
  OverlapCounts total(data.classes);
  for (const auto& p : parts) total.merge(p);
  return {total.mean_iou(), total.mean_dice()};
}

FitResult fit(SuperNet<float>& net, const Topology& topo, const Dataset& data,
              const TrainSchedule& sched, u64 seed, i64 threads) {
  sched.validate();
  if (data.train_idx.empty() || data.val_idx.empty()) throw ConfigError("fit: dataset has empty splits");
  const ExecutionPlan plan = build_plan(net.config(), topo, 1, 0);
  Adam<float> opt(net.params(), static_cast<float>(sched.lr0));

  FitResult res;
  std::vector<i64> order = data.train_idx;
  for (i64 epoch = 0; epoch < sched.epochs; ++epoch) {
    const double lr = sched.lr_at(epoch);
    opt.set_lr(static_cast<float>(lr));
    Rng rng(derive_seed(seed, "fit.epoch", static_cast<u64>(epoch)));
    rng.shuffle(order);
    double loss_sum = 0;
    i64 steps = 0;
    for (i64 from = 0; from < static_cast<i64>(order.size()); from += sched.batch) {
      const i64 count = std::min<i64>(sched.batch, static_cast<i64>(order.size()) - from);
      Graph<float> g;
      auto x = g.input(stack_images(data, order, from, count));
      RunOptions<float> ro;
      ro.training = true;
      typename Graph<float>::NodeId logits;
      try {
        logits = net.forward(g, plan, x, ro);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(steps) + ": " + e.what());
      }
      auto loss = g.cross_entropy(logits, stack_masks(data, order, from, count));
      loss_sum += static_cast<double>(g.value(loss).data[0]);
      ++steps;
      opt.zero_grad();
      g.backward(loss);
      opt.step();
    }
    const EvalResult ev = evaluate(net, topo, data, data.val_idx, sched.batch, threads);
    res.log.push_back({epoch, lr, loss_sum / static_cast<double>(steps), ev.miou, ev.dice});
    if (ev.miou > res.best_miou) {
      res.best_miou = ev.miou;
      res.best_dice = ev.dice;
      res.best_epoch = epoch;
      res.best_state.clear();
      net.snapshot_state(res.best_state);
    }
  }
  return res;
}

}  // namespace bixnas
