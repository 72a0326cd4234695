#pragma once

#include <string>
#include <vector>

#include "bixnas/checkpoint.hpp"
#include "bixnas/optim.hpp"
#include "bixnas/supernet.hpp"

namespace bixnas {

// One soft-edged ellipse; the rasterization rule (pixel centers at +0.5,
// inclusive boundary, later blobs overwrite) is part of the dataset contract
// so masks can be re-derived from these parameters.
struct Blob {
  i64 cls = 1;
  double cx = 0, cy = 0, rx = 1, ry = 1, angle = 0;
};

struct Dataset {
  i64 hw = 0;
  i64 channels = 0;
  i64 classes = 0;
  u64 seed = 0;
  std::vector<Tensor<float>> images;       // each (1, C, hw, hw), preprocessed to [0,1]
  std::vector<IndexMap> masks;             // each (1, hw, hw)
  std::vector<std::vector<Blob>> shapes;   // generator parameters per image
  std::vector<i64> train_idx, val_idx, test_idx;
};

// Textured background plus randomly placed soft-edged ellipses, one or two
// per foreground class, fully inside the frame so every class occurs in
// every mask. Images are auto-contrast clipped then min-max normalized.
Dataset synth_blobs(i64 n, i64 hw, i64 classes, u64 seed, i64 channels = 3);

// Exact mask rasterization of one image's blobs (the generator's rule).
IndexMap rasterize_blobs(const std::vector<Blob>& blobs, i64 hw);

// Affine map of all values to [0, 1]; a constant tensor maps to all zeros.
template <class S>
void min_max_normalize(Tensor<S>& t) {
  if (t.data.empty()) return;
  S lo = t.data[0], hi = t.data[0];
  for (S v : t.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    std::fill(t.data.begin(), t.data.end(), S(0));
    return;
  }
  // divide rather than multiply by a reciprocal so the extremes land on
  // exactly 0 and 1 and nothing escapes [0, 1]
  const S range = hi - lo;
  for (auto& v : t.data) v = (v - lo) / range;
}

// Percentile-clipped min-max: clip to the [lo_pct, hi_pct] percentiles
// (nearest-rank on the sorted values), then map to [0, 1].
template <class S>
void auto_contrast(Tensor<S>& t, double lo_pct = 1.0, double hi_pct = 99.0) {
  if (t.data.empty()) return;
  if (!(lo_pct >= 0 && hi_pct <= 100 && lo_pct < hi_pct)) throw ConfigError("auto_contrast: bad percentiles");
  std::vector<S> sorted = t.data;
  std::sort(sorted.begin(), sorted.end());
  const auto rank = [&](double q) {
    const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
    return sorted[static_cast<std::size_t>(pos + 0.5)];
  };
  const S lo = rank(lo_pct), hi = rank(hi_pct);
  for (auto& v : t.data) v = std::clamp(v, lo, hi);
  min_max_normalize(t);
}

// Pooled over the whole map pair; classes absent from both pred and target
// are excluded from the mean.
double miou(const IndexMap& pred, const IndexMap& target, i64 classes);
double dice(const IndexMap& pred, const IndexMap& target, i64 classes);

// Per-pixel argmax over the channel dim (ties -> lowest class index).
template <class S>
IndexMap argmax_classes(const Tensor<S>& logits) {
  IndexMap out(logits.shape.b, logits.shape.h, logits.shape.w);
  const i64 C = logits.shape.c, plane = logits.shape.h * logits.shape.w;
  for (i64 b = 0; b < logits.shape.b; ++b) {
    for (i64 p = 0; p < plane; ++p) {
      i64 best = 0;
      S bv = logits.data[static_cast<std::size_t>(b * C * plane + p)];
      for (i64 c = 1; c < C; ++c) {
        const S v = logits.data[static_cast<std::size_t>((b * C + c) * plane + p)];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out.v[static_cast<std::size_t>(b * plane + p)] = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

Tensor<float> stack_images(const Dataset& data, const std::vector<i64>& idx, i64 from, i64 count);
IndexMap stack_masks(const Dataset& data, const std::vector<i64>& idx, i64 from, i64 count);

struct TrainSchedule {
  i64 epochs = 30;
  double lr0 = 1e-3;
  enum class Decay { kInverseTime, kStep };
  Decay decay = Decay::kInverseTime;
  double inv_rate = 3e-3;     // lr0 / (1 + rate * epoch)
  double step_factor = 10.0;  // divide by factor every step_every epochs
  i64 step_every = 10;
  i64 batch = 4;

  double lr_at(i64 epoch) const {
    return decay == Decay::kInverseTime ? inverse_time_lr(lr0, inv_rate, epoch)
                                        : step_decay_lr(lr0, step_factor, step_every, epoch);
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("schedule: epochs must be >= 1");
    if (!(lr0 > 0)) throw ConfigError("schedule: lr must be > 0");
    if (batch < 1) throw ConfigError("schedule: batch must be >= 1");
  }
};

struct EpochLog {
  i64 epoch = 0;
  double lr = 0, train_loss = 0, val_miou = 0, val_dice = 0;
};

struct EvalResult {
  double miou = 0, dice = 0;
};

// Noise-free eval-mode metrics over a split, pooled across all its images.
EvalResult evaluate(SuperNet<float>& net, const Topology& topo, const Dataset& data,
                    const std::vector<i64>& idx, i64 batch, i64 threads = 1);

struct FitResult {
  std::vector<EpochLog> log;
  TensorMap best_state;
  double best_miou = -1, best_dice = -1;
  i64 best_epoch = -1;
};

// Cross-entropy + Adam under the schedule; logs per-epoch train loss and
// validation mIoU/DICE; returns the best-validation checkpoint.
FitResult fit(SuperNet<float>& net, const Topology& topo, const Dataset& data,
              const TrainSchedule& sched, u64 seed, i64 threads = 1);

}  // namespace bixnas
