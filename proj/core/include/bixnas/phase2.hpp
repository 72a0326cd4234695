#pragma once

#include <memory>
#include <string>
#include <vector>

#include "bixnas/complexity.hpp"
#include "bixnas/tasks.hpp"

namespace bixnas {

// ---- Pareto retention -----------------------------------------------------

struct ParetoRecord {
  i64 id = 0;
  double miou = 0;
  u64 macs_count = 0;
  std::string key;  // canonical genome string, lexicographic tie-break
};

// Non-dominated set under (maximize miou, minimize macs); dominance uses
// >=/<= with at least one strict. If the front exceeds `cap`, keep the `cap`
// highest-miou members. Returns indices into pop, best first (miou desc,
// then macs asc, then key, then id).
std::vector<i64> pareto_select(const std::vector<ParetoRecord>& pop, i64 cap = 2);

// ---- Subset sampling -------------------------------------------------------

// Size n uniform in [1, |candidates|], then a uniform size-n combination
// without replacement; result sorted.
std::vector<i64> sample_subset(const std::vector<i64>& candidates, Rng& rng);

// Fresh subsets for every searching block of stage pair+1.
std::map<BlockKey, std::vector<i64>> sample_pair_subsets(const SuperNetConfig& cfg,
                                                         const Topology& candidates, i64 pair,
                                                         Rng& rng);

// ---- Skip-fairness audit ---------------------------------------------------

// Digests of boundary skipped features: one row per (training step, tail,
// consuming block, stream).
struct FairnessTrace {
  struct Row {
    i64 step = 0;
    i64 tail = 0;
    BlockKey block;
    i64 stream = 0;
    u64 digest = 0;
  };
  std::vector<Row> rows;
};

struct FairnessReport {
  bool pass = true;
  i64 steps = 0;
  i64 comparisons = 0;
  // first violation, when pass == false
  i64 step = -1, tail_a = -1, tail_b = -1, stream = -1;
  BlockKey block;
  u64 digest_a = 0, digest_b = 0;
};

// Pass iff, for every (step, block, stream), all tails observed the same
// digest; the report localizes the first violation.
FairnessReport verify_fairness(const FairnessTrace& trace);

// ---- Progressive search ----------------------------------------------------

struct SampledTail {
  i64 id = 0;
  i64 parent = 0;                               // index into the previous retained set
  std::map<BlockKey, std::vector<i64>> subsets;  // blocks of stage pair+1
  double fitness = 0;                            // validation mIoU
  u64 macs_count = 0;                            // MACs of the induced full architecture
  bool retained = false;
};

struct Phase2Config {
  i64 samples = 4;         // fresh tails per retained parent
  i64 retain = 2;          // retention capacity
  i64 epochs_per_pair = 6;
  i64 batch = 4;
  double lr0 = 1e-3;
  double step_factor = 10.0;  // lr divided by this every step_every epochs
  i64 step_every = 10;
  i64 threads = 1;
  bool collect_trace = false;  // record boundary digests during training

  void validate() const {
    if (samples < 1) throw UsageError("phase 2: samples must be >= 1");
    if (retain < 1) throw ConfigError("phase 2: retain must be >= 1");
    if (epochs_per_pair < 1 || batch < 1) throw ConfigError("phase 2: epochs/batch must be >= 1");
    if (!(lr0 > 0)) throw ConfigError("phase 2: lr must be > 0");
  }
};

struct Phase2EpochLog {
  i64 pair = 0, epoch = 0;
  double lr = 0, mean_loss = 0;
  i64 excluded = 0;  // non-finite tails dropped from the loss average
};

struct Phase2Result {
  Topology genome;
  std::vector<Phase2EpochLog> epochs;
  std::vector<std::pair<i64, SampledTail>> tails;            // (pair, record)
  std::vector<std::pair<i64, ForwardAudit>> shared_audits;   // one instrumented batch per pair
  FairnessTrace trace;
};

// Full-architecture topology when searching `pair`: blocks of earlier pairs
// take their full candidate sets, blocks of `pair` take `subsets`, blocks of
// later pairs take the already-evolved assignment.
Topology compose_topology(const SuperNetConfig& cfg, const Topology& candidates, i64 pair,
                          const std::map<BlockKey, std::vector<i64>>& subsets,
                          const std::map<i64, std::map<BlockKey, std::vector<i64>>>& evolved);

// One shared-head step: stages 1..pair-1 forwarded once, every tail forwarded
// from those features, losses averaged (non-finite tails excluded), a single
// backward and optimizer step.
struct SharedStepResult {
  double mean_loss = 0;
  i64 excluded = 0;
};

SharedStepResult train_step_shared(SuperNet<float>& net, Adam<float>& opt, i64 pair,
                                   const std::vector<Topology>& tail_topos,
                                   const Tensor<float>& images, const IndexMap& masks,
                                   ForwardAudit* audit = nullptr, FairnessTrace* trace = nullptr,
                                   i64 step_index = 0);

// The individually-trained baseline: every tail owns a private copy of the
// weights and runs its own full forward/backward/update each step, so the
// boundary features it sees drift apart from the other tails' after the
// first step.
class NaiveBaseline {
 public:
  NaiveBaseline(const SuperNetConfig& cfg, const TensorMap& init_state,
                std::vector<Topology> tail_topos, double lr, u64 seed);

  double step(const Tensor<float>& images, const IndexMap& masks, i64 pair,
              ForwardAudit* audit = nullptr, FairnessTrace* trace = nullptr, i64 step_index = 0);

  i64 tails() const { return static_cast<i64>(nets_.size()); }

 private:
  std::vector<std::unique_ptr<SuperNet<float>>> nets_;
  std::vector<std::unique_ptr<Adam<float>>> opts_;
  std::vector<Topology> topos_;
};

// Algorithm: iterate stage pairs from the last to the first; per pair sample
// s tails per retained parent, train them jointly behind the shared head,
// evaluate fitness (validation mIoU) and cost (MACs), retain the Pareto
// front, and freeze the winner's subsets into the genome.
Phase2Result run_progressive_search(SuperNet<float>& net, const Topology& candidates,
                                    const Dataset& data, const Phase2Config& cfg, u64 seed);

}  // namespace bixnas
