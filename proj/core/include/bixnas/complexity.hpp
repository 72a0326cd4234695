#pragma once

#include <map>
#include <string>
#include <vector>

#include "bixnas/supernet.hpp"

namespace bixnas {

// Multiply-accumulate accounting, exact integers throughout.
//   conv (incl. 1x1 projections): Cin*Cout*k^2*Hout*Wout per application
//   bilinear resize:              4 per output element (0 when identity)
//   channel-wise normalization:   1 per element
//   max-pool / ReLU / average:    0 (no multiplies)
// Reused blocks count once per execution, so T iterations charge T times.
struct MacsReport {
  u64 total = 0;
  std::map<std::string, u64> per_block;  // "stem", "head", and "stage.level"
  std::vector<std::string> executed;     // executed blocks in execution order
};

MacsReport macs(const SuperNetConfig& cfg, const Topology& topo, const TensorShape& input_shape);

// Distinct weight-bearing blocks counted once (weight sharing); blocks that
// execute at no stage are excluded; route projections counted only when the
// route is active into an executed block. Normalization running stats are
// buffers, not parameters.
u64 param_count(const SuperNetConfig& cfg, const Topology& topo);

// Exact [sum_{k=1}^{N-2} C(N,k)]^(L*(2T-1)) -- a per-block choice of a
// non-empty stream subset of size <= N-2, independent across all searching
// blocks. Returned as a decimal string (arbitrary precision).
std::string search_space_size(i64 N, i64 L, i64 T);

// Same value for small instances; throws NumericError if it exceeds u64.
u64 search_space_size_u64(i64 N, i64 L, i64 T);

// Forward/backward bookkeeping of one progressive-search step compared with
// the two cost-model readings (head charged t-1 stages vs t stages) and the
// per-architecture naive baseline.
struct CostAuditReport {
  i64 iterations = 0;       // T
  i64 population = 0;       // tails trained together (s, or |P| for naive)
  i64 pair = 0;             // searched stage pair t
  // shared-head measurement
  i64 shared_forwards = 0;  // stage-forward events per batch
  i64 shared_backwards = 0;
  i64 shared_predicted_forwards = 0;  // (t-1) + (2T-t+1)*s
  bool shared_matches = false;
  // naive per-architecture measurement (stage-equivalents)
  i64 naive_forwards = 0;
  i64 naive_backward_stage_equiv = 0;
  i64 naive_predicted_forwards = 0;  // 2T*|P|
  bool naive_matches = false;
  // alternative reading that charges the shared part t stage-forwards
  i64 formula_forwards_head_t = 0;  // t + (2T-t)*s
  double measured_speedup = 0.0;    // naive forwards / shared forwards
};

CostAuditReport cost_formula_audit(i64 T, i64 s, i64 pair, const ForwardAudit& shared,
                                   const ForwardAudit& naive);

}  // namespace bixnas
