#pragma once

#include <string>

#include "bixnas/phase1.hpp"
#include "bixnas/phase2.hpp"

namespace bixnas {

// Everything a run needs, resolvable from defaults, a config file, and CLI
// overrides (in that order). The desk-scale defaults keep a full pipeline
// run within a few minutes on a laptop core.
struct RunConfig {
  SuperNetConfig net;

  // [data]
  i64 data_images = 96;
  i64 data_size = 32;

  // [run]
  u64 seed = 17;
  i64 threads = 1;

  Phase1Config phase1;    // [phase1] epochs, lr, decay_rate, batch, tau
  Phase2Config phase2;    // [phase2] samples, retain, epochs_per_pair, batch, lr, ...
  TrainSchedule retrain;  // [retrain] epochs, lr, step_factor, step_every, batch

  void validate() const;
};

RunConfig default_run_config();

// Minimal TOML subset: [section] headers and `key = value` lines where the
// value is an integer, a float, a double-quoted string, or true/false.
// Unknown or duplicate keys are errors.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Canonical serialization of the resolved config; its digest goes in the
// run manifest so artifact provenance is checkable.
std::string run_config_to_toml(const RunConfig& c);

}  // namespace bixnas
