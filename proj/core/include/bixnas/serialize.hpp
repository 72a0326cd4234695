#pragma once

#include <string>
#include <vector>

#include "bixnas/phase2.hpp"
#include "bixnas/tasks.hpp"

namespace bixnas {

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

// Genome / candidate-set JSON: a config header plus, per searching block key
// "stage.level", the array of active source keys — "srcStage.srcLevel" for
// cross-stage skips and "seq" for the within-stage sequential input.
std::string topology_to_json(const SuperNetConfig& cfg, const Topology& topo);
Topology topology_from_json(const std::string& text, SuperNetConfig* out_cfg = nullptr);

void save_topology(const std::string& path, const SuperNetConfig& cfg, const Topology& topo);
Topology load_topology(const std::string& path, SuperNetConfig* out_cfg = nullptr);

// Checks that the JSON's embedded config matches the one in use.
void require_matching_config(const SuperNetConfig& expected, const SuperNetConfig& loaded);

// Dataset directory: meta.json (dims, seed, splits, blob parameters),
// images.bixw (one tensor per image), mask_<i>.pgm (binary P5, class bytes).
void save_dataset(const std::string& dir, const Dataset& data);
Dataset load_dataset(const std::string& dir);

// Reports
std::string fairness_report_json(const FairnessReport& rep, const FairnessReport* baseline = nullptr);
std::string macs_report_json(const MacsReport& rep, u64 params, const std::string& space_size);
std::string cost_audit_json(const std::vector<CostAuditReport>& reports);

// Search logs as JSONL lines
std::vector<std::string> phase1_log_jsonl(const std::vector<EpochLog>& log);
std::vector<std::string> phase2_log_jsonl(const Phase2Result& res);

// 16-hex-digit digest of a file's bytes, for the run manifest.
std::string file_digest_hex(const std::string& path);

}  // namespace bixnas
