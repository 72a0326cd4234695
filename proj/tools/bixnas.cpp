// Command-line front end: dataset generation, the two search phases,
// retraining, evaluation, complexity analysis, and the fairness/cost audit,
// plus a `pipeline` driver that chains them with stage-level resume.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bixnas/complexity.hpp"
#include "bixnas/phase1.hpp"
#include "bixnas/phase2.hpp"
#include "bixnas/serialize.hpp"
#include "config.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace bixnas;

namespace {

struct Cli {
  std::string config_path, out, data_dir, phase1_dir, genome_path, weights_path, candidates_path;
  std::string split = "val";
  i64 threads = 0;  // 0: take from config
  i64 seed = -1;    // <0: take from config
  bool resume = false;
  bool reinit = false;
  i64 N = 0, L = 0, T = 0;
  bool brute = false;
  i64 audit_steps = 3;
};

std::string hex64(u64 v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

RunConfig resolve_config(const Cli& c) {
  RunConfig rc = c.config_path.empty() ? default_run_config() : load_run_config(c.config_path);
  if (c.seed >= 0) rc.seed = static_cast<u64>(c.seed);
  if (c.threads > 0) rc.threads = c.threads;
  rc.validate();
  return rc;
}

// Thread count never changes results, so it is normalized out of the digest
// that gates resume.
std::string config_digest(const RunConfig& rc) {
  RunConfig d = rc;
  d.threads = 1;
  return hex64(fnv1a64(run_config_to_toml(d)));
}

void write_manifest(const fs::path& dir, const std::string& command, const RunConfig& rc,
                    const std::vector<std::string>& artifacts) {
  json arts = json::object();
  for (const auto& name : artifacts) arts[name] = file_digest_hex((dir / name).string());
  const json j{{"command", command},
               {"seed", rc.seed},
               {"config_digest", config_digest(rc)},
               {"artifacts", arts}};
  write_text_file((dir / "manifest.json").string(), j.dump(2) + "\n");
}

// True iff the stage directory holds a manifest for the same command, seed
// and config, and every listed artifact still matches its digest.
bool manifest_matches(const fs::path& dir, const std::string& command, const RunConfig& rc) {
  std::error_code ec;
  if (!fs::exists(dir / "manifest.json", ec)) return false;
  try {
    const json j = json::parse(read_text_file((dir / "manifest.json").string()));
    if (j.at("command").get<std::string>() != command) return false;
    if (j.at("seed").get<u64>() != rc.seed) return false;
    if (j.at("config_digest").get<std::string>() != config_digest(rc)) return false;
    for (const auto& [name, digest] : j.at("artifacts").items()) {
      const fs::path p = dir / name;
      if (!fs::exists(p, ec)) return false;
      if (file_digest_hex(p.string()) != digest.get<std::string>()) return false;
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

void write_jsonl(const fs::path& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) {
    text += l;
    text += '\n';
  }
  write_text_file(path.string(), text);
}

Dataset load_and_check(const std::string& dir, const RunConfig& rc) {
  Dataset d = load_dataset(dir);
  if (d.channels != rc.net.in_channels || d.classes != rc.net.num_classes)
    throw ConfigError("dataset at " + dir + " (" + std::to_string(d.channels) + " channels, " +
                      std::to_string(d.classes) + " classes) does not match the net config");
  return d;
}

// ---- stage implementations (shared by the subcommands and `pipeline`) -----

void do_gen_data(const RunConfig& rc, const fs::path& out) {
  const Dataset d =
      synth_blobs(rc.data_images, rc.data_size, rc.net.num_classes, rc.seed, rc.net.in_channels);
  fs::create_directories(out);
  save_dataset(out.string(), d);
  std::vector<std::string> arts{"meta.json", "images.bixw"};
  for (i64 i = 0; i < rc.data_images; ++i) arts.push_back("mask_" + std::to_string(i) + ".pgm");
  write_manifest(out, "gen-data", rc, arts);
  std::cout << "data: " << d.images.size() << " images " << d.hw << "x" << d.hw << "x" << d.channels
            << ", " << d.classes << " classes (train " << d.train_idx.size() << " / val "
            << d.val_idx.size() << " / test " << d.test_idx.size() << ")\n";
}

void do_search1(const RunConfig& rc, const Dataset& data, const fs::path& out) {
  SuperNet<float> net(rc.net, rc.seed);
  const Phase1Result res = train_phase1(net, data, rc.phase1, rc.seed, rc.threads);
  fs::create_directories(out);
  save_tensor_map((out / "state.bixw").string(), res.state);
  write_text_file((out / "candidates.json").string(), topology_to_json(rc.net, res.candidates));
  write_jsonl(out / "phase1_log.jsonl", phase1_log_jsonl(res.log));
  write_manifest(out, "search1", rc, {"state.bixw", "candidates.json", "phase1_log.jsonl"});

  i64 cmin = rc.net.streams(), cmax = 0;
  for (const auto& [k, v] : res.candidates.active) {
    cmin = std::min<i64>(cmin, static_cast<i64>(v.size()));
    cmax = std::max<i64>(cmax, static_cast<i64>(v.size()));
  }
  const auto& last = res.log.back();
  std::cout << "phase 1: " << res.log.size() << " epochs, final val mIoU " << fmt4(last.val_miou)
            << " DICE " << fmt4(last.val_dice) << "; candidate skips per block in [" << cmin << ","
            << cmax << "]\n";
}

void do_search2(const RunConfig& rc, const Dataset& data, const fs::path& p1dir, const fs::path& out,
                bool reinit) {
  SuperNetConfig loaded;
  const Topology candidates = load_topology((p1dir / "candidates.json").string(), &loaded);
  require_matching_config(rc.net, loaded);
  SuperNet<float> net(rc.net, rc.seed);
  if (!reinit) net.restore_state(load_tensor_map((p1dir / "state.bixw").string()));

  Phase2Config p2 = rc.phase2;
  p2.threads = rc.threads;
  p2.collect_trace = true;
  const Phase2Result res = run_progressive_search(net, candidates, data, p2, rc.seed);

  const FairnessReport fair = verify_fairness(res.trace);

  json audits = json::array();
  bool counts_ok = true;
  for (const auto& [pair, aud] : res.shared_audits) {
    i64 pop = 0;
    for (const auto& pt : res.tails) pop += pt.first == pair ? 1 : 0;
    i64 measured = 0;
    for (const auto& [stage, times] : aud.stage_forwards) measured += times;
    const i64 predicted = (pair - 1) + (2 * rc.net.iterations - pair + 1) * pop;
    const bool match = measured == predicted && aud.backward_calls == 1;
    counts_ok = counts_ok && match;
    audits.push_back(json{{"pair", pair},
                          {"population", pop},
                          {"stage_forwards", measured},
                          {"predicted_forwards", predicted},
                          {"backward_calls", aud.backward_calls},
                          {"matches", match}});
  }

  fs::create_directories(out);
  write_text_file((out / "genome.json").string(), topology_to_json(rc.net, res.genome));
  write_jsonl(out / "phase2_log.jsonl", phase2_log_jsonl(res));
  write_text_file((out / "fairness.json").string(), fairness_report_json(fair));
  write_text_file((out / "shared_audit.json").string(),
                  json{{"shared_audit", audits}}.dump(2) + "\n");
  write_manifest(out, "search2", rc,
                 {"genome.json", "phase2_log.jsonl", "fairness.json", "shared_audit.json"});

  double best = -1;
  for (const auto& [p, t] : res.tails) {
    if (p == 1 && t.retained) best = std::max(best, t.fitness);
  }
  std::cout << "phase 2: " << res.shared_audits.size() << " stage pairs, genome val mIoU "
            << fmt4(best) << "; skip fairness " << (fair.pass ? "pass" : "FAIL")
            << "; shared-head forward counts " << (counts_ok ? "match" : "MISMATCH") << "\n";
  if (!fair.pass || !counts_ok) throw NumericError("phase 2 internal audit failed");
}

struct RetrainOut {
  double val_miou = 0, val_dice = 0, test_miou = 0, test_dice = 0;
  i64 best_epoch = 0;
};

RetrainOut do_retrain(const RunConfig& rc, const Dataset& data, const fs::path& genome_path,
                      const fs::path& out) {
  SuperNetConfig loaded;
  const Topology genome = load_topology(genome_path.string(), &loaded);
  require_matching_config(rc.net, loaded);

  const u64 rseed = derive_seed(rc.seed, "retrain", 0);
  SuperNet<float> net(rc.net, rseed);
  FitResult fr = fit(net, genome, data, rc.retrain, rseed, rc.threads);

  net.restore_state(fr.best_state);
  const EvalResult test = evaluate(net, genome, data, data.test_idx, rc.retrain.batch, rc.threads);

  fs::create_directories(out);
  save_tensor_map((out / "retrained.bixw").string(), fr.best_state);
  write_jsonl(out / "retrain_log.jsonl", phase1_log_jsonl(fr.log));
  const json metrics{{"best_epoch", fr.best_epoch},
                     {"val", json{{"miou", fr.best_miou}, {"dice", fr.best_dice}}},
                     {"test", json{{"miou", test.miou}, {"dice", test.dice}}}};
  write_text_file((out / "metrics.json").string(), metrics.dump(2) + "\n");
  write_manifest(out, "retrain", rc, {"retrained.bixw", "retrain_log.jsonl", "metrics.json"});

  std::cout << "retrain: best epoch " << fr.best_epoch << ", val mIoU " << fmt4(fr.best_miou)
            << " DICE " << fmt4(fr.best_dice) << ", test mIoU " << fmt4(test.miou) << " DICE "
            << fmt4(test.dice) << "\n";
  return {fr.best_miou, fr.best_dice, test.miou, test.dice, fr.best_epoch};
}

json do_analyze(const RunConfig& rc, const fs::path& genome_path, const fs::path& candidates_path,
                const fs::path& out) {
  SuperNetConfig loaded;
  const Topology genome = load_topology(genome_path.string(), &loaded);
  require_matching_config(rc.net, loaded);
  const TensorShape in{1, rc.net.in_channels, rc.data_size, rc.data_size};

  const auto report = [&](const Topology& t) {
    return json::parse(macs_report_json(macs(rc.net, t, in), param_count(rc.net, t), ""));
  };
  const Topology dense = dense_topology(rc.net);
  json j;
  j["input"] = in.str();
  j["search_space_size"] = search_space_size(rc.net.streams(), rc.net.levels, rc.net.iterations);
  j["dense"] = report(dense);
  j["genome"] = report(genome);
  u64 upper = j["dense"]["total_macs"].get<u64>();
  if (!candidates_path.empty()) {
    SuperNetConfig ccfg;
    const Topology cands = load_topology(candidates_path.string(), &ccfg);
    require_matching_config(rc.net, ccfg);
    j["candidates"] = report(cands);
    const u64 cm = j["candidates"]["total_macs"].get<u64>();
    if (cm > upper) j["monotonic"] = false;
    upper = std::min(upper, cm);
  }
  const u64 gm = j["genome"]["total_macs"].get<u64>();
  j["monotonic"] = j.value("monotonic", true) && gm <= upper;

  fs::create_directories(out);
  write_text_file((out / "complexity.json").string(), j.dump(2) + "\n");
  write_manifest(out, "analyze", rc, {"complexity.json"});

  std::cout << "complexity: dense " << j["dense"]["total_macs"] << " MACs";
  if (j.contains("candidates")) std::cout << " >= candidates " << j["candidates"]["total_macs"];
  std::cout << " >= genome " << gm << " (params " << j["dense"]["params"] << " -> "
            << j["genome"]["params"] << "), chain " << (j["monotonic"].get<bool>() ? "ok" : "VIOLATED")
            << "\n";
  if (!j["monotonic"].get<bool>()) throw NumericError("complexity chain is not monotone");
  return j;
}

// Shared-head training vs an individually-trained baseline on the first
// searched stage pair: the shared run must present identical skip-source
// features to every tail, the baseline must be caught drifting, and the
// measured stage-forward counts must match the cost model on both sides.
bool do_audit(const RunConfig& rc, const Dataset& data, const fs::path& p1dir, const fs::path& out,
              i64 steps) {
  if (steps < 2) throw UsageError("audit-fairness needs at least 2 steps (drift shows after one update)");
  // The population is sampled from the full skip menu: the property under
  // test is a property of the training mechanics, so it must not depend on
  // how far phase 1 narrowed the candidate sets. A phase-1 directory only
  // supplies trained weights.
  const Topology candidates = dense_topology(rc.net);
  SuperNet<float> net(rc.net, rc.seed);
  if (!p1dir.empty()) net.restore_state(load_tensor_map((p1dir / "state.bixw").string()));

  const i64 pair = rc.net.stages() - 1;
  Rng rng(derive_seed(rc.seed, "audit", 0));
  std::vector<Topology> tails;
  for (i64 i = 0; i < rc.phase2.samples; ++i) {
    tails.push_back(compose_topology(rc.net, candidates, pair,
                                     sample_pair_subsets(rc.net, candidates, pair, rng), {}));
  }
  // At the last pair only the level-1 block of the final stage feeds the
  // head, so the baseline can drift only if the tails differ right there;
  // if the draw collapsed, flip one tail to a guaranteed-different subset.
  if (tails.size() > 1) {
    const BlockKey fed{pair + 1, 1};
    bool differ = false;
    for (const auto& t : tails) differ = differ || t.active.at(fed) != tails[0].active.at(fed);
    if (!differ) {
      const std::vector<i64>& menu = candidates.streams_of(fed);
      std::vector<i64>& s = tails[1].active.at(fed);
      s = s == menu ? std::vector<i64>(menu.begin(), menu.end() - 1) : menu;
    }
  }

  TensorMap init;
  net.snapshot_state(init);
  const i64 train_n = static_cast<i64>(data.train_idx.size());
  const i64 batch = std::min<i64>(rc.phase2.batch, train_n);
  const i64 n_batches = (train_n + batch - 1) / batch;
  const auto batch_at = [&](i64 step, Tensor<float>& images, IndexMap& masks) {
    const i64 from = (step % n_batches) * batch;
    const i64 count = std::min<i64>(batch, train_n - from);
    images = stack_images(data, data.train_idx, from, count);
    masks = stack_masks(data, data.train_idx, from, count);
  };

  Adam<float> opt(net.params(), rc.phase2.lr0);
  FairnessTrace shared_trace;
  ForwardAudit shared_audit;
  for (i64 s = 0; s < steps; ++s) {
    Tensor<float> images;
    IndexMap masks(0, 0, 0);
    batch_at(s, images, masks);
    train_step_shared(net, opt, pair, tails, images, masks, s == 0 ? &shared_audit : nullptr,
                      &shared_trace, s);
  }
  const FairnessReport shared = verify_fairness(shared_trace);

  NaiveBaseline baseline(rc.net, init, tails, rc.phase2.lr0, rc.seed);
  FairnessTrace naive_trace;
  ForwardAudit naive_audit;
  for (i64 s = 0; s < steps; ++s) {
    Tensor<float> images;
    IndexMap masks(0, 0, 0);
    batch_at(s, images, masks);
    baseline.step(images, masks, pair, s == 0 ? &naive_audit : nullptr, &naive_trace, s);
  }
  const FairnessReport naive = verify_fairness(naive_trace);

  const CostAuditReport cost = cost_formula_audit(rc.net.iterations, static_cast<i64>(tails.size()),
                                                  pair, shared_audit, naive_audit);

  fs::create_directories(out);
  write_text_file((out / "fairness.json").string(), fairness_report_json(shared, &naive));
  write_text_file((out / "cost_audit.json").string(), cost_audit_json({cost}));
  write_manifest(out, "audit-fairness", rc, {"fairness.json", "cost_audit.json"});

  const bool ok = shared.pass && !naive.pass && cost.shared_matches && cost.naive_matches;
  std::cout << "fairness: shared head " << (shared.pass ? "pass" : "FAIL") << " (" << shared.steps
            << " steps, " << shared.comparisons << " comparisons); baseline "
            << (naive.pass ? "NOT flagged" : "flagged") << "\n";
  if (!naive.pass) {
    std::cout << "  baseline drift at step " << naive.step << ", block " << naive.block.str()
              << ", stream " << naive.stream << " (tails " << naive.tail_a << " vs " << naive.tail_b
              << ": " << hex64(naive.digest_a) << " != " << hex64(naive.digest_b) << ")\n";
  }
  std::cout << "cost model: shared " << cost.shared_forwards << "/" << cost.shared_predicted_forwards
            << " stage forwards " << (cost.shared_matches ? "match" : "MISMATCH") << ", baseline "
            << cost.naive_forwards << "/" << cost.naive_predicted_forwards << " "
            << (cost.naive_matches ? "match" : "MISMATCH") << ", speedup x"
            << fmt4(cost.measured_speedup) << "\n";
  return ok;
}

// ---- subcommand entry points ----------------------------------------------

int cmd_space(const Cli& c) {
  const std::string n = search_space_size(c.N, c.L, c.T);
  std::cout << n << "\n";
  if (c.brute) {
    // Enumerate every assignment of a valid stream subset to every searching
    // block and count them one by one.
    std::vector<std::vector<u64>> valid_masks(1);
    std::vector<u64>& subsets = valid_masks[0];
    for (u64 mask = 1; mask < (1ull << c.N); ++mask) {
      const int bits = __builtin_popcountll(mask);
      if (bits >= 1 && bits <= c.N - 2) subsets.push_back(mask);
    }
    const i64 columns = c.L * (2 * c.T - 1);
    u64 bound = 1;
    for (i64 i = 0; i < columns; ++i) {
      if (bound > 1000000ull / subsets.size()) throw UsageError("--brute limited to 1e6 assignments");
      bound *= subsets.size();
    }
    std::vector<std::size_t> odo(static_cast<std::size_t>(columns), 0);
    u64 count = 0;
    while (true) {
      ++count;
      std::size_t i = 0;
      while (i < odo.size() && ++odo[i] == subsets.size()) odo[i++] = 0;
      if (i == odo.size()) break;
    }
    if (std::to_string(count) != n) {
      std::cout << "brute-force enumeration disagrees: " << count << "\n";
      return 1;
    }
    std::cout << "brute-force enumeration agrees (" << count << " architectures)\n";
  }
  return 0;
}

int cmd_pipeline(const Cli& c) {
  const RunConfig rc = resolve_config(c);
  if (c.out.empty()) throw UsageError("pipeline requires --out");
  const fs::path root = c.out;
  fs::create_directories(root);

  const auto stage = [&](const std::string& name, const fs::path& dir, const auto& run) {
    if (c.resume && manifest_matches(dir, name, rc)) {
      std::cout << name << ": resumed from " << dir.string() << "\n";
      return;
    }
    run();
  };

  const fs::path data_dir = root / "data", p1 = root / "phase1", p2 = root / "phase2";
  const fs::path rt = root / "retrain", an = root / "analyze", au = root / "audit";

  stage("gen-data", data_dir, [&] { do_gen_data(rc, data_dir); });
  const Dataset data = load_and_check(data_dir.string(), rc);
  stage("search1", p1, [&] { do_search1(rc, data, p1); });
  stage("search2", p2, [&] { do_search2(rc, data, p1, p2, false); });
  stage("retrain", rt, [&] { do_retrain(rc, data, p2 / "genome.json", rt); });
  stage("analyze", an, [&] { do_analyze(rc, p2 / "genome.json", p1 / "candidates.json", an); });
  stage("audit-fairness", au, [&] { do_audit(rc, data, p1, au, c.audit_steps); });

  // Assemble the summary from the stage artifacts so resumed and fresh runs
  // produce byte-identical output.
  const auto last_jsonl = [&](const fs::path& p) {
    const auto lines = read_text_file(p.string());
    const auto end = lines.find_last_not_of('\n');
    const auto nl = lines.rfind('\n', end);
    const auto pos = nl == std::string::npos ? 0 : nl + 1;
    return json::parse(lines.substr(pos, end - pos + 1));
  };
  const json p1_last = last_jsonl(p1 / "phase1_log.jsonl");
  const json complexity = json::parse(read_text_file((an / "complexity.json").string()));
  const json metrics = json::parse(read_text_file((rt / "metrics.json").string()));
  const json fairness = json::parse(read_text_file((au / "fairness.json").string()));
  const json cost = json::parse(read_text_file((au / "cost_audit.json").string()))["cost_audit"][0];

  double p2_best = -1;
  {
    std::istringstream in(read_text_file((p2 / "phase2_log.jsonl").string()));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json r = json::parse(line);
      if (r.value("record", "") == "tail" && r["pair"].get<i64>() == 1 && r["retained"].get<bool>())
        p2_best = std::max(p2_best, r["val_miou"].get<double>());
    }
  }

  json summary;
  summary["search_space_size"] = complexity["search_space_size"];
  summary["dataset"] = json{{"images", rc.data_images}, {"size", rc.data_size},
                            {"classes", rc.net.num_classes}};
  summary["phase1"] = json{{"val_miou", p1_last["val_miou"]}, {"val_dice", p1_last["val_dice"]}};
  summary["phase2"] = json{{"val_miou", p2_best},
                           {"genome_digest", file_digest_hex((p2 / "genome.json").string())}};
  summary["complexity"] = json{{"dense_macs", complexity["dense"]["total_macs"]},
                               {"candidates_macs", complexity["candidates"]["total_macs"]},
                               {"genome_macs", complexity["genome"]["total_macs"]},
                               {"genome_params", complexity["genome"]["params"]},
                               {"monotonic", complexity["monotonic"]}};
  summary["fairness"] = json{{"shared_pass", fairness["shared_head"]["pass"]},
                             {"baseline_flagged", !fairness["naive_baseline"]["pass"].get<bool>()},
                             {"cost_model_match",
                              cost["shared_matches"].get<bool>() && cost["naive_matches"].get<bool>()}};
  summary["retrain"] = metrics;
  write_text_file((root / "summary.json").string(), summary.dump(2) + "\n");

  std::string csv = "metric,value\n";
  csv += "search_space_size," + summary["search_space_size"].get<std::string>() + "\n";
  csv += "dense_macs," + std::to_string(summary["complexity"]["dense_macs"].get<u64>()) + "\n";
  csv += "candidates_macs," + std::to_string(summary["complexity"]["candidates_macs"].get<u64>()) + "\n";
  csv += "genome_macs," + std::to_string(summary["complexity"]["genome_macs"].get<u64>()) + "\n";
  csv += "genome_params," + std::to_string(summary["complexity"]["genome_params"].get<u64>()) + "\n";
  csv += "phase1_val_miou," + fmt(p1_last["val_miou"].get<double>()) + "\n";
  csv += "phase2_val_miou," + fmt(p2_best) + "\n";
  csv += "retrain_val_miou," + fmt(metrics["val"]["miou"].get<double>()) + "\n";
  csv += "retrain_val_dice," + fmt(metrics["val"]["dice"].get<double>()) + "\n";
  csv += "retrain_test_miou," + fmt(metrics["test"]["miou"].get<double>()) + "\n";
  csv += "retrain_test_dice," + fmt(metrics["test"]["dice"].get<double>()) + "\n";
  csv += std::string("fairness_shared_pass,") +
         (summary["fairness"]["shared_pass"].get<bool>() ? "true" : "false") + "\n";
  csv += std::string("fairness_baseline_flagged,") +
         (summary["fairness"]["baseline_flagged"].get<bool>() ? "true" : "false") + "\n";
  csv += "genome_digest," + summary["phase2"]["genome_digest"].get<std::string>() + "\n";
  write_text_file((root / "summary.csv").string(), csv);
  write_manifest(root, "pipeline", rc, {"summary.json", "summary.csv"});

  std::cout << "pipeline: retrained val mIoU " << fmt4(metrics["val"]["miou"].get<double>())
            << " DICE " << fmt4(metrics["val"]["dice"].get<double>()) << ", genome "
            << summary["phase2"]["genome_digest"].get<std::string>() << "\n";
  // The audit verdict comes from the artifacts so resumed runs are judged
  // the same way fresh ones are.
  const bool audit_ok = summary["fairness"]["shared_pass"].get<bool>() &&
                        summary["fairness"]["baseline_flagged"].get<bool>() &&
                        summary["fairness"]["cost_model_match"].get<bool>();
  return audit_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-phase architecture search for bidirectional O-shaped segmentation nets"};
  app.require_subcommand(1);
  Cli c;

  const auto add_common = [&](CLI::App* s, bool data, bool out_required) {
    s->add_option("--config", c.config_path, "run configuration file");
    s->add_option("--seed", c.seed, "override the configured seed");
    s->add_option("--threads", c.threads, "override the configured thread count");
    auto* o = s->add_option("--out", c.out, "output directory");
    if (out_required) o->required();
    if (data) s->add_option("--data", c.data_dir, "dataset directory")->required();
  };

  auto* sp_space = app.add_subcommand("space", "print the exact search-space cardinality");
  sp_space->add_option("--N", c.N, "streams per block")->required();
  sp_space->add_option("--L", c.L, "encoder/decoder levels")->required();
  sp_space->add_option("--T", c.T, "recurrence iterations")->required();
  sp_space->add_flag("--brute", c.brute, "cross-check by enumerating every architecture (<= 1e6)");

  auto* sp_gen = app.add_subcommand("gen-data", "generate the synthetic segmentation dataset");
  add_common(sp_gen, false, true);

  auto* sp_s1 = app.add_subcommand("search1", "differentiable selection-matrix search");
  add_common(sp_s1, true, true);

  auto* sp_s2 = app.add_subcommand("search2", "progressive evolutionary skip search");
  add_common(sp_s2, true, true);
  sp_s2->add_option("--phase1", c.phase1_dir, "search1 output directory")->required();
  sp_s2->add_flag("--reinit", c.reinit, "ignore the phase-1 weights and start from fresh ones");

  auto* sp_rt = app.add_subcommand("retrain", "train the extracted genome from scratch");
  add_common(sp_rt, true, true);
  sp_rt->add_option("--genome", c.genome_path, "genome JSON")->required();

  auto* sp_ev = app.add_subcommand("eval", "evaluate trained weights on a dataset split");
  add_common(sp_ev, true, false);
  sp_ev->add_option("--genome", c.genome_path, "genome JSON")->required();
  sp_ev->add_option("--weights", c.weights_path, "checkpoint to evaluate")->required();
  sp_ev->add_option("--split", c.split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));

  auto* sp_an = app.add_subcommand("analyze", "complexity report: MACs, params, search space");
  add_common(sp_an, false, true);
  sp_an->add_option("--genome", c.genome_path, "genome JSON")->required();
  sp_an->add_option("--candidates", c.candidates_path, "phase-1 candidate set JSON");

  auto* sp_au = app.add_subcommand("audit-fairness",
                                   "verify skip fairness and the search cost model");
  add_common(sp_au, true, true);
  sp_au->add_option("--phase1", c.phase1_dir, "search1 output directory (supplies trained weights)");
  sp_au->add_option("--steps", c.audit_steps, "training steps to trace (default 3)");

  auto* sp_pl = app.add_subcommand("pipeline", "run every stage end to end");
  add_common(sp_pl, false, true);
  sp_pl->add_flag("--resume", c.resume, "skip stages whose manifests already match");
  sp_pl->add_option("--steps", c.audit_steps, "fairness-audit training steps (default 3)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (sp_space->parsed()) return cmd_space(c);
    if (sp_gen->parsed()) {
      const RunConfig rc = resolve_config(c);
      do_gen_data(rc, c.out);
      return 0;
    }
    if (sp_s1->parsed()) {
      const RunConfig rc = resolve_config(c);
      do_search1(rc, load_and_check(c.data_dir, rc), c.out);
      return 0;
    }
    if (sp_s2->parsed()) {
      const RunConfig rc = resolve_config(c);
      do_search2(rc, load_and_check(c.data_dir, rc), c.phase1_dir, c.out, c.reinit);
      return 0;
    }
    if (sp_rt->parsed()) {
      const RunConfig rc = resolve_config(c);
      do_retrain(rc, load_and_check(c.data_dir, rc), c.genome_path, c.out);
      return 0;
    }
    if (sp_ev->parsed()) {
      const RunConfig rc = resolve_config(c);
      const Dataset data = load_and_check(c.data_dir, rc);
      SuperNetConfig loaded;
      const Topology genome = load_topology(c.genome_path, &loaded);
      require_matching_config(rc.net, loaded);
      SuperNet<float> net(rc.net, 0);
      net.restore_state(load_tensor_map(c.weights_path));
      const auto& idx = c.split == "train" ? data.train_idx
                        : c.split == "test" ? data.test_idx
                                            : data.val_idx;
      const EvalResult r = evaluate(net, genome, data, idx, rc.retrain.batch, rc.threads);
      std::cout << "split=" << c.split << " miou=" << fmt(r.miou) << " dice=" << fmt(r.dice) << "\n";
      if (!c.out.empty()) {
        fs::create_directories(c.out);
        write_text_file((fs::path(c.out) / "metrics.json").string(),
                        json{{"split", c.split}, {"miou", r.miou}, {"dice", r.dice}}.dump(2) + "\n");
        write_manifest(c.out, "eval", rc, {"metrics.json"});
      }
      return 0;
    }
    if (sp_an->parsed()) {
      const RunConfig rc = resolve_config(c);
      do_analyze(rc, c.genome_path, c.candidates_path, c.out);
      return 0;
    }
    if (sp_au->parsed()) {
      const RunConfig rc = resolve_config(c);
      const bool ok = do_audit(rc, load_and_check(c.data_dir, rc), c.phase1_dir, c.out, c.audit_steps);
      return ok ? 0 : 1;
    }
    if (sp_pl->parsed()) return cmd_pipeline(c);
    throw UsageError("no subcommand given");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  }
}
