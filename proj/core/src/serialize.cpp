#include "bixnas/serialize.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace bixnas {

namespace fs = std::filesystem;
using nlohmann::json;

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path);
  os << content;
  if (!os) throw IoError("write failed: " + path);
}

namespace {

json config_to_json(const SuperNetConfig& cfg) {
  return json{{"levels", cfg.levels},
              {"iterations", cfg.iterations},
              {"in_channels", cfg.in_channels},
              {"num_classes", cfg.num_classes},
              {"base_width", cfg.base_width},
              {"width_multiplier", cfg.width_multiplier}};
}

SuperNetConfig config_from_json(const json& j) {
  SuperNetConfig cfg;
  cfg.levels = j.at("levels").get<i64>();
  cfg.iterations = j.at("iterations").get<i64>();
  cfg.in_channels = j.at("in_channels").get<i64>();
  cfg.num_classes = j.at("num_classes").get<i64>();
  cfg.base_width = j.at("base_width").get<i64>();
  cfg.width_multiplier = j.at("width_multiplier").get<i64>();
  cfg.validate();
  return cfg;
}

BlockKey parse_block_key(const std::string& s) {
  const auto dot = s.find('.');
  if (dot == std::string::npos) throw DataError("bad block key: " + s);
  try {
    return {std::stoll(s.substr(0, dot)), std::stoll(s.substr(dot + 1))};
  } catch (const std::exception&) {
    throw DataError("bad block key: " + s);
  }
}

std::string source_key(const SuperNetConfig& cfg, BlockKey block, i64 stream) {
  if (stream == kSeqStream(cfg.levels)) return "seq";
  return stream_source(cfg, block, stream).str();
}

i64 stream_from_source_key(const SuperNetConfig& cfg, BlockKey block, const std::string& key) {
  if (key == "seq") return kSeqStream(cfg.levels);
  const BlockKey src = parse_block_key(key);
  if (src.stage != block.stage - 1 || src.level < 1 || src.level > cfg.levels)
    throw DataError("source " + key + " is not a valid skip into block " + block.str());
  return src.level - 1;
}

}  // namespace

std::string topology_to_json(const SuperNetConfig& cfg, const Topology& topo) {
  validate_topology(cfg, topo);
  json blocks = json::object();
  for (const auto& [k, streams] : topo.active) {
    json arr = json::array();
    for (i64 s : streams) arr.push_back(source_key(cfg, k, s));
    blocks[k.str()] = arr;
  }
  const json out{{"config", config_to_json(cfg)}, {"blocks", blocks}};
  return out.dump(2) + "\n";
}

Topology topology_from_json(const std::string& text, SuperNetConfig* out_cfg) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("bad topology JSON: ") + e.what());
  }
  const SuperNetConfig cfg = config_from_json(j.at("config"));
  Topology topo;
  for (const auto& [bk, arr] : j.at("blocks").items()) {
    const BlockKey block = parse_block_key(bk);
    std::vector<i64> streams;
    for (const auto& s : arr) streams.push_back(stream_from_source_key(cfg, block, s.get<std::string>()));
    std::sort(streams.begin(), streams.end());
    topo.active[block] = std::move(streams);
  }
  validate_topology(cfg, topo);
  if (out_cfg) *out_cfg = cfg;
  return topo;
}

void save_topology(const std::string& path, const SuperNetConfig& cfg, const Topology& topo) {
  write_text_file(path, topology_to_json(cfg, topo));
}

Topology load_topology(const std::string& path, SuperNetConfig* out_cfg) {
  return topology_from_json(read_text_file(path), out_cfg);
}

void require_matching_config(const SuperNetConfig& expected, const SuperNetConfig& loaded) {
  if (expected.levels != loaded.levels || expected.iterations != loaded.iterations ||
      expected.in_channels != loaded.in_channels || expected.num_classes != loaded.num_classes ||
      expected.base_width != loaded.base_width || expected.width_multiplier != loaded.width_multiplier)
    throw ConfigError("topology file was produced under a different network configuration");
}

void save_dataset(const std::string& dir, const Dataset& data) {
  fs::create_directories(dir);
  json meta{{"hw", data.hw},       {"channels", data.channels}, {"classes", data.classes},
            {"seed", data.seed},   {"n", data.images.size()},   {"train", data.train_idx},
            {"val", data.val_idx}, {"test", data.test_idx}};
  json shapes = json::array();
  for (const auto& blobs : data.shapes) {
    json arr = json::array();
    for (const Blob& b : blobs)
      arr.push_back(json{{"cls", b.cls}, {"cx", b.cx}, {"cy", b.cy}, {"rx", b.rx}, {"ry", b.ry}, {"angle", b.angle}});
    shapes.push_back(arr);
  }
  meta["shapes"] = shapes;
  write_text_file((fs::path(dir) / "meta.json").string(), meta.dump(2) + "\n");

  TensorMap images;
  for (std::size_t i = 0; i < data.images.size(); ++i)
    images["img." + std::to_string(i)] = cast<double>(data.images[i]);
  save_tensor_map((fs::path(dir) / "images.bixw").string(), images);

  for (std::size_t i = 0; i < data.masks.size(); ++i) {
    const IndexMap& m = data.masks[i];
    std::ofstream os(fs::path(dir) / ("mask_" + std::to_string(i) + ".pgm"), std::ios::binary);
    if (!os) throw IoError("cannot write mask " + std::to_string(i) + " in " + dir);
    os << "P5\n" << m.w << " " << m.h << "\n255\n";
    for (auto v : m.v) os.put(static_cast<char>(static_cast<unsigned char>(v)));
    if (!os) throw IoError("mask write failed in " + dir);
  }
}

Dataset load_dataset(const std::string& dir) {
  json meta;
  try {
    meta = json::parse(read_text_file((fs::path(dir) / "meta.json").string()));
  } catch (const json::exception& e) {
    throw DataError(std::string("bad dataset meta.json: ") + e.what());
  }
  Dataset ds;
  ds.hw = meta.at("hw").get<i64>();
  ds.channels = meta.at("channels").get<i64>();
  ds.classes = meta.at("classes").get<i64>();
  ds.seed = meta.at("seed").get<u64>();
  ds.train_idx = meta.at("train").get<std::vector<i64>>();
  ds.val_idx = meta.at("val").get<std::vector<i64>>();
  ds.test_idx = meta.at("test").get<std::vector<i64>>();
  for (const auto& arr : meta.at("shapes")) {
    std::vector<Blob> blobs;
    for (const auto& b : arr)
      blobs.push_back({b.at("cls").get<i64>(), b.at("cx").get<double>(), b.at("cy").get<double>(),
                       b.at("rx").get<double>(), b.at("ry").get<double>(), b.at("angle").get<double>()});
    ds.shapes.push_back(std::move(blobs));
  }
  const auto n = meta.at("n").get<std::size_t>();

  const TensorMap images = load_tensor_map((fs::path(dir) / "images.bixw").string());
  for (std::size_t i = 0; i < n; ++i) {
    auto it = images.find("img." + std::to_string(i));
    if (it == images.end()) throw DataError("dataset missing image " + std::to_string(i));
    ds.images.push_back(cast<float>(it->second));
  }

  for (std::size_t i = 0; i < n; ++i) {
    const std::string path = (fs::path(dir) / ("mask_" + std::to_string(i) + ".pgm")).string();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open mask: " + path);
    std::string magic;
    i64 w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P5" || maxval != 255 || w <= 0 || h <= 0) throw DataError("bad PGM header: " + path);
    is.get();  // single whitespace after maxval
    IndexMap m(1, h, w);
    for (auto& v : m.v) {
      const int c = is.get();
      if (c == EOF) throw DataError("truncated PGM: " + path);
      v = static_cast<std::int32_t>(static_cast<unsigned char>(c));
      if (v >= ds.classes) throw DataError("mask value out of range in " + path);
    }
    ds.masks.push_back(std::move(m));
  }
  return ds;
}

std::string fairness_report_json(const FairnessReport& rep, const FairnessReport* baseline) {
  const auto to_json = [](const FairnessReport& r) {
    json j{{"pass", r.pass}, {"steps", r.steps}, {"comparisons", r.comparisons}};
    if (!r.pass) {
      j["violation"] = json{{"step", r.step},
                            {"block", r.block.str()},
                            {"stream", r.stream},
                            {"tail_a", r.tail_a},
                            {"tail_b", r.tail_b},
                            {"digest_a", r.digest_a},
                            {"digest_b", r.digest_b}};
    }
    return j;
  };
  json out{{"shared_head", to_json(rep)}};
  if (baseline) out["naive_baseline"] = to_json(*baseline);
  return out.dump(2) + "\n";
}

std::string macs_report_json(const MacsReport& rep, u64 params, const std::string& space_size) {
  json per = json::object();
  for (const auto& [k, v] : rep.per_block) per[k] = v;
  json out{{"total_macs", rep.total},
           {"per_block", per},
           {"executed_blocks", rep.executed},
           {"params", params}};
  if (!space_size.empty()) out["search_space_size"] = space_size;
  return out.dump(2) + "\n";
}

std::string cost_audit_json(const std::vector<CostAuditReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) {
    arr.push_back(json{{"iterations", r.iterations},
                       {"population", r.population},
                       {"pair", r.pair},
                       {"shared_forwards", r.shared_forwards},
                       {"shared_backwards", r.shared_backwards},
                       {"shared_predicted_forwards", r.shared_predicted_forwards},
                       {"shared_matches", r.shared_matches},
                       {"naive_forwards", r.naive_forwards},
                       {"naive_backward_stage_equiv", r.naive_backward_stage_equiv},
                       {"naive_predicted_forwards", r.naive_predicted_forwards},
                       {"naive_matches", r.naive_matches},
                       {"formula_forwards_head_charged_t", r.formula_forwards_head_t},
                       {"measured_speedup", r.measured_speedup}});
  }
  return json{{"cost_audit", arr}}.dump(2) + "\n";
}

std::vector<std::string> phase1_log_jsonl(const std::vector<EpochLog>& log) {
  std::vector<std::string> lines;
  for (const auto& e : log) {
    lines.push_back(json{{"phase", 1},
                         {"epoch", e.epoch},
                         {"lr", e.lr},
                         {"train_loss", e.train_loss},
                         {"val_miou", e.val_miou},
                         {"val_dice", e.val_dice}}
                        .dump());
  }
  return lines;
}

std::vector<std::string> phase2_log_jsonl(const Phase2Result& res) {
  std::vector<std::string> lines;
  for (const auto& e : res.epochs) {
    lines.push_back(json{{"phase", 2},
                         {"record", "epoch"},
                         {"pair", e.pair},
                         {"epoch", e.epoch},
                         {"lr", e.lr},
                         {"mean_loss", e.mean_loss},
                         {"excluded_tails", e.excluded}}
                        .dump());
  }
  for (const auto& [pair, t] : res.tails) {
    json subsets = json::object();
    for (const auto& [k, streams] : t.subsets) subsets[k.str()] = streams;
    lines.push_back(json{{"phase", 2},
                         {"record", "tail"},
                         {"pair", pair},
                         {"id", t.id},
                         {"parent", t.parent},
                         {"val_miou", t.fitness},
                         {"macs", t.macs_count},
                         {"retained", t.retained},
                         {"subsets", subsets}}
                        .dump());
  }
  return lines;
}

std::string file_digest_hex(const std::string& path) {
  const std::string bytes = read_text_file(path);
  const u64 d = fnv1a64(bytes.data(), bytes.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
  return buf;
}

}  // namespace bixnas
