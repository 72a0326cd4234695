#include "config.hpp"

#include <cctype>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "bixnas/serialize.hpp"

namespace bixnas {
namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

// Flat "section.key" -> raw value text.
std::map<std::string, std::string> parse_lines(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::string section;
  std::istringstream in(text);
  std::string line;
  i64 ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    std::string s;
    bool quoted = false;
    for (char c : line) {
      if (c == '"') quoted = !quoted;
      if (c == '#' && !quoted) break;
      s += c;
    }
    s = trim(s);
    if (s.empty()) continue;
    const std::string where = "config line " + std::to_string(ln) + ": ";
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(s.substr(1, s.size() - 2));
      if (section.empty()) throw ConfigError(where + "empty section name");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected `key = value`");
    const std::string key = trim(s.substr(0, eq));
    const std::string val = trim(s.substr(eq + 1));
    if (key.empty() || val.empty()) throw ConfigError(where + "expected `key = value`");
    const std::string full = section.empty() ? key : section + "." + key;
    if (kv.count(full)) throw ConfigError(where + "duplicate key `" + full + "`");
    kv[full] = val;
  }
  return kv;
}

class Reader {
 public:
  explicit Reader(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

  i64 get_i64(const std::string& key, i64 def) {
    const auto* v = raw(key);
    if (!v) return def;
    try {
      std::size_t pos = 0;
      const long long x = std::stoll(*v, &pos);
      if (pos != v->size()) throw std::invalid_argument("");
      return static_cast<i64>(x);
    } catch (const std::exception&) {
      throw ConfigError("config key `" + key + "`: expected an integer, got `" + *v + "`");
    }
  }

  u64 get_u64(const std::string& key, u64 def) {
    const i64 x = get_i64(key, static_cast<i64>(def));
    if (x < 0) throw ConfigError("config key `" + key + "`: expected a non-negative integer");
    return static_cast<u64>(x);
  }

  double get_f64(const std::string& key, double def) {
    const auto* v = raw(key);
    if (!v) return def;
    try {
      std::size_t pos = 0;
      const double x = std::stod(*v, &pos);
      if (pos != v->size()) throw std::invalid_argument("");
      return x;
    } catch (const std::exception&) {
      throw ConfigError("config key `" + key + "`: expected a number, got `" + *v + "`");
    }
  }

  std::string get_str(const std::string& key, const std::string& def) {
    const auto* v = raw(key);
    if (!v) return def;
    if (v->size() < 2 || v->front() != '"' || v->back() != '"')
      throw ConfigError("config key `" + key + "`: expected a double-quoted string");
    return v->substr(1, v->size() - 2);
  }

  void finish() const {
    for (const auto& [k, v] : kv_) {
      if (!used_.count(k)) throw ConfigError("unknown config key `" + k + "`");
    }
  }

 private:
  const std::string* raw(const std::string& key) {
    auto it = kv_.find(key);
    if (it == kv_.end()) return nullptr;
    used_.insert(key);
    return &it->second;
  }

  std::map<std::string, std::string> kv_;
  std::set<std::string> used_;
};

TrainSchedule::Decay parse_decay(const std::string& key, const std::string& v) {
  if (v == "inverse") return TrainSchedule::Decay::kInverseTime;
  if (v == "step") return TrainSchedule::Decay::kStep;
  throw ConfigError("config key `" + key + "`: expected \"inverse\" or \"step\", got \"" + v + "\"");
}

std::string fmt_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void RunConfig::validate() const {
  net.validate();
  if (data_images < 5) throw ConfigError("data.images must be >= 5");
  if (data_size < 8) throw ConfigError("data.size must be >= 8");
  if ((data_size & (data_size - 1)) != 0)
    throw ConfigError("data.size must be a power of two so every level divides evenly");
  if (threads < 1) throw ConfigError("run.threads must be >= 1");
  phase1.schedule.validate();
  if (!(phase1.tau > 0)) throw ConfigError("phase1.tau must be > 0");
  phase2.validate();
  retrain.validate();
}

RunConfig default_run_config() {
  RunConfig c;
  c.retrain.decay = TrainSchedule::Decay::kStep;
  return c;
}

RunConfig parse_run_config(const std::string& text) {
  Reader r(parse_lines(text));
  RunConfig c = default_run_config();

  c.net.levels = r.get_i64("net.levels", c.net.levels);
  c.net.iterations = r.get_i64("net.iterations", c.net.iterations);
  c.net.in_channels = r.get_i64("net.in_channels", c.net.in_channels);
  c.net.num_classes = r.get_i64("net.num_classes", c.net.num_classes);
  c.net.base_width = r.get_i64("net.base_width", c.net.base_width);
  c.net.width_multiplier = r.get_i64("net.width_multiplier", c.net.width_multiplier);

  c.data_images = r.get_i64("data.images", c.data_images);
  c.data_size = r.get_i64("data.size", c.data_size);

  c.seed = r.get_u64("run.seed", c.seed);
  c.threads = r.get_i64("run.threads", c.threads);

  auto& p1 = c.phase1.schedule;
  p1.epochs = r.get_i64("phase1.epochs", p1.epochs);
  p1.lr0 = r.get_f64("phase1.lr", p1.lr0);
  p1.decay = parse_decay("phase1.decay",
                         r.get_str("phase1.decay", p1.decay == TrainSchedule::Decay::kStep ? "step" : "inverse"));
  p1.inv_rate = r.get_f64("phase1.decay_rate", p1.inv_rate);
  p1.step_factor = r.get_f64("phase1.step_factor", p1.step_factor);
  p1.step_every = r.get_i64("phase1.step_every", p1.step_every);
  p1.batch = r.get_i64("phase1.batch", p1.batch);
  c.phase1.tau = r.get_f64("phase1.tau", c.phase1.tau);

  c.phase2.samples = r.get_i64("phase2.samples", c.phase2.samples);
  c.phase2.retain = r.get_i64("phase2.retain", c.phase2.retain);
  c.phase2.epochs_per_pair = r.get_i64("phase2.epochs_per_pair", c.phase2.epochs_per_pair);
  c.phase2.batch = r.get_i64("phase2.batch", c.phase2.batch);
  c.phase2.lr0 = r.get_f64("phase2.lr", c.phase2.lr0);
  c.phase2.step_factor = r.get_f64("phase2.step_factor", c.phase2.step_factor);
  c.phase2.step_every = r.get_i64("phase2.step_every", c.phase2.step_every);

  auto& rt = c.retrain;
  rt.epochs = r.get_i64("retrain.epochs", rt.epochs);
  rt.lr0 = r.get_f64("retrain.lr", rt.lr0);
  rt.decay = parse_decay("retrain.decay",
                         r.get_str("retrain.decay", rt.decay == TrainSchedule::Decay::kStep ? "step" : "inverse"));
  rt.inv_rate = r.get_f64("retrain.decay_rate", rt.inv_rate);
  rt.step_factor = r.get_f64("retrain.step_factor", rt.step_factor);
  rt.step_every = r.get_i64("retrain.step_every", rt.step_every);
  rt.batch = r.get_i64("retrain.batch", rt.batch);

  r.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  return parse_run_config(read_text_file(path));
}

std::string run_config_to_toml(const RunConfig& c) {
  std::ostringstream o;
  const auto decay_name = [](TrainSchedule::Decay d) {
    return d == TrainSchedule::Decay::kStep ? "\"step\"" : "\"inverse\"";
  };
  o << "[net]\n"
    << "levels = " << c.net.levels << "\n"
    << "iterations = " << c.net.iterations << "\n"
    << "in_channels = " << c.net.in_channels << "\n"
    << "num_classes = " << c.net.num_classes << "\n"
    << "base_width = " << c.net.base_width << "\n"
    << "width_multiplier = " << c.net.width_multiplier << "\n\n";
  o << "[data]\n"
    << "images = " << c.data_images << "\n"
    << "size = " << c.data_size << "\n\n";
  o << "[run]\n"
    << "seed = " << c.seed << "\n"
    << "threads = " << c.threads << "\n\n";
  const auto& p1 = c.phase1.schedule;
  o << "[phase1]\n"
    << "epochs = " << p1.epochs << "\n"
    << "lr = " << fmt_f64(p1.lr0) << "\n"
    << "decay = " << decay_name(p1.decay) << "\n"
    << "decay_rate = " << fmt_f64(p1.inv_rate) << "\n"
    << "step_factor = " << fmt_f64(p1.step_factor) << "\n"
    << "step_every = " << p1.step_every << "\n"
    << "batch = " << p1.batch << "\n"
    << "tau = " << fmt_f64(c.phase1.tau) << "\n\n";
  o << "[phase2]\n"
    << "samples = " << c.phase2.samples << "\n"
    << "retain = " << c.phase2.retain << "\n"
    << "epochs_per_pair = " << c.phase2.epochs_per_pair << "\n"
    << "batch = " << c.phase2.batch << "\n"
    << "lr = " << fmt_f64(c.phase2.lr0) << "\n"
    << "step_factor = " << fmt_f64(c.phase2.step_factor) << "\n"
    << "step_every = " << c.phase2.step_every << "\n\n";
  o << "[retrain]\n"
    << "epochs = " << c.retrain.epochs << "\n"
    << "lr = " << fmt_f64(c.retrain.lr0) << "\n"
    << "decay = " << decay_name(c.retrain.decay) << "\n"
    << "decay_rate = " << fmt_f64(c.retrain.inv_rate) << "\n"
    << "step_factor = " << fmt_f64(c.retrain.step_factor) << "\n"
    << "step_every = " << c.retrain.step_every << "\n"
    << "batch = " << c.retrain.batch << "\n";
  return o.str();
}

}  // namespace bixnas
