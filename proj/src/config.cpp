#include "fedq/config.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <stdexcept>

#include "fedq/io.hpp"
#include "fedq/rng.hpp"

namespace fedq::cfg {

namespace {

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

}  // namespace

Ini Ini::parse_string(std::string text) {
  Ini ini;
  ini.text_ = std::move(text);
  std::istringstream in(ini.text_);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": malformed section header");
      }
      section = trim(t.substr(1, t.size() - 2));
      ini.sections_[section];
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value");
    }
    ini.sections_[section].emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return ini;
}

Ini Ini::parse_file(const std::string& path) { return parse_string(io::read_file(path)); }

bool Ini::has_section(const std::string& section) const { return sections_.count(section) > 0; }

bool Ini::has(const std::string& section, const std::string& key) const {
  auto it = sections_.find(section);
  if (it == sections_.end()) return false;
  for (const auto& [k, v] : it->second) {
    if (k == key) return true;
  }
  return false;
}

std::string Ini::get(const std::string& section, const std::string& key) const {
  auto it = sections_.find(section);
  if (it != sections_.end()) {
    for (const auto& [k, v] : it->second) {
      if (k == key) return v;
    }
  }
  throw std::invalid_argument("config: missing [" + section + "] " + key);
}

std::string Ini::get_or(const std::string& section, const std::string& key,
                        const std::string& fallback) const {
  return has(section, key) ? get(section, key) : fallback;
}

double Ini::real(const std::string& section, const std::string& key) const {
  const std::string v = get(section, key);
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: [" + section + "] " + key + " is not a number: " + v);
  }
}

double Ini::real_or(const std::string& section, const std::string& key, double fallback) const {
  return has(section, key) ? real(section, key) : fallback;
}

long long Ini::integer(const std::string& section, const std::string& key) const {
  double r = real(section, key);
  long long i = static_cast<long long>(r);
  if (static_cast<double>(i) != r) {
    throw std::invalid_argument("config: [" + section + "] " + key + " must be an integer");
  }
  return i;
}

long long Ini::integer_or(const std::string& section, const std::string& key,
                          long long fallback) const {
  return has(section, key) ? integer(section, key) : fallback;
}

bool Ini::flag_or(const std::string& section, const std::string& key, bool fallback) const {
  if (!has(section, key)) return fallback;
  std::string v = get(section, key);
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config: [" + section + "] " + key + " is not a boolean: " + v);
}

std::vector<std::string> Ini::all(const std::string& section, const std::string& key) const {
  std::vector<std::string> out;
  auto it = sections_.find(section);
  if (it == sections_.end()) return out;
  for (const auto& [k, v] : it->second) {
    if (k == key) out.push_back(v);
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& spec) {
  std::vector<int> out;
  for (const auto& piece : split(spec, ',')) {
    if (piece.empty()) continue;
    auto colon = piece.find(':');
    if (colon != std::string::npos) {
      int lo = std::stoi(piece.substr(0, colon));
      int hi = std::stoi(piece.substr(colon + 1));
      for (int v = lo; v <= hi; ++v) out.push_back(v);
    } else {
      out.push_back(std::stoi(piece));
    }
  }
  return out;
}

namespace {

std::map<std::string, std::string> parse_kv_tokens(const std::string& line) {
  std::map<std::string, std::string> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: device entry token is not key=value: " + tok);
    }
    out[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return out;
}

DeviceSpec parse_device(const std::map<std::string, std::string>& kv) {
  DeviceSpec dev;
  auto real = [&](const char* key, double fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stod(it->second);
  };
  auto has = [&](const char* key) { return kv.count(key) > 0; };

  if (has("beta1") || has("beta0")) {
    dev.compute.simplified = delay::BetaCoeffs{real("beta1", 0.0), real("beta0", 0.0)};
  }
  dev.compute.t_core_s = real("t_core", 0.0);
  dev.compute.theta_mem = real("theta_mem", 0.0);
  dev.compute.f_mem_hz = real("f_mem", 1.0);
  dev.compute.t0_s = real("t0", 0.0);
  dev.compute.accel_fraction = real("m", 0.0);
  if (has("rate")) dev.rate_bps = real("rate", 0.0);
  if (has("W") || has("gain") || has("rayleigh")) {
    delay::ChannelProfile ch;
    ch.lambda = real("lambda", 1.0);
    ch.bandwidth_hz = real("W", 1.0);
    ch.tx_power_w = real("P", 1.0);
    ch.noise_w = real("N0", 1.0);
    ch.rayleigh = real("rayleigh", 0.0) != 0.0;
    ch.gain = real("gain", 1.0);
    ch.seed = static_cast<std::uint64_t>(real("channel_seed", 1.0));
    dev.channel = ch;
  }
  dev.lambda = real("lambda", 0.0);
  dev.q_w = static_cast<int>(real("qw", 32));
  dev.q_g = static_cast<int>(real("qg", 32));
  dev.group = static_cast<int>(real("group", -1));
  return dev;
}

}  // namespace

double ExperimentConfig::device_rate(const DeviceSpec& dev) const {
  if (dev.rate_bps) return *dev.rate_bps;
  if (dev.channel) return delay::expected_rate(*dev.channel, rate_mc_samples);
  throw std::invalid_argument("config: device needs rate= or channel parameters");
}

ExperimentConfig load_experiment(const Ini& ini, std::optional<std::uint64_t> seed_override) {
  ExperimentConfig cfg;
  if (seed_override) {
    cfg.seed = *seed_override;
  } else {
    if (!ini.has("", "seed") && !ini.has("training", "seed")) {
      throw std::invalid_argument("config: seed is mandatory (top-level seed = <int>)");
    }
    cfg.seed = static_cast<std::uint64_t>(ini.has("", "seed") ? ini.integer("", "seed")
                                                              : ini.integer("training", "seed"));
  }
  cfg.config_hash = io::fnv1a(ini.text()) ^ rng::splitmix(cfg.seed);

  // [task]
  cfg.task.kind = fl::task_kind_from_string(ini.get_or("task", "kind", "quadratic"));
  cfg.task.num_samples = static_cast<int>(ini.integer_or("task", "samples", 1000));
  cfg.task.num_classes = static_cast<int>(ini.integer_or("task", "classes", 10));
  cfg.task.feature_dim = static_cast<int>(ini.integer_or("task", "features", 8));
  cfg.task.hidden = static_cast<int>(ini.integer_or("task", "hidden", 8));
  cfg.task.cluster_scale = ini.real_or("task", "cluster_scale", 2.0);
  cfg.task.cluster_spread = ini.real_or("task", "cluster_spread", 1.0);
  cfg.task.curvature_min = ini.real_or("task", "curvature_min", 0.5);
  cfg.task.curvature_max = ini.real_or("task", "curvature_max", 1.5);
  cfg.task.seed = rng::derive_key(cfg.seed, rng::Domain::dataset, 12345);

  // [partition]
  cfg.num_devices = static_cast<int>(ini.integer_or("partition", "devices", 1));
  cfg.mode = fl::partition_mode_from_string(ini.get_or("partition", "mode", "iid"));
  cfg.size_std = ini.real_or("partition", "size_std", 0.0);
  cfg.labels_per_device = static_cast<int>(ini.integer_or("partition", "labels_per_device", 0));

  // [fleet]
  cfg.comm_s1 = ini.real_or("fleet", "s1", 1.0);
  cfg.comm_s0 = ini.real_or("fleet", "s0", 0.0);
  cfg.comm_dim = ini.integer_or("fleet", "dim", 0);
  cfg.rate_mc_samples = static_cast<int>(ini.integer_or("fleet", "mc_samples", 100000));
  for (const auto& line : ini.all("fleet", "device")) {
    auto kv = parse_kv_tokens(line);
    int count = 1;
    if (auto it = kv.find("count"); it != kv.end()) {
      count = std::stoi(it->second);
      kv.erase(it);
    }
    DeviceSpec dev = parse_device(kv);
    for (int i = 0; i < count; ++i) cfg.fleet.push_back(dev);
  }
  if (!cfg.fleet.empty() && static_cast<int>(cfg.fleet.size()) != cfg.num_devices) {
    throw std::invalid_argument("config: [fleet] device count " +
                                std::to_string(cfg.fleet.size()) + " != [partition] devices " +
                                std::to_string(cfg.num_devices));
  }
  {
    double lambda_sum = 0.0;
    for (const auto& dev : cfg.fleet) lambda_sum += dev.lambda;
    if (lambda_sum > 1.0 + 1e-9) {
      throw std::invalid_argument("config: device bandwidth shares sum to " +
                                  std::to_string(lambda_sum) + " > 1");
    }
  }

  // [training]
  cfg.training.local_iters = static_cast<int>(ini.integer_or("training", "H", 1));
  cfg.training.total_iters = static_cast<int>(ini.integer_or("training", "K", 100));
  cfg.training.batch_size = static_cast<int>(ini.integer_or("training", "batch", 32));
  cfg.training.lr0 = ini.real_or("training", "lr", 0.1);
  cfg.training.decay = ini.real_or("training", "decay", 0.996);
  {
    std::string sched = ini.get_or("training", "schedule", "decay");
    if (sched == "decay") {
      cfg.training.schedule = fl::LrSchedule::per_round_decay;
    } else if (sched == "theorem" || sched == "sqrt_mn_over_k") {
      cfg.training.schedule = fl::LrSchedule::sqrt_mn_over_k;
    } else {
      throw std::invalid_argument("config: unknown schedule: " + sched);
    }
  }
  {
    std::string sync = ini.get_or("training", "sync", "broadcast");
    if (sync == "broadcast") {
      cfg.training.sync = fl::SyncMode::broadcast;
    } else if (sync == "local_anchor") {
      cfg.training.sync = fl::SyncMode::local_anchor;
    } else {
      throw std::invalid_argument("config: unknown sync mode: " + sync);
    }
  }
  {
    std::string form = ini.get_or("training", "delta_form", "halved");
    if (form == "halved") {
      cfg.training.delta_form = quant::DeltaForm::halved;
    } else if (form == "unhalved") {
      cfg.training.delta_form = quant::DeltaForm::unhalved;
    } else {
      throw std::invalid_argument("config: unknown delta_form: " + form);
    }
  }
  cfg.training.eps_target = ini.real_or("training", "eps", 0.0);
  cfg.training.early_stop = ini.flag_or("training", "early_stop", false);
  cfg.training.record_metrics = ini.flag_or("training", "record_metrics", true);
  cfg.training.record_quant_residuals = ini.flag_or("training", "record_residuals", false);
  cfg.training.seed = cfg.seed;
  if (ini.has("training", "q_w")) cfg.train_q_w = parse_int_list(ini.get("training", "q_w"));
  if (ini.has("training", "q_g")) cfg.train_q_g = parse_int_list(ini.get("training", "q_g"));

  // [sets]
  cfg.sets = opt::FeasibleSets::defaults();
  if (ini.has("sets", "H")) cfg.sets.H = parse_int_list(ini.get("sets", "H"));
  if (ini.has("sets", "q_g")) cfg.sets.q_g = parse_int_list(ini.get("sets", "q_g"));
  if (ini.has("sets", "q_w")) cfg.sets.q_w = parse_int_list(ini.get("sets", "q_w"));
  cfg.sets.validate();

  // [coeffs]
  if (ini.has_section("coeffs") && ini.has("coeffs", "A1")) {
    opt::ConvergenceCoeffs co;
    co.A1 = ini.real("coeffs", "A1");
    co.A0 = ini.real_or("coeffs", "A0", 0.0);
    co.B0 = ini.real_or("coeffs", "B0", 0.0);
    co.C0 = ini.real_or("coeffs", "C0", 0.0);
    co.eps = ini.real("coeffs", "eps");
    co.validate();
    cfg.coeffs = co;
  }

  // [compare]
  {
    std::string list = ini.get_or("compare", "baselines", "ifedavg,fedpaq,quwg_pro,adah");
    for (const auto& name : split(list, ',')) {
      if (!name.empty()) cfg.baselines.push_back(name);
    }
    cfg.compare_simulate = ini.flag_or("compare", "simulate", true);
  }

  // [output]
  cfg.out_dir = ini.get_or("output", "dir", "out");
  return cfg;
}

ExperimentConfig load_experiment_file(const std::string& path,
                                      std::optional<std::uint64_t> seed_override) {
  return load_experiment(Ini::parse_file(path), seed_override);
}

}  // namespace fedq::cfg
