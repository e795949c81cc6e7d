#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedq/delay.hpp"
#include "fedq/fl.hpp"
#include "fedq/optimizer.hpp"
#include "fedq/task.hpp"

// One-file experiment configuration. INI-style sections:
//   [task] [partition] [fleet] [training] [sets] [coeffs] [output] [compare]
// plus a mandatory top-level `seed`. Repeated `device = k=v k=v ...` lines in
// [fleet] describe the devices.

namespace fedq::cfg {

class Ini {
public:
  static Ini parse_file(const std::string& path);
  static Ini parse_string(std::string text);

  bool has(const std::string& section, const std::string& key) const;
  bool has_section(const std::string& section) const;
  std::string get(const std::string& section, const std::string& key) const;
  std::string get_or(const std::string& section, const std::string& key,
                     const std::string& fallback) const;
  double real(const std::string& section, const std::string& key) const;
  double real_or(const std::string& section, const std::string& key, double fallback) const;
  long long integer(const std::string& section, const std::string& key) const;
  long long integer_or(const std::string& section, const std::string& key,
                       long long fallback) const;
  bool flag_or(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<std::string> all(const std::string& section, const std::string& key) const;

  const std::string& text() const { return text_; }

private:
  std::string text_;
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections_;
};

// "1:50" or "2,3,4,8" style integer list.
std::vector<int> parse_int_list(const std::string& spec);

struct DeviceSpec {
  delay::ComputeProfile compute;
  std::optional<double> rate_bps;                 // direct rate override
  std::optional<delay::ChannelProfile> channel;   // or channel parameters
  double lambda = 0.0;
  int q_w = 32;
  int q_g = 32;
  int group = -1;  // capability class for brute force; -1: own class
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  fl::TaskSpec task;

  int num_devices = 1;
  fl::PartitionMode mode = fl::PartitionMode::iid;
  double size_std = 0.0;
  int labels_per_device = 0;  // 0: all classes

  std::vector<DeviceSpec> fleet;  // may be empty (no delay model)
  double comm_s1 = 1.0;
  double comm_s0 = 0.0;
  long long comm_dim = 0;  // 0: use the task's parameter dimension
  int rate_mc_samples = 100000;

  fl::TrainingConfig training;
  std::vector<int> train_q_w;  // overrides fleet qw when nonempty
  std::vector<int> train_q_g;

  opt::FeasibleSets sets;
  std::optional<opt::ConvergenceCoeffs> coeffs;

  std::vector<std::string> baselines;  // [compare] baselines
  bool compare_simulate = true;

  std::string out_dir = "out";
  std::uint64_t config_hash = 0;  // over raw text and effective seed

  // Resolved helpers.
  long long payload_dim(int task_param_dim) const {
    return comm_dim > 0 ? comm_dim : task_param_dim;
  }
  delay::CommCoeffs comm_coeffs(int task_param_dim) const {
    return delay::CommCoeffs{comm_s1, comm_s0, payload_dim(task_param_dim)};
  }
  double device_rate(const DeviceSpec& dev) const;  // resolves rate or channel
};

ExperimentConfig load_experiment(const Ini& ini, std::optional<std::uint64_t> seed_override = {});
ExperimentConfig load_experiment_file(const std::string& path,
                                      std::optional<std::uint64_t> seed_override = {});

}  // namespace fedq::cfg
