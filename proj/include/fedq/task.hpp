#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

// Desk-scale learning tasks for the federated training loop. Every task
// exposes exact per-sample losses and gradients over a synthetic dataset, so
// full gradients (used for convergence diagnostics and constants estimation)
// are computable exactly.

namespace fedq::fl {

using ModelParams = std::vector<double>;

struct Dataset {
  int feature_dim = 0;
  int num_classes = 0;
  std::vector<double> features;  // row-major, size() * feature_dim
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  std::span<const double> sample(int i) const {
    return {features.data() + static_cast<std::size_t>(i) * feature_dim,
            static_cast<std::size_t>(feature_dim)};
  }
};

enum class TaskKind { quadratic, logistic, mlp };

TaskKind task_kind_from_string(const std::string& s);

struct TaskSpec {
  TaskKind kind = TaskKind::quadratic;
  int num_samples = 1000;
  int num_classes = 10;
  int feature_dim = 8;  // for quadratic this is also the parameter dimension
  int hidden = 8;       // mlp only
  double cluster_scale = 2.0;   // distance of class centers from the origin
  double cluster_spread = 1.0;  // within-class standard deviation
  double curvature_min = 0.5;   // quadratic per-coordinate curvatures are
  double curvature_max = 1.5;   // drawn uniformly from [min, max]
  std::uint64_t seed = 1;
};

// A task owns its dataset and defines the per-sample loss f_i(w). The local
// loss of a shard is the mean of f_i over the shard's indices.
class LossTask {
public:
  explicit LossTask(const TaskSpec& spec);

  TaskKind kind() const { return spec_.kind; }
  const TaskSpec& spec() const { return spec_; }
  const Dataset& data() const { return data_; }
  int param_dim() const { return param_dim_; }

  // Mean loss / gradient over the given sample indices. grad accumulates into
  // `out` after zeroing it. Throws std::invalid_argument on empty index sets.
  double loss(std::span<const double> w, std::span<const int> indices) const;
  void grad(std::span<const double> w, std::span<const int> indices,
            std::span<double> out) const;

  double full_loss(std::span<const double> w) const;
  void full_grad(std::span<const double> w, std::span<double> out) const;

  // Quadratic only: exact minimizer of the mean loss over `indices`
  // (per-coordinate mean of the sample centers). nullopt for other kinds.
  std::optional<ModelParams> optimum(std::span<const int> indices) const;

  // Exact curvatures of the quadratic task (empty for other kinds). The
  // largest entry is the exact smoothness constant L.
  std::span<const double> quadratic_curvatures() const { return curvatures_; }

  // Deterministic initial point (small Gaussian entries).
  ModelParams initial_params(std::uint64_t seed) const;

private:
  double sample_loss(std::span<const double> w, int i) const;
  void sample_grad_accum(std::span<const double> w, int i, std::span<double> out) const;

  TaskSpec spec_;
  Dataset data_;
  int param_dim_ = 0;
  std::vector<double> curvatures_;  // quadratic only
  std::vector<int> all_indices_;
};

enum class PartitionMode { iid, non_iid };

PartitionMode partition_mode_from_string(const std::string& s);

struct PartitionResult {
  std::vector<std::vector<int>> shards;  // disjoint sample indices
  std::vector<double> weights;           // p_n = |shard_n| / sum |shards|
};

// Split a dataset across devices. iid: stratified round-robin deal so every
// shard sees every class and sizes are equal up to remainder. non_iid: shard
// sizes follow a lognormal law with the given sigma (mean size is ~80% of an
// even split) and each device draws only from `labels_per_device` classes.
PartitionResult partition_data(const Dataset& data, int num_devices, PartitionMode mode,
                               double size_std, int labels_per_device, std::uint64_t seed);

}  // namespace fedq::fl
