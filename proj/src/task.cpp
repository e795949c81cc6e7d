#include "fedq/task.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "fedq/rng.hpp"

namespace fedq::fl {

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "quadratic") return TaskKind::quadratic;
  if (s == "logistic") return TaskKind::logistic;
  if (s == "mlp") return TaskKind::mlp;
  throw std::invalid_argument("unknown task kind: " + s);
}

PartitionMode partition_mode_from_string(const std::string& s) {
  if (s == "iid") return PartitionMode::iid;
  if (s == "non_iid" || s == "non-iid" || s == "noniid") return PartitionMode::non_iid;
  throw std::invalid_argument("unknown partition mode: " + s);
}

namespace {

// Class centers on a deterministic Gaussian cloud, samples around them.
Dataset make_clustered(const TaskSpec& spec) {
  if (spec.num_samples < 1 || spec.num_classes < 1 || spec.feature_dim < 1) {
    throw std::invalid_argument("TaskSpec: num_samples, num_classes, feature_dim must be >= 1");
  }
  Dataset d;
  d.feature_dim = spec.feature_dim;
  d.num_classes = spec.num_classes;
  d.features.resize(static_cast<std::size_t>(spec.num_samples) * spec.feature_dim);
  d.labels.resize(spec.num_samples);

  rng::Stream centers(rng::derive_key(spec.seed, rng::Domain::dataset, 0));
  std::vector<double> mu(static_cast<std::size_t>(spec.num_classes) * spec.feature_dim);
  for (auto& m : mu) m = centers.normal(0.0, spec.cluster_scale);

  for (int i = 0; i < spec.num_samples; ++i) {
    int y = i % spec.num_classes;  // balanced classes
    d.labels[i] = y;
    rng::Stream s(rng::derive_key(spec.seed, rng::Domain::dataset, 1, static_cast<std::uint64_t>(i)));
    for (int j = 0; j < spec.feature_dim; ++j) {
      d.features[static_cast<std::size_t>(i) * spec.feature_dim + j] =
          mu[static_cast<std::size_t>(y) * spec.feature_dim + j] + s.normal(0.0, spec.cluster_spread);
    }
  }
  return d;
}

inline void softmax_inplace(std::span<double> z) {
  double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (auto& v : z) {
    v = std::exp(v - m);
    sum += v;
  }
  for (auto& v : z) v /= sum;
}

}  // namespace

LossTask::LossTask(const TaskSpec& spec) : spec_(spec), data_(make_clustered(spec)) {
  switch (spec_.kind) {
    case TaskKind::quadratic: {
      param_dim_ = spec_.feature_dim;
      if (!(spec_.curvature_min > 0.0) || spec_.curvature_max < spec_.curvature_min) {
        throw std::invalid_argument("TaskSpec: need 0 < curvature_min <= curvature_max");
      }
      curvatures_.resize(param_dim_);
      rng::Stream s(rng::derive_key(spec_.seed, rng::Domain::dataset, 2));
      for (auto& a : curvatures_) a = s.uniform(spec_.curvature_min, spec_.curvature_max);
      break;
    }
    case TaskKind::logistic:
      param_dim_ = spec_.num_classes * (spec_.feature_dim + 1);
      break;
    case TaskKind::mlp:
      if (spec_.hidden < 1) throw std::invalid_argument("TaskSpec: hidden must be >= 1");
      param_dim_ = spec_.hidden * (spec_.feature_dim + 1) + spec_.num_classes * (spec_.hidden + 1);
      break;
  }
  all_indices_.resize(data_.size());
  std::iota(all_indices_.begin(), all_indices_.end(), 0);
}

double LossTask::sample_loss(std::span<const double> w, int i) const {
  const auto x = data_.sample(i);
  const int y = data_.labels[i];
  switch (spec_.kind) {
    case TaskKind::quadratic: {
      double acc = 0.0;
      for (int j = 0; j < param_dim_; ++j) {
        double e = w[j] - x[j];
        acc += curvatures_[j] * e * e;
      }
      return 0.5 * acc;
    }
    case TaskKind::logistic: {
      const int C = spec_.num_classes, F = spec_.feature_dim;
      std::vector<double> z(C);
      for (int c = 0; c < C; ++c) {
        const double* row = w.data() + static_cast<std::size_t>(c) * (F + 1);
        double acc = row[F];
        for (int j = 0; j < F; ++j) acc += row[j] * x[j];
        z[c] = acc;
      }
      softmax_inplace(z);
      return -std::log(std::max(z[y], 1e-300));
    }
    case TaskKind::mlp: {
      const int C = spec_.num_classes, F = spec_.feature_dim, Hd = spec_.hidden;
      const double* w1 = w.data();                                     // Hd x F
      const double* b1 = w1 + static_cast<std::size_t>(Hd) * F;        // Hd
      const double* w2 = b1 + Hd;                                      // C x Hd
      const double* b2 = w2 + static_cast<std::size_t>(C) * Hd;        // C
      std::vector<double> h(Hd);
      for (int k = 0; k < Hd; ++k) {
        double acc = b1[k];
        const double* row = w1 + static_cast<std::size_t>(k) * F;
        for (int j = 0; j < F; ++j) acc += row[j] * x[j];
        h[k] = std::tanh(acc);
      }
      std::vector<double> z(C);
      for (int c = 0; c < C; ++c) {
        double acc = b2[c];
        const double* row = w2 + static_cast<std::size_t>(c) * Hd;
        for (int k = 0; k < Hd; ++k) acc += row[k] * h[k];
        z[c] = acc;
      }
      softmax_inplace(z);
      return -std::log(std::max(z[y], 1e-300));
    }
  }
  return 0.0;
}

void LossTask::sample_grad_accum(std::span<const double> w, int i, std::span<double> out) const {
  const auto x = data_.sample(i);
  const int y = data_.labels[i];
  switch (spec_.kind) {
    case TaskKind::quadratic: {
      for (int j = 0; j < param_dim_; ++j) out[j] += curvatures_[j] * (w[j] - x[j]);
      return;
    }
    case TaskKind::logistic: {
      const int C = spec_.num_classes, F = spec_.feature_dim;
      std::vector<double> z(C);
      for (int c = 0; c < C; ++c) {
        const double* row = w.data() + static_cast<std::size_t>(c) * (F + 1);
        double acc = row[F];
        for (int j = 0; j < F; ++j) acc += row[j] * x[j];
        z[c] = acc;
      }
      softmax_inplace(z);
      for (int c = 0; c < C; ++c) {
        double g = z[c] - (c == y ? 1.0 : 0.0);
        double* orow = out.data() + static_cast<std::size_t>(c) * (F + 1);
        for (int j = 0; j < F; ++j) orow[j] += g * x[j];
        orow[F] += g;
      }
      return;
    }
    case TaskKind::mlp: {
      const int C = spec_.num_classes, F = spec_.feature_dim, Hd = spec_.hidden;
      const double* w1 = w.data();
      const double* b1 = w1 + static_cast<std::size_t>(Hd) * F;
      const double* w2 = b1 + Hd;
      const double* b2 = w2 + static_cast<std::size_t>(C) * Hd;
      std::vector<double> h(Hd), z(C);
      for (int k = 0; k < Hd; ++k) {
        double acc = b1[k];
        const double* row = w1 + static_cast<std::size_t>(k) * F;
        for (int j = 0; j < F; ++j) acc += row[j] * x[j];
        h[k] = std::tanh(acc);
      }
      for (int c = 0; c < C; ++c) {
        double acc = b2[c];
        const double* row = w2 + static_cast<std::size_t>(c) * Hd;
        for (int k = 0; k < Hd; ++k) acc += row[k] * h[k];
        z[c] = acc;
      }
      softmax_inplace(z);
      double* o1 = out.data();
      double* ob1 = o1 + static_cast<std::size_t>(Hd) * F;
      double* o2 = ob1 + Hd;
      double* ob2 = o2 + static_cast<std::size_t>(C) * Hd;
      std::vector<double> dh(Hd, 0.0);
      for (int c = 0; c < C; ++c) {
        double g = z[c] - (c == y ? 1.0 : 0.0);
        ob2[c] += g;
        const double* row = w2 + static_cast<std::size_t>(c) * Hd;
        double* orow = o2 + static_cast<std::size_t>(c) * Hd;
        for (int k = 0; k < Hd; ++k) {
          orow[k] += g * h[k];
          dh[k] += g * row[k];
        }
      }
      for (int k = 0; k < Hd; ++k) {
        double dz = dh[k] * (1.0 - h[k] * h[k]);
        ob1[k] += dz;
        double* orow = o1 + static_cast<std::size_t>(k) * F;
        for (int j = 0; j < F; ++j) orow[j] += dz * x[j];
      }
      return;
    }
  }
}

double LossTask::loss(std::span<const double> w, std::span<const int> indices) const {
  if (indices.empty()) throw std::invalid_argument("LossTask::loss: empty index set");
  double acc = 0.0;
  for (int i : indices) acc += sample_loss(w, i);
  return acc / static_cast<double>(indices.size());
}

void LossTask::grad(std::span<const double> w, std::span<const int> indices,
                    std::span<double> out) const {
  if (indices.empty()) throw std::invalid_argument("LossTask::grad: empty index set");
  std::fill(out.begin(), out.end(), 0.0);
  for (int i : indices) sample_grad_accum(w, i, out);
  double inv = 1.0 / static_cast<double>(indices.size());
  for (auto& v : out) v *= inv;
}

double LossTask::full_loss(std::span<const double> w) const { return loss(w, all_indices_); }

void LossTask::full_grad(std::span<const double> w, std::span<double> out) const {
  grad(w, all_indices_, out);
}

std::optional<ModelParams> LossTask::optimum(std::span<const int> indices) const {
  if (spec_.kind != TaskKind::quadratic) return std::nullopt;
  if (indices.empty()) throw std::invalid_argument("LossTask::optimum: empty index set");
  ModelParams w(param_dim_, 0.0);
  for (int i : indices) {
    const auto x = data_.sample(i);
    for (int j = 0; j < param_dim_; ++j) w[j] += x[j];
  }
  for (auto& v : w) v /= static_cast<double>(indices.size());
  return w;
}

ModelParams LossTask::initial_params(std::uint64_t seed) const {
  rng::Stream s(rng::derive_key(seed, rng::Domain::init));
  ModelParams w(param_dim_);
  for (auto& v : w) v = s.normal(0.0, 0.1);
  return w;
}

PartitionResult partition_data(const Dataset& data, int num_devices, PartitionMode mode,
                               double size_std, int labels_per_device, std::uint64_t seed) {
  if (num_devices < 1) throw std::invalid_argument("partition_data: num_devices must be >= 1");
  if (size_std < 0.0) throw std::invalid_argument("partition_data: size_std must be >= 0");
  if (data.size() < num_devices) {
    throw std::invalid_argument("partition_data: fewer samples than devices");
  }

  PartitionResult out;
  out.shards.resize(num_devices);

  // Per-class index pools, each in a seeded random order.
  std::vector<std::vector<int>> pools(data.num_classes);
  for (int i = 0; i < data.size(); ++i) pools[data.labels[i]].push_back(i);
  for (int c = 0; c < data.num_classes; ++c) {
    rng::Stream s(rng::derive_key(seed, rng::Domain::partition, 0, static_cast<std::uint64_t>(c)));
    auto& p = pools[c];
    for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[s.below(i)]);
  }

  if (mode == PartitionMode::iid) {
    // Deal each class round-robin so every shard covers every class.
    for (int c = 0; c < data.num_classes; ++c) {
      const auto& p = pools[c];
      for (std::size_t i = 0; i < p.size(); ++i) {
        out.shards[i % num_devices].push_back(p[i]);
      }
    }
  } else {
    if (labels_per_device < 1 || labels_per_device > data.num_classes) {
      throw std::invalid_argument("partition_data: labels_per_device must be in [1, num_classes]");
    }
    rng::Stream s(rng::derive_key(seed, rng::Domain::partition, 1));
    std::vector<int> perm(data.num_classes);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[s.below(i)]);

    // Lognormal shard sizes with unit-mean correction; target mean is 80% of
    // an even split so skewed draws still fit the class pools.
    double target_mean = 0.8 * static_cast<double>(data.size()) / num_devices;
    double mu = std::log(target_mean) - 0.5 * size_std * size_std;
    std::vector<std::size_t> cursor(data.num_classes, 0);

    // Reserve one sample per device first, so a run of large draws cannot
    // starve the devices that come later.
    for (int n = 0; n < num_devices; ++n) {
      bool got = false;
      for (int j = 0; j < labels_per_device && !got; ++j) {
        int c = perm[(static_cast<std::size_t>(n) * labels_per_device + j) % data.num_classes];
        if (cursor[c] < pools[c].size()) {
          out.shards[n].push_back(pools[c][cursor[c]++]);
          got = true;
        }
      }
      if (!got) {
        throw std::invalid_argument("partition_data: not enough samples in the allowed classes");
      }
    }

    for (int n = 0; n < num_devices; ++n) {
      long long want = std::llround(std::exp(mu + size_std * s.normal()));
      want = std::max(1ll, want);
      // Draw round-robin from this device's allowed classes until the target
      // size is met or its pools run dry.
      long long taken = static_cast<long long>(out.shards[n].size());
      while (taken < want) {
        bool any = false;
        for (int j = 0; j < labels_per_device && taken < want; ++j) {
          int c = perm[(static_cast<std::size_t>(n) * labels_per_device + j) % data.num_classes];
          if (cursor[c] < pools[c].size()) {
            out.shards[n].push_back(pools[c][cursor[c]++]);
            ++taken;
            any = true;
          }
        }
        if (!any) break;
      }
    }
  }

  double total = 0.0;
  for (const auto& sh : out.shards) total += static_cast<double>(sh.size());
  if (total <= 0.0) throw std::invalid_argument("partition_data: produced empty partition");
  out.weights.resize(num_devices);
  for (int n = 0; n < num_devices; ++n) {
    out.weights[n] = static_cast<double>(out.shards[n].size()) / total;
  }
  return out;
}

}  // namespace fedq::fl
