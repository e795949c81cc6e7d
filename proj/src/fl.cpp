#include "fedq/fl.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace fedq::fl {

namespace {

bool all_finite(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return std::isfinite(s);
}

// Cross-device reductions run in ascending device-id order, so traces do not
// depend on the order devices are stored in.
std::vector<int> id_order(std::span<const DeviceState> devices) {
  std::vector<int> ord(devices.size());
  for (std::size_t i = 0; i < devices.size(); ++i) ord[i] = static_cast<int>(i);
  std::sort(ord.begin(), ord.end(), [&](int a, int b) { return devices[a].id < devices[b].id; });
  return ord;
}

// Minibatch indices for (device, iteration): `batch` draws with replacement,
// or the whole shard when batch covers it.
std::vector<int> draw_minibatch(std::span<const int> shard, int batch, std::uint64_t seed,
                                int device, int iter) {
  if (batch >= static_cast<int>(shard.size())) {
    return std::vector<int>(shard.begin(), shard.end());
  }
  rng::Stream s(rng::derive_key(seed, rng::Domain::minibatch, static_cast<std::uint64_t>(device),
                                static_cast<std::uint64_t>(iter)));
  std::vector<int> idx(batch);
  for (auto& v : idx) v = shard[s.below(shard.size())];
  return idx;
}

// One local iteration: minibatch SGD step followed by weight quantization.
// Returns ||Q_w(w) - w||^2 of the step (0 when q_w = 32), or -1 on a
// non-finite gradient/model.
double step_device(const LossTask& task, DeviceState& dev, double eta, int batch, int iter,
                   std::uint64_t seed) {
  const int d = task.param_dim();
  auto idx = draw_minibatch(dev.shard, batch, seed, dev.id, iter);
  std::vector<double> g(d);
  task.grad(dev.params, idx, g);
  if (!all_finite(g)) return -1.0;
  for (int j = 0; j < d; ++j) dev.params[j] -= eta * g[j];
  if (!all_finite(dev.params)) return -1.0;
  if (dev.q_w >= quant::kFullPrecisionBits) return 0.0;
  std::vector<double> pre = dev.params;
  quant::QuantizerSpec spec{dev.q_w, d, quant::DeltaForm::halved};
  quant::quantize_serial(pre, dev.params, spec,
                         rng::derive_key(seed, rng::Domain::weight_quant,
                                         static_cast<std::uint64_t>(dev.id),
                                         static_cast<std::uint64_t>(iter)));
  double r2 = 0.0;
  for (int j = 0; j < d; ++j) {
    double r = dev.params[j] - pre[j];
    r2 += r * r;
  }
  return std::isfinite(r2) ? r2 : -1.0;
}

double weighted_loss(const LossTask& task, std::span<const DeviceState> devices,
                     std::span<const double> w) {
  auto ord = id_order(devices);
  double acc = 0.0;
  for (int i : ord) acc += devices[i].weight * task.loss(w, devices[i].shard);
  return acc;
}

void weighted_grad(const LossTask& task, std::span<const DeviceState> devices,
                   std::span<const double> w, std::span<double> out) {
  auto ord = id_order(devices);
  std::fill(out.begin(), out.end(), 0.0);
  std::vector<double> g(out.size());
  for (int i : ord) {
    task.grad(w, devices[i].shard, g);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += devices[i].weight * g[j];
  }
}

double round_eta(const TrainingConfig& cfg, int num_devices, int round) {
  if (cfg.schedule == LrSchedule::sqrt_mn_over_k) {
    return std::sqrt(static_cast<double>(cfg.batch_size) * num_devices / cfg.total_iters);
  }
  return cfg.lr0 * std::pow(cfg.decay, round);
}

}  // namespace

void TrainingConfig::validate() const {
  if (local_iters < 1) throw std::invalid_argument("TrainingConfig: local_iters must be >= 1");
  if (total_iters < 1) throw std::invalid_argument("TrainingConfig: total_iters must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainingConfig: batch_size must be >= 1");
  if (!(lr0 > 0.0)) throw std::invalid_argument("TrainingConfig: lr0 must be > 0");
  if (!(decay > 0.0) || decay > 1.0) {
    throw std::invalid_argument("TrainingConfig: decay must be in (0, 1]");
  }
  if ((early_stop || dynamic_h) && !record_metrics) {
    throw std::invalid_argument("TrainingConfig: early_stop/dynamic_h require record_metrics");
  }
  if (early_stop && !(eps_target > 0.0)) {
    throw std::invalid_argument("TrainingConfig: early_stop requires eps_target > 0");
  }
}

std::vector<DeviceState> make_devices(const PartitionResult& part, std::span<const int> q_w,
                                      std::span<const int> q_g) {
  const int n = static_cast<int>(part.shards.size());
  auto pick = [n](std::span<const int> qs, int i, const char* what) {
    if (qs.size() == 1) return qs[0];
    if (static_cast<int>(qs.size()) == n) return qs[i];
    throw std::invalid_argument(std::string(what) + ": need 1 or num_devices entries");
  };
  std::vector<DeviceState> devices(n);
  for (int i = 0; i < n; ++i) {
    devices[i].id = i;
    devices[i].shard = part.shards[i];
    devices[i].weight = part.weights[i];
    devices[i].q_w = pick(q_w, i, "q_w");
    devices[i].q_g = pick(q_g, i, "q_g");
  }
  return devices;
}

ModelParams aggregate(std::span<const ModelParams> updates, std::span<const double> weights) {
  if (updates.empty() || updates.size() != weights.size()) {
    throw std::invalid_argument("aggregate: need matching nonempty updates and weights");
  }
  const std::size_t d = updates[0].size();
  ModelParams delta(d, 0.0);
  for (std::size_t n = 0; n < updates.size(); ++n) {
    if (updates[n].size() != d) {
      throw std::invalid_argument("aggregate: mismatched update dimensions");
    }
    for (std::size_t j = 0; j < d; ++j) delta[j] += weights[n] * updates[n][j];
  }
  return delta;
}

ModelParams local_round(const LossTask& task, DeviceState& device, const ModelParams& global,
                        int local_iters, double eta, int batch_size, int round, int base_iter,
                        std::uint64_t seed) {
  if (device.shard.empty()) throw std::invalid_argument("local_round: empty device shard");
  if (!all_finite(global)) throw std::invalid_argument("local_round: non-finite global model");
  const int d = task.param_dim();
  device.params = global;
  for (int h = 0; h < local_iters; ++h) {
    if (step_device(task, device, eta, batch_size, base_iter + h, seed) < 0.0) {
      throw std::runtime_error("local_round: non-finite loss/gradient on device " +
                               std::to_string(device.id) + " at iteration " +
                               std::to_string(base_iter + h));
    }
  }
  ModelParams diff(d);
  for (int j = 0; j < d; ++j) diff[j] = global[j] - device.params[j];
  quant::QuantizerSpec spec{device.q_g, d, quant::DeltaForm::halved};
  quant::quantize(diff, diff, spec,
                  rng::derive_key(seed, rng::Domain::grad_quant,
                                  static_cast<std::uint64_t>(device.id),
                                  static_cast<std::uint64_t>(round)));
  return diff;
}

TrainingTrace train(const LossTask& task, std::vector<DeviceState>& devices,
                    const ModelParams& w0, const TrainingConfig& config) {
  config.validate();
  const int N = static_cast<int>(devices.size());
  const int d = task.param_dim();
  if (N < 1) throw std::invalid_argument("train: no devices");
  if (static_cast<int>(w0.size()) != d) throw std::invalid_argument("train: w0 dimension mismatch");
  double psum = 0.0;
  for (const auto& dev : devices) {
    if (dev.shard.empty()) {
      throw std::invalid_argument("train: device " + std::to_string(dev.id) + " has empty shard");
    }
    psum += dev.weight;
  }
  if (std::abs(psum - 1.0) > 1e-9) {
    throw std::invalid_argument("train: device weights must sum to 1");
  }

  TrainingTrace trace;
  trace.local_iters = config.local_iters;
  trace.total_iters = config.total_iters;
  trace.batch_size = config.batch_size;
  trace.num_devices = N;
  trace.schedule = config.schedule;
  trace.lr0 = config.schedule == LrSchedule::sqrt_mn_over_k ? round_eta(config, N, 0) : config.lr0;
  trace.seed = config.seed;
  if (config.record_quant_residuals) trace.quant_residual_sq.resize(N);

  for (auto& dev : devices) dev.params = w0;
  ModelParams global = w0;
  std::vector<ModelParams> anchors(N);
  ModelParams wbar(d), gbar(d);
  const std::vector<int> ord = id_order(devices);

  const int K = config.total_iters;
  double f0 = config.record_metrics ? weighted_loss(task, devices, w0) : 0.0;

  int k = 0, round = 0;
  bool stop = false;
  while (k < K && !stop) {
    int h_round = config.local_iters;
    if (config.dynamic_h) {
      double cur = round == 0 ? f0 : weighted_loss(task, devices, global);
      double ratio = f0 != 0.0 ? cur / f0 : 1.0;
      h_round = config.dynamic_h(round, ratio);
      if (h_round < 1) throw std::invalid_argument("train: dynamic_h returned H < 1");
    }
    h_round = std::min(h_round, K - k);
    const double eta = round_eta(config, N, round);

    for (int n = 0; n < N; ++n) {
      anchors[n] = config.sync == SyncMode::broadcast ? global : devices[n].params;
      if (config.sync == SyncMode::broadcast) devices[n].params = global;
    }

    for (int h = 0; h < h_round; ++h, ++k) {
      if (config.record_metrics) {
        std::fill(wbar.begin(), wbar.end(), 0.0);
        for (int i : ord) {
          for (int j = 0; j < d; ++j) wbar[j] += devices[i].weight * devices[i].params[j];
        }
        trace.loss.push_back(weighted_loss(task, devices, wbar));
        weighted_grad(task, devices, wbar, gbar);
        double g2 = 0.0;
        for (double v : gbar) g2 += v * v;
        trace.grad_norm_sq.push_back(g2);
        trace.round_of_iter.push_back(round);
        if (!std::isfinite(trace.loss.back()) || !std::isfinite(g2)) {
          throw std::runtime_error("train: non-finite loss/gradient at iteration " +
                                   std::to_string(k));
        }
      }

      std::atomic<int> bad{-1};
      std::vector<double> residual(config.record_quant_residuals ? N : 0);
#pragma omp parallel for schedule(static)
      for (int n = 0; n < N; ++n) {
        double r2 = step_device(task, devices[n], eta, config.batch_size, k, config.seed);
        if (r2 < 0.0) bad.store(n);
        if (config.record_quant_residuals) residual[n] = r2;
      }
      if (bad.load() >= 0) {
        throw std::runtime_error("train: non-finite loss/gradient on device " +
                                 std::to_string(bad.load()) + " at iteration " + std::to_string(k));
      }
      if (config.record_quant_residuals) {
        for (int n = 0; n < N; ++n) trace.quant_residual_sq[n].push_back(residual[n]);
      }
    }

    // Synchronization barrier: quantized update differences, id-ordered
    // weighted reduction.
    std::vector<ModelParams> updates(N);
    std::vector<double> weights(N);
    for (std::size_t i = 0; i < ord.size(); ++i) {
      int n = ord[i];
      ModelParams diff(d);
      for (int j = 0; j < d; ++j) diff[j] = anchors[n][j] - devices[n].params[j];
      quant::QuantizerSpec spec{devices[n].q_g, d, config.delta_form};
      quant::quantize(diff, diff, spec,
                      rng::derive_key(config.seed, rng::Domain::grad_quant,
                                      static_cast<std::uint64_t>(devices[n].id),
                                      static_cast<std::uint64_t>(round)));
      updates[i] = std::move(diff);
      weights[i] = devices[n].weight;
    }
    ModelParams delta = aggregate(updates, weights);

    if (config.sync == SyncMode::broadcast) {
      for (int j = 0; j < d; ++j) global[j] -= delta[j];
    } else {
      // Literal line-3 reading: each device resolves the delta against its
      // own anchor and re-quantizes the result as its working model, so
      // round-start models differ per device under weight quantization.
      std::fill(global.begin(), global.end(), 0.0);
      for (int i : ord) {
        for (int j = 0; j < d; ++j) devices[i].params[j] = anchors[i][j] - delta[j];
        if (devices[i].q_w < quant::kFullPrecisionBits) {
          quant::QuantizerSpec spec{devices[i].q_w, d, config.delta_form};
          quant::quantize(devices[i].params, devices[i].params, spec,
                          rng::derive_key(config.seed, rng::Domain::sync_quant,
                                          static_cast<std::uint64_t>(devices[i].id),
                                          static_cast<std::uint64_t>(round)));
        }
        for (int j = 0; j < d; ++j) global[j] += devices[i].weight * devices[i].params[j];
      }
    }
    trace.uplink_transmissions += N;
    ++round;

    if (config.early_stop && !trace.grad_norm_sq.empty()) {
      double mean = 0.0;
      for (double v : trace.grad_norm_sq) mean += v;
      mean /= static_cast<double>(trace.grad_norm_sq.size());
      if (mean <= config.eps_target) {
        trace.early_stopped = true;
        stop = true;
      }
    }
  }

  trace.rounds_executed = round;
  trace.iterations_executed = k;
  trace.final_model = global;
  return trace;
}

TrainingTrace reference_sgd(const LossTask& task, std::span<const int> shard,
                            const ModelParams& w0, const TrainingConfig& config) {
  config.validate();
  if (shard.empty()) throw std::invalid_argument("reference_sgd: empty shard");
  const int d = task.param_dim();
  TrainingTrace trace;
  trace.local_iters = 1;
  trace.total_iters = config.total_iters;
  trace.batch_size = config.batch_size;
  trace.num_devices = 1;
  trace.schedule = config.schedule;
  trace.lr0 = config.lr0;
  trace.seed = config.seed;

  ModelParams w = w0;
  std::vector<double> g(d);
  std::vector<int> shard_vec(shard.begin(), shard.end());
  for (int k = 0; k < config.total_iters; ++k) {
    if (config.record_metrics) {
      trace.loss.push_back(task.loss(w, shard_vec));
      task.grad(w, shard_vec, g);
      double g2 = 0.0;
      for (double v : g) g2 += v * v;
      trace.grad_norm_sq.push_back(g2);
      trace.round_of_iter.push_back(k);
    }
    auto idx = draw_minibatch(shard_vec, config.batch_size, config.seed, 0, k);
    task.grad(w, idx, g);
    if (!all_finite(g)) {
      throw std::runtime_error("reference_sgd: non-finite gradient at iteration " +
                               std::to_string(k));
    }
    const double eta = round_eta(config, 1, k);
    for (int j = 0; j < d; ++j) w[j] -= eta * g[j];
  }
  trace.rounds_executed = config.total_iters;
  trace.iterations_executed = config.total_iters;
  trace.uplink_transmissions = config.total_iters;
  trace.final_model = w;
  return trace;
}

double TrainingTrace::mean_grad_norm_sq() const {
  if (grad_norm_sq.empty()) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (double v : grad_norm_sq) acc += v;
  return acc / static_cast<double>(grad_norm_sq.size());
}

EstimatedConstants estimate_constants(const LossTask& task,
                                      std::span<const DeviceState> devices,
                                      const ModelParams& w0, const ProbeConfig& probe) {
  if (probe.num_points < 2 || !(probe.radius > 0.0) || probe.minibatch_draws < 1) {
    throw std::invalid_argument("estimate_constants: degenerate probe configuration");
  }
  const int N = static_cast<int>(devices.size());
  const int d = task.param_dim();
  if (N < 1) throw std::invalid_argument("estimate_constants: no devices");

  // Probe points: w0 plus Gaussian draws around it.
  const int P = probe.num_points;
  std::vector<ModelParams> points(P, w0);
  for (int i = 1; i < P; ++i) {
    rng::Stream s(rng::derive_key(probe.seed, rng::Domain::probe, static_cast<std::uint64_t>(i)));
    for (int j = 0; j < d; ++j) points[i][j] += probe.radius * s.normal();
  }

  // Per-device full-shard gradients at each point, plus the global gradient.
  std::vector<std::vector<double>> dev_grads(static_cast<std::size_t>(P) * N,
                                             std::vector<double>(d));
  std::vector<std::vector<double>> glob_grads(P, std::vector<double>(d));
#pragma omp parallel for schedule(static)
  for (int i = 0; i < P; ++i) {
    for (int n = 0; n < N; ++n) {
      task.grad(points[i], devices[n].shard, dev_grads[static_cast<std::size_t>(i) * N + n]);
    }
    auto& gg = glob_grads[i];
    std::fill(gg.begin(), gg.end(), 0.0);
    for (int n = 0; n < N; ++n) {
      const auto& g = dev_grads[static_cast<std::size_t>(i) * N + n];
      for (int j = 0; j < d; ++j) gg[j] += devices[n].weight * g[j];
    }
  }

  EstimatedConstants out;

  for (int i = 0; i < P; ++i) {
    for (int j = i + 1; j < P; ++j) {
      double dx = 0.0;
      for (int t = 0; t < d; ++t) {
        double e = points[i][t] - points[j][t];
        dx += e * e;
      }
      if (dx <= 0.0) continue;
      for (int n = 0; n < N; ++n) {
        const auto& gi = dev_grads[static_cast<std::size_t>(i) * N + n];
        const auto& gj = dev_grads[static_cast<std::size_t>(j) * N + n];
        double dg = 0.0;
        for (int t = 0; t < d; ++t) {
          double e = gi[t] - gj[t];
          dg += e * e;
        }
        out.L = std::max(out.L, std::sqrt(dg / dx));
      }
    }
  }

  // Minibatch noise and second moment.
  std::vector<double> g(d);
  for (int n = 0; n < N; ++n) {
    const auto& dev = devices[n];
    const int M = std::min<int>(probe.batch_size, static_cast<int>(dev.shard.size()));
    for (int i = 0; i < P; ++i) {
      const auto& full = dev_grads[static_cast<std::size_t>(i) * N + n];
      double var = 0.0, moment = 0.0;
      for (int r = 0; r < probe.minibatch_draws; ++r) {
        std::uint64_t key = rng::combine(
            rng::combine(rng::derive_key(probe.seed, rng::Domain::probe, 1000 + n), i), r);
        rng::Stream s(key);
        std::vector<int> idx(M);
        if (M >= static_cast<int>(dev.shard.size())) {
          idx.assign(dev.shard.begin(), dev.shard.end());  // full batch, no sampling noise
        } else {
          for (auto& v : idx) v = dev.shard[s.below(dev.shard.size())];
        }
        task.grad(points[i], idx, g);
        double dv = 0.0, m2 = 0.0;
        for (int t = 0; t < d; ++t) {
          double e = g[t] - full[t];
          dv += e * e;
          m2 += g[t] * g[t];
        }
        var += dv;
        moment += m2;
      }
      var /= probe.minibatch_draws;
      moment /= probe.minibatch_draws;
      out.sigma_sq = std::max(out.sigma_sq, M * var);
      out.tau_sq = std::max(out.tau_sq, moment);
    }
  }

  for (int i = 0; i < P; ++i) {
    for (int n = 0; n < N; ++n) {
      const auto& gn = dev_grads[static_cast<std::size_t>(i) * N + n];
      const auto& gg = glob_grads[i];
      double dv = 0.0;
      for (int t = 0; t < d; ++t) {
        double e = gn[t] - gg[t];
        dv += e * e;
      }
      out.G_sq = std::max(out.G_sq, dv);
    }
  }

  out.F0 = weighted_loss(task, devices, w0);
  double f_best = out.F0;
  if (task.kind() == TaskKind::quadratic) {
    std::vector<int> all;
    for (const auto& dev : devices) all.insert(all.end(), dev.shard.begin(), dev.shard.end());
    auto opt = task.optimum(all);
    f_best = weighted_loss(task, devices, *opt);
  } else if (out.L > 0.0) {
    ModelParams w = w0;
    std::vector<double> gg(d);
    const double eta = 1.0 / out.L;
    for (int s = 0; s < probe.descent_steps; ++s) {
      weighted_grad(task, devices, w, gg);
      for (int j = 0; j < d; ++j) w[j] -= eta * gg[j];
      f_best = std::min(f_best, weighted_loss(task, devices, w));
    }
  }
  out.delta_F = out.F0 - f_best;
  return out;
}

}  // namespace fedq::fl
