#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fedq/quantization.hpp"
#include "fedq/task.hpp"

// Synchronized local SGD with per-step weight quantization and quantized
// update differences ("FL-QuWG"-style training). One round: every device
// starts from the broadcast model, runs H minibatch-SGD iterations where each
// post-step weight vector passes through its weight quantizer, then sends the
// quantized difference (start - end) to the server, which applies the
// weighted average to the global model.
//
// Determinism: every random draw is keyed by (seed, domain, device, step), so
// traces are identical whether devices run serially or in parallel.

namespace fedq::fl {

struct DeviceState {
  int id = 0;
  std::vector<int> shard;  // sample indices, nonempty
  double weight = 1.0;     // p_n, sums to 1 across devices
  int q_w = quant::kFullPrecisionBits;
  int q_g = quant::kFullPrecisionBits;
  ModelParams params;  // local model, managed by train()
};

// Devices from a partition; q_w/q_g may be a single shared value or one per
// device.
std::vector<DeviceState> make_devices(const PartitionResult& part, std::span<const int> q_w,
                                      std::span<const int> q_g);

enum class LrSchedule {
  per_round_decay,  // eta_r = eta0 * decay^r
  sqrt_mn_over_k,   // constant eta = sqrt(M*N/K), the bound-check schedule
};

// How the aggregated delta is applied. `broadcast` is standard FedAvg-style:
// the server broadcasts the updated global model. `local_anchor` applies the
// delta to each device's own anchor and re-quantizes the result as the
// device's working model, so round-start models differ per device under
// weight quantization. The two coincide at full precision.
enum class SyncMode { broadcast, local_anchor };

struct TrainingConfig {
  int local_iters = 1;   // H >= 1
  int total_iters = 1;   // K >= 1; rounds = ceil(K / H)
  int batch_size = 1;    // M; capped at the shard size (full batch)
  double lr0 = 0.1;
  double decay = 0.996;  // per-round multiplicative decay in (0, 1]
  LrSchedule schedule = LrSchedule::per_round_decay;
  SyncMode sync = SyncMode::broadcast;
  quant::DeltaForm delta_form = quant::DeltaForm::halved;
  double eps_target = 0.0;   // Running-mean ||grad F||^2 threshold
  bool early_stop = false;   // requires record_metrics
  bool record_metrics = true;       // per-iteration F and ||grad F||^2
  bool record_quant_residuals = false;  // per-step ||Q_w(w) - w||^2
  std::uint64_t seed = 1;

  // Optional per-round H override: called with (round, F(round start)/F(0)),
  // returns H for that round. Requires record_metrics.
  std::function<int(int, double)> dynamic_h;

  void validate() const;  // throws std::invalid_argument
};

struct TrainingTrace {
  // Indexed by iteration k = 0..iterations_executed-1, evaluated at the
  // weighted-average model before the step (k = 0 is the initial point).
  std::vector<double> loss;
  std::vector<double> grad_norm_sq;
  std::vector<int> round_of_iter;

  int rounds_executed = 0;
  int iterations_executed = 0;
  int uplink_transmissions = 0;  // one per device per sync
  bool early_stopped = false;
  ModelParams final_model;

  // Per-device, per-step weight-quantization residuals ||Q_w(w) - w||^2
  // (empty unless record_quant_residuals).
  std::vector<std::vector<double>> quant_residual_sq;

  // Echo of the run setup, used by the bound checker and exporters.
  int local_iters = 1;
  int total_iters = 1;
  int batch_size = 1;
  int num_devices = 1;
  LrSchedule schedule = LrSchedule::per_round_decay;
  double lr0 = 0.0;
  std::uint64_t seed = 0;

  double mean_grad_norm_sq() const;
};

// Weighted average of per-device updates: sum_n p_n * update_n. Throws on
// mismatched dimensions or empty input.
ModelParams aggregate(std::span<const ModelParams> updates, std::span<const double> weights);

// One device round: H quantized SGD iterations from `global`, returning the
// quantized update Q_g(start - end). `round` and `base_iter` locate the
// round's random streams; device.params holds the post-round local model.
ModelParams local_round(const LossTask& task, DeviceState& device, const ModelParams& global,
                        int local_iters, double eta, int batch_size, int round, int base_iter,
                        std::uint64_t seed);

// Run the full training loop. Devices execute in parallel within a round;
// aggregation is a serial, fixed-order reduction.
TrainingTrace train(const LossTask& task, std::vector<DeviceState>& devices,
                    const ModelParams& w0, const TrainingConfig& config);

// Plain single-device minibatch SGD, consuming the same random streams as a
// one-device full-precision train() run. Serial reference for equivalence
// tests.
TrainingTrace reference_sgd(const LossTask& task, std::span<const int> shard,
                            const ModelParams& w0, const TrainingConfig& config);

// Empirical estimates of the smoothness / noise / heterogeneity constants
// (all lower bounds of the true suprema).
struct ProbeConfig {
  int num_points = 24;       // >= 2
  double radius = 1.0;       // Gaussian probe radius around the center
  int minibatch_draws = 32;  // draws per probe point for sigma^2 / tau^2
  int batch_size = 8;
  int descent_steps = 400;   // full-batch GD budget for the F_best probe
  std::uint64_t seed = 1;
};

struct EstimatedConstants {
  double L = 0.0;         // max ||grad F_n(x) - grad F_n(y)|| / ||x - y||
  double sigma_sq = 0.0;  // M * max_n E||grad f~_n - grad F_n||^2
  double tau_sq = 0.0;    // max_n E||grad f~_n||^2
  double G_sq = 0.0;      // max_x max_n ||grad F_n(x) - grad F(x)||^2
  double delta_F = 0.0;   // F(w0) - F_best
  double F0 = 0.0;        // F(w0)
};

EstimatedConstants estimate_constants(const LossTask& task,
                                      std::span<const DeviceState> devices,
                                      const ModelParams& w0, const ProbeConfig& probe);

}  // namespace fedq::fl
