#include "doctest.h"
#include "fedq/fl.hpp"
#include "fedq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <numeric>
#include <vector>

#include <omp.h>

using namespace fedq;

namespace {

// f(w) = 0.5 * ||w||^2: unit curvature, all sample centers exactly zero.
fl::TaskSpec unit_quadratic(int dim, int samples = 4) {
  fl::TaskSpec spec;
  spec.kind = fl::TaskKind::quadratic;
  spec.num_samples = samples;
  spec.num_classes = 2;
  spec.feature_dim = dim;
  spec.cluster_scale = 0.0;
  spec.cluster_spread = 0.0;
  spec.curvature_min = 1.0;
  spec.curvature_max = 1.0;
  spec.seed = 1;
  return spec;
}

fl::TaskSpec clustered_quadratic(int dim, int samples, std::uint64_t seed,
                                 double curv_lo = 0.5, double curv_hi = 1.5) {
  fl::TaskSpec spec;
  spec.kind = fl::TaskKind::quadratic;
  spec.num_samples = samples;
  spec.num_classes = 4;
  spec.feature_dim = dim;
  spec.curvature_min = curv_lo;
  spec.curvature_max = curv_hi;
  spec.seed = seed;
  return spec;
}

fl::PartitionResult whole_dataset_partition(const fl::Dataset& data) {
  fl::PartitionResult part;
  part.shards.resize(1);
  part.shards[0].resize(data.size());
  std::iota(part.shards[0].begin(), part.shards[0].end(), 0);
  part.weights = {1.0};
  return part;
}

}  // namespace

TEST_CASE("aggregate is the weighted mean") {
  std::vector<fl::ModelParams> same{{2.0, -1.0}, {2.0, -1.0}, {2.0, -1.0}};
  std::vector<double> w{0.2, 0.3, 0.5};
  CHECK(fl::aggregate(same, w) == fl::ModelParams{2.0, -1.0});

  std::vector<fl::ModelParams> two{{2.0}, {0.0}};
  std::vector<double> half{0.5, 0.5};
  CHECK(fl::aggregate(two, half) == fl::ModelParams{1.0});

  std::vector<fl::ModelParams> three{{1.0}, {1.0}, {0.0}};
  CHECK(fl::aggregate(three, w)[0] == doctest::Approx(0.5).epsilon(1e-15));

  std::vector<fl::ModelParams> bad{{1.0}, {1.0, 2.0}};
  CHECK_THROWS_AS(fl::aggregate(bad, half), std::invalid_argument);
}

TEST_CASE("local_round: two hand-unrolled SGD steps on f(w) = w^2/2") {
  fl::LossTask task(unit_quadratic(1, 1));
  fl::DeviceState dev;
  dev.id = 0;
  dev.shard = {0};
  dev.weight = 1.0;
  fl::ModelParams global{1.0};
  auto upd = fl::local_round(task, dev, global, 2, 0.1, 1, 0, 0, 99);
  // w: 1 -> 0.9 -> 0.81; update = 1 - 0.81 = 0.19
  CHECK(upd[0] == doctest::Approx(0.19).epsilon(1e-12));
  CHECK(dev.params[0] == doctest::Approx(0.81).epsilon(1e-12));
}

TEST_CASE("local_round at the optimum returns a zero update for any H and q_g") {
  fl::LossTask task(unit_quadratic(8));
  fl::DeviceState dev;
  dev.id = 0;
  dev.shard = {0, 1, 2, 3};
  dev.q_g = 4;
  fl::ModelParams global(8, 0.0);  // centers are all zero
  auto upd = fl::local_round(task, dev, global, 7, 0.05, 4, 0, 0, 5);
  for (double v : upd) CHECK(v == 0.0);
}

TEST_CASE("local_round with H=1 full precision is one gradient step") {
  fl::LossTask task(clustered_quadratic(4, 40, 11));
  fl::DeviceState dev;
  dev.id = 0;
  dev.shard.resize(40);
  std::iota(dev.shard.begin(), dev.shard.end(), 0);
  auto w0 = task.initial_params(3);
  auto upd = fl::local_round(task, dev, w0, 1, 0.2, 40, 0, 0, 5);
  std::vector<double> g(4);
  task.grad(w0, dev.shard, g);
  for (int j = 0; j < 4; ++j) CHECK(upd[j] == doctest::Approx(0.2 * g[j]).epsilon(1e-15));
}

TEST_CASE("one-device full-precision training equals the reference SGD loop bit for bit") {
  fl::TaskSpec spec;
  spec.kind = fl::TaskKind::logistic;
  spec.num_samples = 300;
  spec.num_classes = 4;
  spec.feature_dim = 6;
  spec.seed = 2;
  fl::LossTask task(spec);
  auto part = whole_dataset_partition(task.data());
  std::vector<int> q32{32};
  auto devices = fl::make_devices(part, q32, q32);
  auto w0 = task.initial_params(7);

  fl::TrainingConfig tc;
  tc.local_iters = 1;
  tc.total_iters = 200;
  tc.batch_size = 16;
  tc.lr0 = 0.05;
  tc.decay = 0.996;
  tc.seed = 7;
  auto fl_trace = fl::train(task, devices, w0, tc);
  auto ref_trace = fl::reference_sgd(task, part.shards[0], w0, tc);

  CHECK(fl_trace.final_model == ref_trace.final_model);
  CHECK(fl_trace.loss == ref_trace.loss);
  CHECK(fl_trace.grad_norm_sq == ref_trace.grad_norm_sq);
}

TEST_CASE("full-precision training equals a plain local-SGD loop for any H") {
  fl::TaskSpec spec;
  spec.kind = fl::TaskKind::logistic;
  spec.num_samples = 400;
  spec.num_classes = 5;
  spec.feature_dim = 5;
  spec.seed = 23;
  fl::LossTask task(spec);
  auto part = fl::partition_data(task.data(), 4, fl::PartitionMode::iid, 0.0, 5, 23);
  std::vector<int> q32{32};
  auto devices = fl::make_devices(part, q32, q32);
  auto w0 = task.initial_params(1);

  fl::TrainingConfig tc;
  tc.local_iters = 5;
  tc.total_iters = 60;
  tc.batch_size = 8;
  tc.lr0 = 0.1;
  tc.decay = 1.0;
  tc.seed = 31;
  tc.record_metrics = false;
  auto trace = fl::train(task, devices, w0, tc);

  // Reference: per round, every device runs H plain SGD steps from the
  // broadcast model (same stream layout), server averages the differences.
  fl::ModelParams global = w0;
  const int d = task.param_dim();
  for (int round = 0; round < 12; ++round) {
    fl::ModelParams delta(d, 0.0);
    for (int n = 0; n < 4; ++n) {
      fl::ModelParams w = global;
      std::vector<double> g(d);
      for (int h = 0; h < 5; ++h) {
        int k = round * 5 + h;
        rng::Stream s(rng::derive_key(tc.seed, rng::Domain::minibatch, n, k));
        std::vector<int> idx(tc.batch_size);
        for (auto& v : idx) v = part.shards[n][s.below(part.shards[n].size())];
        task.grad(w, idx, g);
        for (int j = 0; j < d; ++j) w[j] -= tc.lr0 * g[j];
      }
      for (int j = 0; j < d; ++j) delta[j] += part.weights[n] * (global[j] - w[j]);
    }
    for (int j = 0; j < d; ++j) global[j] -= delta[j];
  }
  CHECK(trace.final_model == global);
}

TEST_CASE("loss is non-increasing on a strongly convex quadratic at full precision") {
  fl::LossTask task(clustered_quadratic(6, 240, 5));
  auto part = fl::partition_data(task.data(), 3, fl::PartitionMode::iid, 0.0, 4, 5);
  std::vector<int> q32{32};
  auto devices = fl::make_devices(part, q32, q32);
  auto w0 = task.initial_params(2);
  fl::TrainingConfig tc;
  tc.local_iters = 4;
  tc.total_iters = 200;
  tc.batch_size = 240;  // full batch: deterministic descent
  tc.lr0 = 0.1;
  tc.decay = 1.0;
  tc.seed = 3;
  auto trace = fl::train(task, devices, w0, tc);
  for (std::size_t k = 1; k < trace.loss.size(); ++k) {
    CHECK(trace.loss[k] <= trace.loss[k - 1] + 1e-12);
  }
}

TEST_CASE("one uplink transmission per device per round") {
  fl::LossTask task(clustered_quadratic(4, 120, 8));
  auto part = fl::partition_data(task.data(), 6, fl::PartitionMode::iid, 0.0, 4, 8);
  std::vector<int> q{8};
  auto devices = fl::make_devices(part, q, q);
  auto w0 = task.initial_params(4);
  fl::TrainingConfig tc;
  tc.local_iters = 5;
  tc.total_iters = 40;
  tc.batch_size = 4;
  tc.record_metrics = false;
  tc.seed = 9;
  auto trace = fl::train(task, devices, w0, tc);
  CHECK(trace.uplink_transmissions == 6 * (40 / 5));
  CHECK(trace.rounds_executed == 8);
}

TEST_CASE("short last round when H does not divide K") {
  fl::LossTask task(clustered_quadratic(4, 60, 8));
  auto part = fl::partition_data(task.data(), 2, fl::PartitionMode::iid, 0.0, 4, 8);
  std::vector<int> q32{32};
  auto devices = fl::make_devices(part, q32, q32);
  auto w0 = task.initial_params(4);
  fl::TrainingConfig tc;
  tc.local_iters = 7;
  tc.total_iters = 16;  // rounds: 7 + 7 + 2
  tc.batch_size = 4;
  tc.seed = 10;
  auto trace = fl::train(task, devices, w0, tc);
  CHECK(trace.rounds_executed == 3);
  CHECK(trace.iterations_executed == 16);
}

TEST_CASE("training is invariant to device order and thread count") {
  fl::LossTask task(clustered_quadratic(5, 200, 12));
  auto part = fl::partition_data(task.data(), 5, fl::PartitionMode::non_iid, 0.3, 2, 12);
  std::vector<int> qw{16, 32, 8, 16, 32};
  std::vector<int> qg{4, 8, 32, 16, 8};
  auto devices = fl::make_devices(part, qw, qg);
  auto w0 = task.initial_params(6);
  fl::TrainingConfig tc;
  tc.local_iters = 3;
  tc.total_iters = 30;
  tc.batch_size = 8;
  tc.seed = 13;

  auto base = devices;
  auto trace1 = fl::train(task, base, w0, tc);

  auto shuffled = devices;
  std::rotate(shuffled.begin(), shuffled.begin() + 2, shuffled.end());
  auto trace2 = fl::train(task, shuffled, w0, tc);
  CHECK(trace1.final_model == trace2.final_model);
  CHECK(trace1.loss == trace2.loss);

  int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  auto serial = devices;
  auto trace3 = fl::train(task, serial, w0, tc);
  omp_set_num_threads(saved);
  CHECK(trace1.final_model == trace3.final_model);
  CHECK(trace1.grad_norm_sq == trace3.grad_norm_sq);
}

TEST_CASE("early stopping on the running mean of the squared gradient norm") {
  fl::LossTask task(clustered_quadratic(4, 80, 21));
  auto part = fl::partition_data(task.data(), 2, fl::PartitionMode::iid, 0.0, 4, 21);
  std::vector<int> q32{32};
  auto devices = fl::make_devices(part, q32, q32);
  auto w0 = task.initial_params(8);
  fl::TrainingConfig tc;
  tc.local_iters = 2;
  tc.total_iters = 2000;
  tc.batch_size = 80;
  tc.lr0 = 0.5;
  tc.decay = 1.0;
  tc.early_stop = true;
  // The running mean includes the large early gradients, so the reachable
  // target is bounded below by sum ||g||^2 / K.
  tc.eps_target = 0.05;
  tc.seed = 77;
  auto trace = fl::train(task, devices, w0, tc);
  CHECK(trace.early_stopped);
  CHECK(trace.iterations_executed < 2000);
  CHECK(trace.mean_grad_norm_sq() <= 0.05);
}

TEST_CASE("diverging training aborts with a diagnostic") {
  fl::LossTask task(unit_quadratic(3, 8));
  auto part = whole_dataset_partition(task.data());
  std::vector<int> q32{32};
  auto devices = fl::make_devices(part, q32, q32);
  fl::ModelParams w0(3, 1.0);
  fl::TrainingConfig tc;
  tc.local_iters = 1;
  tc.total_iters = 3000;
  tc.batch_size = 8;
  tc.lr0 = 10.0;  // |1 - eta| = 9: geometric blowup to overflow
  tc.decay = 1.0;
  tc.record_metrics = false;
  tc.seed = 1;
  CHECK_THROWS_AS(fl::train(task, devices, w0, tc), std::runtime_error);
}

TEST_CASE("dynamic H schedule drives the round length") {
  fl::LossTask task(clustered_quadratic(4, 80, 31));
  auto part = fl::partition_data(task.data(), 2, fl::PartitionMode::iid, 0.0, 4, 31);
  std::vector<int> q32{32};
  auto devices = fl::make_devices(part, q32, q32);
  auto w0 = task.initial_params(3);
  fl::TrainingConfig tc;
  tc.local_iters = 1;  // ignored once dynamic_h is set
  tc.total_iters = 24;
  tc.batch_size = 80;
  tc.seed = 3;
  std::vector<int> seen;
  tc.dynamic_h = [&seen](int round, double) {
    int h = round < 1 ? 10 : 7;
    seen.push_back(h);
    return h;
  };
  auto trace = fl::train(task, devices, w0, tc);
  CHECK(trace.rounds_executed == 3);  // 10 + 7 + 7 -> 24 caps the last at 7
  CHECK(trace.iterations_executed == 24);
}

TEST_CASE("the MLP task trains under quantization") {
  fl::TaskSpec spec;
  spec.kind = fl::TaskKind::mlp;
  spec.num_samples = 200;
  spec.num_classes = 4;
  spec.feature_dim = 5;
  spec.hidden = 6;
  spec.seed = 33;
  fl::LossTask task(spec);
  auto part = fl::partition_data(task.data(), 2, fl::PartitionMode::iid, 0.0, 4, 33);
  std::vector<int> qw{16}, qg{8};
  auto devices = fl::make_devices(part, qw, qg);
  auto w0 = task.initial_params(4);
  fl::TrainingConfig tc;
  tc.local_iters = 5;
  tc.total_iters = 100;
  tc.batch_size = 200;  // full batch
  tc.lr0 = 0.3;
  tc.decay = 1.0;
  tc.seed = 6;
  auto trace = fl::train(task, devices, w0, tc);
  CHECK(trace.loss.back() < trace.loss.front());
  for (double v : trace.loss) CHECK(std::isfinite(v));
}

TEST_CASE("estimate_constants recovers exact quadratic structure") {
  const double lam = 0.8;
  fl::LossTask task(clustered_quadratic(6, 300, 41, lam, lam));
  auto part = fl::partition_data(task.data(), 3, fl::PartitionMode::iid, 0.0, 4, 41);
  std::vector<int> q32{32};
  auto devices = fl::make_devices(part, q32, q32);
  auto w0 = task.initial_params(11);

  fl::ProbeConfig probe;
  probe.num_points = 12;
  probe.minibatch_draws = 16;
  probe.batch_size = 8;
  probe.seed = 5;
  auto est = fl::estimate_constants(task, devices, w0, probe);
  CHECK(est.L == doctest::Approx(lam).epsilon(1e-9));
  CHECK(est.delta_F > 0.0);
  CHECK(est.G_sq > 0.0);  // random shards differ

  // identical shards: zero heterogeneity
  fl::PartitionResult same;
  same.shards = {part.shards[0], part.shards[0], part.shards[0]};
  same.weights = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  auto same_devices = fl::make_devices(same, q32, q32);
  auto est_same = fl::estimate_constants(task, same_devices, w0, probe);
  CHECK(est_same.G_sq <= 1e-20);

  // full-batch minibatches: zero sampling noise
  fl::ProbeConfig full = probe;
  full.batch_size = task.data().size();
  auto est_full = fl::estimate_constants(task, devices, w0, full);
  CHECK(est_full.sigma_sq <= 1e-20);

  fl::ProbeConfig degenerate = probe;
  degenerate.num_points = 1;
  CHECK_THROWS_AS(fl::estimate_constants(task, devices, w0, degenerate), std::invalid_argument);
}

TEST_CASE("weight-quantization residuals respect the per-step bound") {
  // Empirical check of ||Q_w(w) - w||^2 <= eta sqrt(d) delta_w tau at >= 95%
  // of steps, run with the constant sqrt(MN/K) step size.
  const int d = 48;
  fl::LossTask task(clustered_quadratic(d, 400, 51, 0.05, 0.12));
  auto part = fl::partition_data(task.data(), 4, fl::PartitionMode::iid, 0.0, 4, 51);
  std::vector<int> qw{16}, qg{32};
  auto devices = fl::make_devices(part, qw, qg);
  auto w0 = task.initial_params(9);

  fl::ProbeConfig probe;
  probe.batch_size = 8;
  probe.seed = 15;
  auto est = fl::estimate_constants(task, devices, w0, probe);

  fl::TrainingConfig tc;
  tc.local_iters = 5;
  tc.total_iters = 400;
  tc.batch_size = 8;
  tc.schedule = fl::LrSchedule::sqrt_mn_over_k;
  tc.record_quant_residuals = true;
  tc.seed = 4;
  auto trace = fl::train(task, devices, w0, tc);

  double eta = std::sqrt(tc.batch_size * 4.0 / tc.total_iters);
  double delta_w = quant::delta_coefficient(16, d);
  double limit = eta * std::sqrt(static_cast<double>(d)) * delta_w * std::sqrt(est.tau_sq);
  long long ok = 0, total = 0;
  for (const auto& per_dev : trace.quant_residual_sq) {
    for (double r2 : per_dev) {
      ok += r2 <= limit ? 1 : 0;
      ++total;
    }
  }
  CHECK(total == 4 * 400);
  CHECK(static_cast<double>(ok) / total >= 0.95);
}

TEST_CASE("broadcast and local-anchor synchronization differ only under weight quantization") {
  fl::LossTask task(clustered_quadratic(5, 100, 61));
  auto part = fl::partition_data(task.data(), 2, fl::PartitionMode::iid, 0.0, 4, 61);
  auto w0 = task.initial_params(12);
  fl::TrainingConfig tc;
  tc.local_iters = 4;
  tc.total_iters = 40;
  tc.batch_size = 10;
  tc.seed = 19;

  std::vector<int> q32{32};
  auto dev_a = fl::make_devices(part, q32, q32);
  auto dev_b = fl::make_devices(part, q32, q32);
  tc.sync = fl::SyncMode::broadcast;
  auto ta = fl::train(task, dev_a, w0, tc);
  tc.sync = fl::SyncMode::local_anchor;
  auto tb = fl::train(task, dev_b, w0, tc);
  CHECK(ta.final_model == tb.final_model);  // full precision: anchors coincide

  std::vector<int> q8{8};
  auto dev_c = fl::make_devices(part, q8, q32);
  auto dev_d = fl::make_devices(part, q8, q32);
  tc.sync = fl::SyncMode::broadcast;
  auto tcx = fl::train(task, dev_c, w0, tc);
  tc.sync = fl::SyncMode::local_anchor;
  auto tdx = fl::train(task, dev_d, w0, tc);
  CHECK(tcx.final_model != tdx.final_model);
}
