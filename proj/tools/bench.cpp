// Serial vs OpenMP timing for the data-parallel kernels. Both variants
// produce bit-identical results; this target only reports the speedup.

#include <chrono>
#include <cstdio>
#include <vector>

#include <omp.h>

#include "fedq/delay.hpp"
#include "fedq/fl.hpp"
#include "fedq/optimizer.hpp"
#include "fedq/quantization.hpp"
#include "fedq/rng.hpp"

namespace {

template <typename F>
double time_best_of(int reps, F&& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

void report(const char* name, double serial_s, double parallel_s) {
  std::printf("%-28s %10.4f ms %10.4f ms %8.2fx\n", name, serial_s * 1e3, parallel_s * 1e3,
              serial_s / parallel_s);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", omp_get_max_threads());
  std::printf("%-28s %13s %13s %9s\n", "kernel", "serial", "openmp", "speedup");

  {
    const int d = 2'000'000;
    std::vector<double> v(d), out(d);
    fedq::rng::Stream s(1);
    for (auto& x : v) x = s.normal();
    fedq::quant::QuantizerSpec spec{8, d, fedq::quant::DeltaForm::halved};
    double ts = time_best_of(5, [&] { fedq::quant::quantize_serial(v, out, spec, 42); });
    double tp = time_best_of(5, [&] { fedq::quant::quantize(v, out, spec, 42); });
    report("quantize (d=2M, q=8)", ts, tp);
  }

  {
    fedq::delay::ChannelProfile ch;
    ch.bandwidth_hz = 20e6;
    ch.tx_power_w = 0.2;
    ch.noise_w = 1e-2;
    ch.rayleigh = true;
    const int samples = 4'000'000;
    double ts = time_best_of(3, [&] { fedq::delay::expected_rate_serial(ch, samples); });
    double tp = time_best_of(3, [&] { fedq::delay::expected_rate(ch, samples); });
    report("expected_rate (4M samples)", ts, tp);
  }

  {
    fedq::fl::TaskSpec spec;
    spec.kind = fedq::fl::TaskKind::logistic;
    spec.num_samples = 4000;
    spec.num_classes = 10;
    spec.feature_dim = 32;
    fedq::fl::LossTask task(spec);
    auto part = fedq::fl::partition_data(task.data(), 16, fedq::fl::PartitionMode::iid, 0.0, 10, 7);
    std::vector<int> q16{16};
    auto devices = fedq::fl::make_devices(part, q16, q16);
    auto w0 = task.initial_params(7);
    fedq::fl::TrainingConfig tc;
    tc.local_iters = 10;
    tc.total_iters = 100;
    tc.batch_size = 32;
    tc.record_metrics = false;
    tc.seed = 7;
    int saved = omp_get_max_threads();
    double ts = time_best_of(3, [&] {
      omp_set_num_threads(1);
      auto dev = devices;
      fedq::fl::train(task, dev, w0, tc);
    });
    omp_set_num_threads(saved);
    double tp = time_best_of(3, [&] {
      auto dev = devices;
      fedq::fl::train(task, dev, w0, tc);
    });
    report("train (16 devices, K=100)", ts, tp);
  }

  {
    fedq::opt::OptFleet fleet;
    fleet.dim = 270000;
    const int N = 4;
    for (int n = 0; n < N; ++n) {
      fleet.beta.push_back({1e-4 * (n + 1), 5e-3});
      fleet.u1.push_back(0.27e6 / 88e6 * (n + 1));
      fleet.u2.push_back(0.0);
      fleet.p.push_back(0.25);
    }
    fedq::opt::ConvergenceCoeffs coeffs{32.3, 0.35, 0.001, 0.06, 0.5};
    auto sets = fedq::opt::FeasibleSets::defaults();
    sets.H.resize(30);
    for (int i = 0; i < 30; ++i) sets.H[i] = i + 1;
    double ts = time_best_of(3, [&] { fedq::opt::brute_force_serial(fleet, coeffs, sets); });
    double tp = time_best_of(3, [&] { fedq::opt::brute_force(fleet, coeffs, sets); });
    report("brute_force (4 classes)", ts, tp);
  }
  return 0;
}
