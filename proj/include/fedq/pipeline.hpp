#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedq/bound.hpp"
#include "fedq/config.hpp"
#include "fedq/optimizer.hpp"

// End-to-end pipelines behind the CLI subcommands. All outputs are plain
// CSV/text files under the chosen output directory, deterministic for a
// fixed seed.

namespace fedq::pipeline {

struct Options {
  std::filesystem::path out_dir;
  bool oracle = false;
};

// Materialized experiment: task, partition, devices with effective
// quantization levels, initial model, resolved per-device delay inputs.
struct Experiment {
  fl::LossTask task;
  fl::PartitionResult part;
  std::vector<fl::DeviceState> devices;
  fl::ModelParams w0;
  delay::CommCoeffs comm;
  std::vector<delay::DeviceDelay> delay_devices;  // empty when no fleet given

  explicit Experiment(const cfg::ExperimentConfig& config);
};

opt::OptFleet fleet_from_config(const cfg::ExperimentConfig& config, const Experiment& exp);
std::vector<int> groups_from_config(const cfg::ExperimentConfig& config);

// simulate: trace.csv, delay.csv (when a fleet is configured), summary.csv,
// model.txt. Returns the executed trace.
fl::TrainingTrace cmd_simulate(const cfg::ExperimentConfig& config, const Options& opts);

// fit: reads summary.csv files matching the glob, fits the convergence
// coefficients, writes coeffs.ini.
opt::FitResult cmd_fit(const cfg::ExperimentConfig& config, const std::string& runs_glob,
                       const Options& opts);

// optimize: strategy.csv + strategy.txt; with opts.oracle also runs the
// brute-force cross-check and reports the gap.
opt::Strategy cmd_optimize(const cfg::ExperimentConfig& config, const Options& opts);

// compare: compare.csv with predicted and (optionally) simulated service
// delay per scheme.
void cmd_compare(const cfg::ExperimentConfig& config, const Options& opts);

// bound: trains with the sqrt(MN/K) schedule, estimates constants, checks
// the convergence bound; writes bound.csv.
bound::BoundReport cmd_bound(const cfg::ExperimentConfig& config, const Options& opts);

}  // namespace fedq::pipeline
