#include "fedq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fedq/io.hpp"

namespace fedq::pipeline {

namespace {

std::vector<int> effective_q(const cfg::ExperimentConfig& config, bool weights) {
  const auto& override_list = weights ? config.train_q_w : config.train_q_g;
  std::vector<int> q;
  if (!override_list.empty()) {
    q = override_list;
  } else if (!config.fleet.empty()) {
    for (const auto& dev : config.fleet) q.push_back(weights ? dev.q_w : dev.q_g);
  } else {
    q.push_back(32);
  }
  if (q.size() != 1 && static_cast<int>(q.size()) != config.num_devices) {
    throw std::invalid_argument("config: q list must have 1 or num_devices entries");
  }
  return q;
}

std::string join_semicolon(std::span<const double> v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ';';
    out += io::format_double(v[i]);
  }
  return out;
}

std::string join_semicolon_int(std::span<const int> v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ';';
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<double> deltas_for(std::span<const int> q, long long dim, quant::DeltaForm form) {
  std::vector<double> d;
  d.reserve(q.size());
  for (int bits : q) d.push_back(quant::delta_coefficient(bits, static_cast<int>(dim), form));
  return d;
}

void ensure_dir(const std::filesystem::path& dir) {
  if (!dir.empty()) std::filesystem::create_directories(dir);
}

}  // namespace

Experiment::Experiment(const cfg::ExperimentConfig& config)
    : task(config.task),
      part(fl::partition_data(task.data(), config.num_devices, config.mode, config.size_std,
                              config.labels_per_device > 0 ? config.labels_per_device
                                                           : task.data().num_classes,
                              rng::derive_key(config.seed, rng::Domain::partition, 777))),
      comm(config.comm_coeffs(task.param_dim())) {
  std::vector<int> qw = effective_q(config, true);
  std::vector<int> qg = effective_q(config, false);
  devices = fl::make_devices(part, qw, qg);
  w0 = task.initial_params(config.seed);
  if (!config.fleet.empty()) {
    for (int n = 0; n < config.num_devices; ++n) {
      delay::DeviceDelay dd;
      dd.compute = config.fleet[n].compute;
      dd.rate_bps = config.device_rate(config.fleet[n]);
      dd.q_w = devices[n].q_w;
      dd.q_g = devices[n].q_g;
      delay_devices.push_back(dd);
    }
  }
}

opt::OptFleet fleet_from_config(const cfg::ExperimentConfig& config, const Experiment& exp) {
  if (exp.delay_devices.empty()) {
    throw std::invalid_argument("config: [fleet] devices are required for this command");
  }
  auto fleet = opt::make_fleet(exp.delay_devices, exp.comm, exp.part.weights,
                               config.training.delta_form);
  bool any_lambda = false;
  for (const auto& dev : config.fleet) any_lambda = any_lambda || dev.lambda > 0.0;
  if (any_lambda) {
    for (const auto& dev : config.fleet) fleet.lambda.push_back(dev.lambda);
  }
  return fleet;
}

std::vector<int> groups_from_config(const cfg::ExperimentConfig& config) {
  std::vector<int> groups;
  bool any = false;
  for (const auto& dev : config.fleet) any = any || dev.group >= 0;
  if (!any) return groups;
  std::map<int, int> remap;
  for (const auto& dev : config.fleet) {
    if (dev.group < 0) {
      throw std::invalid_argument("config: either all or no devices carry group=");
    }
    remap.emplace(dev.group, static_cast<int>(remap.size()));
  }
  for (const auto& dev : config.fleet) groups.push_back(remap.at(dev.group));
  return groups;
}

namespace {

// Per-iteration cumulative delay: each round's straggler delay is spread
// uniformly over the iterations it actually ran.
std::vector<double> cumulative_delay(const fl::TrainingTrace& trace,
                                     const std::vector<double>& round_delay) {
  std::vector<double> cum(trace.round_of_iter.size(), 0.0);
  if (trace.round_of_iter.empty()) return cum;
  std::vector<int> iters_in_round(trace.rounds_executed, 0);
  for (int r : trace.round_of_iter) iters_in_round[r]++;
  double acc = 0.0;
  for (std::size_t k = 0; k < cum.size(); ++k) {
    int r = trace.round_of_iter[k];
    acc += round_delay[r] / iters_in_round[r];
    cum[k] = acc;
  }
  return cum;
}

double round_delay_static(const Experiment& exp, int local_iters) {
  if (exp.delay_devices.empty()) return 0.0;
  auto rep = delay::service_delay(exp.delay_devices, exp.comm, local_iters, local_iters);
  return rep.t_round_s;
}

void write_delay_csv(const std::filesystem::path& path, const cfg::ExperimentConfig& config,
                     const delay::DelayReport& rep) {
  io::CsvWriter csv(path, config.config_hash, config.seed);
  std::vector<std::string> cols{"device", "t_cp_s", "t_cm_s", "t_n_s", "is_straggler"};
  csv.header(cols);
  for (std::size_t n = 0; n < rep.t_n_s.size(); ++n) {
    csv.row(static_cast<int>(n), rep.t_cp_s[n], rep.t_cm_s[n], rep.t_n_s[n],
            static_cast<int>(rep.straggler == static_cast<int>(n)));
  }
}

}  // namespace

fl::TrainingTrace cmd_simulate(const cfg::ExperimentConfig& config, const Options& opts) {
  Experiment exp(config);
  fl::TrainingConfig tc = config.training;
  if (tc.total_iters % tc.local_iters != 0) {
    std::fprintf(stderr,
                 "warning: K=%d is not a multiple of H=%d; the final round is short but is "
                 "charged a full round of delay\n",
                 tc.total_iters, tc.local_iters);
  }
  auto trace = fl::train(exp.task, exp.devices, exp.w0, tc);

  ensure_dir(opts.out_dir);
  double t_round = round_delay_static(exp, tc.local_iters);
  std::vector<double> per_round(trace.rounds_executed, t_round);
  auto cum = cumulative_delay(trace, per_round);

  {
    io::CsvWriter csv(opts.out_dir / "trace.csv", config.config_hash, config.seed);
    std::vector<std::string> cols{"round", "iteration", "loss", "grad_norm_sq",
                                  "cumulative_sim_delay_s"};
    csv.header(cols);
    for (std::size_t k = 0; k < trace.loss.size(); ++k) {
      csv.row(trace.round_of_iter[k], static_cast<long long>(k), trace.loss[k],
              trace.grad_norm_sq[k], cum[k]);
    }
  }

  if (!exp.delay_devices.empty()) {
    auto rep = delay::service_delay(exp.delay_devices, exp.comm, tc.local_iters, tc.total_iters);
    write_delay_csv(opts.out_dir / "delay.csv", config, rep);
  }

  {
    std::vector<int> qw, qg;
    for (const auto& dev : exp.devices) {
      qw.push_back(dev.q_w);
      qg.push_back(dev.q_g);
    }
    long long dim = config.payload_dim(exp.task.param_dim());
    auto dg = deltas_for(qg, dim, config.training.delta_form);
    auto dw = deltas_for(qw, dim, config.training.delta_form);
    io::CsvWriter csv(opts.out_dir / "summary.csv", config.config_hash, config.seed);
    std::vector<std::string> cols{"H",
                                  "K_config",
                                  "M",
                                  "N",
                                  "iters_executed",
                                  "rounds_executed",
                                  "reached",
                                  "eps_target",
                                  "final_loss",
                                  "mean_grad_norm_sq",
                                  "dim",
                                  "delta_form",
                                  "p",
                                  "q_g",
                                  "q_w",
                                  "delta_g",
                                  "delta_w"};
    csv.header(cols);
    csv.row(tc.local_iters, static_cast<long long>(tc.total_iters), tc.batch_size,
            trace.num_devices, static_cast<long long>(trace.iterations_executed),
            static_cast<long long>(trace.rounds_executed),
            static_cast<int>(trace.early_stopped), tc.eps_target,
            trace.loss.empty() ? std::numeric_limits<double>::quiet_NaN() : trace.loss.back(),
            trace.mean_grad_norm_sq(), dim,
            std::string(config.training.delta_form == quant::DeltaForm::halved ? "halved"
                                                                               : "unhalved"),
            join_semicolon(exp.part.weights), join_semicolon_int(qg), join_semicolon_int(qw),
            join_semicolon(dg), join_semicolon(dw));
  }

  io::write_checkpoint(opts.out_dir / "model.txt", trace.final_model, config.seed,
                       trace.rounds_executed);
  return trace;
}

namespace {

struct SummaryRow {
  std::map<std::string, std::string> cells;

  double real(const std::string& key) const { return std::stod(cells.at(key)); }
  std::vector<double> list(const std::string& key) const {
    std::vector<double> out;
    std::istringstream in(cells.at(key));
    std::string tok;
    while (std::getline(in, tok, ';')) out.push_back(std::stod(tok));
    return out;
  }
};

SummaryRow read_summary(const std::filesystem::path& path) {
  std::string text = io::read_file(path);
  std::istringstream in(text);
  std::string line, header, data;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header.empty()) {
      header = line;
    } else {
      data = line;
      break;
    }
  }
  if (header.empty() || data.empty()) {
    throw std::runtime_error("malformed summary file: " + path.string());
  }
  auto split_commas = [](const std::string& s) {
    std::vector<std::string> out;
    std::istringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(tok);
    return out;
  };
  auto keys = split_commas(header);
  auto vals = split_commas(data);
  if (keys.size() != vals.size()) {
    throw std::runtime_error("malformed summary row: " + path.string());
  }
  SummaryRow row;
  for (std::size_t i = 0; i < keys.size(); ++i) row.cells[keys[i]] = vals[i];
  return row;
}

}  // namespace

opt::FitResult cmd_fit(const cfg::ExperimentConfig& config, const std::string& runs_glob,
                       const Options& opts) {
  auto files = io::glob_files(runs_glob);
  if (files.empty()) {
    throw std::invalid_argument("fit: no run summaries match " + runs_glob);
  }
  std::vector<opt::FitRun> runs;
  std::vector<double> p;
  double eps = -1.0;
  int N = 0;
  int skipped = 0;
  for (const auto& file : files) {
    auto row = read_summary(file);
    if (row.real("reached") == 0.0) {
      ++skipped;
      continue;
    }
    opt::FitRun run;
    run.local_iters = row.real("H");
    run.delta_g = row.list("delta_g");
    run.delta_w = row.list("delta_w");
    run.observed_K = row.real("iters_executed");
    auto pn = row.list("p");
    double row_eps = row.real("eps_target");
    if (runs.empty()) {
      p = pn;
      N = static_cast<int>(pn.size());
      eps = row_eps;
    } else if (pn != p || row_eps != eps) {
      throw std::invalid_argument("fit: run " + file.string() +
                                  " has different weights or eps target than the others");
    }
    runs.push_back(std::move(run));
  }
  if (skipped > 0) {
    std::fprintf(stderr, "warning: fit skipped %d run(s) that did not reach the target\n",
                 skipped);
  }
  auto fit = opt::fit_coefficients(runs, eps, N, p);

  ensure_dir(opts.out_dir);
  std::ofstream out(opts.out_dir / "coeffs.ini", std::ios::binary);
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(config.config_hash));
  out << "# fitted from " << runs.size() << " runs, rel_residual=" << io::format_double(fit.rel_residual)
      << " config_hash=" << hash << "\n";
  out << "[coeffs]\n";
  out << "A1 = " << io::format_double(fit.coeffs.A1) << "\n";
  out << "A0 = " << io::format_double(fit.coeffs.A0) << "\n";
  out << "B0 = " << io::format_double(fit.coeffs.B0) << "\n";
  out << "C0 = " << io::format_double(fit.coeffs.C0) << "\n";
  out << "eps = " << io::format_double(fit.coeffs.eps) << "\n";
  return fit;
}

namespace {

void write_strategy_files(const cfg::ExperimentConfig& config, const Experiment& exp,
                          const opt::OptFleet& fleet, const opt::Strategy& s,
                          const std::optional<opt::Strategy>& oracle,
                          const opt::RelaxedSolution* relaxed, const Options& opts) {
  ensure_dir(opts.out_dir);
  {
    io::CsvWriter csv(opts.out_dir / "strategy.csv", config.config_hash, config.seed);
    csv.comment("H=" + std::to_string(s.H) + " K=" + std::to_string(s.K) +
                " rounds=" + std::to_string(s.rounds) +
                " t_round_s=" + io::format_double(s.t_round_s) +
                " t_total_s=" + io::format_double(s.t_total_s));
    std::vector<std::string> cols{"device", "q_w", "q_g", "t_cp_s", "t_cm_s", "t_n_s",
                                  "is_straggler"};
    csv.header(cols);
    int straggler = 0;
    double worst = -1.0;
    std::vector<double> tn(fleet.num_devices());
    for (int n = 0; n < fleet.num_devices(); ++n) {
      double cp = delay::compute_delay_simplified(fleet.beta[n], s.q_w[n], s.H);
      double cm = fleet.u1[n] * s.q_g[n] + fleet.u2[n];
      tn[n] = cp + cm;
      if (tn[n] > worst) {
        worst = tn[n];
        straggler = n;
      }
    }
    for (int n = 0; n < fleet.num_devices(); ++n) {
      double cp = delay::compute_delay_simplified(fleet.beta[n], s.q_w[n], s.H);
      double cm = fleet.u1[n] * s.q_g[n] + fleet.u2[n];
      csv.row(n, s.q_w[n], s.q_g[n], cp, cm, tn[n], static_cast<int>(n == straggler));
    }
  }
  {
    std::ofstream out(opts.out_dir / "strategy.txt", std::ios::binary);
    out << "strategy report\n";
    out << "  shared local iterations H = " << s.H << "\n";
    out << "  iterations to target    K = " << s.K
        << " (continuous: " << io::format_double(s.K_real) << ")\n";
    out << "  rounds                    = " << s.rounds << "\n";
    out << "  per-round delay         T = " << io::format_double(s.t_round_s) << " s\n";
    out << "  predicted total     T_tot = " << io::format_double(s.t_total_s) << " s\n";
    out << "  per-device (q_w, q_g): ";
    for (int n = 0; n < fleet.num_devices(); ++n) {
      out << (n ? ", " : "") << "dev" << n << "=(" << s.q_w[n] << "," << s.q_g[n] << ")";
    }
    out << "\n";
    if (relaxed) {
      out << "  relaxed objective = " << io::format_double(relaxed->objective)
          << " s (kkt residual " << io::format_double(relaxed->kkt_residual) << ", "
          << relaxed->outer_iterations << " refits)\n";
    }
    if (oracle) {
      double gap = oracle->t_total_s > 0.0 ? s.t_total_s / oracle->t_total_s - 1.0 : 0.0;
      out << "  oracle (brute force) T_tot = " << io::format_double(oracle->t_total_s)
          << " s, gap = " << io::format_double(100.0 * gap) << "%\n";
    }
    out << "  task dim = " << exp.task.param_dim()
        << ", payload dim = " << config.payload_dim(exp.task.param_dim()) << "\n";
  }
}

}  // namespace

opt::Strategy cmd_optimize(const cfg::ExperimentConfig& config, const Options& opts) {
  if (!config.coeffs) {
    throw std::invalid_argument("optimize: [coeffs] A1..C0 and eps are required");
  }
  Experiment exp(config);
  auto fleet = fleet_from_config(config, exp);
  opt::RelaxedSolution relaxed;
  bool have_relaxed = false;
  try {
    relaxed = opt::solve_relaxed(fleet, *config.coeffs, config.sets);
    have_relaxed = true;
  } catch (const opt::solver_failure_error&) {
  }
  auto strategy = opt::optimize_strategy(fleet, *config.coeffs, config.sets);
  std::optional<opt::Strategy> oracle;
  if (opts.oracle) {
    oracle = opt::brute_force(fleet, *config.coeffs, config.sets, groups_from_config(config));
  }
  write_strategy_files(config, exp, fleet, strategy, oracle, have_relaxed ? &relaxed : nullptr,
                       opts);
  return strategy;
}

namespace {

struct SimResult {
  long long rounds = 0;
  long long iters = 0;
  double sim_delay_s = 0.0;
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  bool reached = false;
};

// Runs the training loop under a strategy (or the adah schedule) and charges
// each executed round its straggler delay.
SimResult simulate_scheme(const cfg::ExperimentConfig& config, const Experiment& exp, int H,
                          std::span<const int> q_w, std::span<const int> q_g,
                          const std::function<int(int, double)>& dynamic_h) {
  auto devices = exp.devices;
  for (std::size_t n = 0; n < devices.size(); ++n) {
    devices[n].q_w = q_w.size() == 1 ? q_w[0] : q_w[n];
    devices[n].q_g = q_g.size() == 1 ? q_g[0] : q_g[n];
  }
  fl::TrainingConfig tc = config.training;
  tc.local_iters = H;
  tc.record_metrics = true;
  tc.early_stop = tc.eps_target > 0.0;
  tc.dynamic_h = dynamic_h;
  auto trace = fl::train(exp.task, devices, exp.w0, tc);

  SimResult res;
  res.rounds = trace.rounds_executed;
  res.iters = trace.iterations_executed;
  res.reached = trace.early_stopped;
  res.final_loss = trace.loss.empty() ? std::numeric_limits<double>::quiet_NaN()
                                      : trace.loss.back();
  if (!exp.delay_devices.empty()) {
    auto dd = exp.delay_devices;
    for (std::size_t n = 0; n < dd.size(); ++n) {
      dd[n].q_w = devices[n].q_w;
      dd[n].q_g = devices[n].q_g;
    }
    std::vector<int> iters_in_round(trace.rounds_executed, 0);
    for (int r : trace.round_of_iter) iters_in_round[r]++;
    for (int r = 0; r < trace.rounds_executed; ++r) {
      int h_r = dynamic_h ? std::max(1, iters_in_round[r]) : H;
      auto rep = delay::service_delay(dd, exp.comm, h_r, h_r);
      res.sim_delay_s += rep.t_round_s;
    }
  }
  return res;
}

}  // namespace

void cmd_compare(const cfg::ExperimentConfig& config, const Options& opts) {
  if (!config.coeffs) {
    throw std::invalid_argument("compare: [coeffs] A1..C0 and eps are required");
  }
  Experiment exp(config);
  auto fleet = fleet_from_config(config, exp);

  struct Row {
    std::string scheme;
    std::optional<opt::Strategy> strategy;  // static schemes
    bool adah = false;
  };
  std::vector<Row> rows;
  rows.push_back({"sdefl", opt::optimize_strategy(fleet, *config.coeffs, config.sets), false});
  if (opts.oracle) {
    rows.push_back({"brute_force",
                    opt::brute_force(fleet, *config.coeffs, config.sets,
                                     groups_from_config(config)),
                    false});
  }
  for (const auto& name : config.baselines) {
    auto kind = opt::baseline_from_string(name);
    if (kind == opt::BaselineKind::adah) {
      rows.push_back({"adah", std::nullopt, true});
    } else {
      rows.push_back({name, opt::baseline(kind, fleet, *config.coeffs, config.sets), false});
    }
  }

  ensure_dir(opts.out_dir);
  io::CsvWriter csv(opts.out_dir / "compare.csv", config.config_hash, config.seed);
  std::vector<std::string> cols{"scheme",     "H",         "q_w",        "q_g",
                                "K_pred",     "T_pred_s",  "rounds_sim", "iters_sim",
                                "T_sim_s",    "final_loss", "reached"};
  csv.header(cols);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& row : rows) {
    std::vector<int> qw(exp.devices.size(), 32), qg(exp.devices.size(), 32);
    int H = config.training.local_iters;
    double t_pred = nan;
    long long k_pred = 0;
    if (row.strategy) {
      qw = row.strategy->q_w;
      qg = row.strategy->q_g;
      H = row.strategy->H;
      t_pred = row.strategy->t_total_s;
      k_pred = row.strategy->K;
    }
    SimResult sim;
    if (config.compare_simulate) {
      sim = simulate_scheme(config, exp, row.adah ? opt::adah_schedule()(0, 1.0) : H, qw, qg,
                            row.adah ? opt::adah_schedule() : std::function<int(int, double)>{});
    }
    csv.row(row.scheme, H, join_semicolon_int(qw), join_semicolon_int(qg), k_pred, t_pred,
            sim.rounds, sim.iters, sim.sim_delay_s, sim.final_loss,
            static_cast<int>(sim.reached));
  }
}

bound::BoundReport cmd_bound(const cfg::ExperimentConfig& config, const Options& opts) {
  Experiment exp(config);
  fl::TrainingConfig tc = config.training;
  tc.schedule = fl::LrSchedule::sqrt_mn_over_k;
  tc.record_metrics = true;
  tc.early_stop = false;
  auto devices = exp.devices;
  auto trace = fl::train(exp.task, devices, exp.w0, tc);

  fl::ProbeConfig probe;
  probe.seed = rng::derive_key(config.seed, rng::Domain::probe, 99);
  probe.batch_size = tc.batch_size;
  auto est = fl::estimate_constants(exp.task, devices, exp.w0, probe);
  auto consts = bound::from_estimates(est, exp.task.param_dim(), tc.batch_size,
                                      exp.part.weights);

  std::vector<int> qw, qg;
  for (const auto& dev : exp.devices) {
    qw.push_back(dev.q_w);
    qg.push_back(dev.q_g);
  }
  auto dg = deltas_for(qg, exp.task.param_dim(), config.training.delta_form);
  auto dw = deltas_for(qw, exp.task.param_dim(), config.training.delta_form);
  auto rep = bound::check_bound(trace, consts, dg, dw);

  ensure_dir(opts.out_dir);
  io::CsvWriter csv(opts.out_dir / "bound.csv", config.config_hash, config.seed);
  std::vector<std::string> cols{"K",     "H",     "lhs",   "rhs",   "term1",
                                "term2", "term3", "term4", "holds", "validity_warnings"};
  csv.header(cols);
  std::string warn;
  for (std::size_t i = 0; i < rep.warnings.size(); ++i) {
    if (i) warn += ';';
    warn += rep.warnings[i];
  }
  csv.row(static_cast<long long>(tc.total_iters), tc.local_iters, rep.lhs, rep.rhs,
          rep.terms.term1, rep.terms.term2, rep.terms.term3, rep.terms.term4,
          static_cast<int>(rep.holds), warn);
  return rep;
}

}  // namespace fedq::pipeline
