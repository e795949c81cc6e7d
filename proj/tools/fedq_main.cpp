#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>

#include <omp.h>

#include "CLI11.hpp"
#include "fedq/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  int threads = 0;
  bool oracle = false;
};

void add_common(CLI::App* sub, CommonArgs& args, bool with_oracle) {
  sub->add_option("--config", args.config_path, "experiment config file")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", args.seed, "override the config seed");
  sub->add_option("--out", args.out_dir, "output directory (overrides FEDQ_OUT and config)");
  sub->add_option("--threads", args.threads, "OpenMP thread count (must not affect results)");
  if (with_oracle) {
    sub->add_flag("--oracle", args.oracle, "cross-check against the brute-force oracle");
  }
}

fedq::pipeline::Options make_options(const CommonArgs& args,
                                     const fedq::cfg::ExperimentConfig& config) {
  fedq::pipeline::Options opts;
  if (!args.out_dir.empty()) {
    opts.out_dir = args.out_dir;
  } else if (const char* env = std::getenv("FEDQ_OUT"); env && *env) {
    opts.out_dir = env;
  } else {
    opts.out_dir = config.out_dir;
  }
  opts.oracle = args.oracle;
  return opts;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedq: deterministic simulator and strategy optimizer for quantized federated "
               "learning"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string runs_glob;

  auto* simulate = app.add_subcommand("simulate", "run the training loop, export trace and delay");
  add_common(simulate, args, false);
  auto* fit = app.add_subcommand("fit", "fit convergence coefficients from run summaries");
  add_common(fit, args, false);
  fit->add_option("--runs", runs_glob, "glob of summary.csv files")->required();
  auto* optimize = app.add_subcommand("optimize", "solve for the delay-minimal strategy");
  add_common(optimize, args, true);
  auto* compare = app.add_subcommand("compare", "compare the optimized strategy with baselines");
  add_common(compare, args, true);
  auto* bound_cmd = app.add_subcommand("bound", "empirical convergence-bound check");
  add_common(bound_cmd, args, false);

  CLI11_PARSE(app, argc, argv);

  if (args.threads > 0) omp_set_num_threads(args.threads);

  try {
    auto config = fedq::cfg::load_experiment_file(args.config_path, args.seed);
    auto opts = make_options(args, config);
    if (simulate->parsed()) {
      auto trace = fedq::pipeline::cmd_simulate(config, opts);
      std::printf("simulate: %d iterations, %d rounds%s -> %s\n", trace.iterations_executed,
                  trace.rounds_executed, trace.early_stopped ? " (target reached)" : "",
                  opts.out_dir.string().c_str());
    } else if (fit->parsed()) {
      auto res = fedq::pipeline::cmd_fit(config, runs_glob, opts);
      std::printf("fit: A1=%g A0=%g B0=%g C0=%g rel_residual=%g -> %s\n", res.coeffs.A1,
                  res.coeffs.A0, res.coeffs.B0, res.coeffs.C0, res.rel_residual,
                  (opts.out_dir / "coeffs.ini").string().c_str());
    } else if (optimize->parsed()) {
      auto s = fedq::pipeline::cmd_optimize(config, opts);
      std::printf("optimize: H=%d K=%lld T_tot=%g s -> %s\n", s.H, s.K, s.t_total_s,
                  opts.out_dir.string().c_str());
    } else if (compare->parsed()) {
      fedq::pipeline::cmd_compare(config, opts);
      std::printf("compare -> %s\n", (opts.out_dir / "compare.csv").string().c_str());
    } else if (bound_cmd->parsed()) {
      auto rep = fedq::pipeline::cmd_bound(config, opts);
      std::printf("bound: lhs=%g rhs=%g holds=%d -> %s\n", rep.lhs, rep.rhs,
                  static_cast<int>(rep.holds), (opts.out_dir / "bound.csv").string().c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
