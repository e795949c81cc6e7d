#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "fedq/config.hpp"
#include "fedq/io.hpp"
#include "fedq/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fedq;

namespace {

const char* kSimulateConfig = R"(
seed = 42
[task]
kind = quadratic
samples = 120
classes = 4
features = 6
curvature_min = 0.5
curvature_max = 1.2
[partition]
devices = 3
mode = iid
[fleet]
s1 = 1.0
s0 = 0.0
device = rate=88e6 beta1=2e-4 beta0=8e-3 qw=16 qg=8 lambda=0.4
device = rate=44e6 beta1=3e-4 beta0=6e-3 qw=16 qg=8 lambda=0.3
device = rate=22e6 beta1=4e-4 beta0=9e-3 qw=32 qg=16 lambda=0.3
[training]
H = 4
K = 40
batch = 8
lr = 0.1
[coeffs]
A1 = 30.0
A0 = 0.3
B0 = 0.001
C0 = 0.05
eps = 0.5
[output]
dir = out
)";

fs::path write_temp_config(const std::string& name, const std::string& body) {
  fs::path dir = fs::temp_directory_path() / "fedq-cli-tests";
  fs::create_directories(dir);
  fs::path p = dir / name;
  std::ofstream out(p, std::ios::binary);
  out << body;
  return p;
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(FEDQ_BIN) + " " + args + " >/dev/null 2>/dev/null";
  int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) { return io::read_file(p); }

}  // namespace

TEST_CASE("ini parsing: sections, repeats, ranges, errors") {
  auto ini = cfg::Ini::parse_string("seed = 7\n[task]\nkind = mlp\n# comment\n[sets]\nH = 1:4\n"
                                    "[fleet]\ndevice = rate=1e6\ndevice = rate=2e6\n");
  CHECK(ini.integer("", "seed") == 7);
  CHECK(ini.get("task", "kind") == "mlp");
  CHECK(cfg::parse_int_list(ini.get("sets", "H")) == std::vector<int>{1, 2, 3, 4});
  CHECK(ini.all("fleet", "device").size() == 2);
  CHECK(cfg::parse_int_list("2,3,8") == std::vector<int>{2, 3, 8});
  CHECK_THROWS_AS(cfg::Ini::parse_string("novalue\n"), std::invalid_argument);
  CHECK_THROWS_AS(cfg::Ini::parse_string("[task\nk = v\n"), std::invalid_argument);
}

TEST_CASE("config requires a seed and consistent fleet size") {
  CHECK_THROWS_AS(cfg::load_experiment(cfg::Ini::parse_string("[task]\nkind = quadratic\n")),
                  std::invalid_argument);
  auto bad = std::string("seed = 1\n[partition]\ndevices = 2\n[fleet]\ndevice = rate=1e6\n");
  CHECK_THROWS_AS(cfg::load_experiment(cfg::Ini::parse_string(bad)), std::invalid_argument);
}

TEST_CASE("simulate writes a trace with one row per iteration") {
  auto cfgfile = write_temp_config("sim.ini", kSimulateConfig);
  fs::path out = fs::temp_directory_path() / "fedq-cli-tests" / "sim-out";
  fs::remove_all(out);
  REQUIRE(run_cli("simulate --config " + cfgfile.string() + " --out " + out.string()) == 0);
  auto trace = slurp(out / "trace.csv");
  // header comment + column header + 40 rows
  CHECK(std::count(trace.begin(), trace.end(), '\n') == 42);
  CHECK(trace.find("round,iteration,loss,grad_norm_sq,cumulative_sim_delay_s") !=
        std::string::npos);
  CHECK(fs::exists(out / "delay.csv"));
  CHECK(fs::exists(out / "summary.csv"));
  auto ck = io::read_checkpoint(out / "model.txt");
  CHECK(ck.values.size() == 6);
  CHECK(ck.seed == 42);
}

TEST_CASE("simulate is byte-identical across reruns and thread counts") {
  auto cfgfile = write_temp_config("sim.ini", kSimulateConfig);
  fs::path out1 = fs::temp_directory_path() / "fedq-cli-tests" / "det-1";
  fs::path out2 = fs::temp_directory_path() / "fedq-cli-tests" / "det-2";
  fs::path out3 = fs::temp_directory_path() / "fedq-cli-tests" / "det-3";
  for (const auto& p : {out1, out2, out3}) fs::remove_all(p);
  REQUIRE(run_cli("simulate --config " + cfgfile.string() + " --out " + out1.string() +
                  " --threads 1") == 0);
  REQUIRE(run_cli("simulate --config " + cfgfile.string() + " --out " + out2.string() +
                  " --threads 4") == 0);
  REQUIRE(run_cli("simulate --config " + cfgfile.string() + " --out " + out3.string()) == 0);
  for (const char* name : {"trace.csv", "delay.csv", "summary.csv", "model.txt"}) {
    CHECK(slurp(out1 / name) == slurp(out2 / name));
    CHECK(slurp(out1 / name) == slurp(out3 / name));
  }
}

TEST_CASE("seed override changes outputs; FEDQ_OUT is honored") {
  auto cfgfile = write_temp_config("sim.ini", kSimulateConfig);
  fs::path out1 = fs::temp_directory_path() / "fedq-cli-tests" / "seed-a";
  fs::path out2 = fs::temp_directory_path() / "fedq-cli-tests" / "seed-b";
  fs::remove_all(out1);
  fs::remove_all(out2);
  REQUIRE(run_cli("simulate --config " + cfgfile.string() + " --out " + out1.string()) == 0);
  REQUIRE(run_cli("simulate --config " + cfgfile.string() + " --out " + out2.string() +
                  " --seed 43") == 0);
  CHECK(slurp(out1 / "trace.csv") != slurp(out2 / "trace.csv"));

  fs::path envout = fs::temp_directory_path() / "fedq-cli-tests" / "env-out";
  fs::remove_all(envout);
  std::string cmd = "FEDQ_OUT=" + envout.string() + " " + FEDQ_BIN + " simulate --config " +
                    cfgfile.string() + " >/dev/null 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  CHECK(fs::exists(envout / "trace.csv"));
}

TEST_CASE("optimize: singleton sets echo the single point; oracle flag works") {
  std::string body = std::string(kSimulateConfig) + "[sets]\nH = 4\nq_g = 8\nq_w = 16\n";
  auto cfgfile = write_temp_config("opt.ini", body);
  fs::path out = fs::temp_directory_path() / "fedq-cli-tests" / "opt-out";
  fs::remove_all(out);
  REQUIRE(run_cli("optimize --config " + cfgfile.string() + " --out " + out.string() +
                  " --oracle") == 0);
  auto text = slurp(out / "strategy.txt");
  CHECK(text.find("H = 4") != std::string::npos);
  CHECK(text.find("oracle") != std::string::npos);
  auto csv = slurp(out / "strategy.csv");
  CHECK(csv.find("device,q_w,q_g") != std::string::npos);
}

TEST_CASE("optimize with unreachable eps exits nonzero with a diagnostic") {
  std::string body = kSimulateConfig;
  auto pos = body.find("eps = 0.5");
  body.replace(pos, 9, "eps = 1e-12");
  auto cfgfile = write_temp_config("opt-bad.ini", body);
  fs::path out = fs::temp_directory_path() / "fedq-cli-tests" / "opt-bad";
  std::string cmd = std::string(FEDQ_BIN) + " optimize --config " + cfgfile.string() + " --out " +
                    out.string() + " 2> " + (out.string() + ".err");
  fs::create_directories(out);
  int rc = WEXITSTATUS(std::system(cmd.c_str()));
  CHECK(rc != 0);
  auto err = slurp(out.string() + ".err");
  CHECK(err.find("error:") != std::string::npos);
  CHECK(err.find("infeasible") != std::string::npos);
}

TEST_CASE("optimize determinism across thread counts") {
  auto cfgfile = write_temp_config("sim.ini", kSimulateConfig);
  fs::path out1 = fs::temp_directory_path() / "fedq-cli-tests" / "optdet-1";
  fs::path out2 = fs::temp_directory_path() / "fedq-cli-tests" / "optdet-2";
  fs::remove_all(out1);
  fs::remove_all(out2);
  REQUIRE(run_cli("optimize --config " + cfgfile.string() + " --out " + out1.string() +
                  " --threads 1") == 0);
  REQUIRE(run_cli("optimize --config " + cfgfile.string() + " --out " + out2.string() +
                  " --threads 3") == 0);
  CHECK(slurp(out1 / "strategy.csv") == slurp(out2 / "strategy.csv"));
  CHECK(slurp(out1 / "strategy.txt") == slurp(out2 / "strategy.txt"));
}

TEST_CASE("compare emits one row per scheme with the dominance property") {
  std::string body = std::string(kSimulateConfig) +
                     "[compare]\nbaselines = ifedavg,fedpaq,quwg_pro,adah\nsimulate = false\n";
  auto cfgfile = write_temp_config("cmp.ini", body);
  fs::path out = fs::temp_directory_path() / "fedq-cli-tests" / "cmp-out";
  fs::remove_all(out);
  REQUIRE(run_cli("compare --config " + cfgfile.string() + " --out " + out.string()) == 0);
  auto csv = slurp(out / "compare.csv");
  CHECK(csv.find("sdefl") != std::string::npos);
  CHECK(csv.find("ifedavg") != std::string::npos);
  CHECK(csv.find("adah") != std::string::npos);

  // sdefl's predicted T_tot is the smallest among the static schemes
  std::istringstream in(csv);
  std::string line;
  double sdefl = -1.0;
  std::vector<double> preds;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("scheme", 0) == 0) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells[0] == "adah") continue;
    double pred = std::stod(cells[5]);
    if (cells[0] == "sdefl") {
      sdefl = pred;
    } else {
      preds.push_back(pred);
    }
  }
  REQUIRE(sdefl > 0.0);
  REQUIRE(preds.size() == 3);
  for (double p : preds) CHECK(sdefl <= p * (1.0 + 1e-12));
}

TEST_CASE("fit pipeline round-trips coefficients from simulated summaries") {
  // Synthetic summaries written directly: exact Eq.-14 data.
  fs::path dir = fs::temp_directory_path() / "fedq-cli-tests" / "fit-runs";
  fs::remove_all(dir);
  fs::create_directories(dir);
  opt::ConvergenceCoeffs truth{25.0, 0.25, 0.002, 0.04, 0.3};
  std::vector<double> p{0.5, 0.5};
  const long long dim = 40000;
  int idx = 0;
  for (int H : {2, 6, 12, 24}) {
    for (int qg : {4, 8, 32}) {
      for (int qw : {8, 32}) {
        double dg = quant::delta_coefficient(qg, dim);
        double dw = quant::delta_coefficient(qw, dim);
        std::vector<double> dgv{dg, dg}, dwv{dw, dw};
        double K = opt::required_iterations(truth, H, p, dgv, dwv);
        std::ofstream out(dir / ("summary-" + std::to_string(idx++) + ".csv"));
        out << "# config_hash=0 seed=1\n";
        out << "H,K_config,M,N,iters_executed,rounds_executed,reached,eps_target,final_loss,"
               "mean_grad_norm_sq,dim,delta_form,p,q_g,q_w,delta_g,delta_w\n";
        out << H << ",100,8,2," << io::format_double(K) << ",1,1,"
            << io::format_double(truth.eps) << ",0.1,0.01," << dim << ",halved,"
            << "0.5;0.5," << qg << ";" << qg << "," << qw << ";" << qw << ","
            << io::format_double(dg) << ";" << io::format_double(dg) << ","
            << io::format_double(dw) << ";" << io::format_double(dw) << "\n";
      }
    }
  }
  auto cfgfile = write_temp_config("fit.ini", kSimulateConfig);
  fs::path out = fs::temp_directory_path() / "fedq-cli-tests" / "fit-out";
  fs::remove_all(out);
  REQUIRE(run_cli("fit --config " + cfgfile.string() + " --runs '" + (dir / "summary-*.csv").string() +
                  "' --out " + out.string()) == 0);
  auto ini = cfg::Ini::parse_file((out / "coeffs.ini").string());
  CHECK(ini.real("coeffs", "A1") == doctest::Approx(truth.A1).epsilon(1e-5));
  CHECK(ini.real("coeffs", "A0") == doctest::Approx(truth.A0).epsilon(1e-5));
  CHECK(ini.real("coeffs", "B0") == doctest::Approx(truth.B0).epsilon(1e-5));
  CHECK(ini.real("coeffs", "C0") == doctest::Approx(truth.C0).epsilon(1e-5));
}

TEST_CASE("bound subcommand writes a report") {
  std::string body = R"(
seed = 11
[task]
kind = quadratic
samples = 200
classes = 4
features = 12
curvature_min = 0.02
curvature_max = 0.1
[partition]
devices = 2
mode = iid
[training]
H = 5
K = 400
batch = 8
q_w = 16
q_g = 8
[output]
dir = out
)";
  auto cfgfile = write_temp_config("bound.ini", body);
  fs::path out = fs::temp_directory_path() / "fedq-cli-tests" / "bound-out";
  fs::remove_all(out);
  REQUIRE(run_cli("bound --config " + cfgfile.string() + " --out " + out.string()) == 0);
  auto csv = slurp(out / "bound.csv");
  CHECK(csv.find("K,H,lhs,rhs,term1,term2,term3,term4,holds,validity_warnings") !=
        std::string::npos);
}

TEST_CASE("K not a multiple of H warns but succeeds") {
  std::string body = kSimulateConfig;
  auto pos = body.find("K = 40");
  body.replace(pos, 6, "K = 41");
  auto cfgfile = write_temp_config("warn.ini", body);
  fs::path out = fs::temp_directory_path() / "fedq-cli-tests" / "warn-out";
  fs::remove_all(out);
  fs::create_directories(out);
  std::string cmd = std::string(FEDQ_BIN) + " simulate --config " + cfgfile.string() + " --out " +
                    out.string() + " 2> " + (out / "stderr.txt").string() + " >/dev/null";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  auto err = slurp(out / "stderr.txt");
  CHECK(err.find("warning") != std::string::npos);
  CHECK(err.find("not a multiple") != std::string::npos);
}
