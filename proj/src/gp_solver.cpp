// Relaxed strategy selection as a geometric program in log variables.
//
// Variables y = log(H, v_g_1..N, v_w_1..N, phi, psi). The convergence
// constraint is posynomial exactly (delta = c_d * v); the bit-width factors
// q(v) = log2(1 + 1/v) in the delay constraint are replaced by monomials
// kappa * v^-a tangent to q in log-log space at the current expansion point.
// log q is concave in log v, so the monomial majorizes q everywhere and each
// refit is a majorize-minimize step: iterates stay feasible for the true
// constraints and the true objective is non-increasing across refits.
//
// Each inner problem (log-sum-exp constraints, linear objective) is solved
// with a log-barrier damped-Newton method on y_psi + Phi(y)/t. Variables
// whose feasible set is a single member are fixed and eliminated.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedq/optimizer.hpp"
#include "opt_internal.hpp"

namespace fedq::opt {

namespace {

constexpr double kLn2 = 0.6931471805599453;

struct Term {
  double logc = 0.0;
  std::array<std::pair<int, double>, 4> ex{};  // (variable index, exponent)
  int nex = 0;
};

struct Constraint {
  std::vector<Term> terms;
};

struct Monomial {
  double a = 1.0;  // exponent: q ~ kappa * v^-a
  double log_kappa = 0.0;
};

// Tangent monomial of q(v) = log2(1 + 1/v) in log-log space at v0.
Monomial tangent_monomial(double v0) {
  double q0 = detail::q_of_v(v0);
  Monomial m;
  m.a = 1.0 / (kLn2 * q0 * (v0 + 1.0));
  m.log_kappa = std::log(q0) + m.a * std::log(v0);
  return m;
}

struct Problem {
  int num_vars = 0;
  int psi_index = 0;
  std::vector<Constraint> constraints;
  std::vector<char> is_fixed;  // fixed variables are folded into logc

  // Adds c * prod x_i^e_i; exponents on fixed variables fold into the
  // coefficient using the values in `fixed`.
  void add_term(Constraint& con, double coef,
                std::initializer_list<std::pair<int, double>> exps,
                const std::vector<double>& fixed_value) {
    Term t;
    t.logc = std::log(coef);
    for (auto [var, e] : exps) {
      if (is_fixed[var]) {
        t.logc += e * fixed_value[var];
      } else {
        t.ex[t.nex++] = {var, e};
      }
    }
    con.terms.push_back(t);
  }

  double eval(const Constraint& con, const Eigen::VectorXd& y) const {
    double smax = -std::numeric_limits<double>::infinity();
    for (const auto& t : con.terms) {
      double s = t.logc;
      for (int i = 0; i < t.nex; ++i) s += t.ex[i].second * y(t.ex[i].first);
      smax = std::max(smax, s);
    }
    double acc = 0.0;
    for (const auto& t : con.terms) {
      double s = t.logc;
      for (int i = 0; i < t.nex; ++i) s += t.ex[i].second * y(t.ex[i].first);
      acc += std::exp(s - smax);
    }
    return smax + std::log(acc);
  }

  bool feasible(const Eigen::VectorXd& y, double slack = 0.0) const {
    for (const auto& con : constraints) {
      if (!(eval(con, y) < -slack)) return false;
    }
    return true;
  }

  // B_t(y) = y[psi] + Phi(y) / t with Phi the log barrier; +inf if
  // infeasible. Keeping the objective term at unit scale keeps line-search
  // decrements measurable at large t.
  double barrier(double t, const Eigen::VectorXd& y) const {
    double phi = 0.0;
    for (const auto& con : constraints) {
      double g = eval(con, y);
      if (!(g < 0.0)) return std::numeric_limits<double>::infinity();
      phi -= std::log(-g);
    }
    return y(psi_index) + phi / t;
  }

  void barrier_derivatives(double t, const Eigen::VectorXd& y, Eigen::VectorXd& grad,
                           Eigen::MatrixXd& hess) const {
    grad.setZero(num_vars);
    hess.setZero(num_vars, num_vars);
    grad(psi_index) += 1.0;
    Eigen::VectorXd gj(num_vars);
    for (const auto& con : constraints) {
      double smax = -std::numeric_limits<double>::infinity();
      std::vector<double> s(con.terms.size());
      for (std::size_t i = 0; i < con.terms.size(); ++i) {
        const auto& term = con.terms[i];
        double v = term.logc;
        for (int k = 0; k < term.nex; ++k) v += term.ex[k].second * y(term.ex[k].first);
        s[i] = v;
        smax = std::max(smax, v);
      }
      double z = 0.0;
      for (double v : s) z += std::exp(v - smax);
      double g = smax + std::log(z);

      gj.setZero();
      for (std::size_t i = 0; i < con.terms.size(); ++i) {
        const auto& term = con.terms[i];
        double w = std::exp(s[i] - smax) / z;
        for (int k = 0; k < term.nex; ++k) gj(term.ex[k].first) += w * term.ex[k].second;
      }
      // d(-log(-g))/t: grad gj/(t(-g)); hess (sum w a a^T - gj gj^T)/(t(-g))
      // + gj gj^T/(t g^2)
      for (std::size_t i = 0; i < con.terms.size(); ++i) {
        const auto& term = con.terms[i];
        double w = std::exp(s[i] - smax) / (z * t * (-g));
        for (int k = 0; k < term.nex; ++k) {
          for (int l = 0; l < term.nex; ++l) {
            hess(term.ex[k].first, term.ex[l].first) +=
                w * term.ex[k].second * term.ex[l].second;
          }
        }
      }
      hess.noalias() += (1.0 / (t * g * g) - 1.0 / (t * (-g))) * (gj * gj.transpose());
      grad.noalias() += gj / (t * (-g));
    }
  }
};

// Damped Newton descent on B_t. Returns the reached Newton decrement.
double center(const Problem& prob, double t, Eigen::VectorXd& y, int max_iters) {
  Eigen::VectorXd grad(prob.num_vars), step(prob.num_vars);
  Eigen::MatrixXd hess(prob.num_vars, prob.num_vars);
  double decrement = std::numeric_limits<double>::infinity();
  for (int it = 0; it < max_iters; ++it) {
    prob.barrier_derivatives(t, y, grad, hess);
    for (int i = 0; i < prob.num_vars; ++i) {
      if (prob.is_fixed[i]) {
        grad(i) = 0.0;
        hess.row(i).setZero();
        hess.col(i).setZero();
        hess(i, i) = 1.0;
      }
    }
    double ridge = 1e-14;
    Eigen::LLT<Eigen::MatrixXd> llt;
    for (int tries = 0; tries < 20; ++tries) {
      Eigen::MatrixXd hr = hess;
      hr.diagonal().array() += ridge;
      llt.compute(hr);
      if (llt.info() == Eigen::Success) break;
      ridge *= 100.0;
    }
    step = llt.solve(-grad);
    decrement = -grad.dot(step);
    if (!(decrement > 0.0)) {
      step = -grad;
      decrement = grad.squaredNorm();
    }
    if (decrement * 0.5 < 1e-12) return decrement;
    double b0 = prob.barrier(t, y);
    double alpha = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      Eigen::VectorXd yn = y + alpha * step;
      double bn = prob.barrier(t, yn);
      if (bn <= b0 - 1e-4 * alpha * decrement) {
        y = yn;
        moved = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!moved) return decrement;  // at the numerical floor of the barrier
  }
  return decrement;
}

struct VarLayout {
  int num_vars = 0;
  int idx_H = 0;
  int idx_phi = 0;
  int idx_psi = 0;
  int idx_vg(int n) const { return 1 + n; }
  int idx_vw_base = 0;
  int idx_vw(int n) const { return idx_vw_base + n; }
};

struct BuiltProblem {
  Problem prob;
  VarLayout lay;
};

BuiltProblem build_problem(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                           const FeasibleSets& sets, std::span<const Monomial> mg,
                           std::span<const Monomial> mw, const std::vector<double>& fixed_value,
                           const std::vector<char>& is_fixed) {
  const int N = fleet.num_devices();
  BuiltProblem out;
  VarLayout& lay = out.lay;
  lay.idx_H = 0;
  lay.idx_vw_base = 1 + N;
  lay.idx_phi = 2 * N + 1;
  lay.idx_psi = 2 * N + 2;
  lay.num_vars = 2 * N + 3;

  Problem& prob = out.prob;
  prob.num_vars = lay.num_vars;
  prob.psi_index = lay.idx_psi;
  prob.is_fixed = is_fixed;
  const double c = detail::delta_scale(fleet);

  // Per-device delay: (phi^2/(H N)) (u1 q_g + u2 + H (beta1 q_w + beta0)) <= psi
  for (int n = 0; n < N; ++n) {
    Constraint con;
    if (fleet.u1[n] > 0.0) {
      prob.add_term(con, fleet.u1[n] / N * std::exp(mg[n].log_kappa),
                    {{lay.idx_phi, 2.0},
                     {lay.idx_H, -1.0},
                     {lay.idx_vg(n), -mg[n].a},
                     {lay.idx_psi, -1.0}},
                    fixed_value);
    }
    if (fleet.u2[n] > 0.0) {
      prob.add_term(con, fleet.u2[n] / N,
                    {{lay.idx_phi, 2.0}, {lay.idx_H, -1.0}, {lay.idx_psi, -1.0}}, fixed_value);
    }
    if (fleet.beta[n].beta1 > 0.0) {
      prob.add_term(con, fleet.beta[n].beta1 / N * std::exp(mw[n].log_kappa),
                    {{lay.idx_phi, 2.0}, {lay.idx_vw(n), -mw[n].a}, {lay.idx_psi, -1.0}},
                    fixed_value);
    }
    if (fleet.beta[n].beta0 > 0.0) {
      prob.add_term(con, fleet.beta[n].beta0 / N, {{lay.idx_phi, 2.0}, {lay.idx_psi, -1.0}},
                    fixed_value);
    }
    if (!con.terms.empty()) prob.constraints.push_back(std::move(con));
  }

  // Convergence: A1/(phi eps) + (A0 c/eps) H sum p^2 v_g / phi
  //            + (B0 c^2/eps) H sum p^2 v_g v_w + (C0 c/eps) sum p^2 v_w <= 1
  {
    Constraint con;
    if (coeffs.A1 > 0.0) {
      prob.add_term(con, coeffs.A1 / coeffs.eps, {{lay.idx_phi, -1.0}}, fixed_value);
    }
    for (int n = 0; n < N; ++n) {
      double p2 = fleet.p[n] * fleet.p[n];
      if (p2 <= 0.0) continue;
      if (coeffs.A0 > 0.0) {
        prob.add_term(con, coeffs.A0 * c * p2 / coeffs.eps,
                      {{lay.idx_H, 1.0}, {lay.idx_vg(n), 1.0}, {lay.idx_phi, -1.0}}, fixed_value);
      }
      if (coeffs.B0 > 0.0) {
        prob.add_term(con, coeffs.B0 * c * c * p2 / coeffs.eps,
                      {{lay.idx_H, 1.0}, {lay.idx_vg(n), 1.0}, {lay.idx_vw(n), 1.0}}, fixed_value);
      }
      if (coeffs.C0 > 0.0) {
        prob.add_term(con, coeffs.C0 * c * p2 / coeffs.eps, {{lay.idx_vw(n), 1.0}}, fixed_value);
      }
    }
    if (!con.terms.empty()) prob.constraints.push_back(std::move(con));
  }

  // Box constraints on the free structural variables (log domain).
  auto add_box = [&](int var, double lo, double hi) {
    if (is_fixed[var]) return;
    Constraint up;
    Term tu;
    tu.logc = -hi;
    tu.ex[tu.nex++] = {var, 1.0};
    up.terms.push_back(tu);
    prob.constraints.push_back(std::move(up));
    Constraint dn;
    Term td;
    td.logc = lo;
    td.ex[td.nex++] = {var, -1.0};
    dn.terms.push_back(td);
    prob.constraints.push_back(std::move(dn));
  };
  add_box(lay.idx_H, std::log(static_cast<double>(sets.H.front())),
          std::log(static_cast<double>(sets.H.back())));
  for (int n = 0; n < N; ++n) {
    add_box(lay.idx_vg(n), std::log(detail::v_of_q(sets.q_g.back())),
            std::log(detail::v_of_q(sets.q_g.front())));
    add_box(lay.idx_vw(n), std::log(detail::v_of_q(sets.q_w.back())),
            std::log(detail::v_of_q(sets.q_w.front())));
  }
  return out;
}

}  // namespace

RelaxedSolution solve_relaxed(const OptFleet& fleet, const ConvergenceCoeffs& coeffs,
                              const FeasibleSets& sets, const SolveOptions& options) {
  fleet.validate();
  coeffs.validate();
  sets.validate();
  if (!(coeffs.A1 > 0.0)) {
    throw std::invalid_argument("solve_relaxed: A1 must be > 0 (zero iterations otherwise)");
  }
  const int N = fleet.num_devices();
  const double c = detail::delta_scale(fleet);

  // Feasibility pre-check at the most conservative corner: H at its minimum,
  // quantization levels at their maxima.
  {
    std::vector<double> dg(N, quant::delta_coefficient(sets.q_g.back(),
                                                       static_cast<int>(fleet.dim),
                                                       fleet.delta_form));
    std::vector<double> dw(N, quant::delta_coefficient(sets.q_w.back(),
                                                       static_cast<int>(fleet.dim),
                                                       fleet.delta_form));
    required_iterations(coeffs, sets.H.front(), fleet.p, dg, dw);  // throws infeasible_error
  }

  VarLayout lay;
  lay.idx_H = 0;
  lay.idx_vw_base = 1 + N;
  lay.idx_phi = 2 * N + 1;
  lay.idx_psi = 2 * N + 2;
  lay.num_vars = 2 * N + 3;

  // Singleton sets pin their variables.
  std::vector<char> is_fixed(lay.num_vars, 0);
  std::vector<double> fixed_value(lay.num_vars, 0.0);
  if (sets.H.size() == 1) {
    is_fixed[lay.idx_H] = 1;
    fixed_value[lay.idx_H] = std::log(static_cast<double>(sets.H.front()));
  }
  for (int n = 0; n < N; ++n) {
    if (sets.q_g.size() == 1) {
      is_fixed[lay.idx_vg(n)] = 1;
      fixed_value[lay.idx_vg(n)] = std::log(detail::v_of_q(sets.q_g.front()));
    }
    if (sets.q_w.size() == 1) {
      is_fixed[lay.idx_vw(n)] = 1;
      fixed_value[lay.idx_vw(n)] = std::log(detail::v_of_q(sets.q_w.front()));
    }
  }

  RelaxedSolution best;
  best.objective = std::numeric_limits<double>::infinity();
  std::string last_failure;

  const int starts = std::max(1, options.multistarts);
  for (int start = 0; start < starts; ++start) {
    double frac = (start + 0.5) / starts;
    auto anchor_q = [&](const std::vector<int>& set) {
      double lo = set.front(), hi = set.back();
      return lo * std::pow(hi / lo, frac);
    };

    Eigen::VectorXd y(lay.num_vars);
    auto clamp_into = [](double v, double lo, double hi) {
      double margin = 0.05 * (hi - lo) + 1e-12;
      return std::clamp(v, lo + margin, hi - margin);
    };
    {
      double lo = std::log(static_cast<double>(sets.H.front()));
      double hi = std::log(static_cast<double>(sets.H.back()));
      y(lay.idx_H) = clamp_into(0.5 * (lo + hi), lo, hi);
    }
    for (int n = 0; n < N; ++n) {
      double glo = std::log(detail::v_of_q(sets.q_g.back()));
      double ghi = std::log(detail::v_of_q(sets.q_g.front()));
      y(lay.idx_vg(n)) = clamp_into(std::log(detail::v_of_q(anchor_q(sets.q_g))), glo, ghi);
      double wlo = std::log(detail::v_of_q(sets.q_w.back()));
      double whi = std::log(detail::v_of_q(sets.q_w.front()));
      y(lay.idx_vw(n)) = clamp_into(std::log(detail::v_of_q(anchor_q(sets.q_w))), wlo, whi);
    }
    for (int i = 0; i < lay.num_vars; ++i) {
      if (is_fixed[i]) y(i) = fixed_value[i];
    }

    // Strictly feasible phi and psi for the current (H, v).
    auto init_slacks = [&](Eigen::VectorXd& yy) -> bool {
      double Hc = std::exp(yy(lay.idx_H));
      double s_phi = coeffs.A1 / coeffs.eps;
      double s_rest = 0.0;
      for (int n = 0; n < N; ++n) {
        double p2 = fleet.p[n] * fleet.p[n];
        double vg = std::exp(yy(lay.idx_vg(n))), vw = std::exp(yy(lay.idx_vw(n)));
        s_phi += coeffs.A0 * c * p2 * Hc * vg / coeffs.eps;
        s_rest += coeffs.B0 * c * c * p2 * Hc * vg * vw / coeffs.eps;
        s_rest += coeffs.C0 * c * p2 * vw / coeffs.eps;
      }
      if (s_rest >= 1.0) return false;
      double phi = 2.0 * s_phi / (1.0 - s_rest);
      yy(lay.idx_phi) = std::log(phi);
      double worst = 0.0;
      for (int n = 0; n < N; ++n) {
        double vg = std::exp(yy(lay.idx_vg(n))), vw = std::exp(yy(lay.idx_vw(n)));
        double t = detail::round_delay(fleet, n, Hc, detail::q_of_v(vg), detail::q_of_v(vw));
        worst = std::max(worst, phi * phi / (Hc * N) * t);
      }
      yy(lay.idx_psi) = std::log(2.0 * std::max(worst, 1e-300));
      return true;
    };
    auto retreat = [&](Eigen::VectorXd& yy) -> bool {
      for (int n = 0; n < N; ++n) {
        if (!is_fixed[lay.idx_vg(n)]) {
          double glo = std::log(detail::v_of_q(sets.q_g.back()));
          double ghi = std::log(detail::v_of_q(sets.q_g.front()));
          yy(lay.idx_vg(n)) = clamp_into(glo, glo, ghi);
        }
        if (!is_fixed[lay.idx_vw(n)]) {
          double wlo = std::log(detail::v_of_q(sets.q_w.back()));
          double whi = std::log(detail::v_of_q(sets.q_w.front()));
          yy(lay.idx_vw(n)) = clamp_into(wlo, wlo, whi);
        }
      }
      if (!is_fixed[lay.idx_H]) {
        double lo = std::log(static_cast<double>(sets.H.front()));
        double hi = std::log(static_cast<double>(sets.H.back()));
        yy(lay.idx_H) = clamp_into(lo, lo, hi);
      }
      return init_slacks(yy);
    };
    if (!init_slacks(y) && !retreat(y)) {
      throw infeasible_error("solve_relaxed: convergence constraint infeasible over the box");
    }

    int outer = 0;
    bool converged = false;
    for (; outer < options.max_outer_refits; ++outer) {
      std::vector<Monomial> mg(N), mw(N);
      for (int n = 0; n < N; ++n) {
        mg[n] = tangent_monomial(std::exp(y(lay.idx_vg(n))));
        mw[n] = tangent_monomial(std::exp(y(lay.idx_vw(n))));
      }
      auto built = build_problem(fleet, coeffs, sets, mg, mw, fixed_value, is_fixed);
      if (!built.prob.feasible(y)) {
        if (!init_slacks(y) || !built.prob.feasible(y)) {
          last_failure = "lost feasibility during refit";
          break;
        }
      }
      Eigen::VectorXd y_prev = y;
      const double m = static_cast<double>(built.prob.constraints.size());
      double t = std::max(1.0, m);
      const double t_final = m / options.gap_tolerance;
      while (true) {
        center(built.prob, t, y, options.max_newton_iters);
        if (t >= t_final) break;
        t = std::min(t * 20.0, t_final);
      }
      double move = 0.0;
      for (int i = 0; i <= 2 * N; ++i) move = std::max(move, std::abs(y(i) - y_prev(i)));
      if (outer > 0 && move < 1e-9) {
        converged = true;
        break;
      }
    }

    RelaxedSolution sol;
    sol.H = std::exp(y(lay.idx_H));
    sol.v_g.resize(N);
    sol.v_w.resize(N);
    sol.q_g.resize(N);
    sol.q_w.resize(N);
    for (int n = 0; n < N; ++n) {
      sol.v_g[n] = std::exp(y(lay.idx_vg(n)));
      sol.v_w[n] = std::exp(y(lay.idx_vw(n)));
      sol.q_g[n] = detail::q_of_v(sol.v_g[n]);
      sol.q_w[n] = detail::q_of_v(sol.v_w[n]);
    }
    sol.phi = std::exp(y(lay.idx_phi));
    sol.psi = std::exp(y(lay.idx_psi));
    sol.objective = detail::exact_continuous_objective(fleet, coeffs, sol.H, sol.v_g, sol.v_w);
    sol.kkt_residual = options.gap_tolerance;
    sol.outer_iterations = outer + 1;
    if ((converged || outer == options.max_outer_refits) &&
        sol.objective < best.objective) {
      best = sol;
    }
  }

  if (!std::isfinite(best.objective)) {
    throw solver_failure_error("solve_relaxed: no start converged" +
                               (last_failure.empty() ? "" : " (" + last_failure + ")"));
  }
  return best;
}

}  // namespace fedq::opt
