#pragma once

#include <functional>
#include <limits>
#include <utility>

#include "gflow/linalg.hpp"
#include "gflow/solvers.hpp"

namespace gflow {

// dz = -A(z) grad V(z) dtau with A symmetric positive semi-definite.
struct GradientFlowProblem {
  int dim = 0;
  std::function<double(const Vector&)> potential;
  std::function<Vector(const Vector&)> gradient;
  std::function<Matrix(const Vector&)> mobility;
};

struct DiscreteGradientConfig {
  double theta = 1.0;
  double dtau = 0.1;
  double inner_tol = 1e-10;
  int max_inner = 200;
  // Fixed-point damping applied to the (state, gamma) pair after the first
  // sweep; the undamped iteration oscillates on stiff problems.
  double damping = 0.5;
  double gamma_cap = 1e10;
};

struct StepRecord {
  double tau = 0.0;
  Vector z;
  double potential_value = 0.0;
  double gamma = 1.0;
  int inner_iterations = 0;
};

class StepFailure : public NumericalError {
 public:
  StepFailure(const std::string& msg, int step_index)
      : NumericalError(msg + " (step " + std::to_string(step_index) + ")"), step_index_(step_index) {}
  explicit StepFailure(const std::string& msg) : NumericalError(msg), step_index_(-1) {}
  int step_index() const { return step_index_; }

 private:
  int step_index_;
};

// Solves min_{z in z_n + im(A)} (z - z_n)^T A^+ (z - z_n) / (2 theta) + scale * V(z),
// starting the search from guess.
using ProximalSolver =
    std::function<Vector(const GradientFlowProblem&, const Vector& z_n, const Matrix& mobility,
                         double theta, double scale, const Vector& guess)>;

namespace detail {

inline bool is_identity_multiple(const Matrix& a, double& c) {
  c = a(0, 0);
  const double tol = 1e-14 * std::max(1.0, std::abs(c));
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (std::abs(a(i, j) - (i == j ? c : 0.0)) > tol) return false;
  return c >= 0.0;
}

}  // namespace detail

// Generic proximal solver: restricts to the image of the mobility and
// minimises with BFGS. Mobilities that are multiples of the identity skip
// the eigendecomposition.
inline Vector default_proximal_solve(const GradientFlowProblem& p, const Vector& z_n,
                                     const Matrix& mobility, double theta, double scale,
                                     const Vector& guess) {
  if (scale <= 0.0) return z_n;

  Matrix u;      // basis of the image
  Vector d;      // positive eigenvalues
  double c = 0.0;
  if (detail::is_identity_multiple(mobility, c)) {
    if (c <= 0.0) return z_n;
    u = Matrix::Identity(p.dim, p.dim);
    d = Vector::Constant(p.dim, c);
  } else {
    auto eig = detail::symmetric_eigen(mobility, "proximal_solve");
    const Vector& ev = eig.eigenvalues();
    const double cutoff = kPinvCutoff * std::max(0.0, ev.maxCoeff());
    int k = 0;
    for (Eigen::Index i = 0; i < ev.size(); ++i)
      if (ev[i] > cutoff) ++k;
    if (k == 0) return z_n;  // zero mobility, null update
    u.resize(p.dim, k);
    d.resize(k);
    int col = 0;
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
      if (ev[i] > cutoff) {
        u.col(col) = eig.eigenvectors().col(i);
        d[col] = ev[i];
        ++col;
      }
    }
  }

  // Work on the normalised objective when scale is large so the data term
  // stays O(1).
  const double norm = std::max(1.0, scale);
  const Vector dinv = d.cwiseInverse();
  auto obj = [&](const Vector& w) {
    const Vector z = z_n + u * w;
    return (0.5 / theta) * w.dot(dinv.cwiseProduct(w)) / norm + (scale / norm) * p.potential(z);
  };
  auto grad = [&](const Vector& w) -> Vector {
    const Vector z = z_n + u * w;
    return dinv.cwiseProduct(w) / (theta * norm) +
           (scale / norm) * (u.transpose() * p.gradient(z));
  };
  const Vector w0 = u.transpose() * (guess - z_n);
  auto [w, report] = quasi_newton_minimize(obj, grad, w0, 1e-12, 500);
  (void)report;
  return z_n + u * w;
}

inline ProximalSolver default_proximal_solver() {
  return [](const GradientFlowProblem& p, const Vector& z_n, const Matrix& a, double theta,
            double scale, const Vector& guess) {
    return default_proximal_solve(p, z_n, a, theta, scale, guess);
  };
}

inline Vector explicit_euler_step(const GradientFlowProblem& p, const Vector& z, double dtau) {
  if (dtau <= 0.0) throw std::invalid_argument("explicit_euler_step: dtau must be positive");
  const Vector z1 = z - dtau * (p.mobility(z) * p.gradient(z));
  if (!z1.allFinite()) throw StepFailure("explicit_euler_step: non-finite state");
  return z1;
}

inline Vector semi_implicit_step(const GradientFlowProblem& p, const Vector& z, double dtau,
                                 const ProximalSolver& solver) {
  if (dtau <= 0.0) throw std::invalid_argument("semi_implicit_step: dtau must be positive");
  return solver(p, z, p.mobility(z), 1.0, dtau, z);
}

// gamma_n = (V(z_{n+1}) - V(z_n)) / (grad V(z_{n+theta}) . (z_{n+1} - z_n)).
// Degenerate denominators fall back to 1 (the plain theta-method).
inline double gamma_factor(const GradientFlowProblem& p, const Vector& z_n, const Vector& z_np1,
                           double theta) {
  const Vector z_theta = theta * z_np1 + (1.0 - theta) * z_n;
  const double num = p.potential(z_np1) - p.potential(z_n);
  const double den = p.gradient(z_theta).dot(z_np1 - z_n);
  if (std::abs(den) <= 1e-14 * (1.0 + std::abs(num))) return 1.0;
  return num / den;
}

namespace detail {

// Root solve of gamma_factor(z(gamma)) = gamma with the mobility frozen,
// where z(gamma) is the proximal solution at scale gamma * dtau. phi is
// positive at gamma = 0 and the bracket is expanded geometrically; when phi
// stays positive all the way to the cap the step is in the relaxation regime
// and the capped gamma is accepted. The fixed-point map can have slope close
// to one near the root, so plain (damped) iteration on gamma stalls; the
// safeguarded secant/bisection below does not.
struct GammaSolveResult {
  double gamma = 1.0;
  Vector z_theta;
  int prox_solves = 0;
};

inline GammaSolveResult solve_gamma(const GradientFlowProblem& p, const Vector& z,
                                    const Matrix& a, const DiscreteGradientConfig& cfg,
                                    const ProximalSolver& solver, double gamma_init,
                                    Vector warm) {
  GammaSolveResult out;
  auto eval = [&](double g) {
    const double scale = std::clamp(g, 0.0, cfg.gamma_cap) * cfg.dtau;
    const Vector z_theta = solver(p, z, a, cfg.theta, scale, warm);
    warm = z_theta;
    ++out.prox_solves;
    const Vector z_np1 = (z_theta - (1.0 - cfg.theta) * z) / cfg.theta;
    return std::make_pair(gamma_factor(p, z, z_np1, cfg.theta) - g, z_theta);
  };
  const double tol = cfg.inner_tol;

  double g1 = std::clamp(gamma_init, tol, cfg.gamma_cap);
  auto [f1, zt1] = eval(g1);
  if (std::abs(f1) <= tol * (1.0 + g1)) {
    out.gamma = g1;
    out.z_theta = zt1;
    return out;
  }

  // March towards a sign change.
  double g0 = g1, f0 = f1;
  Vector zt0 = zt1;
  const int expand_limit = 64;
  for (int i = 0; i < expand_limit && f0 * f1 > 0.0; ++i) {
    g0 = g1;
    f0 = f1;
    zt0 = zt1;
    g1 = f1 > 0.0 ? std::min(g1 * 4.0, cfg.gamma_cap) : g1 / 4.0;
    std::tie(f1, zt1) = eval(g1);
    if (f1 > 0.0 && g1 >= cfg.gamma_cap) {
      out.gamma = cfg.gamma_cap;
      out.z_theta = zt1;
      return out;
    }
  }
  if (f0 * f1 > 0.0)
    throw StepFailure("discrete_gradient_step: no gamma bracket found");

  double lo = std::min(g0, g1), hi = std::max(g0, g1);
  double flo = g0 < g1 ? f0 : f1, fhi = g0 < g1 ? f1 : f0;
  Vector zlo = g0 < g1 ? zt0 : zt1, zhi = g0 < g1 ? zt1 : zt0;
  for (int i = 0; i < 200; ++i) {
    double g;
    if (std::abs(fhi - flo) > 1e-300) {
      g = lo - flo * (hi - lo) / (fhi - flo);  // secant within the bracket
      const double margin = 0.01 * (hi - lo);
      if (!(g > lo + margin && g < hi - margin)) g = 0.5 * (lo + hi);
    } else {
      g = 0.5 * (lo + hi);
    }
    auto [f, zt] = eval(g);
    if (std::abs(f) <= tol * (1.0 + g) || hi - lo <= tol * (1.0 + g)) {
      out.gamma = g;
      out.z_theta = zt;
      return out;
    }
    if (f > 0.0) {
      lo = g;
      flo = f;
      zlo = zt;
    } else {
      hi = g;
      fhi = f;
      zhi = zt;
    }
  }
  out.gamma = 0.5 * (lo + hi);
  out.z_theta = zlo;
  return out;
}

}  // namespace detail

// One discrete-gradient step. Outer iteration freezes the mobility at the
// current z_{n+theta} (damped after the first pass); for each frozen mobility
// the gamma consistency condition is solved as a scalar root problem.
inline std::pair<Vector, StepRecord> discrete_gradient_step(const GradientFlowProblem& p,
                                                            const Vector& z,
                                                            const DiscreteGradientConfig& cfg,
                                                            const ProximalSolver& solver) {
  if (cfg.theta <= 0.0 || cfg.theta > 1.0)
    throw std::invalid_argument("discrete_gradient_step: theta must be in (0, 1]");
  if (cfg.dtau <= 0.0) throw std::invalid_argument("discrete_gradient_step: dtau must be positive");

  const double v0 = p.potential(z);
  Vector z_theta = z;
  double gamma = 1.0;
  Vector z_np1 = z;
  Vector z_np1_prev = z;
  bool converged = false;
  int iters = 0;
  double dz_res = 0.0;
  double dgamma_res = 0.0;

  // Phase 1: damped fixed-point sweeps over the (z_{n+theta}, gamma) pair.
  // This handles the stiff regime where the mobility changes strongly with
  // the state. When it stalls (slope-one gamma map), phase 2 below freezes
  // the mobility per pass and solves the gamma condition as a scalar root
  // problem instead.
  const int joint_budget = cfg.max_inner / 2;
  int runaway = 0;
  double prev_gamma_raw = -std::numeric_limits<double>::infinity();
  for (int l = 0; l < joint_budget; ++l) {
    const Matrix a = p.mobility(z_theta);
    const double scale = std::clamp(gamma, 0.0, cfg.gamma_cap) * cfg.dtau;
    const Vector z_theta_raw = solver(p, z, a, cfg.theta, scale, z_theta);
    const Vector z_np1_raw = (z_theta_raw - (1.0 - cfg.theta) * z) / cfg.theta;
    const double gamma_raw = gamma_factor(p, z, z_np1_raw, cfg.theta);

    if (gamma_raw > gamma && gamma_raw > prev_gamma_raw) ++runaway;
    else runaway = 0;
    prev_gamma_raw = gamma_raw;

    if (l == 0) {
      z_theta = z_theta_raw;
      gamma = std::min(gamma_raw, cfg.gamma_cap);
    } else {
      z_theta += cfg.damping * (z_theta_raw - z_theta);
      gamma += cfg.damping * (std::min(gamma_raw, cfg.gamma_cap) - gamma);
    }
    z_np1 = (z_theta - (1.0 - cfg.theta) * z) / cfg.theta;
    ++iters;

    dz_res = (z_np1 - z_np1_prev).norm();
    dgamma_res = std::abs(std::min(gamma_raw, cfg.gamma_cap) - gamma);
    z_np1_prev = z_np1;
    if (dz_res <= cfg.inner_tol * (1.0 + z_np1.norm()) &&
        dgamma_res <= cfg.inner_tol * (1.0 + gamma)) {
      converged = true;
      break;
    }
    if (runaway >= 6 && gamma_raw > 10.0) break;  // gamma diverging, go to phase 2
  }

  // Above this gamma the proximal solution no longer depends on gamma to
  // machine precision; the step has relaxed onto a minimiser of V.
  const double gamma_relaxed = 1e-3 * cfg.gamma_cap;

  for (int l = 0; !converged && l < cfg.max_inner - joint_budget; ++l) {
    const Matrix a = p.mobility(z_theta);
    const auto sol = detail::solve_gamma(p, z, a, cfg, solver, gamma, z_theta);
    iters += sol.prox_solves;

    if (l == 0) z_theta = sol.z_theta;
    else z_theta += cfg.damping * (sol.z_theta - z_theta);
    dgamma_res = std::abs(sol.gamma - gamma);
    gamma = sol.gamma;
    z_np1 = (z_theta - (1.0 - cfg.theta) * z) / cfg.theta;

    dz_res = (z_np1 - z_np1_prev).norm();
    z_np1_prev = z_np1;
    if (dz_res <= cfg.inner_tol * (1.0 + z_np1.norm()) &&
        (dgamma_res <= cfg.inner_tol * (1.0 + gamma) || gamma >= gamma_relaxed)) {
      converged = true;
      break;
    }
  }

  if (!converged)
    throw StepFailure("discrete_gradient_step: inner iteration exceeded max_inner=" +
                      std::to_string(cfg.max_inner) + " (|dz|=" + std::to_string(dz_res) +
                      ", |dgamma|=" + std::to_string(dgamma_res) + ")");
  if (!z_np1.allFinite()) throw StepFailure("discrete_gradient_step: non-finite state");

  const double v1 = p.potential(z_np1);
  if (v1 > v0 + 1e-10 * (1.0 + std::abs(v0)))
    throw StepFailure("discrete_gradient_step: decay property violated (V increased by " +
                      std::to_string(v1 - v0) + ")");

  StepRecord rec;
  rec.z = z_np1;
  rec.potential_value = v1;
  rec.gamma = gamma;
  rec.inner_iterations = iters;
  return {z_np1, rec};
}

enum class Method { ExplicitEuler, SemiImplicit, DiscreteGradient };

// Fixed-step driver; records the state at tau = 0 and after every step.
inline std::vector<StepRecord> integrate(const GradientFlowProblem& p, const Vector& z0,
                                         Method method, double dtau, double tau_end,
                                         const ProximalSolver& solver,
                                         DiscreteGradientConfig cfg = {}) {
  if (tau_end < 0.0) throw std::invalid_argument("integrate: tau_end must be nonnegative");
  cfg.dtau = dtau;
  std::vector<StepRecord> records;
  Vector z = z0;
  records.push_back({0.0, z, p.potential(z), 1.0, 0});
  const int n_steps = tau_end > 0.0 ? static_cast<int>(std::llround(tau_end / dtau)) : 0;
  for (int n = 0; n < n_steps; ++n) {
    try {
      StepRecord rec;
      switch (method) {
        case Method::ExplicitEuler:
          z = explicit_euler_step(p, z, dtau);
          rec = {0.0, z, p.potential(z), 1.0, 0};
          break;
        case Method::SemiImplicit:
          z = semi_implicit_step(p, z, dtau, solver);
          rec = {0.0, z, p.potential(z), 1.0, 1};
          break;
        case Method::DiscreteGradient: {
          auto [z1, r] = discrete_gradient_step(p, z, cfg, solver);
          z = z1;
          rec = r;
          break;
        }
      }
      rec.tau = (n + 1) * dtau;
      if (!rec.z.allFinite() || !std::isfinite(rec.potential_value))
        throw StepFailure("integrate: non-finite state");
      records.push_back(std::move(rec));
    } catch (const NumericalError& e) {
      throw StepFailure(std::string(e.what()), n);
    }
  }
  return records;
}

}  // namespace gflow
