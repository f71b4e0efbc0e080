#pragma once

#include <cmath>
#include <functional>

#include "gflow/enkbf.hpp"
#include "gflow/gradient_flow.hpp"
#include "gflow/linalg.hpp"

namespace gflow {

// Gaussian RKHS kernel psi(d) = scale * n(d; 0, B). Log-space evaluation
// keeps the interaction terms well defined for widely separated particles.
class GaussianKernel {
 public:
  explicit GaussianKernel(Matrix bandwidth_cov, double scale = 1.0)
      : b_(std::move(bandwidth_cov)), scale_(scale) {
    Eigen::LLT<Matrix> llt(b_);
    if (llt.info() != Eigen::Success) throw NumericalError("GaussianKernel: B not SPD");
    b_inv_ = llt.solve(Matrix::Identity(b_.rows(), b_.cols()));
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < b_.rows(); ++i) log_det += 2.0 * std::log(llt.matrixL()(i, i));
    log_norm_ = -0.5 * (b_.rows() * std::log(2.0 * M_PI) + log_det);
  }

  const Matrix& bandwidth_cov() const { return b_; }
  const Matrix& bandwidth_inv() const { return b_inv_; }
  int dim() const { return static_cast<int>(b_.rows()); }

  // -(1/2) d^T B^{-1} d; the kernel exponent.
  double exponent(const Vector& d) const { return -0.5 * d.dot(b_inv_ * d); }

  double log_value(const Vector& d) const { return std::log(scale_) + log_norm_ + exponent(d); }
  double value(const Vector& d) const { return std::exp(log_value(d)); }

 private:
  Matrix b_;
  Matrix b_inv_;
  double log_norm_ = 0.0;
  double scale_ = 1.0;
};

// log pi_* up to an additive constant, with matching gradient.
struct TargetDensity {
  std::function<double(const Vector&)> log_density;
  std::function<Vector(const Vector&)> grad_log_density;
};

struct FlowConfig {
  double alpha = 1.0;
  bool preconditioned = false;
  double tau_end = 10.0;
  double stationarity_tol = 1e-8;
};

// Mixture density (1/M) sum_j psi(x - x^j).
inline double kde_density(const GaussianKernel& k, const Ensemble& e, const Vector& x) {
  if (e.size() < 1) throw DimensionError("kde_density: empty ensemble");
  double acc = 0.0;
  for (const auto& xj : e.members) acc += k.value(x - xj);
  return acc / e.size();
}

namespace detail {

// Pairwise exponent matrix q_ij = -(1/2)(x^i-x^j)^T B^{-1} (x^i-x^j) and the
// row sums s_i = sum_j exp(q_ij) >= 1 (the self term contributes 1).
struct KernelTable {
  Matrix q;
  Vector s;
};

inline KernelTable kernel_table(const GaussianKernel& k, const Ensemble& e) {
  const int m = e.size();
  KernelTable t;
  t.q = Matrix::Zero(m, m);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j)
      t.q(i, j) = t.q(j, i) = k.exponent(e.members[i] - e.members[j]);
  t.s = t.q.array().exp().rowwise().sum();
  return t;
}

}  // namespace detail

// KL potential V = (1/M) sum_j { log pi_tilde(x^j) - log pi_*(x^j) },
// defined up to the additive constants of the target and kernel scale.
inline double kl_potential(const GaussianKernel& k, const Ensemble& e, const TargetDensity& target) {
  const int m = e.size();
  const auto t = detail::kernel_table(k, e);
  double v = 0.0;
  for (int j = 0; j < m; ++j) {
    const double log_pt = k.log_value(Vector::Zero(e.dim())) - std::log(double(m)) + std::log(t.s[j]);
    if (!std::isfinite(log_pt)) throw NumericalError("kl_potential: density underflow at a particle");
    v += log_pt - target.log_density(e.members[j]);
  }
  return v / m;
}

// Analytic gradient of the KL potential with respect to every particle.
// The kernel normalisation and any constant scale cancel throughout.
inline std::vector<Vector> kl_gradient(const GaussianKernel& k, const Ensemble& e,
                                       const TargetDensity& target) {
  const int m = e.size();
  const int d = e.dim();
  const auto t = detail::kernel_table(k, e);
  const Matrix w = t.q.array().exp();
  std::vector<Vector> grad(m);
  for (int i = 0; i < m; ++i) {
    Vector g_logpt = Vector::Zero(d);     // grad log pi_tilde(x^i)
    Vector interaction = Vector::Zero(d); // (1/M) sum_{j != i} grad psi / pi_tilde(x^j)
    for (int j = 0; j < m; ++j) {
      const Vector bd = k.bandwidth_inv() * (e.members[i] - e.members[j]);
      g_logpt -= w(i, j) * bd;
      if (j != i) interaction -= w(i, j) / t.s[j] * bd;
    }
    g_logpt /= t.s[i];
    grad[i] = (g_logpt + interaction - target.grad_log_density(e.members[i])) / m;
  }
  return grad;
}

// Splits prior spread between kernel bandwidth and particle positions while
// preserving the first two empirical moments: B = (2a - a^2) P0 and
// x^i = xhat^i - a (xhat^i - xbar).
inline std::pair<Ensemble, GaussianKernel> shrink_initialise(const Ensemble& prior_samples,
                                                             double alpha) {
  if (alpha <= 0.0 || alpha > 1.0)
    throw std::invalid_argument("shrink_initialise: alpha must be in (0, 1]");
  if (prior_samples.size() < 2) throw DimensionError("shrink_initialise: needs M >= 2");
  const Vector mean = ensemble_mean(prior_samples);
  const Matrix p0 = ensemble_covariance(prior_samples);
  Eigen::LLT<Matrix> llt(p0);
  if (llt.info() != Eigen::Success)
    throw NumericalError("shrink_initialise: degenerate prior covariance");
  std::vector<Vector> shrunk;
  shrunk.reserve(prior_samples.size());
  for (const auto& x : prior_samples.members) shrunk.push_back(x - alpha * (x - mean));
  return {Ensemble(std::move(shrunk)), GaussianKernel((2.0 * alpha - alpha * alpha) * p0)};
}

// Particle-flow Fokker-Planck problem over the stacked state. Plain mobility
// is M * I; the preconditioned variant uses M * P^{xx} blocks re-evaluated at
// the current state.
inline GradientFlowProblem build_fp_problem(const GaussianKernel& k, const TargetDensity& target,
                                            int n_members, const FlowConfig& cfg) {
  GradientFlowProblem p;
  const int d = k.dim();
  p.dim = n_members * d;
  p.potential = [k, target, n_members](const Vector& z) {
    return kl_potential(k, unstack(z, n_members), target);
  };
  p.gradient = [k, target, n_members, d](const Vector& z) {
    const auto g = kl_gradient(k, unstack(z, n_members), target);
    Vector stacked(static_cast<Eigen::Index>(n_members) * d);
    for (int i = 0; i < n_members; ++i) stacked.segment(i * d, d) = g[i];
    return stacked;
  };
  if (cfg.preconditioned) {
    p.mobility = [n_members](const Vector& z) {
      return Matrix(double(n_members) * enkbf_mobility(unstack(z, n_members)));
    };
  } else {
    const int dim = p.dim;
    p.mobility = [n_members, dim](const Vector&) {
      return double(n_members) * Matrix::Identity(dim, dim);
    };
  }
  return p;
}

struct StationarityResult {
  Ensemble ensemble;
  std::vector<StepRecord> records;
  bool reached_stationarity = false;
};

// Integrates until the stacked gradient norm drops below the tolerance or
// tau_end is hit, whichever comes first.
inline StationarityResult run_to_stationarity(const GradientFlowProblem& problem,
                                              const Ensemble& e0, Method method, double dtau,
                                              const FlowConfig& cfg,
                                              const ProximalSolver& solver,
                                              DiscreteGradientConfig dg_cfg = {}) {
  dg_cfg.dtau = dtau;
  StationarityResult result;
  Vector z = stack(e0);
  const int m = e0.size();
  result.records.push_back({0.0, z, problem.potential(z), 1.0, 0});
  const int max_steps = static_cast<int>(std::ceil(cfg.tau_end / dtau - 1e-12));
  for (int n = 0; n < max_steps; ++n) {
    if (problem.gradient(z).norm() <= cfg.stationarity_tol) {
      result.reached_stationarity = true;
      break;
    }
    StepRecord rec;
    switch (method) {
      case Method::ExplicitEuler:
        z = explicit_euler_step(problem, z, dtau);
        rec = {0.0, z, problem.potential(z), 1.0, 0};
        break;
      case Method::SemiImplicit:
        z = semi_implicit_step(problem, z, dtau, solver);
        rec = {0.0, z, problem.potential(z), 1.0, 1};
        break;
      case Method::DiscreteGradient: {
        auto [z1, r] = discrete_gradient_step(problem, z, dg_cfg, solver);
        z = z1;
        rec = r;
        break;
      }
    }
    rec.tau = (n + 1) * dtau;
    result.records.push_back(std::move(rec));
  }
  if (!result.reached_stationarity && problem.gradient(z).norm() <= cfg.stationarity_tol)
    result.reached_stationarity = true;
  result.ensemble = unstack(z, m);
  return result;
}

// Derivative-free surrogate for grad S(x) built from ensemble statistics:
// (P^{xx})^+ P^{xh} R^{-1} (h(x) - y).
inline Vector gradient_free_loglik_grad(const ObservationModel& om, const Ensemble& e,
                                        const Vector& x) {
  std::vector<Vector> images;
  images.reserve(e.size());
  for (const auto& xi : e.members) images.push_back(om.forward(xi));
  const Matrix pxx_inv = psd_pseudo_inverse(ensemble_covariance(e));
  const Matrix pxh = cross_covariance(e, images);
  return pxx_inv * (pxh * (om.noise_inv() * (om.forward(x) - om.observation)));
}

}  // namespace gflow
