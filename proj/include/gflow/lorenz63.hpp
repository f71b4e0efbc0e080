#pragma once

#include <cmath>
#include <vector>

#include "gflow/linalg.hpp"
#include "gflow/particle_fp.hpp"
#include "gflow/rng.hpp"

namespace gflow {

struct L63Params {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
  double dt = 0.01;
};

// Settings for the particle-flow transport inside each analysis step.
struct FlowSettings {
  Method method = Method::DiscreteGradient;
  double dtau = 0.1;
  double tau_end = 2.0;
  double stationarity_tol = 1e-6;
};

struct DaConfig {
  double obs_interval = 0.12;
  Matrix obs_operator;  // H
  Matrix obs_noise;     // R
  int cycles = 100;
  int ensemble_size = 15;
  double alpha = 1.0;
  double rejuvenation = 0.2;
  std::uint64_t seed = 0;
  double spinup_fraction = 0.1;   // cycles excluded from the reported RMSE
  double divergence_cap = 1e6;    // running-RMSE abort threshold
  FlowSettings flow;
};

// Equal-weight-by-default Gaussian mixture with one shared covariance.
struct GaussianMixture {
  Vector weights;
  std::vector<Vector> centers;
  Matrix shared_cov;

  int size() const { return static_cast<int>(centers.size()); }

  void validate() const {
    if (std::abs(weights.sum() - 1.0) > 1e-12)
      throw NumericalError("GaussianMixture: weights must sum to 1");
    if (weights.minCoeff() < 0.0) throw NumericalError("GaussianMixture: negative weight");
  }

  Vector mean() const {
    Vector m = Vector::Zero(shared_cov.rows());
    for (int i = 0; i < size(); ++i) m += weights[i] * centers[i];
    return m;
  }

  // Unbiased weighted spread so that equal weights reproduce the M-1
  // ensemble covariance convention.
  Matrix covariance() const {
    const Vector m = mean();
    Matrix spread = Matrix::Zero(shared_cov.rows(), shared_cov.cols());
    for (int i = 0; i < size(); ++i)
      spread += weights[i] * (centers[i] - m) * (centers[i] - m).transpose();
    const double denom = 1.0 - weights.squaredNorm();
    if (denom > 1e-14) spread /= denom;
    return shared_cov + spread;
  }
};

inline Vector l63_rhs(const L63Params& p, const Vector& state) {
  if (state.size() != 3) throw DimensionError("l63_rhs: state must be 3-dimensional");
  Vector f(3);
  f[0] = p.sigma * (state[1] - state[0]);
  f[1] = state[0] * (p.rho - state[2]) - state[1];
  f[2] = state[0] * state[1] - p.beta * state[2];
  return f;
}

// Implicit midpoint step, fixed-point iteration from the explicit-Euler
// predictor.
inline Vector implicit_midpoint_step(const L63Params& p, const Vector& state, double dt) {
  if (dt == 0.0) throw std::invalid_argument("implicit_midpoint_step: dt must be nonzero");
  Vector z1 = state + dt * l63_rhs(p, state);
  for (int it = 0; it < 50; ++it) {
    const Vector next = state + dt * l63_rhs(p, 0.5 * (state + z1));
    if ((next - z1).norm() <= 1e-12 * (1.0 + z1.norm())) return next;
    z1 = next;
  }
  throw NumericalError("implicit_midpoint_step: fixed-point iteration did not converge");
}

// Equal-weight shrinkage mixture around the forecast ensemble.
inline GaussianMixture gm_forecast(const Ensemble& forecast, double alpha) {
  if (alpha <= 0.0 || alpha > 1.0) throw std::invalid_argument("gm_forecast: alpha in (0, 1]");
  if (forecast.size() < 2) throw DimensionError("gm_forecast: needs M >= 2");
  const Vector mean = ensemble_mean(forecast);
  const Matrix pf = ensemble_covariance(forecast);
  GaussianMixture gm;
  gm.weights = Vector::Constant(forecast.size(), 1.0 / forecast.size());
  gm.shared_cov = (2.0 * alpha - alpha * alpha) * pf;
  gm.centers.reserve(forecast.size());
  for (const auto& x : forecast.members) gm.centers.push_back(x - alpha * (x - mean));
  return gm;
}

// Kalman update of every component against a linear observation. Weights use
// the innovation H c_i - y on both sides of the quadratic form.
inline GaussianMixture gm_analysis(const GaussianMixture& prior, const Matrix& h, const Matrix& r,
                                   const Vector& y) {
  const Matrix s = h * prior.shared_cov * h.transpose() + r;
  Eigen::LDLT<Matrix> s_ldlt(s);
  const Matrix gain = prior.shared_cov * h.transpose() * s_ldlt.solve(
      Matrix::Identity(s.rows(), s.cols()));
  GaussianMixture post;
  post.shared_cov = prior.shared_cov - gain * h * prior.shared_cov;
  post.shared_cov = (post.shared_cov + post.shared_cov.transpose()) / 2.0;
  Vector logw(prior.size());
  post.centers.reserve(prior.size());
  for (int i = 0; i < prior.size(); ++i) {
    const Vector innov = h * prior.centers[i] - y;
    logw[i] = std::log(prior.weights[i]) - 0.5 * innov.dot(s_ldlt.solve(innov));
    post.centers.push_back(prior.centers[i] - gain * innov);
  }
  logw.array() -= logw.maxCoeff();
  post.weights = logw.array().exp();
  post.weights /= post.weights.sum();
  return post;
}

// Target density of a Gaussian mixture with shared covariance, for the
// equal-weighting flow.
inline TargetDensity mixture_target(const GaussianMixture& gm) {
  const Matrix cov_inv = psd_pseudo_inverse(gm.shared_cov);
  TargetDensity t;
  auto log_terms = [gm, cov_inv](const Vector& x) {
    Vector lt(gm.size());
    for (int i = 0; i < gm.size(); ++i) {
      const Vector d = x - gm.centers[i];
      lt[i] = std::log(gm.weights[i]) - 0.5 * d.dot(cov_inv * d);
    }
    return lt;
  };
  t.log_density = [log_terms](const Vector& x) {
    const Vector lt = log_terms(x);
    const double mx = lt.maxCoeff();
    return mx + std::log((lt.array() - mx).exp().sum());
  };
  t.grad_log_density = [gm, cov_inv, log_terms](const Vector& x) {
    const Vector lt = log_terms(x);
    const double mx = lt.maxCoeff();
    const Vector w = (lt.array() - mx).exp();
    Vector g = Vector::Zero(x.size());
    for (int i = 0; i < gm.size(); ++i) g -= w[i] * (cov_inv * (x - gm.centers[i]));
    return Vector(g / w.sum());
  };
  return t;
}

// Transports the weighted posterior mixture into an equally weighted one via
// the particle-flow Fokker-Planck dynamics started at the mixture centers.
inline Ensemble fp_equal_weighting(const GaussianMixture& posterior, const FlowSettings& settings) {
  const GaussianKernel kernel(posterior.shared_cov);
  const TargetDensity target = mixture_target(posterior);
  Ensemble e0{posterior.centers};
  FlowConfig cfg;
  cfg.tau_end = settings.tau_end;
  cfg.stationarity_tol = settings.stationarity_tol;
  const auto problem = build_fp_problem(kernel, target, posterior.size(), cfg);
  auto result = run_to_stationarity(problem, e0, settings.method, settings.dtau, cfg,
                                    default_proximal_solver());
  return result.ensemble;
}

// x_a^i = x_*^i + B_a^{1/2} B_f^{-1/2} (x_f^i - xbar_f).
inline Ensemble recombine(const Ensemble& x_star, const Ensemble& forecast,
                          const GaussianMixture& mixture_f, const Matrix& b_a) {
  const Matrix bf_root = psd_sqrt(mixture_f.shared_cov);
  const Matrix bf_root_inv = psd_pseudo_inverse(bf_root);
  if ((bf_root * bf_root_inv - Matrix::Identity(bf_root.rows(), bf_root.cols())).norm() > 1e-6)
    throw NumericalError("recombine: B_f not invertible");
  const Matrix transport = psd_sqrt(b_a) * bf_root_inv;
  const Vector xf_mean = ensemble_mean(forecast);
  std::vector<Vector> members;
  members.reserve(x_star.size());
  for (int i = 0; i < x_star.size(); ++i)
    members.push_back(x_star.members[i] + transport * (forecast.members[i] - xf_mean));
  return Ensemble(std::move(members));
}

// Additive rejuvenation noise x^i + beta * xi^i, xi ~ N(0, P_f).
inline Ensemble rejuvenate(const Ensemble& e, double beta_rej, const Matrix& p_f, SeededRng& rng) {
  if (beta_rej < 0.0) throw std::invalid_argument("rejuvenate: beta must be nonnegative");
  if (beta_rej == 0.0) return e;
  const Matrix root = psd_sqrt(p_f);
  std::vector<Vector> members;
  members.reserve(e.size());
  for (const auto& x : e.members) members.push_back(x + beta_rej * (root * rng.normal_vector(e.dim())));
  return Ensemble(std::move(members));
}

// Mean over cycles of the per-cycle root-mean-square error.
inline double rmse(const std::vector<Vector>& analysis_means, const std::vector<Vector>& reference) {
  if (analysis_means.size() != reference.size()) throw DimensionError("rmse: length mismatch");
  if (analysis_means.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t k = 0; k < analysis_means.size(); ++k) {
    const Vector d = analysis_means[k] - reference[k];
    acc += std::sqrt(d.squaredNorm() / d.size());
  }
  return acc / analysis_means.size();
}

struct CycleRecord {
  int cycle = 0;
  double time = 0.0;
  double rmse_contribution = 0.0;
  Vector ensemble_mean;
  double weight_entropy = 0.0;
};

struct TwinResult {
  double rmse = 0.0;
  double max_running_rmse = 0.0;
  std::vector<CycleRecord> records;
};

// Full twin experiment: synthetic truth, forecast/analysis cycling, RMSE.
inline TwinResult run_twin_experiment(const L63Params& p, const DaConfig& cfg) {
  if (cfg.cycles < 1) throw std::invalid_argument("run_twin_experiment: cycles >= 1");
  const int steps_per_cycle = static_cast<int>(std::llround(cfg.obs_interval / p.dt));
  if (std::abs(steps_per_cycle * p.dt - cfg.obs_interval) > 1e-12)
    throw std::invalid_argument("run_twin_experiment: obs_interval not a multiple of dt");

  SeededRng rng(cfg.seed);
  const Matrix& h = cfg.obs_operator;
  const Matrix& r = cfg.obs_noise;
  const Matrix r_root = psd_sqrt(r);

  // Land the reference on the attractor before cycle 0.
  Vector x_ref = Vector::Zero(3);
  x_ref << 1.0, 1.0, 1.0;
  for (int i = 0; i < 1000; ++i) x_ref = implicit_midpoint_step(p, x_ref, p.dt);

  std::vector<Vector> members;
  for (int i = 0; i < cfg.ensemble_size; ++i) members.push_back(x_ref + rng.normal_vector(3));
  Ensemble analysis(std::move(members));

  TwinResult result;
  std::vector<Vector> means, refs;
  const int spinup = static_cast<int>(cfg.spinup_fraction * cfg.cycles);
  double running_sum = 0.0;
  int running_count = 0;

  for (int k = 0; k < cfg.cycles; ++k) {
    // Forecast: propagate truth and ensemble to the next observation time.
    for (int s = 0; s < steps_per_cycle; ++s) {
      x_ref = implicit_midpoint_step(p, x_ref, p.dt);
      for (auto& x : analysis.members) x = implicit_midpoint_step(p, x, p.dt);
    }
    const Ensemble forecast = analysis;
    const Vector y = h * x_ref + r_root * rng.normal_vector(static_cast<int>(r.rows()));

    const Matrix p_f = ensemble_covariance(forecast);
    const GaussianMixture prior = gm_forecast(forecast, cfg.alpha);
    const GaussianMixture posterior = gm_analysis(prior, h, r, y);

    Ensemble x_star{posterior.centers};
    if (cfg.alpha < 1.0) {
      // alpha = 1 collapses all centers; the flow is already stationary and
      // the pipeline reduces to a square-root ensemble Kalman filter.
      x_star = fp_equal_weighting(posterior, cfg.flow);
    }
    analysis = recombine(x_star, forecast, prior, posterior.shared_cov);
    analysis = rejuvenate(analysis, cfg.rejuvenation, p_f, rng);

    CycleRecord rec;
    rec.cycle = k;
    rec.time = (k + 1) * cfg.obs_interval;
    rec.ensemble_mean = ensemble_mean(analysis);
    const Vector err = rec.ensemble_mean - x_ref;
    rec.rmse_contribution = std::sqrt(err.squaredNorm() / err.size());
    rec.weight_entropy = 0.0;
    for (int i = 0; i < posterior.size(); ++i)
      if (posterior.weights[i] > 0.0)
        rec.weight_entropy -= posterior.weights[i] * std::log(posterior.weights[i]);
    result.records.push_back(rec);

    running_sum += rec.rmse_contribution;
    ++running_count;
    const double running = running_sum / running_count;
    result.max_running_rmse = std::max(result.max_running_rmse, running);
    if (running > cfg.divergence_cap)
      throw NumericalError("run_twin_experiment: filter divergence, running RMSE " +
                           std::to_string(running) + " at cycle " + std::to_string(k));

    if (k >= spinup) {
      means.push_back(rec.ensemble_mean);
      refs.push_back(x_ref);
    }
  }
  result.rmse = rmse(means, refs);
  return result;
}

}  // namespace gflow
