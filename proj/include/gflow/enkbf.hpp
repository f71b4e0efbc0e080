#pragma once

#include <functional>

#include "gflow/gradient_flow.hpp"
#include "gflow/linalg.hpp"
#include "gflow/solvers.hpp"

namespace gflow {

// Data model y = h(x) + R^{1/2} Xi.
struct ObservationModel {
  std::function<Vector(const Vector&)> forward;
  std::function<Matrix(const Vector&)> forward_jacobian;
  Matrix noise_cov;  // R, SPD
  Vector observation;

  Matrix noise_inv() const {
    Eigen::LLT<Matrix> llt(noise_cov);
    if (llt.info() != Eigen::Success) throw NumericalError("ObservationModel: R not SPD");
    return llt.solve(Matrix::Identity(noise_cov.rows(), noise_cov.cols()));
  }
};

struct GaussianPrior {
  Vector mean;
  Matrix cov;
};

// Scalar linear problem whose EnKBF flow is known in closed form.
struct LinearReferenceSolution {
  GaussianPrior prior;  // scalar
  double r = 1.0;
  double y = 0.0;
};

// S(x) = (1/2)(h(x)-y)^T R^{-1} (h(x)-y).
inline double neg_log_likelihood(const ObservationModel& om, const Vector& x) {
  const Vector d = om.forward(x) - om.observation;
  return 0.5 * d.dot(om.noise_inv() * d);
}

// V({x^j}) = (M/2) { S(xbar) + (1/M) sum_i S(x^i) }.
inline double enkbf_potential(const ObservationModel& om, const Ensemble& e) {
  const int m = e.size();
  const Matrix rinv = om.noise_inv();
  auto s = [&](const Vector& x) {
    const Vector d = om.forward(x) - om.observation;
    return 0.5 * d.dot(rinv * d);
  };
  double sum = 0.0;
  for (const auto& x : e.members) sum += s(x);
  return (m / 2.0) * (s(ensemble_mean(e)) + sum / m);
}

// Analytic gradient of the potential, stacked in ensemble order:
// grad_{x^i} V = (1/2) { h'(xbar)^T R^{-1} (h(xbar)-y) + h'(x^i)^T R^{-1} (h(x^i)-y) }.
inline Vector enkbf_gradient(const ObservationModel& om, const Ensemble& e) {
  const Matrix rinv = om.noise_inv();
  const Vector xbar = ensemble_mean(e);
  const Vector mean_term =
      om.forward_jacobian(xbar).transpose() * (rinv * (om.forward(xbar) - om.observation));
  Vector g(static_cast<Eigen::Index>(e.size()) * e.dim());
  for (int i = 0; i < e.size(); ++i) {
    const Vector& x = e.members[i];
    const Vector gi =
        om.forward_jacobian(x).transpose() * (rinv * (om.forward(x) - om.observation));
    g.segment(i * e.dim(), e.dim()) = 0.5 * (mean_term + gi);
  }
  return g;
}

// Block-diagonal mobility with P^{xx} repeated M times.
inline Matrix enkbf_mobility(const Ensemble& e) {
  const Matrix pxx = ensemble_covariance(e);
  const int d = e.dim();
  Matrix a = Matrix::Zero(static_cast<Eigen::Index>(e.size()) * d, static_cast<Eigen::Index>(e.size()) * d);
  for (int i = 0; i < e.size(); ++i) a.block(i * d, i * d, d, d) = pxx;
  return a;
}

// Derivative-free drift dx^i = -P^{xh} R^{-1} ((h(x^i)+hbar)/2 - y).
inline std::vector<Vector> derivative_free_rhs(const ObservationModel& om, const Ensemble& e) {
  std::vector<Vector> images;
  images.reserve(e.size());
  for (const auto& x : e.members) images.push_back(om.forward(x));
  Vector hbar = Vector::Zero(images.front().size());
  for (const auto& h : images) hbar += h;
  hbar /= e.size();
  const Matrix pxh = cross_covariance(e, images);
  const Matrix rinv = om.noise_inv();
  std::vector<Vector> drift;
  drift.reserve(e.size());
  for (int i = 0; i < e.size(); ++i)
    drift.push_back(-pxh * (rinv * (0.5 * (images[i] + hbar) - om.observation)));
  return drift;
}

// Gradient-free explicit step with regularised gain (IEnKF).
inline Ensemble ienkf_step(const ObservationModel& om, const Ensemble& e, double dt) {
  if (dt <= 0.0) throw std::invalid_argument("ienkf_step: dt must be positive");
  std::vector<Vector> images;
  images.reserve(e.size());
  for (const auto& x : e.members) images.push_back(om.forward(x));
  Vector hbar = Vector::Zero(images.front().size());
  for (const auto& h : images) hbar += h;
  hbar /= e.size();
  Matrix phh = Matrix::Zero(hbar.size(), hbar.size());
  for (const auto& h : images) phh += (h - hbar) * (h - hbar).transpose();
  phh /= (e.size() - 1);
  const Matrix pxh = cross_covariance(e, images);
  Eigen::LDLT<Matrix> gain(dt * phh + om.noise_cov);
  if (gain.info() != Eigen::Success) throw NumericalError("ienkf_step: singular gain matrix");
  std::vector<Vector> members;
  members.reserve(e.size());
  for (int i = 0; i < e.size(); ++i) {
    const Vector innov = 0.5 * (images[i] + hbar) - om.observation;
    members.push_back(e.members[i] - dt * (pxh * gain.solve(innov)));
  }
  return Ensemble(std::move(members));
}

// Wires potential, gradient, and mobility into the stacked-state flow of
// dimension M * N_x.
inline GradientFlowProblem build_enkbf_problem(const ObservationModel& om, int n_members,
                                               int state_dim) {
  GradientFlowProblem p;
  p.dim = n_members * state_dim;
  p.potential = [om, n_members](const Vector& z) {
    return enkbf_potential(om, unstack(z, n_members));
  };
  p.gradient = [om, n_members](const Vector& z) {
    return enkbf_gradient(om, unstack(z, n_members));
  };
  p.mobility = [n_members](const Vector& z) { return enkbf_mobility(unstack(z, n_members)); };
  return p;
}

namespace detail {

// Residual/weight structure for the scalar-state inner problem, with the
// gamma * theta * dtau product already combined. The data weights carry a
// factor 1/2 relative to the displayed form so that the weighted objective
// (1/2) f^T C f reproduces the proximal problems of the semi-implicit and
// discrete-gradient steps exactly.
inline ResidualProblem enkbf_inner_residual(const ObservationModel& om, const Ensemble& e_n,
                                            double gamma_theta_dtau, double sigma_ref) {
  const int m = e_n.size();
  const double r = om.noise_cov(0, 0);
  const Vector z_n = stack(e_n);

  ResidualProblem p;
  p.residual = [om, z_n, m](const Vector& z) {
    Vector f(2 * m + 1);
    f.head(m) = z - z_n;
    double xbar = z.mean();
    f[m] = om.forward(Vector::Constant(1, xbar))[0] - om.observation[0];
    for (int i = 0; i < m; ++i)
      f[m + 1 + i] = om.forward(z.segment(i, 1))[0] - om.observation[0];
    return f;
  };
  p.jacobian = [om, m](const Vector& z) {
    Matrix j = Matrix::Zero(2 * m + 1, m);
    j.topRows(m) = Matrix::Identity(m, m);
    double xbar = z.mean();
    const double hp_bar = om.forward_jacobian(Vector::Constant(1, xbar))(0, 0);
    j.row(m) = Vector::Constant(m, hp_bar / m).transpose();
    for (int i = 0; i < m; ++i)
      j(m + 1 + i, i) = om.forward_jacobian(z.segment(i, 1))(0, 0);
    return j;
  };
  Vector w(2 * m + 1);
  const double prox_w = sigma_ref > 0.0 ? 1.0 / sigma_ref : 0.0;
  w.head(m).setConstant(prox_w);
  w[m] = gamma_theta_dtau * m / (2.0 * r);
  w.tail(m).setConstant(gamma_theta_dtau / (2.0 * r));
  p.weight = w.asDiagonal();
  return p;
}

}  // namespace detail

// Structured Gauss-Newton inner problem of the scalar-state EnKBF step.
inline ResidualProblem build_inner_residual(const ObservationModel& om, const Ensemble& e_n,
                                            double gamma, double theta, double dtau,
                                            double sigma_ref) {
  return detail::enkbf_inner_residual(om, e_n, gamma * theta * dtau, sigma_ref);
}

// Proximal solver backed by the structured Gauss-Newton formulation;
// valid for scalar states (mobility a multiple of the identity).
inline ProximalSolver enkbf_gauss_newton_solver(const ObservationModel& om) {
  return [om](const GradientFlowProblem& p, const Vector& z_n, const Matrix& a, double theta,
              double scale, const Vector& guess) -> Vector {
    (void)p;
    const double sigma = a(0, 0);
    if (sigma <= 0.0 || scale <= 0.0) return z_n;
    const int m = static_cast<int>(z_n.size());
    const auto rp = detail::enkbf_inner_residual(om, unstack(z_n, m), scale * theta, sigma);
    auto [z, report] = gauss_newton(rp, guess, 1e-13, 100);
    (void)report;
    return z;
  };
}

// Closed-form mean/variance of the scalar linear EnKBF flow. The mean update
// uses the posterior-consistent sign m_tau = m0 + K_tau (y - m0).
inline std::pair<double, double> analytic_linear_solution(const LinearReferenceSolution& ref,
                                                          double tau) {
  const double m0 = ref.prior.mean[0];
  const double s0 = ref.prior.cov(0, 0);
  const double k = s0 * tau / (s0 * tau + ref.r);
  return {m0 + k * (ref.y - m0), s0 - k * s0};
}

}  // namespace gflow
