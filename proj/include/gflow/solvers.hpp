#pragma once

#include <functional>

#include "gflow/linalg.hpp"

namespace gflow {

// Weighted nonlinear least-squares problem: minimise (1/2) f(z)^T C f(z).
struct ResidualProblem {
  std::function<Vector(const Vector&)> residual;
  std::function<Matrix(const Vector&)> jacobian;
  Matrix weight;  // PSD, (m x m)
};

struct SolverReport {
  int iterations = 0;
  double final_objective = 0.0;
  bool converged = false;
  double gradient_norm = 0.0;
};

struct SolverOptions {
  double tol = 1e-10;
  int max_iter = 100;
};

// Gauss-Newton with weighted normal equations and objective-decrease damping.
inline std::pair<Vector, SolverReport> gauss_newton(const ResidualProblem& p, const Vector& z0,
                                                    double tol = 1e-10, int max_iter = 100) {
  Vector z = z0;
  SolverReport report;
  Vector f = p.residual(z);
  double obj = 0.5 * f.dot(p.weight * f);
  for (int it = 0; it < max_iter; ++it) {
    const Matrix j = p.jacobian(z);
    const Vector g = j.transpose() * (p.weight * f);
    report.gradient_norm = g.norm();
    if (report.gradient_norm <= tol * (1.0 + std::abs(obj))) {
      report.converged = true;
      break;
    }
    Matrix n = j.transpose() * p.weight * j;
    Eigen::LDLT<Matrix> ldlt(n);
    Vector delta = ldlt.solve(-g);
    if (ldlt.info() != Eigen::Success || !delta.allFinite()) {
      n += 1e-12 * n.trace() * Matrix::Identity(n.rows(), n.cols());
      ldlt.compute(n);
      delta = ldlt.solve(-g);
      if (ldlt.info() != Eigen::Success || !delta.allFinite())
        throw NumericalError("gauss_newton: singular normal matrix");
    }
    // Full step unless the objective increases; then halve up to 20 times.
    double step = 1.0;
    Vector z_try;
    Vector f_try;
    double obj_try = obj;
    for (int h = 0; h <= 20; ++h) {
      z_try = z + step * delta;
      f_try = p.residual(z_try);
      obj_try = 0.5 * f_try.dot(p.weight * f_try);
      if (obj_try <= obj || h == 20) break;
      step *= 0.5;
    }
    z = z_try;
    f = f_try;
    obj = obj_try;
    report.iterations = it + 1;
    if (delta.norm() * step <= tol) {
      report.converged = true;
      break;
    }
  }
  report.final_objective = obj;
  return {z, report};
}

// BFGS with Armijo backtracking line search.
inline std::pair<Vector, SolverReport> quasi_newton_minimize(
    const std::function<double(const Vector&)>& obj,
    const std::function<Vector(const Vector&)>& grad, const Vector& z0, double tol = 1e-10,
    int max_iter = 100) {
  constexpr double kArmijoC = 1e-4;
  const Eigen::Index n = z0.size();
  Vector z = z0;
  double fz = obj(z);
  Vector g = grad(z);
  Matrix h_inv = Matrix::Identity(n, n);
  SolverReport report;
  report.gradient_norm = g.norm();
  for (int it = 0; it < max_iter; ++it) {
    if (g.norm() <= tol * (1.0 + std::abs(fz))) {
      report.converged = true;
      break;
    }
    Vector dir = -(h_inv * g);
    if (dir.dot(g) >= 0.0) {  // not a descent direction, restart
      h_inv = Matrix::Identity(n, n);
      dir = -g;
    }
    double step = 1.0;
    const double slope = g.dot(dir);
    Vector z_new;
    double f_new = fz;
    bool found = false;
    for (int h = 0; h <= 40; ++h) {
      z_new = z + step * dir;
      f_new = obj(z_new);
      if (std::isfinite(f_new) && f_new <= fz + kArmijoC * step * slope) {
        found = true;
        break;
      }
      step *= 0.5;
    }
    report.iterations = it + 1;
    if (!found) break;  // line search exhausted; report unconverged
    Vector g_new = grad(z_new);
    const Vector s = z_new - z;
    if (s.norm() <= 1e-15 * (1.0 + z.norm())) {  // stagnated at rounding level
      z = z_new;
      fz = f_new;
      g = g_new;
      break;
    }
    const Vector y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Matrix i = Matrix::Identity(n, n);
      h_inv = (i - rho * s * y.transpose()) * h_inv * (i - rho * y * s.transpose()) +
              rho * s * s.transpose();
    } else {
      h_inv = Matrix::Identity(n, n);
    }
    z = z_new;
    fz = f_new;
    g = g_new;
    report.gradient_norm = g.norm();
  }
  report.gradient_norm = g.norm();
  report.final_objective = fz;
  if (g.norm() <= tol * (1.0 + std::abs(fz))) report.converged = true;
  return {z, report};
}

}  // namespace gflow
