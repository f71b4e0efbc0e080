#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

namespace gflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Relative tolerance used when deciding whether a matrix counts as symmetric.
inline constexpr double kSymmetryTol = 1e-10;
// Relative eigenvalue cutoff for pseudo-inverses.
inline constexpr double kPinvCutoff = 1e-12;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require_finite(const Vector& v, const char* what) {
  if (!v.allFinite()) throw NumericalError(std::string(what) + ": non-finite entries");
}

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericalError(std::string(what) + ": non-finite entries");
}

inline bool is_symmetric(const Matrix& m, double rel_tol = kSymmetryTol) {
  if (m.rows() != m.cols()) return false;
  double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

// Ordered collection of M state vectors sharing one dimension.
struct Ensemble {
  std::vector<Vector> members;

  Ensemble() = default;
  explicit Ensemble(std::vector<Vector> m) : members(std::move(m)) { validate(); }

  int size() const { return static_cast<int>(members.size()); }
  int dim() const { return members.empty() ? 0 : static_cast<int>(members.front().size()); }

  void validate() const {
    for (const auto& v : members) {
      if (v.size() != dim()) throw DimensionError("Ensemble: inconsistent member dimensions");
      require_finite(v, "Ensemble");
    }
  }
};

// Stacks members into one long vector (x^1; x^2; ...; x^M).
inline Vector stack(const Ensemble& e) {
  Vector z(static_cast<Eigen::Index>(e.size()) * e.dim());
  for (int i = 0; i < e.size(); ++i) z.segment(i * e.dim(), e.dim()) = e.members[i];
  return z;
}

inline Ensemble unstack(const Vector& z, int n_members) {
  if (n_members <= 0 || z.size() % n_members != 0)
    throw DimensionError("unstack: size not divisible by member count");
  const int d = static_cast<int>(z.size()) / n_members;
  std::vector<Vector> members(n_members);
  for (int i = 0; i < n_members; ++i) members[i] = z.segment(i * d, d);
  return Ensemble(std::move(members));
}

inline Vector ensemble_mean(const Ensemble& e) {
  if (e.size() < 1) throw DimensionError("ensemble_mean: empty ensemble");
  Vector m = Vector::Zero(e.dim());
  for (const auto& v : e.members) m += v;
  return m / e.size();
}

// Empirical covariance with the M-1 divisor.
inline Matrix ensemble_covariance(const Ensemble& e) {
  if (e.size() < 2) throw DimensionError("ensemble_covariance: needs M >= 2");
  const Vector m = ensemble_mean(e);
  Matrix p = Matrix::Zero(e.dim(), e.dim());
  for (const auto& v : e.members) {
    const Vector d = v - m;
    p += d * d.transpose();
  }
  p /= (e.size() - 1);
  return (p + p.transpose()) / 2.0;
}

// P^{xh} between states and their forward images, M-1 divisor.
inline Matrix cross_covariance(const Ensemble& e, const std::vector<Vector>& images) {
  if (e.size() < 2) throw DimensionError("cross_covariance: needs M >= 2");
  if (static_cast<int>(images.size()) != e.size())
    throw DimensionError("cross_covariance: image count mismatch");
  const Vector xm = ensemble_mean(e);
  Vector hm = Vector::Zero(images.front().size());
  for (const auto& h : images) hm += h;
  hm /= e.size();
  Matrix p = Matrix::Zero(e.dim(), hm.size());
  for (int i = 0; i < e.size(); ++i)
    p += (e.members[i] - xm) * (images[i] - hm).transpose();
  return p / (e.size() - 1);
}

namespace detail {

inline Eigen::SelfAdjointEigenSolver<Matrix> symmetric_eigen(const Matrix& m, const char* what) {
  if (!is_symmetric(m)) throw NumericalError(std::string(what) + ": matrix not symmetric");
  const Matrix s = (m + m.transpose()) / 2.0;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
  if (eig.info() != Eigen::Success)
    throw NumericalError(std::string(what) + ": eigendecomposition failed");
  return eig;
}

}  // namespace detail

// Symmetric PSD square root via eigendecomposition, negative eigenvalues clamped.
inline Matrix psd_sqrt(const Matrix& m) {
  auto eig = detail::symmetric_eigen(m, "psd_sqrt");
  const Vector& ev = eig.eigenvalues();
  const double lmax = std::max(0.0, ev.maxCoeff());
  if (ev.minCoeff() < -kSymmetryTol * std::max(1.0, lmax))
    throw NumericalError("psd_sqrt: matrix has a significantly negative eigenvalue");
  Vector root = ev.cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

// Moore-Penrose inverse of a symmetric PSD matrix.
inline Matrix psd_pseudo_inverse(const Matrix& m) {
  auto eig = detail::symmetric_eigen(m, "psd_pseudo_inverse");
  const Vector& ev = eig.eigenvalues();
  const double cutoff = kPinvCutoff * std::max(0.0, ev.maxCoeff());
  Vector inv(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i) inv[i] = ev[i] > cutoff ? 1.0 / ev[i] : 0.0;
  return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace gflow
