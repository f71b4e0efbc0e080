#pragma once

#include <cstdint>
#include <random>

#include "gflow/linalg.hpp"

namespace gflow {

// Deterministic random source: mt19937_64 plus an explicit Box-Muller
// transform, so sequences are identical across standard library
// implementations (std::normal_distribution is not portable).
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Uniform on (0, 1].
  double uniform() {
    return (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  Vector normal_vector(int dim) {
    Vector v(dim);
    for (int i = 0; i < dim; ++i) v[i] = normal();
    return v;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// n i.i.d. draws mean + cov^{1/2} xi with xi standard normal.
inline Ensemble sample_gaussian(SeededRng& rng, const Vector& mean, const Matrix& cov, int n) {
  const Matrix root = psd_sqrt(cov);
  std::vector<Vector> members;
  members.reserve(n);
  for (int i = 0; i < n; ++i)
    members.push_back(mean + root * rng.normal_vector(static_cast<int>(mean.size())));
  return Ensemble(std::move(members));
}

}  // namespace gflow
