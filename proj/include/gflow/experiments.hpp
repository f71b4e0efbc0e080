#pragma once

#include <CLI11.hpp>
#include <atomic>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "gflow/csv.hpp"
#include "gflow/enkbf.hpp"
#include "gflow/gradient_flow.hpp"
#include "gflow/lorenz63.hpp"
#include "gflow/particle_fp.hpp"
#include "gflow/rng.hpp"

namespace gflow {

struct ExperimentConfig {
  std::string experiment;          // enkbf-linear | enkbf-nonlinear | fp-linear | fp-nonlinear | l63
  std::string method = "dg";       // ee | si | dg | ienkf
  double dtau = 0.0;               // 0 = experiment default
  double theta = 1.0;
  std::vector<int> particles;      // list only meaningful for l63 grids
  std::vector<double> alphas;
  std::uint64_t seed = 1;
  double tau_end = 0.0;            // 0 = experiment default
  int cycles = 5000;               // l63 assimilation cycles
  bool with_reference = false;
  std::string output_path;
  int jobs = 1;

  int single_particles() const { return particles.front(); }
  double single_alpha() const { return alphas.front(); }
};

namespace detail {

inline void apply_experiment_defaults(ExperimentConfig& cfg, bool dtau_set, bool tau_set,
                                      bool particles_set, bool alpha_set) {
  struct Defaults {
    double dtau, tau_end, alpha;
    int particles;
  };
  Defaults d;
  if (cfg.experiment == "enkbf-linear") d = {0.1, 1.0, 1.0, 2};
  else if (cfg.experiment == "enkbf-nonlinear") d = {0.01, 1.0, 1.0, 100};
  else if (cfg.experiment == "fp-linear") d = {0.01, 10.0, 0.005, 10};
  else if (cfg.experiment == "fp-nonlinear") d = {0.005, 10.0, 0.01, 100};
  else d = {0.1, 2.0, 1.0, 20};  // l63: dtau/tau_end steer the inner flow
  if (!dtau_set) cfg.dtau = d.dtau;
  if (!tau_set) cfg.tau_end = d.tau_end;
  if (!particles_set) cfg.particles = {d.particles};
  if (!alpha_set) cfg.alphas = {d.alpha};
  if (cfg.output_path.empty()) cfg.output_path = cfg.experiment + ".csv";
}

}  // namespace detail

// CLI flags override config-file values, which override experiment defaults.
inline ExperimentConfig parse_config(const std::vector<std::string>& args) {
  ExperimentConfig cfg;
  CLI::App app{"gradient-flow inference experiments"};
  app.add_option("experiment", cfg.experiment, "experiment name")
      ->required()
      ->check(CLI::IsMember({"enkbf-linear", "enkbf-nonlinear", "fp-linear", "fp-nonlinear", "l63"}));
  auto* method = app.add_option("--method", cfg.method, "time-stepping method")
                     ->check(CLI::IsMember({"ee", "si", "dg", "ienkf"}));
  auto* dtau = app.add_option("--dtau", cfg.dtau, "step size")->check(CLI::PositiveNumber);
  app.add_option("--theta", cfg.theta, "discrete-gradient theta")
      ->check(CLI::Range(std::nextafter(0.0, 1.0), 1.0));
  auto* particles = app.add_option("--particles", cfg.particles, "ensemble size(s)")
                        ->delimiter(',')
                        ->check(CLI::PositiveNumber);
  auto* alpha = app.add_option("--alpha", cfg.alphas, "shrinkage parameter(s)")
                    ->delimiter(',');
  app.add_option("--seed", cfg.seed, "random seed");
  auto* tau_end = app.add_option("--tau-end", cfg.tau_end, "final flow time")
                      ->check(CLI::PositiveNumber);
  app.add_option("--cycles", cfg.cycles, "l63 assimilation cycles")->check(CLI::PositiveNumber);
  app.add_flag("--with-reference", cfg.with_reference, "also emit a fine-step explicit-Euler reference");
  app.add_option("--out", cfg.output_path, "output CSV path");
  app.add_option("--jobs", cfg.jobs, "parallel workers for independent runs")
      ->check(CLI::PositiveNumber);
  app.set_config("--config");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  app.parse(reversed);

  if (cfg.method == "ienkf" && cfg.experiment.rfind("enkbf", 0) != 0)
    throw CLI::ValidationError("--method ienkf is only valid for enkbf-* experiments "
                               "(legal values there: ee, si, dg, ienkf; elsewhere: ee, si, dg)");
  (void)method;
  detail::apply_experiment_defaults(cfg, dtau->count() > 0, tau_end->count() > 0,
                                    particles->count() > 0, alpha->count() > 0);
  for (double a : cfg.alphas)
    if (a <= 0.0 || a > 1.0) throw CLI::ValidationError("--alpha must lie in (0, 1]");
  return cfg;
}

namespace detail {

inline Method method_from_string(const std::string& m) {
  if (m == "ee") return Method::ExplicitEuler;
  if (m == "si") return Method::SemiImplicit;
  if (m == "dg") return Method::DiscreteGradient;
  throw std::invalid_argument("unknown method: " + m);
}

// Scalar observation models of the two single-state experiments.
inline ObservationModel linear_model() {
  ObservationModel om;
  om.forward = [](const Vector& x) { return x; };
  om.forward_jacobian = [](const Vector&) { return Matrix::Identity(1, 1); };
  om.noise_cov = Matrix::Constant(1, 1, 0.02);
  om.observation = Vector::Constant(1, 0.1);
  return om;
}

inline double cubic_h(double x) { return 7.0 / 12.0 * x * x * x - 3.5 * x * x + 8.0 * x; }
inline double cubic_h_prime(double x) { return 1.75 * x * x - 7.0 * x + 8.0; }

inline ObservationModel nonlinear_model() {
  ObservationModel om;
  om.forward = [](const Vector& x) { return Vector::Constant(1, cubic_h(x[0])); };
  om.forward_jacobian = [](const Vector& x) { return Matrix::Constant(1, 1, cubic_h_prime(x[0])); };
  om.noise_cov = Matrix::Constant(1, 1, 1.0);
  om.observation = Vector::Constant(1, 2.0);
  return om;
}

inline double scalar_mean(const Vector& z) { return z.mean(); }

inline double scalar_variance(const Vector& z) {
  const double m = z.mean();
  return (z.array() - m).square().sum() / (z.size() - 1);
}

inline std::string with_suffix(const std::string& path, const std::string& suffix) {
  const auto dot = path.rfind('.');
  if (dot == std::string::npos) return path + suffix;
  return path.substr(0, dot) + suffix + path.substr(dot);
}

// Explicit-Euler reference trajectory, thinned so long runs stay small.
inline std::vector<std::vector<double>> reference_rows(const GradientFlowProblem& p,
                                                       const Vector& z0, double dtau,
                                                       double tau_end, double grad_tol) {
  std::vector<std::vector<double>> rows;
  const long long n_steps = std::llround(tau_end / dtau);
  const long long stride = std::max<long long>(1, n_steps / 2000);
  Vector z = z0;
  rows.push_back({0.0, scalar_mean(z), scalar_variance(z), p.potential(z), 1.0, 0.0});
  for (long long n = 0; n < n_steps; ++n) {
    z = explicit_euler_step(p, z, dtau);
    if ((n + 1) % stride == 0 || n + 1 == n_steps) {
      rows.push_back({(n + 1) * dtau, scalar_mean(z), scalar_variance(z), p.potential(z), 1.0, 0.0});
      if (p.gradient(z).norm() <= grad_tol) break;
    }
  }
  return rows;
}

inline int run_enkbf_experiment(const ExperimentConfig& cfg) {
  const bool linear = cfg.experiment == "enkbf-linear";
  const ObservationModel om = linear ? linear_model() : nonlinear_model();
  const int m = cfg.single_particles();

  Ensemble e0;
  if (linear) {
    // Positions uniquely determined by the prior moments, ordered x1 < x2.
    const double m0 = 0.5, s0 = 1.0;
    const double d = std::sqrt(s0 / 2.0);
    e0 = Ensemble({Vector::Constant(1, m0 - d), Vector::Constant(1, m0 + d)});
  } else {
    SeededRng rng(cfg.seed);
    e0 = sample_gaussian(rng, Vector::Constant(1, -2.0), Matrix::Constant(1, 1, 0.5), m);
  }

  const auto problem = build_enkbf_problem(om, e0.size(), 1);
  LinearReferenceSolution ref{{Vector::Constant(1, 0.5), Matrix::Constant(1, 1, 1.0)}, 0.02, 0.1};

  std::vector<std::string> header = {"tau", "mean", "variance", "potential", "gamma", "inner_iters"};
  if (linear) {
    header.push_back("exact_mean");
    header.push_back("exact_variance");
  }

  std::vector<std::vector<double>> rows;
  auto push_row = [&](double tau, const Vector& z, double pot, double gamma, int inner) {
    std::vector<double> row = {tau, scalar_mean(z), scalar_variance(z), pot, gamma, double(inner)};
    if (linear) {
      auto [em, ev] = analytic_linear_solution(ref, tau);
      row.push_back(em);
      row.push_back(ev);
    }
    rows.push_back(std::move(row));
  };

  if (cfg.method == "ienkf") {
    Ensemble e = e0;
    push_row(0.0, stack(e), enkbf_potential(om, e), 1.0, 0);
    const int n_steps = static_cast<int>(std::llround(cfg.tau_end / cfg.dtau));
    for (int n = 0; n < n_steps; ++n) {
      e = ienkf_step(om, e, cfg.dtau);
      push_row((n + 1) * cfg.dtau, stack(e), enkbf_potential(om, e), 1.0, 0);
    }
  } else {
    DiscreteGradientConfig dg;
    dg.theta = cfg.theta;
    const auto records = integrate(problem, stack(e0), method_from_string(cfg.method), cfg.dtau,
                                   cfg.tau_end, enkbf_gauss_newton_solver(om), dg);
    for (const auto& r : records) push_row(r.tau, r.z, r.potential_value, r.gamma, r.inner_iterations);
  }
  emit_csv(cfg.output_path, header, rows);

  if (cfg.with_reference && !linear) {
    const auto ref_rows = reference_rows(problem, stack(e0), 0.00025, cfg.tau_end, 0.0);
    emit_csv(with_suffix(cfg.output_path, "_reference"), header, ref_rows);
  }
  return 0;
}

// Posterior log-densities of the two single-state inference problems.
inline TargetDensity linear_target() {
  TargetDensity t;
  t.log_density = [](const Vector& x) {
    return -0.5 * (x[0] - 0.5) * (x[0] - 0.5) - 0.5 * (x[0] - 0.1) * (x[0] - 0.1) / 0.02;
  };
  t.grad_log_density = [](const Vector& x) {
    return Vector::Constant(1, -(x[0] - 0.5) - (x[0] - 0.1) / 0.02);
  };
  return t;
}

inline TargetDensity nonlinear_target() {
  TargetDensity t;
  t.log_density = [](const Vector& x) {
    const double hd = cubic_h(x[0]) - 2.0;
    return -(x[0] + 2.0) * (x[0] + 2.0) - 0.5 * hd * hd;
  };
  t.grad_log_density = [](const Vector& x) {
    const double hd = cubic_h(x[0]) - 2.0;
    return Vector::Constant(1, -2.0 * (x[0] + 2.0) - hd * cubic_h_prime(x[0]));
  };
  return t;
}

inline int run_fp_experiment(const ExperimentConfig& cfg) {
  const bool linear = cfg.experiment == "fp-linear";
  const int m = cfg.single_particles();
  SeededRng rng(cfg.seed);
  const Ensemble prior_samples =
      linear ? sample_gaussian(rng, Vector::Constant(1, 0.5), Matrix::Constant(1, 1, 1.0), m)
             : sample_gaussian(rng, Vector::Constant(1, -2.0), Matrix::Constant(1, 1, 0.5), m);
  auto [e0, kernel] = shrink_initialise(prior_samples, cfg.single_alpha());
  const TargetDensity target = linear ? linear_target() : nonlinear_target();

  FlowConfig flow;
  flow.alpha = cfg.single_alpha();
  flow.tau_end = cfg.tau_end;
  const auto problem = build_fp_problem(kernel, target, m, flow);

  DiscreteGradientConfig dg;
  dg.theta = cfg.theta;
  const auto result = run_to_stationarity(problem, e0, method_from_string(cfg.method), cfg.dtau,
                                          flow, default_proximal_solver(), dg);

  std::vector<std::string> header = {"tau", "mean", "variance", "potential", "gamma", "inner_iters"};
  std::vector<std::vector<double>> rows;
  for (const auto& r : result.records)
    rows.push_back({r.tau, scalar_mean(r.z), scalar_variance(r.z), r.potential_value, r.gamma,
                    double(r.inner_iterations)});
  emit_csv(cfg.output_path, header, rows);

  if (cfg.with_reference) {
    const double ref_dtau = linear ? 2e-4 : 2.5e-6;
    const auto ref_rows =
        reference_rows(problem, stack(e0), ref_dtau, cfg.tau_end, flow.stationarity_tol);
    emit_csv(with_suffix(cfg.output_path, "_reference"), header, ref_rows);
  }
  return 0;
}

inline int run_l63_experiment(const ExperimentConfig& cfg) {
  L63Params params;
  struct Cell {
    double alpha;
    int m;
    std::uint64_t seed;
    double rmse = 0.0;
    TwinResult result;
  };
  std::vector<Cell> cells;
  for (double a : cfg.alphas)
    for (int m : cfg.particles)
      cells.push_back({a, m, cfg.seed + cells.size()});

  auto run_cell = [&](Cell& cell) {
    DaConfig da;
    da.obs_operator = Matrix::Zero(1, 3);
    da.obs_operator(0, 0) = 1.0;
    da.obs_noise = Matrix::Constant(1, 1, 8.0);
    da.cycles = cfg.cycles;
    da.ensemble_size = cell.m;
    da.alpha = cell.alpha;
    da.seed = cell.seed;
    da.flow.method = method_from_string(cfg.method == "ienkf" ? "dg" : cfg.method);
    da.flow.dtau = cfg.dtau;
    da.flow.tau_end = cfg.tau_end;
    cell.result = run_twin_experiment(params, da);
    cell.rmse = cell.result.rmse;
  };

  if (cfg.jobs > 1 && cells.size() > 1) {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1))
        run_cell(cells[i]);
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min<int>(cfg.jobs, static_cast<int>(cells.size())); ++t)
      pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  } else {
    for (auto& c : cells) run_cell(c);
  }

  std::vector<std::vector<double>> grid_rows;
  for (const auto& c : cells)
    grid_rows.push_back({c.alpha, double(c.m), double(cfg.cycles), double(c.seed), c.rmse});
  if (cells.size() == 1) {
    // Single cell: per-cycle CSV at --out, grid summary alongside.
    std::vector<std::vector<double>> rows;
    for (const auto& r : cells[0].result.records)
      rows.push_back({double(r.cycle), r.time, r.rmse_contribution, r.ensemble_mean[0],
                      r.ensemble_mean[1], r.ensemble_mean[2], r.weight_entropy});
    emit_csv(cfg.output_path,
             {"cycle", "time", "rmse_contribution", "ensemble_mean_x", "ensemble_mean_y",
              "ensemble_mean_z", "weight_entropy"},
             rows);
    emit_csv(with_suffix(cfg.output_path, "_grid"), {"alpha", "M", "K", "seed", "rmse"}, grid_rows);
  } else {
    emit_csv(cfg.output_path, {"alpha", "M", "K", "seed", "rmse"}, grid_rows);
  }
  for (const auto& c : cells)
    std::cout << "alpha=" << c.alpha << " M=" << c.m << " K=" << cfg.cycles
              << " seed=" << c.seed << " rmse=" << c.rmse << "\n";
  return 0;
}

}  // namespace detail

inline int run_experiment(const ExperimentConfig& cfg) {
  if (cfg.experiment.rfind("enkbf", 0) == 0) return detail::run_enkbf_experiment(cfg);
  if (cfg.experiment.rfind("fp", 0) == 0) return detail::run_fp_experiment(cfg);
  return detail::run_l63_experiment(cfg);
}

}  // namespace gflow
