#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "gflow/experiments.hpp"

using namespace gflow;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& p) : path(p) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("defaults are applied per experiment") {
  const auto cfg = parse_config({"enkbf-linear"});
  CHECK(cfg.method == "dg");
  CHECK(cfg.dtau == doctest::Approx(0.1));
  CHECK(cfg.tau_end == doctest::Approx(1.0));
  CHECK(cfg.single_particles() == 2);
  CHECK(cfg.seed == 1);
  CHECK(cfg.output_path == "enkbf-linear.csv");

  const auto fp = parse_config({"fp-linear"});
  CHECK(fp.single_particles() == 10);
  CHECK(fp.single_alpha() == doctest::Approx(0.005));
}

TEST_CASE("command-line flags override config file values which override defaults") {
  TempFile tmp("/tmp/gflow_test_config.ini");
  {
    std::ofstream out(tmp.path);
    out << "dtau=0.25\n";
    out << "particles=7\n";
    out << "seed=99\n";
  }
  // file only
  const auto from_file = parse_config({"enkbf-nonlinear", "--config", tmp.path});
  CHECK(from_file.dtau == doctest::Approx(0.25));
  CHECK(from_file.single_particles() == 7);
  CHECK(from_file.seed == 99);
  // CLI wins over file, file still wins over defaults
  const auto mixed =
      parse_config({"enkbf-nonlinear", "--config", tmp.path, "--dtau", "0.5"});
  CHECK(mixed.dtau == doctest::Approx(0.5));
  CHECK(mixed.single_particles() == 7);
}

TEST_CASE("validation rejects bad combinations") {
  CHECK_THROWS(parse_config({"fp-linear", "--method", "ienkf"}));
  CHECK_THROWS(parse_config({"l63", "--method", "ienkf"}));
  CHECK_THROWS(parse_config({"unknown-experiment"}));
  CHECK_THROWS(parse_config({"fp-linear", "--alpha", "1.5"}));
  CHECK_THROWS(parse_config({"fp-linear", "--alpha", "0"}));
  CHECK_THROWS(parse_config({"enkbf-linear", "--dtau", "-0.1"}));
  CHECK_NOTHROW(parse_config({"enkbf-linear", "--method", "ienkf"}));
}

TEST_CASE("comma-separated grid lists are parsed") {
  const auto cfg = parse_config({"l63", "--alpha", "0.25,0.5,1.0", "--particles", "15,20"});
  REQUIRE(cfg.alphas.size() == 3);
  REQUIRE(cfg.particles.size() == 2);
  CHECK(cfg.alphas[1] == doctest::Approx(0.5));
  CHECK(cfg.particles[1] == 20);
}

TEST_CASE("csv output is round-trip exact") {
  TempFile tmp("/tmp/gflow_test_roundtrip.csv");
  const double v1 = 1.0 / 3.0, v2 = 0.1, v3 = -1.23456789012345e-7;
  emit_csv(tmp.path, {"a", "b", "c"}, {{v1, v2, v3}});
  std::ifstream in(tmp.path);
  std::string header, line;
  std::getline(in, header);
  CHECK(header == "a,b,c");
  std::getline(in, line);
  std::stringstream ss(line);
  std::string cell;
  std::vector<double> parsed;
  while (std::getline(ss, cell, ',')) parsed.push_back(std::stod(cell));
  REQUIRE(parsed.size() == 3);
  CHECK(parsed[0] == v1);
  CHECK(parsed[1] == v2);
  CHECK(parsed[2] == v3);
}

TEST_CASE("emit_csv validates row width") {
  CHECK_THROWS_AS(emit_csv("/tmp/gflow_test_width.csv", {"a", "b"}, {{1.0}}),
                  std::invalid_argument);
  std::remove("/tmp/gflow_test_width.csv");
}

TEST_CASE("linear experiment output has the documented schema and exact columns") {
  TempFile tmp("/tmp/gflow_test_linear.csv");
  auto cfg = parse_config({"enkbf-linear", "--out", tmp.path});
  CHECK(run_experiment(cfg) == 0);
  std::ifstream in(tmp.path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "tau,mean,variance,potential,gamma,inner_iters,exact_mean,exact_variance");
  int rows = 0;
  std::string line;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 11);  // tau = 0 plus ten steps
}

TEST_CASE("repeated runs with the same configuration are byte identical") {
  TempFile a("/tmp/gflow_test_det_a.csv"), b("/tmp/gflow_test_det_b.csv");
  auto cfg_a = parse_config({"enkbf-nonlinear", "--dtau", "0.1", "--seed", "5", "--out", a.path});
  auto cfg_b = parse_config({"enkbf-nonlinear", "--dtau", "0.1", "--seed", "5", "--out", b.path});
  run_experiment(cfg_a);
  run_experiment(cfg_b);
  CHECK(slurp(a.path) == slurp(b.path));
}

TEST_CASE("l63 grid emits one row per cell") {
  TempFile tmp("/tmp/gflow_test_grid.csv");
  auto cfg = parse_config({"l63", "--alpha", "1.0,1.0", "--particles", "15,20", "--cycles", "20",
                           "--out", tmp.path});
  CHECK(run_experiment(cfg) == 0);
  std::ifstream in(tmp.path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "alpha,M,K,seed,rmse");
  int rows = 0;
  std::string line;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 4);
}

TEST_CASE("parallel grid execution matches serial execution") {
  TempFile a("/tmp/gflow_test_jobs_a.csv"), b("/tmp/gflow_test_jobs_b.csv");
  auto serial = parse_config({"l63", "--alpha", "1.0", "--particles", "15,20", "--cycles", "20",
                              "--out", a.path});
  auto parallel = parse_config({"l63", "--alpha", "1.0", "--particles", "15,20", "--cycles", "20",
                                "--jobs", "2", "--out", b.path});
  run_experiment(serial);
  run_experiment(parallel);
  CHECK(slurp(a.path) == slurp(b.path));
}
