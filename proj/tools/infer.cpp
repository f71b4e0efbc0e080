#include <exception>
#include <iostream>

#include "gflow/experiments.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    const auto cfg = gflow::parse_config(args);
    return gflow::run_experiment(cfg);
  } catch (const CLI::CallForHelp&) {
    std::cout << "usage: infer <experiment> [--method ee|si|dg|ienkf] [--dtau X] [--theta X]\n"
                 "             [--particles N[,N...]] [--alpha X[,X...]] [--seed N] [--tau-end X]\n"
                 "             [--cycles K] [--with-reference] [--config PATH] [--out PATH] [--jobs N]\n"
                 "experiments: enkbf-linear enkbf-nonlinear fp-linear fp-nonlinear l63\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
