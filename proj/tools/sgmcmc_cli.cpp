#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sgmcmc/experiment.hpp"

namespace {

std::vector<double> parse_h_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stod(tok));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic-gradient MCMC experiment runner"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run one configured chain and write its artifacts");
  run->add_option("config", config_path, "experiment config (JSON)")->required();

  std::string sweep_config;
  std::string h_csv;
  int workers = 0;
  auto* sweep = app.add_subcommand("sweep", "Run one chain per step size and rank them");
  sweep->set_help_flag("--help", "print this help message and exit");  // frees -h for --h
  sweep->add_option("config", sweep_config, "experiment config (JSON)")->required();
  sweep->add_option("--h", h_csv, "comma-separated step sizes")->required();
  sweep->add_option("--workers", workers, "worker threads (default: SGMCMC_WORKERS or all cores)");

  std::string trace_path;
  std::string out_path;
  bool want_ksd = false;
  bool want_ess = false;
  double c = 1.0;
  double beta = -0.5;
  auto* diagnose = app.add_subcommand("diagnose", "Recompute diagnostics for a stored trace");
  diagnose->add_option("trace", trace_path, "trace.csv produced by run")->required();
  diagnose->add_flag("--ksd", want_ksd, "kernel Stein discrepancy (needs gradient columns)");
  diagnose->add_flag("--ess", want_ess, "effective sample size per dimension");
  diagnose->add_option("--c", c, "kernel constant");
  diagnose->add_option("--beta", beta, "kernel exponent in (-1,0)");
  diagnose->add_option("--out", out_path, "write diagnostics JSON here as well");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return sgmcmc::cmd_run(config_path, std::cout);
    if (sweep->parsed()) {
      return sgmcmc::cmd_sweep(sweep_config, parse_h_list(h_csv), std::cout, workers);
    }
    if (diagnose->parsed()) {
      if (!want_ksd && !want_ess) want_ess = true;
      return sgmcmc::cmd_diagnose(trace_path, want_ksd, want_ess, c, beta, out_path, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
