// fedivon: run federated experiments from a JSON config and summarize runs.
//
//   fedivon run <config> [--seed N] [--parallel N] [--output DIR] [--quiet]
//   fedivon summarize <run_dir>
//
// Exit status: 0 on success, 2 for an invalid config or usage, 1 for a
// failure while running.

#include <iostream>

#include <CLI11.hpp>

#include "fedivon/experiment.hpp"

namespace {

namespace ex = fedivon::experiment;

int report(const std::string& kind, const std::string& msg, int code) {
  std::cerr << "error: " << kind << ": " << msg << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated variational training with IVON"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  int parallel = 1;
  bool quiet = false;
  CLI::App* run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("config", config_path, "Path to the JSON config")->required();
  run->add_option("--seed", seed, "Override the config's root seed");
  run->add_option("--parallel", parallel, "Client updates trained concurrently (results do not depend on it)")
      ->check(CLI::PositiveNumber);
  run->add_option("--output", output, "Output directory (overrides FEDIVON_OUTPUT_DIR and the config)");
  run->add_flag("--quiet", quiet, "Do not print per-round progress");

  std::string run_dir;
  CLI::App* summarize = app.add_subcommand("summarize", "Write summary.csv and summary.md for a finished run");
  summarize->add_option("run_dir", run_dir, "Run directory holding metrics.jsonl")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*run) {
    ex::ExperimentConfig config;
    try {
      config = ex::parse_config(config_path);
    } catch (const ex::ConfigError& e) {
      std::cerr << "error: config: " << config_path << '\n';
      for (const auto& p : e.problems()) std::cerr << "  " << p << '\n';
      return 2;
    }
    ex::RunOptions opts;
    opts.seed = seed;
    opts.output_dir = output;
    opts.parallel = parallel;
    if (!quiet) opts.log = &std::cerr;
    try {
      const ex::ExperimentResult res = ex::run_experiment(config, opts);
      std::cout << "wrote " << res.run_dir.string() << '\n';
      for (const auto& row : res.summary)
        std::cout << row.algorithm << (row.run.empty() ? "" : " " + row.run) << ' ' << row.split << ' '
                  << row.variant << "  acc " << row.acc << "  ece " << row.ece << "  nll " << row.nll
                  << "  brier " << row.brier << '\n';
    } catch (const ex::ConfigError& e) {
      std::cerr << "error: config: " << config_path << '\n';
      for (const auto& p : e.problems()) std::cerr << "  " << p << '\n';
      return 2;
    } catch (const fedivon::ClientError& e) {
      return report("run", e.what(), 1);
    } catch (const fedivon::NumericError& e) {
      return report("numeric", e.what(), 1);
    } catch (const std::exception& e) {
      return report("run", e.what(), 1);
    }
    return 0;
  }

  try {
    const auto rows = ex::summarize(run_dir);
    std::cout << "wrote " << (std::filesystem::path(run_dir) / "summary.csv").string() << " (" << rows.size()
              << " rows)\n";
  } catch (const std::exception& e) {
    return report("summarize", e.what(), 1);
  }
  return 0;
}
