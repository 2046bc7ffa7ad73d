#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "idc/harness.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRunFailed = 2;

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> values;
  std::stringstream ss(csv);
  for (std::string cell; std::getline(ss, cell, ',');) {
    std::size_t used = 0;
    try {
      values.push_back(std::stod(cell, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || cell.find_first_not_of(" \t", used) != std::string::npos)
      throw idc::InvalidArgument("--values: bad number '" + cell + "'");
  }
  if (values.empty()) throw idc::InvalidArgument("--values: empty list");
  return values;
}

void write_matrix(const idc::MatX& M, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw idc::IoError("cannot write " + path.string());
  out << std::setprecision(17);
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    for (Eigen::Index c = 0; c < M.cols(); ++c) out << (c ? "," : "") << M(r, c);
    out << "\n";
  }
  out.flush();
  if (!out) throw idc::IoError("write failed for " + path.string());
}

void print_summary(const idc::TrajectoryLog& log) {
  for (const auto& [k, v] : idc::metrics_pairs(log)) std::cout << k << "=" << v << "\n";
}

int simulate(const std::string& scenario_path, const std::string& out, const std::optional<std::uint64_t>& seed) {
  auto scenario = idc::load_scenario(scenario_path);
  if (seed) scenario.noise.seed = *seed;
  const auto log = idc::run_closed_loop(scenario);
  if (!out.empty()) idc::write_log(log, out);
  print_summary(log);
  if (log.status != idc::RunStatus::completed) {
    std::cerr << log.message << "\n";
    return kExitRunFailed;
  }
  return kExitOk;
}

int ablate(const std::string& scenario_path, const std::string& sweep, const std::string& values,
           const std::string& out) {
  const auto scenario = idc::load_scenario(scenario_path);
  const auto kind = idc::parse_sweep(sweep);
  const auto rows = idc::run_ablation(scenario, kind, parse_values(values));
  const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw idc::IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto table = dir / (std::string("ablation_") + idc::to_string(kind) + ".csv");
  idc::write_ablation(rows, kind, table);
  bool failed = false;
  for (const auto& r : rows) {
    std::cout << idc::to_string(kind) << "=" << r.value << " status=" << idc::to_string(r.status)
              << " rms_position_error=" << r.metrics.rms_position_error
              << " max_abs_roll=" << r.metrics.max_abs_roll << " max_abs_pitch=" << r.metrics.max_abs_pitch
              << " control_effort=" << r.metrics.control_effort << "\n";
    failed = failed || r.status != idc::RunStatus::completed;
  }
  std::cout << "table=" << table.string() << "\n";
  return failed ? kExitRunFailed : kExitOk;
}

int linearize(const std::string& scenario_path, const std::string& out) {
  const auto scenario = idc::load_scenario(scenario_path);
  const auto model = idc::linearize_model(idc::controller_params(scenario),
                                          idc::reference_position(scenario.reference, 0.0), scenario.control_dt);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw idc::IoError("cannot create " + out + ": " + ec.message());
  write_matrix(model.A, fs::path(out) / "A.csv");
  write_matrix(model.B, fs::path(out) / "B.csv");
  write_matrix(model.C, fs::path(out) / "C.csv");
  std::cout << "states=" << model.n_states() << " inputs=" << model.n_inputs() << " outputs=" << model.n_outputs()
            << " dt=" << model.dt << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Integrated decision controller for a payload carried by several UAVs"};
  app.require_subcommand(1);

  std::string scenario;
  std::string out;
  std::optional<std::uint64_t> seed;
  auto* sim = app.add_subcommand("simulate", "Run one closed loop and write its logs");
  sim->add_option("--scenario", scenario, "Scenario file")->required();
  sim->add_option("--out", out, "Output directory for trajectory and metrics");
  sim->add_option("--seed", seed, "Noise seed overriding the scenario");

  std::string sweep;
  std::string values;
  auto* abl = app.add_subcommand("ablate", "Sweep noise, payload mass factor or safety margin");
  abl->add_option("--scenario", scenario, "Scenario file")->required();
  abl->add_option("--sweep", sweep, "noise | mass | margin")->required();
  abl->add_option("--values", values, "Comma-separated sweep values")->required();
  abl->add_option("--out", out, "Output directory for the ablation table");

  auto* lin = app.add_subcommand("linearize", "Write the discrete A, B and C matrices as CSV");
  lin->add_option("--scenario", scenario, "Scenario file")->required();
  lin->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*sim) return simulate(scenario, out, seed);
    if (*abl) return ablate(scenario, sweep, values, out);
    return linearize(scenario, out);
  } catch (const idc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
