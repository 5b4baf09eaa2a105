#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <string>

#include "dwts/clinical.hpp"
#include "dwts/deconfound.hpp"
#include "dwts/harness.hpp"
#include "dwts/math_util.hpp"
#include "dwts/synth_env.hpp"

using json = nlohmann::json;

namespace {

void print_summary(const json& j) { std::cout << j.dump() << "\n"; }

struct SeedOverride {
  bool set = false;
  std::uint64_t value = 0;
};

int run_synth(const std::string& config_path, const std::string& out_path,
              const SeedOverride& seed) {
  dwts::SemConfig cfg = dwts::SemConfig::load(config_path);
  if (seed.set) cfg.seed = seed.value;
  dwts::RandomStream rng(cfg.seed);
  const auto params = dwts::build_true_params(cfg, rng);
  const auto data = dwts::make_offline_dataset(cfg, params);
  dwts::write_offline_csv(data, out_path);
  print_summary({{"subcommand", "synth"},
                 {"out", out_path},
                 {"arms", cfg.K},
                 {"p", cfg.p},
                 {"rows", cfg.K * cfg.n_per_arm},
                 {"seed", cfg.seed}});
  return 0;
}

int run_ddl(const std::string& input_path, int arm, double alpha,
            const std::string& out_path, const std::string& lambda_rule,
            double trim_quantile, const SeedOverride& seed) {
  const dwts::OfflineDataset data = dwts::read_offline_csv(input_path);
  int block = -1;
  for (std::size_t b = 0; b < data.arm_ids.size(); ++b) {
    if (data.arm_ids[b] == arm) block = static_cast<int>(b);
  }
  if (block < 0) {
    throw std::invalid_argument("ddl: arm " + std::to_string(arm) +
                                " not present in " + input_path);
  }
  dwts::DdlOptions options;
  options.trim_quantile = trim_quantile;
  if (lambda_rule == "cv") options.lambda_rule = dwts::LambdaRule::kCv;
  else if (lambda_rule == "fixed") options.lambda_rule = dwts::LambdaRule::kFixed;
  else throw std::invalid_argument("ddl: --lambda-rule must be cv or fixed");

  dwts::RandomStream rng(seed.set ? seed.value : 0);
  const dwts::DdlEstimate est = dwts::ddl_fit(
      data.blocks[static_cast<std::size_t>(block)].Z,
      data.blocks[static_cast<std::size_t>(block)].y, options, rng);

  if (!out_path.empty()) {
    json full = json::parse(est.to_json());
    full["alpha"] = alpha;
    const double z = dwts::normal_quantile(1.0 - alpha / 2.0);
    json half_widths = json::array();
    for (Eigen::Index i = 0; i < est.sigma_hat.size(); ++i) {
      if (std::isfinite(est.sigma_hat[i])) {
        half_widths.push_back(z * est.sigma_hat[i]);
      } else {
        half_widths.push_back(nullptr);
      }
    }
    full["ci_half_width"] = half_widths;
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw std::runtime_error("ddl: cannot write " + out_path);
    out << full.dump(2) << "\n";
  }

  json summary{{"subcommand", "ddl"},
               {"arm", arm},
               {"p", est.theta_hat.size()},
               {"lambda", est.lambda},
               {"support_size", est.support_size},
               {"noise_sd_hat", est.noise_sd_hat}};
  summary["theta_hat"] =
      std::vector<double>(est.theta_hat.begin(), est.theta_hat.end());
  if (!out_path.empty()) summary["out"] = out_path;
  print_summary(summary);
  return 0;
}

int run_suite_cmd(const std::string& config_path, int jobs,
                  const std::string& out_dir, const SeedOverride& seed) {
  dwts::ExperimentConfig cfg = dwts::ExperimentConfig::load(config_path);
  if (seed.set) cfg.base_seed = seed.value;
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  const dwts::SuiteManifest manifest = dwts::run_suite(cfg, jobs);
  int failures = 0;
  for (const auto& cell : manifest.cells) {
    if (cell.status != "ok") ++failures;
  }
  print_summary({{"subcommand", "run"},
                 {"manifest", cfg.output_dir + "/manifest.json"},
                 {"cells", manifest.cells.size()},
                 {"failures", failures}});
  if (failures > 0) {
    throw std::runtime_error(std::to_string(failures) + " cell(s) failed; see manifest");
  }
  return 0;
}

int run_clinical_cmd(const std::string& patients_path, int synthetic_n,
                     const std::string& config_path,
                     const std::string& risk_table_path, int T, int reps,
                     const std::string& policies_csv, const std::string& out_dir,
                     int jobs, const SeedOverride& seed) {
  dwts::VirtualTrialConfig cfg;
  if (!config_path.empty()) cfg = dwts::VirtualTrialConfig::load(config_path);
  if (seed.set) cfg.seed = seed.value;

  std::vector<dwts::PatientRecord> patients;
  if (!patients_path.empty()) {
    dwts::IngestReport report = dwts::ingest_csv(patients_path);
    for (const std::string& d : report.diagnostics) std::cerr << d << "\n";
    std::cerr << "ingested " << report.records.size() << " records, rejected "
              << report.rejected << "\n";
    patients = std::move(report.records);
  } else {
    if (synthetic_n < 1) {
      throw std::invalid_argument("clinical: need --patients or --synthetic N");
    }
    dwts::RandomStream rng(cfg.seed);
    dwts::RandomStream pool_rng = rng.child("pool");
    patients = dwts::synth_patients(synthetic_n, dwts::PatientStats{}, pool_rng);
  }

  dwts::RiskModel model = risk_table_path.empty()
                              ? dwts::RiskModel::surrogate()
                              : dwts::RiskModel::load_table(risk_table_path);

  std::vector<dwts::Policy> policies;
  {
    std::stringstream ss(policies_csv);
    std::string token;
    while (std::getline(ss, token, ',')) {
      if (!token.empty()) policies.push_back(dwts::policy_from_name(token));
    }
    if (policies.empty()) throw std::invalid_argument("clinical: empty policy list");
  }

  const dwts::ClinicalResult result = dwts::run_clinical_experiment(
      patients, model, cfg, T, reps, policies, cfg.seed, jobs);

  std::filesystem::create_directories(out_dir);
  const std::string csv_path = out_dir + "/clinical_regret.csv";
  dwts::write_results_csv(result.tables, csv_path);
  dwts::SvgStyle style;
  style.title = "virtual trial";
  const std::string svg_path = out_dir + "/clinical_regret.svg";
  dwts::render_regret_svg(result.tables, svg_path, style);

  json final_medians = json::object();
  for (const auto& table : result.tables) {
    const Eigen::Index mid = table.values.cols() / 2;
    final_medians[table.policy] = table.values(table.values.rows() - 1, mid);
  }
  print_summary({{"subcommand", "clinical"},
                 {"csv", csv_path},
                 {"svg", svg_path},
                 {"patients", patients.size()},
                 {"T", T},
                 {"replications", reps},
                 {"final_median_regret", final_medians}});
  return 0;
}

int run_plot(const std::string& in_path, const std::string& out_path,
             const std::string& title) {
  const auto tables = dwts::read_results_csv(in_path);
  dwts::SvgStyle style;
  style.title = title;
  dwts::render_regret_svg(tables, out_path, style);
  print_summary({{"subcommand", "plot"},
                 {"in", in_path},
                 {"out", out_path},
                 {"policies", tables.size()}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deconfounded warm-start Thompson sampling simulator"};
  app.require_subcommand(1);

  SeedOverride seed;
  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&seed](const std::uint64_t& v) {
          seed.set = true;
          seed.value = v;
        },
        "Override the config seed");
  };

  std::function<int()> action;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a confounded offline CSV");
  {
    auto config = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>("offline.csv");
    synth->add_option("--config", *config, "SemConfig JSON")->required();
    synth->add_option("--out", *out, "Output CSV path");
    add_seed(synth);
    synth->callback([&action, config, out, &seed]() {
      action = [config, out, &seed]() { return run_synth(*config, *out, seed); };
    });
  }

  // ddl
  auto* ddl = app.add_subcommand("ddl", "Fit doubly debiased estimates on one arm");
  {
    auto verb = std::make_shared<std::string>();
    auto input = std::make_shared<std::string>();
    auto arm = std::make_shared<int>(1);
    auto alpha = std::make_shared<double>(0.05);
    auto out = std::make_shared<std::string>();
    auto rule = std::make_shared<std::string>("cv");
    auto trim = std::make_shared<double>(0.5);
    ddl->add_option("verb", *verb, "Optional 'fit' verb")
        ->check(CLI::IsMember({"fit"}));
    ddl->add_option("--input", *input, "Offline dataset CSV")->required();
    ddl->add_option("--arm", *arm, "1-based arm label");
    ddl->add_option("--alpha", *alpha, "CI level for the emitted half-widths");
    ddl->add_option("--out", *out, "Write estimate JSON here");
    ddl->add_option("--lambda-rule", *rule, "cv or fixed");
    ddl->add_option("--trim-quantile", *trim, "Trim level quantile in (0,1]");
    add_seed(ddl);
    ddl->callback([&action, input, arm, alpha, out, rule, trim, &seed]() {
      action = [input, arm, alpha, out, rule, trim, &seed]() {
        return run_ddl(*input, *arm, *alpha, *out, *rule, *trim, seed);
      };
    });
  }

  // run
  auto* run = app.add_subcommand("run", "Run a replicated synthetic suite");
  {
    auto config = std::make_shared<std::string>();
    auto jobs = std::make_shared<int>(0);
    auto out = std::make_shared<std::string>();
    run->add_option("--config", *config, "ExperimentConfig JSON")->required();
    run->add_option("--jobs", *jobs, "Worker threads (0 = all cores)");
    run->add_option("--out", *out, "Override output directory");
    add_seed(run);
    run->callback([&action, config, jobs, out, &seed]() {
      action = [config, jobs, out, &seed]() {
        return run_suite_cmd(*config, *jobs, *out, seed);
      };
    });
  }

  // clinical
  auto* clinical = app.add_subcommand("clinical", "Run the virtual trial pipeline");
  {
    auto patients = std::make_shared<std::string>();
    auto synthetic_n = std::make_shared<int>(0);
    auto config = std::make_shared<std::string>();
    auto risk_table = std::make_shared<std::string>();
    auto T = std::make_shared<int>(5000);
    auto reps = std::make_shared<int>(10);
    auto policies = std::make_shared<std::string>("DWTS,LINTS_FULL,LINTS_TRUE,ORACLE");
    auto out = std::make_shared<std::string>("clinical_out");
    auto jobs = std::make_shared<int>(0);
    auto* pat_opt = clinical->add_option("--patients", *patients, "Patient CSV");
    clinical->add_option("--synthetic", *synthetic_n,
                         "Generate this many synthetic patients")
        ->excludes(pat_opt);
    clinical->add_option("--config", *config, "VirtualTrialConfig JSON");
    clinical->add_option("--risk-table", *risk_table,
                         "Stratified risk-coefficient JSON (default: surrogate)");
    clinical->add_option("--T", *T, "Rounds per replication");
    clinical->add_option("--reps", *reps, "Number of replications");
    clinical->add_option("--policies", *policies, "Comma-separated policy list");
    clinical->add_option("--out", *out, "Output directory");
    clinical->add_option("--jobs", *jobs, "Worker threads (0 = all cores)");
    add_seed(clinical);
    clinical->callback([&action, patients, synthetic_n, config, risk_table, T,
                        reps, policies, out, jobs, &seed]() {
      action = [patients, synthetic_n, config, risk_table, T, reps, policies,
                out, jobs, &seed]() {
        return run_clinical_cmd(*patients, *synthetic_n, *config, *risk_table,
                                *T, *reps, *policies, *out, *jobs, seed);
      };
    });
  }

  // plot
  auto* plot = app.add_subcommand("plot", "Render a results CSV as SVG");
  {
    auto in = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>("regret.svg");
    auto title = std::make_shared<std::string>();
    plot->add_option("--in", *in, "Results CSV")->required();
    plot->add_option("--out", *out, "Output SVG path");
    plot->add_option("--title", *title, "Plot title");
    add_seed(plot);
    plot->callback([&action, in, out, title]() {
      action = [in, out, title]() { return run_plot(*in, *out, *title); };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // exits 0 with usage
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    std::cerr << app.help() << "\n";
    return 2;
  }

  try {
    return action ? action() : 2;
  } catch (const std::invalid_argument& ex) {
    std::cerr << json{{"error", ex.what()}, {"kind", "config"}}.dump() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << json{{"error", ex.what()}, {"kind", "runtime"}}.dump() << "\n";
    return 3;
  }
}
