#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace {

namespace fs = std::filesystem;

std::string bin_path() {
  const char* env = std::getenv("DWTS_BIN");
  return env ? env : "";
}

int run(const std::string& args) {
  const std::string cmd = bin_path() + " " + args + " >/dev/null 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

int run_capture(const std::string& args, const std::string& stdout_path) {
  const std::string cmd =
      bin_path() + " " + args + " >" + stdout_path + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("cli end-to-end") {
  if (bin_path().empty()) {
    MESSAGE("DWTS_BIN not set; skipping CLI tests");
    return;
  }
  const fs::path dir = fs::temp_directory_path() / "dwts_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  SUBCASE("help exits 0 for every subcommand") {
    CHECK(run("--help") == 0);
    for (const char* sub : {"synth", "ddl", "run", "clinical", "plot"}) {
      CHECK(run(std::string(sub) + " --help") == 0);
    }
  }

  SUBCASE("missing config exits 2") {
    CHECK(run("run --config " + (dir / "missing.json").string()) == 2);
  }

  SUBCASE("unknown flag exits 2") {
    CHECK(run("synth --bogus 1") == 2);
  }

  SUBCASE("synth then ddl smoke") {
    const fs::path sem = dir / "sem.json";
    {
      std::ofstream out(sem);
      out << R"({"p":8,"q":2,"K":2,"p_eff":3,"n_per_arm":150,"seed":5})";
    }
    const fs::path csv = dir / "offline.csv";
    CHECK(run("synth --config " + sem.string() + " --out " + csv.string()) == 0);
    CHECK(fs::exists(csv));

    const fs::path est = dir / "estimate.json";
    const fs::path summary = dir / "summary.json";
    CHECK(run_capture("ddl fit --input " + csv.string() +
                          " --arm 1 --alpha 0.05 --lambda-rule fixed --out " +
                          est.string(),
                      summary.string()) == 0);
    CHECK(fs::exists(est));
    const std::string text = slurp(summary);
    CHECK(text.find("\"theta_hat\"") != std::string::npos);
    CHECK(text.find("\"support_size\"") != std::string::npos);
    // 8 estimates for p = 8.
    const std::string full = slurp(est);
    CHECK(full.find("sigma_hat") != std::string::npos);

    // Same seed, same outputs.
    const fs::path csv2 = dir / "offline2.csv";
    CHECK(run("synth --config " + sem.string() + " --out " + csv2.string()) == 0);
    CHECK(slurp(csv) == slurp(csv2));
  }

  SUBCASE("run and plot round trip") {
    const fs::path exp = dir / "experiment.json";
    {
      std::ofstream out(exp);
      out << R"({
        "sem": {"p":6,"q":2,"K":2,"p_eff":2,"n_per_arm":60,"seed":1},
        "T": 25, "n_replications": 2,
        "policies": ["LINTS_FULL", "ORACLE"],
        "alpha": 0.05, "kappa_mode": "theoretical",
        "base_seed": 11, "output_dir": ")" << (dir / "out").string() << R"("
      })";
    }
    CHECK(run("run --config " + exp.string() + " --jobs 2") == 0);
    const fs::path cell_csv = dir / "out" / "p6_LINTS_FULL.csv";
    CHECK(fs::exists(cell_csv));
    CHECK(fs::exists(dir / "out" / "manifest.json"));

    const fs::path svg = dir / "fig.svg";
    CHECK(run("plot --in " + cell_csv.string() + " --out " + svg.string()) == 0);
    CHECK(fs::exists(svg));
  }

  SUBCASE("replication failure exits 3") {
    const fs::path exp = dir / "failing.json";
    {
      std::ofstream out(exp);
      // DWTS requires n > 10 offline rows per arm; this config cannot fit.
      out << R"({
        "sem": {"p":6,"q":2,"K":2,"p_eff":2,"n_per_arm":8,"seed":1},
        "T": 5, "n_replications": 1,
        "policies": ["DWTS"],
        "base_seed": 2, "output_dir": ")" << (dir / "fail_out").string() << R"("
      })";
    }
    CHECK(run("run --config " + exp.string()) == 3);
  }

  SUBCASE("clinical smoke on a synthetic pool") {
    const fs::path out = dir / "clin";
    CHECK(run("clinical --synthetic 400 --T 80 --reps 2 --seed 3 --jobs 2 "
              "--policies LINTS_FULL,ORACLE --out " +
              out.string()) == 0);
    CHECK(fs::exists(out / "clinical_regret.csv"));
    CHECK(fs::exists(out / "clinical_regret.svg"));
  }

  fs::remove_all(dir);
}
