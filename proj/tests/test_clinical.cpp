#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dwts/clinical.hpp"

using namespace dwts;

namespace {

std::vector<PatientRecord> pool(int n, std::uint64_t seed) {
  RandomStream rng(seed);
  return synth_patients(n, PatientStats{}, rng);
}

}  // namespace

TEST_CASE("synthetic patients match the table marginals") {
  const auto patients = pool(10000, 7);
  double age_sum = 0.0;
  int female = 0, bprx = 0;
  for (const auto& p : patients) {
    age_sum += p.age;
    female += p.sex == Sex::kFemale;
    bprx += p.bprx;
  }
  const double n = static_cast<double>(patients.size());
  CHECK(std::abs(age_sum / n - 45.99) < 0.6);
  CHECK(std::abs(female / n - 0.5142) < 0.015);
  CHECK(std::abs(bprx / n - 0.2753) < 0.015);
}

TEST_CASE("every synthetic record satisfies the invariants") {
  for (const auto& p : pool(2000, 8)) {
    CHECK_NOTHROW(p.validate());
    CHECK(p.sbp > p.dbp);
  }
}

TEST_CASE("correlation hook produces correlated draws") {
  PatientStats stats;
  Eigen::MatrixXd corr = Eigen::MatrixXd::Identity(16, 16);
  corr(1, 2) = corr(2, 1) = 0.8;  // sbp-dbp
  stats.correlation = corr;
  RandomStream rng(9);
  const auto patients = synth_patients(4000, stats, rng);
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (const auto& p : patients) {
    sx += p.sbp;
    sy += p.dbp;
    sxx += p.sbp * p.sbp;
    syy += p.dbp * p.dbp;
    sxy += p.sbp * p.dbp;
  }
  const double n = static_cast<double>(patients.size());
  const double corr_emp = (sxy / n - sx / n * sy / n) /
                          (std::sqrt(sxx / n - sx / n * sx / n) *
                           std::sqrt(syy / n - sy / n * sy / n));
  CHECK(corr_emp > 0.5);
}

TEST_CASE("patient CSV ingest round trip and rejection") {
  const auto dir = std::filesystem::temp_directory_path();
  const std::string path = (dir / "dwts_patients_test.csv").string();

  SUBCASE("write then read 100 records field-exact") {
    const auto patients = pool(100, 10);
    write_patients_csv(patients, path);
    const IngestReport report = ingest_csv(path);
    CHECK(report.rejected == 0);
    REQUIRE(report.records.size() == 100);
    for (std::size_t i = 0; i < 100; ++i) {
      CHECK(report.records[i].age == patients[i].age);
      CHECK(report.records[i].sex == patients[i].sex);
      CHECK(report.records[i].race_ethnicity == patients[i].race_ethnicity);
      CHECK(report.records[i].sbp == patients[i].sbp);
      CHECK(report.records[i].albumin_creatinine_ratio ==
            patients[i].albumin_creatinine_ratio);
      CHECK(report.records[i].bprx == patients[i].bprx);
    }
  }

  SUBCASE("empty data section yields an empty list") {
    auto patients = pool(1, 11);
    write_patients_csv({}, path);
    const IngestReport report = ingest_csv(path);
    CHECK(report.records.empty());
    CHECK(report.rejected == 0);
  }

  SUBCASE("rows violating sbp > dbp are rejected with diagnostics") {
    auto patients = pool(20, 12);
    patients[4].sbp = patients[4].dbp - 1.0;  // invalid
    write_patients_csv(patients, path);
    const IngestReport report = ingest_csv(path, 0.5);
    CHECK(report.records.size() == 19);
    CHECK(report.rejected == 1);
    REQUIRE(report.diagnostics.size() == 1);
    CHECK(report.diagnostics[0].find("row 6") != std::string::npos);
    CHECK(report.diagnostics[0].find("sbp") != std::string::npos);
  }

  SUBCASE("exceeding the rejection budget fails the ingest") {
    auto patients = pool(4, 13);
    for (auto& p : patients) p.age = -1.0;
    write_patients_csv(patients, path);
    CHECK_THROWS(ingest_csv(path, 0.1));
  }

  SUBCASE("missing column is an error") {
    std::ofstream out(path);
    out << "age,sex\n";
    out.close();
    CHECK_THROWS(ingest_csv(path));
  }

  std::filesystem::remove(path);
}

TEST_CASE("surrogate risk model behavior") {
  RiskModel zero;
  zero.kind = RiskModelKind::kLogisticSurrogate;
  zero.baseline = 0.0;
  const PatientRecord patient = pool(1, 14)[0];
  CHECK(compute_risk(zero, patient) == doctest::Approx(0.5));

  const RiskModel model = RiskModel::surrogate();
  PatientRecord low = patient, high = patient;
  low.sbp = 110.0;
  low.dbp = std::min(low.dbp, 100.0);
  high.sbp = 160.0;
  CHECK(compute_risk(model, high) > compute_risk(model, low));

  for (const auto& p : pool(2000, 15)) {
    const double risk = compute_risk(model, p);
    CHECK(risk >= 0.0);
    CHECK(risk <= 1.0);
  }

  const auto required = model.required_features();
  CHECK(std::find(required.begin(), required.end(), "sbp") != required.end());
  CHECK(std::find(required.begin(), required.end(), "age") == required.end());
}

TEST_CASE("coefficient-table risk model") {
  const auto dir = std::filesystem::temp_directory_path();
  const std::string path = (dir / "dwts_risk_table.json").string();
  {
    std::ofstream out(path);
    out << R"({
      "female_black_nh": {"ln_age": 0.5, "ln_sbp": 1.2, "tobacco": 0.3,
                           "baseline_survival": 0.95, "mean_lp": 7.5},
      "female_white_nh": {"ln_age": 0.4, "ln_sbp": 1.0, "tobacco": 0.2,
                           "baseline_survival": 0.96, "mean_lp": 7.0}
    })";
  }
  const RiskModel model = RiskModel::load_table(path);
  PatientRecord patient = pool(1, 16)[0];
  patient.sex = Sex::kFemale;
  patient.race_ethnicity = RaceEthnicity::kBlackNh;
  const double risk = compute_risk(model, patient);
  CHECK(risk > 0.0);
  CHECK(risk < 1.0);
  // Hand-computed: 1 - s0^exp(lp - mean_lp).
  const double lp = 0.5 * std::log(patient.age) + 1.2 * std::log(patient.sbp) +
                    0.3 * (patient.tobacco_current ? 1.0 : 0.0);
  CHECK(risk == doctest::Approx(1.0 - std::pow(0.95, std::exp(lp - 7.5))));

  patient.race_ethnicity = RaceEthnicity::kHispanic;
  CHECK_THROWS(compute_risk(model, patient));  // missing stratum
  std::filesystem::remove(path);
}

TEST_CASE("trial reward scales risk by rho") {
  VirtualTrialConfig cfg;
  cfg.noise_sd = 0.0;
  RandomStream rng(17);
  CHECK(trial_reward(0.3, "NoRx", cfg, rng) == doctest::Approx(0.3));
  CHECK(trial_reward(0.3, "BPRx", cfg, rng) == doctest::Approx(0.12));
  CHECK_THROWS(trial_reward(0.3, "Placebo", cfg, rng));

  cfg.noise_sd = 0.05;
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += trial_reward(0.3, "BPRx", cfg, rng);
  CHECK(std::abs(sum / n - 0.12) < 3.0 * 0.05 / std::sqrt(n));
}

TEST_CASE("offline clinical dataset construction") {
  const auto patients = pool(500, 18);
  const RiskModel model = RiskModel::surrogate();
  VirtualTrialConfig cfg;

  SUBCASE("default rule splits on the sbp threshold") {
    RandomStream rng(19);
    const OfflineDataset data =
        build_offline_clinical(patients, model, cfg, nullptr, rng);
    REQUIRE(data.blocks.size() == 2);
    CHECK(data.blocks[0].Z.cols() == 17);
    const auto n_norx = data.blocks[0].Z.rows();
    const auto n_bprx = data.blocks[1].Z.rows();
    CHECK(n_norx + n_bprx == 500);
    int expected_bprx = 0;
    for (const auto& p : patients) expected_bprx += p.sbp > cfg.sbp_threshold;
    CHECK(n_bprx == expected_bprx);
  }

  SUBCASE("a median threshold splits roughly in half") {
    VirtualTrialConfig mid = cfg;
    mid.sbp_threshold = 122.98;
    RandomStream rng(20);
    const OfflineDataset data =
        build_offline_clinical(patients, model, mid, nullptr, rng);
    const double frac =
        static_cast<double>(data.blocks[1].Z.rows()) / 500.0;
    CHECK(frac > 0.4);
    CHECK(frac < 0.6);
  }

  SUBCASE("starvation is detected") {
    VirtualTrialConfig all_bprx = cfg;
    all_bprx.sbp_threshold = 0.0;  // everyone above threshold
    RandomStream rng(21);
    CHECK_THROWS_AS(
        build_offline_clinical(patients, model, all_bprx, nullptr, rng),
        std::runtime_error);
  }

  SUBCASE("determinism given the same stream") {
    RandomStream r1(22), r2(22);
    const OfflineDataset a = build_offline_clinical(patients, model, cfg, nullptr, r1);
    const OfflineDataset b = build_offline_clinical(patients, model, cfg, nullptr, r2);
    CHECK((a.blocks[0].y.array() == b.blocks[0].y.array()).all());
    CHECK((a.blocks[1].y.array() == b.blocks[1].y.array()).all());
  }
}

TEST_CASE("context encoding") {
  const auto patients = pool(300, 23);
  VirtualTrialConfig cfg;
  const ContextEncoder enc = fit_context_encoder(patients, cfg);
  CHECK(enc.z_dim() == 17);
  CHECK(enc.h_dim() == 1 + 2 + 4);  // age + sex one-hot + race one-hot

  const OnlineContext x = patient_to_context(patients[0], enc);
  CHECK(x.size() == enc.dim());

  // One-hot blocks sum to one.
  const double sex_sum = x[enc.z_dim() + 1] + x[enc.z_dim() + 2];
  const double race_sum =
      x[enc.z_dim() + 3] + x[enc.z_dim() + 4] + x[enc.z_dim() + 5] + x[enc.z_dim() + 6];
  CHECK(sex_sum == doctest::Approx(1.0));
  CHECK(race_sum == doctest::Approx(1.0));

  // A record equal to the standardization means has a zero z-part.
  PatientRecord mean_patient = patients[0];
  for (int c = 0; c < enc.z_dim(); ++c) {
    // Only numeric fields appear in the default z list.
    const std::string& col = enc.z_columns[static_cast<std::size_t>(c)];
    REQUIRE(col.find('=') == std::string::npos);
  }
  mean_patient.tobacco_current = false;
  mean_patient.cvd_history = false;
  mean_patient.sbp = enc.z_mean[2];
  mean_patient.dbp = enc.z_mean[3];
  mean_patient.bmi = enc.z_mean[4];
  mean_patient.heart_rate = enc.z_mean[5];
  mean_patient.hba1c = enc.z_mean[6];
  mean_patient.total_chol = enc.z_mean[7];
  mean_patient.hdl = enc.z_mean[8];
  mean_patient.ldl = enc.z_mean[9];
  mean_patient.triglycerides = enc.z_mean[10];
  mean_patient.fasting_glucose = enc.z_mean[11];
  mean_patient.alt = enc.z_mean[12];
  mean_patient.potassium = enc.z_mean[13];
  mean_patient.serum_creatinine = enc.z_mean[14];
  mean_patient.urine_creatinine = enc.z_mean[15];
  mean_patient.albumin_creatinine_ratio = enc.z_mean[16];
  const OnlineContext zeroed = patient_to_context(mean_patient, enc);
  for (int c = 2; c < enc.z_dim(); ++c) {
    CHECK(zeroed[c] == doctest::Approx(0.0).epsilon(1e-12));
  }

  // Offline Z holds no demographic column.
  for (const auto& col : enc.z_columns) {
    CHECK(col.find("age") == std::string::npos);
    CHECK(col.find("sex") == std::string::npos);
    CHECK(col.find("race") == std::string::npos);
  }
}

TEST_CASE("z and h features must stay disjoint") {
  VirtualTrialConfig cfg;
  cfg.z_features = {"sbp", "bmi"};
  cfg.h_features = {"age", "sbp"};
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("trial config JSON round trip") {
  VirtualTrialConfig cfg;
  cfg.noise_sd = 0.2;
  cfg.kappa = 0.05;
  cfg.seed = 99;
  const VirtualTrialConfig back = VirtualTrialConfig::from_json(cfg.to_json());
  CHECK(back.noise_sd == 0.2);
  CHECK(back.kappa == 0.05);
  CHECK(back.seed == 99);
  CHECK(back.rho.at("BPRx") == 0.4);
  CHECK_THROWS(VirtualTrialConfig::from_json(R"({"bogus": 1})"));
}

TEST_CASE("clinical experiment at desk scale") {
  const auto patients = pool(1500, 24);
  const RiskModel model = RiskModel::surrogate();
  VirtualTrialConfig cfg;
  cfg.noise_sd = 0.05;

  const ClinicalResult result = run_clinical_experiment(
      patients, model, cfg, 300, 2,
      {Policy::kDwts, Policy::kLintsFull, Policy::kOracle}, 31, 2);

  REQUIRE(result.tables.size() == 3);
  for (const auto& trace : result.traces) {
    if (trace.policy == "ORACLE") {
      CHECK(trace.cumulative[trace.cumulative.size() - 1] == 0.0);
    }
    CHECK(trace.instantaneous.minCoeff() >= 0.0);
  }
  // Masks exist per arm and respect kappa = 0.01 thresholding.
  REQUIRE(result.dwts_masks.size() == 2);
  CHECK(result.kappa == 0.01);

  // Reruns are deterministic.
  const ClinicalResult again = run_clinical_experiment(
      patients, model, cfg, 300, 2,
      {Policy::kDwts, Policy::kLintsFull, Policy::kOracle}, 31, 1);
  for (std::size_t i = 0; i < result.traces.size(); ++i) {
    CHECK((result.traces[i].cumulative.array() ==
           again.traces[i].cumulative.array())
              .all());
  }
}

TEST_CASE("distinct records encode to distinct contexts") {
  const auto patients = pool(50, 25);
  VirtualTrialConfig cfg;
  const ContextEncoder enc = fit_context_encoder(patients, cfg);
  for (int i = 1; i < 50; ++i) {
    const OnlineContext a = patient_to_context(patients[0], enc);
    const OnlineContext b = patient_to_context(patients[i], enc);
    CHECK((a - b).cwiseAbs().maxCoeff() > 0.0);
  }
}
