#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dwts/harness.hpp"
#include "dwts/rng.hpp"
#include "dwts/synth_env.hpp"

namespace dwts {

enum class Sex { kFemale, kMale };
enum class RaceEthnicity { kBlackNh, kHispanic, kOther, kWhiteNh };

std::string to_string(Sex sex);
std::string to_string(RaceEthnicity race);
Sex sex_from_string(const std::string& token);
RaceEthnicity race_from_string(const std::string& token);

struct PatientRecord {
  // Demographics
  double age = 0.0;
  Sex sex = Sex::kFemale;
  RaceEthnicity race_ethnicity = RaceEthnicity::kOther;
  // Clinical conditions
  bool tobacco_current = false;
  bool cvd_history = false;
  double sbp = 0.0;
  double dbp = 0.0;
  double bmi = 0.0;
  double heart_rate = 0.0;
  // Biomarkers
  double hba1c = 0.0;
  double total_chol = 0.0;
  double hdl = 0.0;
  double ldl = 0.0;
  double triglycerides = 0.0;
  double fasting_glucose = 0.0;
  double alt = 0.0;
  double potassium = 0.0;
  double serum_creatinine = 0.0;
  double urine_creatinine = 0.0;
  double albumin_creatinine_ratio = 0.0;
  // Prescribed medications
  bool bprx = false;
  bool statins = false;

  // Throws with a description of the first violated invariant.
  void validate() const;
};

// Marginal summary statistics used by the synthetic generator. Defaults are
// the published cohort summary the simulator is calibrated to.
struct PatientStats {
  struct Moments {
    double mean = 0.0;
    double sd = 1.0;
  };
  Moments age{45.99, 17.24};
  Moments sbp{122.98, 18.11};
  Moments dbp{70.47, 12.77};
  Moments bmi{29.19, 7.21};
  Moments heart_rate{79.64, 4.94};
  Moments hba1c{5.75, 1.09};
  Moments total_chol{189.93, 41.44};
  Moments hdl{52.81, 15.86};
  Moments ldl{114.46, 42.27};
  Moments triglycerides{113.61, 102.61};
  Moments fasting_glucose{108.29, 34.78};
  Moments alt{24.83, 20.05};
  Moments potassium{3.98, 0.34};
  Moments serum_creatinine{0.88, 0.44};
  Moments urine_creatinine{127.23, 83.75};
  Moments albumin_creatinine_ratio{46.96, 648.48};

  double frac_female = 0.5142;
  double frac_black_nh = 0.2241;
  double frac_white_nh = 0.3638;
  double frac_hispanic = 0.2632;
  // "other" takes the remainder
  double frac_tobacco = 0.5205;
  double frac_cvd_history = 0.0586;
  double frac_bprx = 0.2753;
  double frac_statins = 0.1648;

  // Optional Gaussian-copula correlation across the 16 continuous fields (in
  // declaration order). Marginals above stay in charge of location/scale.
  std::optional<Eigen::MatrixXd> correlation;
};

// Draws n records with the requested marginals. Continuous fields use
// positive-truncated normals whose location is shifted so the truncated mean
// matches the table mean; sbp > dbp is enforced by redrawing dbp. Fields are
// independent unless stats.correlation is set.
std::vector<PatientRecord> synth_patients(int n, const PatientStats& stats,
                                          RandomStream& rng);

struct IngestReport {
  std::vector<PatientRecord> records;
  int rejected = 0;
  std::vector<std::string> diagnostics;  // row-numbered messages
};

// Reads the documented patient CSV schema (see docs/schema.md). Rows that
// violate record invariants are rejected with diagnostics; if more than
// max_reject_fraction of data rows are rejected the whole ingest fails.
IngestReport ingest_csv(const std::string& path, double max_reject_fraction = 0.1);

void write_patients_csv(const std::vector<PatientRecord>& records,
                        const std::string& path);

enum class RiskModelKind { kCoefficientTable, kLogisticSurrogate };

// Cardiovascular risk model. The surrogate evaluates
// sigmoid(sum coefficients[f] * feature(f) + baseline) over a fixed feature
// dictionary. The coefficient-table kind evaluates a sex/race-stratified
// linear predictor over (log-transformed) inputs with a baseline-survival
// transform; its coefficients always come from a loaded table.
struct RiskModel {
  RiskModelKind kind = RiskModelKind::kLogisticSurrogate;
  std::map<std::string, double> coefficients;  // surrogate weights
  double baseline = 0.0;                       // surrogate intercept

  struct Stratum {
    std::map<std::string, double> coefficients;
    double baseline_survival = 0.0;
    double mean_lp = 0.0;
  };
  std::map<std::string, Stratum> strata;  // "<sex>_<race>" keys

  // Z-side field names the model reads (drives the restricted baseline).
  std::vector<std::string> required_features() const;

  static RiskModel surrogate();
  static RiskModel load_table(const std::string& path);
};

double compute_risk(const RiskModel& model, const PatientRecord& patient);

struct VirtualTrialConfig {
  std::vector<std::string> arm_names{"NoRx", "BPRx"};
  std::map<std::string, double> rho{{"NoRx", 1.0}, {"BPRx", 0.4}};
  double noise_sd = 0.1;
  std::vector<std::string> z_features;  // empty -> clinical + biomarker fields
  std::vector<std::string> h_features;  // empty -> demographic fields
  double sbp_threshold = 130.0;         // offline assignment rule
  double kappa = 0.01;                  // DDL mask threshold
  double offline_fraction = 1.0;        // leading share of the pool used offline
  std::uint64_t seed = 0;

  std::vector<std::string> z_or_default() const;
  std::vector<std::string> h_or_default() const;
  void validate() const;

  std::string to_json() const;
  static VirtualTrialConfig from_json(const std::string& text);
  static VirtualTrialConfig load(const std::string& path);
};

// rho_arm * risk + Gaussian noise. This is a risk level: lower is better,
// and the bandit layer negates it before learning.
double trial_reward(double risk, const std::string& arm,
                    const VirtualTrialConfig& cfg, RandomStream& rng);

// Deterministic confounded assignment (default: BPRx iff sbp > threshold),
// noisy outcomes, Z restricted to z_features; demographics never enter Z.
using AssignmentRule = std::function<std::string(const PatientRecord&)>;
OfflineDataset build_offline_clinical(const std::vector<PatientRecord>& patients,
                                      const RiskModel& risk_model,
                                      const VirtualTrialConfig& cfg,
                                      const AssignmentRule& assignment_rule,
                                      RandomStream& rng);

// Feature encoding: standardized numeric columns, alphabetical one-hot blocks
// for categorical fields. Standardization constants are frozen from the
// offline patients and reused online.
struct ContextEncoder {
  std::vector<std::string> z_features;
  std::vector<std::string> h_features;
  std::vector<std::string> z_columns;  // expanded names
  std::vector<std::string> h_columns;
  Eigen::VectorXd z_mean, z_scale;
  Eigen::VectorXd h_mean, h_scale;

  int z_dim() const { return static_cast<int>(z_columns.size()); }
  int h_dim() const { return static_cast<int>(h_columns.size()); }
  int dim() const { return z_dim() + h_dim(); }
};

ContextEncoder fit_context_encoder(const std::vector<PatientRecord>& offline_patients,
                                   const VirtualTrialConfig& cfg);

OnlineContext patient_to_context(const PatientRecord& patient,
                                 const ContextEncoder& encoder);

struct ClinicalResult {
  std::vector<RegretTrace> traces;              // all replications, all policies
  std::vector<QuantileTable> tables;            // one per policy
  std::vector<Mask> dwts_masks;                 // per arm
  double kappa = 0.0;
};

// Virtual trial: offline phase once (static pool), then n_replications online
// trajectories per policy; each round uniformly samples a patient. Regret is
// the expected-risk gap (rho_chosen - rho_min) * risk. Aggregation and file
// output reuse the harness.
ClinicalResult run_clinical_experiment(const std::vector<PatientRecord>& patients,
                                       const RiskModel& risk_model,
                                       const VirtualTrialConfig& cfg, int T,
                                       int n_replications,
                                       const std::vector<Policy>& policies,
                                       std::uint64_t seed, int jobs = 0);

}  // namespace dwts
