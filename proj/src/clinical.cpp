#include "dwts/clinical.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace dwts {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

std::string to_string(Sex sex) {
  return sex == Sex::kFemale ? "female" : "male";
}

std::string to_string(RaceEthnicity race) {
  switch (race) {
    case RaceEthnicity::kBlackNh: return "black_nh";
    case RaceEthnicity::kHispanic: return "hispanic";
    case RaceEthnicity::kOther: return "other";
    case RaceEthnicity::kWhiteNh: return "white_nh";
  }
  throw std::invalid_argument("to_string: bad race");
}

Sex sex_from_string(const std::string& token) {
  if (token == "female") return Sex::kFemale;
  if (token == "male") return Sex::kMale;
  throw std::invalid_argument("unknown sex '" + token + "'");
}

RaceEthnicity race_from_string(const std::string& token) {
  if (token == "black_nh") return RaceEthnicity::kBlackNh;
  if (token == "hispanic") return RaceEthnicity::kHispanic;
  if (token == "other") return RaceEthnicity::kOther;
  if (token == "white_nh") return RaceEthnicity::kWhiteNh;
  throw std::invalid_argument("unknown race_ethnicity '" + token + "'");
}

void PatientRecord::validate() const {
  if (!(age > 0.0)) throw std::invalid_argument("age must be > 0");
  if (!(dbp > 0.0)) throw std::invalid_argument("dbp must be > 0");
  if (!(sbp > dbp)) throw std::invalid_argument("sbp must exceed dbp");
  if (!(bmi > 0.0)) throw std::invalid_argument("bmi must be > 0");
  if (!(heart_rate > 0.0)) throw std::invalid_argument("heart_rate must be > 0");
  const std::pair<const char*, double> labs[] = {
      {"hba1c", hba1c},
      {"total_chol", total_chol},
      {"hdl", hdl},
      {"ldl", ldl},
      {"triglycerides", triglycerides},
      {"fasting_glucose", fasting_glucose},
      {"alt", alt},
      {"potassium", potassium},
      {"serum_creatinine", serum_creatinine},
      {"urine_creatinine", urine_creatinine},
      {"albumin_creatinine_ratio", albumin_creatinine_ratio},
  };
  for (const auto& [name, value] : labs) {
    if (!(value > 0.0)) {
      throw std::invalid_argument(std::string(name) + " must be > 0");
    }
  }
}

namespace {

const std::vector<std::string> kSchemaColumns = {
    "age", "sex", "race_ethnicity", "tobacco_current", "cvd_history",
    "sbp", "dbp", "bmi", "heart_rate", "hba1c", "total_chol", "hdl", "ldl",
    "triglycerides", "fasting_glucose", "alt", "potassium", "serum_creatinine",
    "urine_creatinine", "albumin_creatinine_ratio", "bprx", "statins"};

const std::vector<std::string> kDefaultZ = {
    "tobacco_current", "cvd_history", "sbp", "dbp", "bmi", "heart_rate",
    "hba1c", "total_chol", "hdl", "ldl", "triglycerides", "fasting_glucose",
    "alt", "potassium", "serum_creatinine", "urine_creatinine",
    "albumin_creatinine_ratio"};

const std::vector<std::string> kDefaultH = {"age", "sex", "race_ethnicity"};

bool is_categorical(const std::string& field) {
  return field == "sex" || field == "race_ethnicity";
}

std::vector<std::string> categories_of(const std::string& field) {
  if (field == "sex") return {"female", "male"};
  if (field == "race_ethnicity") return {"black_nh", "hispanic", "other", "white_nh"};
  throw std::invalid_argument("not categorical: " + field);
}

double numeric_value(const PatientRecord& r, const std::string& field) {
  if (field == "age") return r.age;
  if (field == "tobacco_current") return r.tobacco_current ? 1.0 : 0.0;
  if (field == "cvd_history") return r.cvd_history ? 1.0 : 0.0;
  if (field == "sbp") return r.sbp;
  if (field == "dbp") return r.dbp;
  if (field == "bmi") return r.bmi;
  if (field == "heart_rate") return r.heart_rate;
  if (field == "hba1c") return r.hba1c;
  if (field == "total_chol") return r.total_chol;
  if (field == "hdl") return r.hdl;
  if (field == "ldl") return r.ldl;
  if (field == "triglycerides") return r.triglycerides;
  if (field == "fasting_glucose") return r.fasting_glucose;
  if (field == "alt") return r.alt;
  if (field == "potassium") return r.potassium;
  if (field == "serum_creatinine") return r.serum_creatinine;
  if (field == "urine_creatinine") return r.urine_creatinine;
  if (field == "albumin_creatinine_ratio") return r.albumin_creatinine_ratio;
  if (field == "bprx") return r.bprx ? 1.0 : 0.0;
  if (field == "statins") return r.statins ? 1.0 : 0.0;
  throw std::invalid_argument("unknown feature '" + field + "'");
}

std::string categorical_token(const PatientRecord& r, const std::string& field) {
  if (field == "sex") return to_string(r.sex);
  if (field == "race_ethnicity") return to_string(r.race_ethnicity);
  throw std::invalid_argument("not categorical: " + field);
}

// Expanded column list for a field: itself, or field=category per category.
std::vector<std::string> expand_field(const std::string& field) {
  if (!is_categorical(field)) return {field};
  std::vector<std::string> out;
  for (const std::string& cat : categories_of(field)) {
    out.push_back(field + "=" + cat);
  }
  return out;
}

double column_value(const PatientRecord& r, const std::string& column) {
  const std::size_t eq = column.find('=');
  if (eq == std::string::npos) return numeric_value(r, column);
  const std::string field = column.substr(0, eq);
  const std::string cat = column.substr(eq + 1);
  return categorical_token(r, field) == cat ? 1.0 : 0.0;
}

double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Mean of N(mu, sd^2) truncated below at `lower`.
double truncated_mean(double mu, double sd, double lower) {
  const double a = (lower - mu) / sd;
  const double tail = 1.0 - normal_cdf(a);
  if (tail < 1e-14) return lower;  // essentially degenerate
  return mu + sd * normal_pdf(a) / tail;
}

// Location so the positive-truncated draw has the target mean (bisection;
// truncated_mean is increasing in mu).
double calibrated_location(double target_mean, double sd, double lower) {
  double lo = target_mean - 12.0 * sd;
  double hi = target_mean + sd;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (truncated_mean(mid, sd, lower) < target_mean) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

// Lower-truncated normal draw. Plain rejection in the easy region; Robert's
// shifted-exponential tail sampler once the truncation point is deep in the
// upper tail, where rejection would stall.
double draw_truncated(double location, double sd, double lower, RandomStream& rng) {
  const double a = (lower - location) / sd;
  if (a < 2.0) {
    while (true) {
      const double z = rng.gaussian();
      if (z > a) return location + sd * z;
    }
  }
  const double shift = 0.5 * (a + std::sqrt(a * a + 4.0));
  while (true) {
    const double u = 1.0 - rng.uniform();  // (0, 1]
    const double z = a - std::log(u) / shift;
    const double accept = std::exp(-0.5 * (z - shift) * (z - shift));
    if (rng.uniform() <= accept) return location + sd * z;
  }
}

struct ContinuousField {
  const char* name;
  PatientStats::Moments PatientStats::*moments;
  double PatientRecord::*value;
};

const ContinuousField kContinuousFields[] = {
    {"age", &PatientStats::age, &PatientRecord::age},
    {"sbp", &PatientStats::sbp, &PatientRecord::sbp},
    {"dbp", &PatientStats::dbp, &PatientRecord::dbp},
    {"bmi", &PatientStats::bmi, &PatientRecord::bmi},
    {"heart_rate", &PatientStats::heart_rate, &PatientRecord::heart_rate},
    {"hba1c", &PatientStats::hba1c, &PatientRecord::hba1c},
    {"total_chol", &PatientStats::total_chol, &PatientRecord::total_chol},
    {"hdl", &PatientStats::hdl, &PatientRecord::hdl},
    {"ldl", &PatientStats::ldl, &PatientRecord::ldl},
    {"triglycerides", &PatientStats::triglycerides, &PatientRecord::triglycerides},
    {"fasting_glucose", &PatientStats::fasting_glucose, &PatientRecord::fasting_glucose},
    {"alt", &PatientStats::alt, &PatientRecord::alt},
    {"potassium", &PatientStats::potassium, &PatientRecord::potassium},
    {"serum_creatinine", &PatientStats::serum_creatinine, &PatientRecord::serum_creatinine},
    {"urine_creatinine", &PatientStats::urine_creatinine, &PatientRecord::urine_creatinine},
    {"albumin_creatinine_ratio", &PatientStats::albumin_creatinine_ratio,
     &PatientRecord::albumin_creatinine_ratio},
};

constexpr int kNumContinuous = 16;

}  // namespace

std::vector<PatientRecord> synth_patients(int n, const PatientStats& stats,
                                          RandomStream& rng) {
  if (n < 1) throw std::invalid_argument("synth_patients: n must be >= 1");

  double locations[kNumContinuous];
  double sds[kNumContinuous];
  for (int f = 0; f < kNumContinuous; ++f) {
    const PatientStats::Moments& m = stats.*(kContinuousFields[f].moments);
    sds[f] = m.sd;
    locations[f] = calibrated_location(m.mean, m.sd, 0.0);
  }

  Eigen::MatrixXd chol;
  if (stats.correlation) {
    if (stats.correlation->rows() != kNumContinuous ||
        stats.correlation->cols() != kNumContinuous) {
      throw std::invalid_argument("synth_patients: correlation must be 16x16");
    }
    Eigen::LLT<MatrixXd> llt(*stats.correlation);
    if (llt.info() != Eigen::Success) {
      throw std::invalid_argument("synth_patients: correlation not PD");
    }
    chol = llt.matrixL();
  }

  std::vector<PatientRecord> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    PatientRecord rec;
    if (stats.correlation) {
      VectorXd z(kNumContinuous);
      for (int f = 0; f < kNumContinuous; ++f) z[f] = rng.gaussian();
      z = chol * z;
      for (int f = 0; f < kNumContinuous; ++f) {
        double v = locations[f] + sds[f] * z[f];
        if (v <= 0.0) v = draw_truncated(locations[f], sds[f], 0.0, rng);
        rec.*(kContinuousFields[f].value) = v;
      }
    } else {
      for (int f = 0; f < kNumContinuous; ++f) {
        rec.*(kContinuousFields[f].value) =
            draw_truncated(locations[f], sds[f], 0.0, rng);
      }
    }
    while (rec.dbp >= rec.sbp) {
      rec.dbp = draw_truncated(locations[2], sds[2], 0.0, rng);
    }

    rec.sex = rng.uniform() < stats.frac_female ? Sex::kFemale : Sex::kMale;
    const double u = rng.uniform();
    if (u < stats.frac_black_nh) {
      rec.race_ethnicity = RaceEthnicity::kBlackNh;
    } else if (u < stats.frac_black_nh + stats.frac_white_nh) {
      rec.race_ethnicity = RaceEthnicity::kWhiteNh;
    } else if (u < stats.frac_black_nh + stats.frac_white_nh + stats.frac_hispanic) {
      rec.race_ethnicity = RaceEthnicity::kHispanic;
    } else {
      rec.race_ethnicity = RaceEthnicity::kOther;
    }
    rec.tobacco_current = rng.uniform() < stats.frac_tobacco;
    rec.cvd_history = rng.uniform() < stats.frac_cvd_history;
    rec.bprx = rng.uniform() < stats.frac_bprx;
    rec.statins = rng.uniform() < stats.frac_statins;

    rec.validate();
    out.push_back(rec);
  }
  return out;
}

IngestReport ingest_csv(const std::string& path, double max_reject_fraction) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("ingest_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("ingest_csv: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();

  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  std::vector<int> position(kSchemaColumns.size(), -1);
  for (std::size_t h = 0; h < header.size(); ++h) {
    bool known = false;
    for (std::size_t s = 0; s < kSchemaColumns.size(); ++s) {
      if (header[h] == kSchemaColumns[s]) {
        position[s] = static_cast<int>(h);
        known = true;
        break;
      }
    }
    if (!known) {
      throw std::runtime_error("ingest_csv: unknown column '" + header[h] + "'");
    }
  }
  for (std::size_t s = 0; s < kSchemaColumns.size(); ++s) {
    if (position[s] < 0) {
      throw std::runtime_error("ingest_csv: missing column '" + kSchemaColumns[s] + "'");
    }
  }

  auto parse_bool = [](const std::string& cell) {
    if (cell == "0" || cell == "false") return false;
    if (cell == "1" || cell == "true") return true;
    throw std::invalid_argument("expected boolean, got '" + cell + "'");
  };

  IngestReport report;
  int row_no = 1;
  int data_rows = 0;
  while (std::getline(in, line)) {
    ++row_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++data_rows;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    try {
      if (cells.size() != header.size()) {
        throw std::invalid_argument("wrong column count");
      }
      auto at = [&](const char* name) -> const std::string& {
        for (std::size_t s = 0; s < kSchemaColumns.size(); ++s) {
          if (kSchemaColumns[s] == name) return cells[static_cast<std::size_t>(position[s])];
        }
        throw std::logic_error("ingest_csv: bad field lookup");
      };
      PatientRecord rec;
      rec.age = std::stod(at("age"));
      rec.sex = sex_from_string(at("sex"));
      rec.race_ethnicity = race_from_string(at("race_ethnicity"));
      rec.tobacco_current = parse_bool(at("tobacco_current"));
      rec.cvd_history = parse_bool(at("cvd_history"));
      rec.sbp = std::stod(at("sbp"));
      rec.dbp = std::stod(at("dbp"));
      rec.bmi = std::stod(at("bmi"));
      rec.heart_rate = std::stod(at("heart_rate"));
      rec.hba1c = std::stod(at("hba1c"));
      rec.total_chol = std::stod(at("total_chol"));
      rec.hdl = std::stod(at("hdl"));
      rec.ldl = std::stod(at("ldl"));
      rec.triglycerides = std::stod(at("triglycerides"));
      rec.fasting_glucose = std::stod(at("fasting_glucose"));
      rec.alt = std::stod(at("alt"));
      rec.potassium = std::stod(at("potassium"));
      rec.serum_creatinine = std::stod(at("serum_creatinine"));
      rec.urine_creatinine = std::stod(at("urine_creatinine"));
      rec.albumin_creatinine_ratio = std::stod(at("albumin_creatinine_ratio"));
      rec.bprx = parse_bool(at("bprx"));
      rec.statins = parse_bool(at("statins"));
      rec.validate();
      report.records.push_back(rec);
    } catch (const std::exception& ex) {
      ++report.rejected;
      report.diagnostics.push_back("row " + std::to_string(row_no) + ": " + ex.what());
    }
  }
  if (data_rows > 0 &&
      static_cast<double>(report.rejected) > max_reject_fraction * data_rows) {
    throw std::runtime_error("ingest_csv: rejected " +
                             std::to_string(report.rejected) + " of " +
                             std::to_string(data_rows) + " rows");
  }
  return report;
}

void write_patients_csv(const std::vector<PatientRecord>& records,
                        const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("write_patients_csv: cannot open " + path);
  for (std::size_t s = 0; s < kSchemaColumns.size(); ++s) {
    std::fprintf(f, "%s%s", s == 0 ? "" : ",", kSchemaColumns[s].c_str());
  }
  std::fputs("\n", f);
  for (const PatientRecord& r : records) {
    std::fprintf(f, "%.17g,%s,%s,%d,%d,%.17g,%.17g,%.17g,%.17g", r.age,
                 to_string(r.sex).c_str(), to_string(r.race_ethnicity).c_str(),
                 r.tobacco_current ? 1 : 0, r.cvd_history ? 1 : 0, r.sbp, r.dbp,
                 r.bmi, r.heart_rate);
    std::fprintf(f, ",%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                 r.hba1c, r.total_chol, r.hdl, r.ldl, r.triglycerides,
                 r.fasting_glucose, r.alt, r.potassium, r.serum_creatinine,
                 r.urine_creatinine, r.albumin_creatinine_ratio);
    std::fprintf(f, ",%d,%d\n", r.bprx ? 1 : 0, r.statins ? 1 : 0);
  }
  std::fclose(f);
}

namespace {

// Derived inputs the risk models can reference by name.
double model_feature(const PatientRecord& r, const std::string& name) {
  if (name == "tobacco") return r.tobacco_current ? 1.0 : 0.0;
  if (name == "diabetes") return r.hba1c >= 6.5 ? 1.0 : 0.0;
  if (name.rfind("ln_", 0) == 0) {
    const double v = numeric_value(r, name.substr(3));
    if (!(v > 0.0)) throw std::invalid_argument("log of non-positive " + name);
    return std::log(v);
  }
  const std::size_t star = name.find('*');
  if (star != std::string::npos) {
    return model_feature(r, name.substr(0, star)) *
           model_feature(r, name.substr(star + 1));
  }
  return numeric_value(r, name);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double clamp_risk(double risk) {
  return std::clamp(risk, 1e-6, 1.0 - 1e-6);
}

// Patient field a model feature name reads from, for the restricted baseline.
std::string feature_source_field(const std::string& name) {
  if (name == "tobacco") return "tobacco_current";
  if (name == "diabetes") return "hba1c";
  if (name.rfind("ln_", 0) == 0) return name.substr(3);
  return name;
}

}  // namespace

RiskModel RiskModel::surrogate() {
  RiskModel model;
  model.kind = RiskModelKind::kLogisticSurrogate;
  model.coefficients = {
      {"age", 0.055},         {"sbp", 0.028},
      {"tobacco", 0.65},      {"cvd_history", 0.9},
      {"hba1c", 0.20},        {"diabetes", 0.5},
      {"total_chol", 0.006},  {"hdl", -0.012},
  };
  // Centered so a cohort-mean patient sits near lp = -3 plus the binary
  // contributions (risk around 5-10%).
  model.baseline = -3.0 - (0.055 * 45.99 + 0.028 * 122.98 + 0.20 * 5.75 +
                           0.006 * 189.93 - 0.012 * 52.81);
  return model;
}

RiskModel RiskModel::load_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("RiskModel: cannot open " + path);
  json j = json::parse(in);
  RiskModel model;
  model.kind = RiskModelKind::kCoefficientTable;
  for (const auto& [stratum, table] : j.items()) {
    RiskModel::Stratum s;
    bool has_survival = false;
    for (const auto& [name, value] : table.items()) {
      if (name == "baseline_survival") {
        s.baseline_survival = value.get<double>();
        has_survival = true;
      } else if (name == "mean_lp") {
        s.mean_lp = value.get<double>();
      } else {
        s.coefficients[name] = value.get<double>();
      }
    }
    if (!has_survival || !(s.baseline_survival > 0.0 && s.baseline_survival < 1.0)) {
      throw std::runtime_error("RiskModel: stratum '" + stratum +
                               "' needs baseline_survival in (0,1)");
    }
    model.strata[stratum] = std::move(s);
  }
  if (model.strata.empty()) throw std::runtime_error("RiskModel: empty table");
  return model;
}

std::vector<std::string> RiskModel::required_features() const {
  std::vector<std::string> fields;
  auto add = [&](const std::string& feature) {
    const std::string field = feature_source_field(feature);
    if (field == "age" || field == "sex" || field == "race_ethnicity") return;
    if (std::find(fields.begin(), fields.end(), field) == fields.end()) {
      fields.push_back(field);
    }
  };
  if (kind == RiskModelKind::kLogisticSurrogate) {
    for (const auto& [name, coef] : coefficients) add(name);
  } else {
    for (const auto& [stratum, table] : strata) {
      for (const auto& [name, coef] : table.coefficients) {
        const std::size_t star = name.find('*');
        if (star == std::string::npos) {
          add(name);
        } else {
          add(name.substr(0, star));
          add(name.substr(star + 1));
        }
      }
    }
  }
  return fields;
}

double compute_risk(const RiskModel& model, const PatientRecord& patient) {
  if (model.kind == RiskModelKind::kLogisticSurrogate) {
    double lp = model.baseline;
    for (const auto& [name, coef] : model.coefficients) {
      lp += coef * model_feature(patient, name);
    }
    return clamp_risk(sigmoid(lp));
  }
  const std::string key =
      to_string(patient.sex) + "_" + to_string(patient.race_ethnicity);
  auto it = model.strata.find(key);
  if (it == model.strata.end()) {
    throw std::runtime_error("compute_risk: missing coefficient entry for stratum '" +
                             key + "'");
  }
  double lp = 0.0;
  for (const auto& [name, coef] : it->second.coefficients) {
    lp += coef * model_feature(patient, name);
  }
  const double risk =
      1.0 - std::pow(it->second.baseline_survival, std::exp(lp - it->second.mean_lp));
  return clamp_risk(risk);
}

std::vector<std::string> VirtualTrialConfig::z_or_default() const {
  return z_features.empty() ? kDefaultZ : z_features;
}

std::vector<std::string> VirtualTrialConfig::h_or_default() const {
  return h_features.empty() ? kDefaultH : h_features;
}

void VirtualTrialConfig::validate() const {
  if (arm_names.empty()) throw std::invalid_argument("trial: no arms");
  for (const std::string& arm : arm_names) {
    auto it = rho.find(arm);
    if (it == rho.end()) throw std::invalid_argument("trial: no rho for arm " + arm);
    if (!(it->second > 0.0)) throw std::invalid_argument("trial: rho must be > 0");
  }
  if (!(noise_sd >= 0.0)) throw std::invalid_argument("trial: noise_sd must be >= 0");
  if (!(offline_fraction > 0.0 && offline_fraction <= 1.0)) {
    throw std::invalid_argument("trial: offline_fraction in (0,1]");
  }
  const auto z = z_or_default();
  const auto h = h_or_default();
  for (const std::string& zf : z) {
    if (std::find(h.begin(), h.end(), zf) != h.end()) {
      throw std::invalid_argument("trial: feature '" + zf + "' in both z and h");
    }
  }
}

double trial_reward(double risk, const std::string& arm,
                    const VirtualTrialConfig& cfg, RandomStream& rng) {
  auto it = cfg.rho.find(arm);
  if (it == cfg.rho.end()) throw std::invalid_argument("unknown arm '" + arm + "'");
  return it->second * risk + cfg.noise_sd * rng.gaussian();
}

OfflineDataset build_offline_clinical(const std::vector<PatientRecord>& patients,
                                      const RiskModel& risk_model,
                                      const VirtualTrialConfig& cfg,
                                      const AssignmentRule& assignment_rule,
                                      RandomStream& rng) {
  cfg.validate();
  if (patients.empty()) {
    throw std::invalid_argument("build_offline_clinical: empty patient list");
  }
  AssignmentRule rule = assignment_rule;
  if (!rule) {
    const double threshold = cfg.sbp_threshold;
    rule = [threshold](const PatientRecord& r) {
      return r.sbp > threshold ? std::string("BPRx") : std::string("NoRx");
    };
  }

  std::vector<std::string> z_columns;
  for (const std::string& field : cfg.z_or_default()) {
    for (const std::string& col : expand_field(field)) z_columns.push_back(col);
  }

  const int K = static_cast<int>(cfg.arm_names.size());
  std::vector<std::vector<Eigen::Index>> members(K);
  std::vector<double> outcomes(patients.size());
  std::vector<int> arm_of(patients.size());
  for (std::size_t i = 0; i < patients.size(); ++i) {
    const std::string arm = rule(patients[i]);
    int idx = -1;
    for (int a = 0; a < K; ++a) {
      if (cfg.arm_names[static_cast<std::size_t>(a)] == arm) idx = a;
    }
    if (idx < 0) {
      throw std::invalid_argument("build_offline_clinical: rule produced unknown arm '" +
                                  arm + "'");
    }
    const double risk = compute_risk(risk_model, patients[i]);
    outcomes[i] = trial_reward(risk, arm, cfg, rng);
    arm_of[i] = idx;
    members[idx].push_back(static_cast<Eigen::Index>(i));
  }
  for (int a = 0; a < K; ++a) {
    if (members[a].empty()) {
      throw std::runtime_error("offline arm starvation: no patients assigned to " +
                               cfg.arm_names[static_cast<std::size_t>(a)]);
    }
  }

  OfflineDataset data;
  for (int a = 0; a < K; ++a) {
    OfflineBlock block;
    block.Z.resize(static_cast<Eigen::Index>(members[a].size()),
                   static_cast<Eigen::Index>(z_columns.size()));
    block.y.resize(static_cast<Eigen::Index>(members[a].size()));
    for (std::size_t r = 0; r < members[a].size(); ++r) {
      const PatientRecord& patient = patients[static_cast<std::size_t>(members[a][r])];
      for (std::size_t c = 0; c < z_columns.size(); ++c) {
        block.Z(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
            column_value(patient, z_columns[c]);
      }
      block.y[static_cast<Eigen::Index>(r)] = outcomes[static_cast<std::size_t>(members[a][r])];
    }
    data.blocks.push_back(std::move(block));
    data.arm_ids.push_back(a + 1);
  }
  return data;
}

ContextEncoder fit_context_encoder(const std::vector<PatientRecord>& offline_patients,
                                   const VirtualTrialConfig& cfg) {
  cfg.validate();
  if (offline_patients.empty()) {
    throw std::invalid_argument("fit_context_encoder: empty patient list");
  }
  ContextEncoder enc;
  enc.z_features = cfg.z_or_default();
  enc.h_features = cfg.h_or_default();
  for (const std::string& field : enc.z_features) {
    for (const std::string& col : expand_field(field)) enc.z_columns.push_back(col);
  }
  for (const std::string& field : enc.h_features) {
    for (const std::string& col : expand_field(field)) enc.h_columns.push_back(col);
  }

  auto fit_block = [&](const std::vector<std::string>& columns, VectorXd& mean,
                       VectorXd& scale) {
    const auto d = static_cast<Eigen::Index>(columns.size());
    mean = VectorXd::Zero(d);
    scale = VectorXd::Ones(d);
    for (Eigen::Index c = 0; c < d; ++c) {
      if (columns[static_cast<std::size_t>(c)].find('=') != std::string::npos) {
        continue;  // one-hot columns stay raw so blocks sum to 1
      }
      double sum = 0.0, sum_sq = 0.0;
      for (const PatientRecord& r : offline_patients) {
        const double v = column_value(r, columns[static_cast<std::size_t>(c)]);
        sum += v;
        sum_sq += v * v;
      }
      const double n = static_cast<double>(offline_patients.size());
      const double m = sum / n;
      const double var = std::max(sum_sq / n - m * m, 0.0);
      mean[c] = m;
      scale[c] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
  };
  fit_block(enc.z_columns, enc.z_mean, enc.z_scale);
  fit_block(enc.h_columns, enc.h_mean, enc.h_scale);
  return enc;
}

OnlineContext patient_to_context(const PatientRecord& patient,
                                 const ContextEncoder& encoder) {
  OnlineContext x(encoder.dim());
  for (int c = 0; c < encoder.z_dim(); ++c) {
    const double v = column_value(patient, encoder.z_columns[static_cast<std::size_t>(c)]);
    x[c] = (v - encoder.z_mean[c]) / encoder.z_scale[c];
  }
  for (int c = 0; c < encoder.h_dim(); ++c) {
    const double v = column_value(patient, encoder.h_columns[static_cast<std::size_t>(c)]);
    x[encoder.z_dim() + c] = (v - encoder.h_mean[c]) / encoder.h_scale[c];
  }
  return x;
}

ClinicalResult run_clinical_experiment(const std::vector<PatientRecord>& patients,
                                       const RiskModel& risk_model,
                                       const VirtualTrialConfig& cfg, int T,
                                       int n_replications,
                                       const std::vector<Policy>& policies,
                                       std::uint64_t seed, int jobs) {
  cfg.validate();
  if (patients.empty()) {
    throw std::invalid_argument("run_clinical_experiment: empty pool");
  }
  if (T < 1 || n_replications < 1) {
    throw std::invalid_argument("run_clinical_experiment: T and reps must be >= 1");
  }

  const int K = static_cast<int>(cfg.arm_names.size());
  std::vector<double> rho(K);
  for (int a = 0; a < K; ++a) {
    rho[static_cast<std::size_t>(a)] = cfg.rho.at(cfg.arm_names[static_cast<std::size_t>(a)]);
  }
  int oracle_arm = 0;
  for (int a = 1; a < K; ++a) {
    if (rho[static_cast<std::size_t>(a)] < rho[static_cast<std::size_t>(oracle_arm)]) {
      oracle_arm = a;
    }
  }
  const double rho_min = rho[static_cast<std::size_t>(oracle_arm)];

  RandomStream root(seed);

  // Static offline phase shared by every replication.
  const auto offline_count = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.offline_fraction *
                                  static_cast<double>(patients.size())));
  const std::vector<PatientRecord> offline_patients(patients.begin(),
                                                    patients.begin() + offline_count);
  RandomStream offline_rng = root.child("clinical-offline");
  const OfflineDataset offline =
      build_offline_clinical(offline_patients, risk_model, cfg, nullptr, offline_rng);
  const ContextEncoder encoder = fit_context_encoder(offline_patients, cfg);
  const int q = encoder.h_dim();

  ClinicalResult result;

  // DWTS offline estimates on standardized, per-arm-centered, negated signal.
  std::vector<GaussianPosterior> dwts_prior;
  const bool needs_dwts =
      std::find(policies.begin(), policies.end(), Policy::kDwts) != policies.end();
  if (needs_dwts) {
    DdlOptions ddl;
    RandomStream ddl_rng = root.child("clinical-ddl");
    for (int a = 0; a < K; ++a) {
      const OfflineBlock& block = offline.blocks[static_cast<std::size_t>(a)];
      MatrixXd Z = block.Z;
      for (Eigen::Index c = 0; c < Z.cols(); ++c) {
        Z.col(c) = (Z.col(c).array() - encoder.z_mean[c]) / encoder.z_scale[c];
      }
      VectorXd y_signal = -block.y;
      y_signal.array() -= y_signal.mean();  // per-arm centering, no intercept online
      RandomStream arm_rng = ddl_rng.child(static_cast<std::uint64_t>(a));
      DdlEstimate est = ddl_fit(Z, y_signal, ddl, arm_rng);
      Mask mask = build_mask(est.theta_hat, cfg.kappa);
      result.dwts_masks.push_back(mask);
      dwts_prior.push_back(init_warm_start(est, mask, q));
    }
    result.kappa = cfg.kappa;
  }

  Mask full_mask;
  full_mask.selected.assign(encoder.z_columns.size(), true);
  full_mask.p_eff = encoder.z_dim();

  Mask risk_mask;  // z columns read by the risk model
  {
    const std::vector<std::string> fields = risk_model.required_features();
    risk_mask.selected.assign(encoder.z_columns.size(), false);
    risk_mask.p_eff = 0;
    for (std::size_t c = 0; c < encoder.z_columns.size(); ++c) {
      const std::string& col = encoder.z_columns[c];
      const std::string base = col.substr(0, col.find('='));
      if (std::find(fields.begin(), fields.end(), base) != fields.end()) {
        risk_mask.selected[c] = true;
        ++risk_mask.p_eff;
      }
    }
  }

  // Pool contexts and risks are immutable across replications.
  std::vector<OnlineContext> contexts;
  contexts.reserve(patients.size());
  std::vector<double> risks(patients.size());
  for (std::size_t i = 0; i < patients.size(); ++i) {
    contexts.push_back(patient_to_context(patients[i], encoder));
    risks[i] = compute_risk(risk_model, patients[i]);
  }

  struct Task {
    Policy policy;
    int rep;
  };
  std::vector<Task> tasks;
  for (Policy policy : policies) {
    for (int r = 0; r < n_replications; ++r) tasks.push_back({policy, r});
  }
  std::vector<RegretTrace> traces(tasks.size());
  std::vector<std::string> errors(tasks.size());

  auto run_one = [&](const Task& task) {
    RandomStream rep = root.child("replication").child(static_cast<std::uint64_t>(task.rep));
    RandomStream patient_rng = rep.child("patients");
    RandomStream noise_rng = rep.child("noise");
    RandomStream policy_rng = rep.child("policy").child(policy_name(task.policy));

    std::vector<GaussianPosterior> posteriors;
    std::vector<OfulArmState> oful_states;
    const Mask* mask = nullptr;
    switch (task.policy) {
      case Policy::kDwts:
        posteriors = dwts_prior;
        break;
      case Policy::kLintsFull:
        for (int a = 0; a < K; ++a) posteriors.push_back(init_cold(encoder.dim()));
        mask = &full_mask;
        break;
      case Policy::kLintsTrue:
        for (int a = 0; a < K; ++a) {
          posteriors.push_back(init_cold(risk_mask.p_eff + q));
        }
        mask = &risk_mask;
        break;
      case Policy::kOful:
        for (int a = 0; a < K; ++a) {
          oful_states.push_back(oful_init(encoder.dim(), OfulConfig{}.lambda_reg));
        }
        break;
      case Policy::kOracle:
        break;
    }

    RegretTrace trace;
    trace.policy = policy_name(task.policy);
    trace.replication_id = task.rep;
    trace.instantaneous.resize(T);
    trace.cumulative.resize(T);

    std::vector<VectorXd> x_eff(static_cast<std::size_t>(K));
    OfulConfig oful_cfg;
    double running = 0.0;
    for (int t = 0; t < T; ++t) {
      const auto i = static_cast<std::size_t>(
          patient_rng.uniform_int(static_cast<std::uint64_t>(patients.size())));
      const OnlineContext& x = contexts[i];
      const double eps = noise_rng.gaussian();

      int chosen = 0;
      switch (task.policy) {
        case Policy::kOracle:
          chosen = oracle_arm;
          break;
        case Policy::kOful:
          chosen = oful_select(oful_states, x, oful_cfg);
          break;
        case Policy::kDwts:
          for (int a = 0; a < K; ++a) {
            x_eff[static_cast<std::size_t>(a)] =
                reduce_context(x, result.dwts_masks[static_cast<std::size_t>(a)]);
          }
          chosen = ts_select(posteriors, x_eff, policy_rng).arm;
          break;
        default:
          for (int a = 0; a < K; ++a) {
            x_eff[static_cast<std::size_t>(a)] = reduce_context(x, *mask);
          }
          chosen = ts_select(posteriors, x_eff, policy_rng).arm;
          break;
      }

      // Policies maximize the negated risk signal.
      const double signal =
          -(rho[static_cast<std::size_t>(chosen)] * risks[i] + cfg.noise_sd * eps);
      if (task.policy == Policy::kOful) {
        oful_update(oful_states[static_cast<std::size_t>(chosen)], x, signal);
      } else if (task.policy != Policy::kOracle) {
        posteriors[static_cast<std::size_t>(chosen)] = posterior_update(
            posteriors[static_cast<std::size_t>(chosen)],
            x_eff[static_cast<std::size_t>(chosen)], signal);
      }

      trace.instantaneous[t] =
          (rho[static_cast<std::size_t>(chosen)] - rho_min) * risks[i];
      running += trace.instantaneous[t];
      trace.cumulative[t] = running;
    }
    return trace;
  };

  if (jobs <= 0) {
    jobs = static_cast<int>(std::thread::hardware_concurrency());
    if (jobs <= 0) jobs = 1;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) break;
      try {
        traces[i] = run_one(tasks[i]);
      } catch (const std::exception& ex) {
        errors[i] = ex.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < jobs; ++w) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (!errors[i].empty()) {
      throw std::runtime_error("clinical replication " +
                               std::to_string(tasks[i].rep) + " (" +
                               policy_name(tasks[i].policy) + "): " + errors[i]);
    }
  }

  result.traces = traces;
  for (Policy policy : policies) {
    std::vector<RegretTrace> group;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      if (tasks[i].policy == policy) group.push_back(traces[i]);
    }
    result.tables.push_back(aggregate_quantiles(group, {0.1, 0.5, 0.9}));
  }
  return result;
}

std::string VirtualTrialConfig::to_json() const {
  json j;
  j["arm_names"] = arm_names;
  j["rho"] = rho;
  j["noise_sd"] = noise_sd;
  j["z_features"] = z_features;
  j["h_features"] = h_features;
  j["sbp_threshold"] = sbp_threshold;
  j["kappa"] = kappa;
  j["offline_fraction"] = offline_fraction;
  j["seed"] = seed;
  return j.dump(2);
}

VirtualTrialConfig VirtualTrialConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  VirtualTrialConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "arm_names") cfg.arm_names = value.get<std::vector<std::string>>();
    else if (key == "rho") {
      cfg.rho.clear();
      for (const auto& [arm, r] : value.items()) cfg.rho[arm] = r.get<double>();
    } else if (key == "noise_sd") cfg.noise_sd = value.get<double>();
    else if (key == "z_features") cfg.z_features = value.get<std::vector<std::string>>();
    else if (key == "h_features") cfg.h_features = value.get<std::vector<std::string>>();
    else if (key == "sbp_threshold") cfg.sbp_threshold = value.get<double>();
    else if (key == "kappa") cfg.kappa = value.get<double>();
    else if (key == "offline_fraction") cfg.offline_fraction = value.get<double>();
    else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
    else throw std::invalid_argument("trial: unknown field '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

VirtualTrialConfig VirtualTrialConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("trial: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

}  // namespace dwts
