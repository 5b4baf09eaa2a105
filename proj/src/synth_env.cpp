#include "dwts/synth_env.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

namespace dwts {

using json = nlohmann::json;

void SemConfig::validate() const {
  if (p < 1 || q < 1 || K < 1 || p_eff < 1 || n_per_arm < 1) {
    throw std::invalid_argument("SemConfig: all counts must be >= 1");
  }
  if (p_eff > p) {
    throw std::invalid_argument("SemConfig: p_eff must be <= p");
  }
  if (!(noise_sd > 0.0) || !(psi_scale > 0.0)) {
    throw std::invalid_argument("SemConfig: noise_sd and psi_scale must be > 0");
  }
}

std::string SemConfig::to_json() const {
  json j;
  j["p"] = p;
  j["q"] = q;
  j["K"] = K;
  j["p_eff"] = p_eff;
  j["n_per_arm"] = n_per_arm;
  j["noise_sd"] = noise_sd;
  j["psi_scale"] = psi_scale;
  j["seed"] = seed;
  return j.dump(2);
}

SemConfig SemConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  SemConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "p") cfg.p = value.get<int>();
    else if (key == "q") cfg.q = value.get<int>();
    else if (key == "K") cfg.K = value.get<int>();
    else if (key == "p_eff") cfg.p_eff = value.get<int>();
    else if (key == "n_per_arm") cfg.n_per_arm = value.get<int>();
    else if (key == "noise_sd") cfg.noise_sd = value.get<double>();
    else if (key == "psi_scale") cfg.psi_scale = value.get<double>();
    else if (key == "seed") cfg.seed = value.get<std::uint64_t>();
    else throw std::invalid_argument("SemConfig: unknown field '" + key + "'");
  }
  for (const char* required : {"p", "q", "K", "p_eff", "n_per_arm", "seed"}) {
    if (!j.contains(required)) {
      throw std::invalid_argument(std::string("SemConfig: missing field '") +
                                  required + "'");
    }
  }
  cfg.validate();
  return cfg;
}

SemConfig SemConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("SemConfig: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::vector<ArmParams> build_true_params(const SemConfig& cfg, RandomStream& rng) {
  cfg.validate();
  std::vector<ArmParams> all;
  all.reserve(cfg.K);
  for (int a = 0; a < cfg.K; ++a) {
    RandomStream arm_rng = rng.child("params").child(static_cast<std::uint64_t>(a));
    ArmParams params;
    params.theta_star = Eigen::VectorXd::Zero(cfg.p);
    for (int i = 0; i < cfg.p_eff; ++i) {
      params.theta_star[i] = static_cast<double>(a + 2);  // (a+1) with 1-based a
    }
    params.phi_star.resize(cfg.q);
    for (int i = 0; i < cfg.q; ++i) params.phi_star[i] = arm_rng.gaussian();
    params.psi_star.resize(cfg.q, cfg.p);
    for (int r = 0; r < cfg.q; ++r) {
      for (int c = 0; c < cfg.p; ++c) {
        params.psi_star(r, c) = cfg.psi_scale * arm_rng.gaussian();
      }
    }
    all.push_back(std::move(params));
  }
  return all;
}

OfflineBlock generate_offline(const ArmParams& params, int n_a, double noise_sd,
                              RandomStream& rng) {
  if (n_a < 1) throw std::invalid_argument("generate_offline: n_a must be >= 1");
  const int p = static_cast<int>(params.theta_star.size());
  const int q = static_cast<int>(params.phi_star.size());
  if (params.psi_star.rows() != q || params.psi_star.cols() != p) {
    throw std::invalid_argument("generate_offline: psi_star dimension mismatch");
  }
  OfflineBlock block;
  block.Z.resize(n_a, p);
  block.y.resize(n_a);
  Eigen::VectorXd h(q), e(p);
  for (int j = 0; j < n_a; ++j) {
    for (int i = 0; i < q; ++i) h[i] = rng.gaussian();
    for (int i = 0; i < p; ++i) e[i] = rng.gaussian();
    const Eigen::VectorXd z = params.psi_star.transpose() * h + e;
    block.Z.row(j) = z.transpose();
    block.y[j] = params.theta_star.dot(z) + params.phi_star.dot(h) +
                 noise_sd * rng.gaussian();
  }
  return block;
}

OfflineDataset make_offline_dataset(const SemConfig& cfg,
                                    const std::vector<ArmParams>& params,
                                    const RandomStream& base) {
  cfg.validate();
  if (static_cast<int>(params.size()) != cfg.K) {
    throw std::invalid_argument("make_offline_dataset: need K parameter sets");
  }
  OfflineDataset data;
  for (int a = 0; a < cfg.K; ++a) {
    RandomStream arm_rng = base.child("offline").child(static_cast<std::uint64_t>(a));
    data.blocks.push_back(
        generate_offline(params[a], cfg.n_per_arm, cfg.noise_sd, arm_rng));
    data.arm_ids.push_back(a + 1);
  }
  return data;
}

OfflineDataset make_offline_dataset(const SemConfig& cfg,
                                    const std::vector<ArmParams>& params) {
  return make_offline_dataset(cfg, params, RandomStream(cfg.seed));
}

OnlineContext draw_online_context(int p, int q, RandomStream& rng) {
  OnlineContext x(p + q);
  for (int i = 0; i < p + q; ++i) x[i] = rng.gaussian();
  return x;
}

double mean_reward(const ArmParams& params, const OnlineContext& x) {
  const int p = static_cast<int>(params.theta_star.size());
  const int q = static_cast<int>(params.phi_star.size());
  if (x.size() != p + q) {
    throw std::invalid_argument("mean_reward: context length != p + q");
  }
  return params.theta_star.dot(x.head(p)) + params.phi_star.dot(x.tail(q));
}

double online_reward(const ArmParams& params, const OnlineContext& x,
                     double noise_sd, RandomStream& rng) {
  return mean_reward(params, x) + noise_sd * rng.gaussian();
}

std::pair<int, double> best_arm(const std::vector<ArmParams>& all_params,
                                const OnlineContext& x) {
  if (all_params.empty()) throw std::invalid_argument("best_arm: no arms");
  int best = 0;
  double best_mean = mean_reward(all_params[0], x);
  for (int a = 1; a < static_cast<int>(all_params.size()); ++a) {
    const double m = mean_reward(all_params[a], x);
    if (m > best_mean) {
      best = a;
      best_mean = m;
    }
  }
  return {best, best_mean};
}

void write_offline_csv(const OfflineDataset& data, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("write_offline_csv: cannot open " + path);
  const int p = data.blocks.empty() ? 0 : static_cast<int>(data.blocks[0].Z.cols());
  std::fputs("arm", f);
  for (int i = 1; i <= p; ++i) std::fprintf(f, ",z_%d", i);
  std::fputs(",y\n", f);
  for (std::size_t b = 0; b < data.blocks.size(); ++b) {
    const OfflineBlock& block = data.blocks[b];
    for (Eigen::Index j = 0; j < block.Z.rows(); ++j) {
      std::fprintf(f, "%d", data.arm_ids[b]);
      for (Eigen::Index i = 0; i < block.Z.cols(); ++i) {
        std::fprintf(f, ",%.17g", block.Z(j, i));
      }
      std::fprintf(f, ",%.17g\n", block.y[j]);
    }
  }
  std::fclose(f);
}

OfflineDataset read_offline_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_offline_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) {
    throw std::runtime_error("read_offline_csv: empty file");
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header.front() != "arm" || header.back() != "y") {
    throw std::runtime_error("read_offline_csv: expected header arm,z_1..z_p,y");
  }
  const int p = static_cast<int>(header.size()) - 2;
  for (int i = 0; i < p; ++i) {
    if (header[i + 1] != "z_" + std::to_string(i + 1)) {
      throw std::runtime_error("read_offline_csv: bad covariate column '" +
                               header[i + 1] + "'");
    }
  }

  std::vector<int> arms;
  std::vector<std::vector<double>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    row.reserve(p + 1);
    int col = 0;
    int arm = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        if (col == 0) {
          arm = std::stoi(cell);
        } else {
          row.push_back(std::stod(cell));
        }
      } catch (const std::exception&) {
        throw std::runtime_error("read_offline_csv: unparseable cell at line " +
                                 std::to_string(line_no));
      }
      ++col;
    }
    if (col != p + 2) {
      throw std::runtime_error("read_offline_csv: wrong column count at line " +
                               std::to_string(line_no));
    }
    if (arm < 1) {
      throw std::runtime_error("read_offline_csv: arm label < 1 at line " +
                               std::to_string(line_no));
    }
    arms.push_back(arm);
    rows.push_back(std::move(row));
  }

  OfflineDataset data;
  int max_arm = 0;
  for (int a : arms) max_arm = std::max(max_arm, a);
  std::vector<std::vector<std::size_t>> by_arm(max_arm);
  for (std::size_t i = 0; i < arms.size(); ++i) by_arm[arms[i] - 1].push_back(i);
  for (int a = 0; a < max_arm; ++a) {
    if (by_arm[a].empty()) continue;
    OfflineBlock block;
    block.Z.resize(static_cast<Eigen::Index>(by_arm[a].size()), p);
    block.y.resize(static_cast<Eigen::Index>(by_arm[a].size()));
    for (std::size_t r = 0; r < by_arm[a].size(); ++r) {
      const std::vector<double>& row = rows[by_arm[a][r]];
      for (int i = 0; i < p; ++i) block.Z(static_cast<Eigen::Index>(r), i) = row[i];
      block.y[static_cast<Eigen::Index>(r)] = row[p];
    }
    data.blocks.push_back(std::move(block));
    data.arm_ids.push_back(a + 1);
  }
  return data;
}

}  // namespace dwts
