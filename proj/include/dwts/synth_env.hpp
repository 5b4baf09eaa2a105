#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dwts/rng.hpp"

namespace dwts {

// Configuration of the confounded linear SEM and its online counterpart.
struct SemConfig {
  int p = 20;          // measured covariate dimension
  int q = 3;           // hidden confounder dimension
  int K = 2;           // number of arms
  int p_eff = 5;       // nonzeros of each theta_star
  int n_per_arm = 1000;
  double noise_sd = 1.0;
  double psi_scale = 1.0;  // sd of the confounder-to-covariate loadings
  std::uint64_t seed = 0;

  void validate() const;

  std::string to_json() const;
  static SemConfig from_json(const std::string& text);
  static SemConfig load(const std::string& path);
};

// True per-arm parameters of the data-generating process.
struct ArmParams {
  Eigen::VectorXd theta_star;  // length p, measured-covariate weights
  Eigen::VectorXd phi_star;    // length q, hidden-feature weights
  Eigen::MatrixXd psi_star;    // q x p, confounder-to-covariate loading
};

struct OfflineBlock {
  Eigen::MatrixXd Z;  // n_a x p
  Eigen::VectorXd y;  // n_a
};

// Per-arm confounded samples. arm_ids are 1-based labels, matching the CSV
// format.
struct OfflineDataset {
  std::vector<OfflineBlock> blocks;
  std::vector<int> arm_ids;
};

// Online context [measured, formerly-hidden], length p + q.
using OnlineContext = Eigen::VectorXd;

// Arm a (1-based) gets theta = (a+1) on the first p_eff coordinates, zero
// elsewhere; phi ~ N(0, I_q); psi entries ~ N(0, psi_scale^2).
std::vector<ArmParams> build_true_params(const SemConfig& cfg, RandomStream& rng);

// One arm's confounded block: Z_j = Psi^T H_j + E_j, y_j = theta^T Z_j +
// phi^T H_j + eps_j with H, E standard normal. H and E are discarded.
OfflineBlock generate_offline(const ArmParams& params, int n_a, double noise_sd,
                              RandomStream& rng);

// All arms, each from its own child stream of `base` (order-independent).
OfflineDataset make_offline_dataset(const SemConfig& cfg,
                                    const std::vector<ArmParams>& params,
                                    const RandomStream& base);

// Same, seeding the base stream from cfg.seed.
OfflineDataset make_offline_dataset(const SemConfig& cfg,
                                    const std::vector<ArmParams>& params);

// Default online context distribution: x ~ N(0, I_{p+q}).
OnlineContext draw_online_context(int p, int q, RandomStream& rng);

// Noise-free expected reward [theta, phi]^T x.
double mean_reward(const ArmParams& params, const OnlineContext& x);

double online_reward(const ArmParams& params, const OnlineContext& x,
                     double noise_sd, RandomStream& rng);

// (arm index, mean reward) maximizing mean_reward; lowest index wins ties.
std::pair<int, double> best_arm(const std::vector<ArmParams>& all_params,
                                const OnlineContext& x);

// CSV round-trip for offline datasets: header `arm,z_1,...,z_p,y`.
void write_offline_csv(const OfflineDataset& data, const std::string& path);
OfflineDataset read_offline_csv(const std::string& path);

}  // namespace dwts
