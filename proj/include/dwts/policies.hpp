#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "dwts/deconfound.hpp"
#include "dwts/rng.hpp"
#include "dwts/synth_env.hpp"

namespace dwts {

// Gaussian posterior N(mu, B^{-1}) stored with its precision matrix.
struct GaussianPosterior {
  Eigen::VectorXd mu;
  Eigen::MatrixXd B;

  std::string to_json() const;
  static GaussianPosterior from_json(const std::string& text);
};

enum class PriorVarianceMode {
  kVariance,  // prior covariance diagonal = sigma_hat^2 (default)
  kStderr,    // = sigma_hat, the verbatim reading
};

// Offline-derived prior for one arm: DDL estimates on the masked measured
// coordinates, zeros / unit variances on the q hidden coordinates.
struct WarmStart {
  Mask mask;
  Eigen::VectorXd mu0;                  // length p_eff + q, last q entries 0
  Eigen::VectorXd prior_variance_diag;  // length p_eff + q, last q entries 1
};

WarmStart make_warm_start(const DdlEstimate& estimate, const Mask& mask, int q,
                          PriorVarianceMode mode = PriorVarianceMode::kVariance);

GaussianPosterior posterior_from_warm_start(const WarmStart& warm);

// Convenience: make_warm_start + posterior_from_warm_start.
GaussianPosterior init_warm_start(const DdlEstimate& estimate, const Mask& mask,
                                  int q,
                                  PriorVarianceMode mode = PriorVarianceMode::kVariance);

// Standard Gaussian prior: mu = 0, B = I.
GaussianPosterior init_cold(int d);

// [masked first-p entries; all trailing hidden entries]. The hidden count is
// x.size() - mask length.
Eigen::VectorXd reduce_context(const OnlineContext& x, const Mask& mask);

struct PolicyDecision {
  int arm = 0;
  Eigen::VectorXd sampled_scores;
};

// Thompson step: sample mu_a ~ N(mu, B^{-1}) per arm via a Cholesky factor of
// B, score against that arm's reduced context, play the argmax (lowest index
// on ties). Throws "posterior corrupted" if some B is not positive definite.
PolicyDecision ts_select(const std::vector<GaussianPosterior>& posteriors,
                         const std::vector<Eigen::VectorXd>& x_eff_per_arm,
                         RandomStream& rng);

// Rank-one conjugate update: B' = B + x x^T, mu' solves B' mu' = B mu + x y.
GaussianPosterior posterior_update(const GaussianPosterior& posterior,
                                   const Eigen::VectorXd& x_eff, double y);

struct OfulConfig {
  double delta = 0.05;            // confidence level of the ellipsoid
  double lambda_reg = 1.0;        // ridge regularizer
  double param_norm_bound = 10.0; // S
};

struct OfulArmState {
  Eigen::MatrixXd V;
  Eigen::VectorXd b;
  long pulls = 0;
};

OfulArmState oful_init(int d, double lambda_reg);

// UCB_a = theta_a^T x + beta_t(delta) ||x||_{V^{-1}} with
// beta_t = sqrt(lambda) S + sqrt(2 log(1/delta) + d log(1 + t/(lambda d))).
int oful_select(const std::vector<OfulArmState>& states,
                const Eigen::VectorXd& x, const OfulConfig& cfg);

void oful_update(OfulArmState& state, const Eigen::VectorXd& x, double y);

// Regret reference: the true best arm.
int oracle_select(const std::vector<ArmParams>& all_params,
                  const OnlineContext& x);

}  // namespace dwts
