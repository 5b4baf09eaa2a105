#include "dwts/policies.hpp"

#include <cmath>
#include <json.hpp>
#include <limits>
#include <stdexcept>

namespace dwts {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

WarmStart make_warm_start(const DdlEstimate& estimate, const Mask& mask, int q,
                          PriorVarianceMode mode) {
  if (static_cast<std::size_t>(estimate.theta_hat.size()) != mask.selected.size()) {
    throw std::invalid_argument("make_warm_start: mask length mismatch");
  }
  if (q < 0) throw std::invalid_argument("make_warm_start: q must be >= 0");

  const VectorXd theta_eff = apply_mask(estimate.theta_hat, mask);
  const VectorXd sigma_eff = apply_mask(estimate.sigma_hat, mask);
  for (Eigen::Index i = 0; i < sigma_eff.size(); ++i) {
    if (!std::isfinite(sigma_eff[i])) {
      throw std::runtime_error("cannot warm-start non-identifiable coordinate");
    }
  }

  WarmStart warm;
  warm.mask = mask;
  const int d = mask.p_eff + q;
  warm.mu0 = VectorXd::Zero(d);
  warm.mu0.head(mask.p_eff) = theta_eff;
  warm.prior_variance_diag = VectorXd::Ones(d);
  for (int i = 0; i < mask.p_eff; ++i) {
    warm.prior_variance_diag[i] =
        mode == PriorVarianceMode::kVariance ? sigma_eff[i] * sigma_eff[i]
                                             : sigma_eff[i];
  }
  return warm;
}

GaussianPosterior posterior_from_warm_start(const WarmStart& warm) {
  GaussianPosterior post;
  post.mu = warm.mu0;
  post.B = warm.prior_variance_diag.cwiseInverse().asDiagonal();
  return post;
}

GaussianPosterior init_warm_start(const DdlEstimate& estimate, const Mask& mask,
                                  int q, PriorVarianceMode mode) {
  return posterior_from_warm_start(make_warm_start(estimate, mask, q, mode));
}

GaussianPosterior init_cold(int d) {
  if (d < 1) throw std::invalid_argument("init_cold: d must be >= 1");
  GaussianPosterior post;
  post.mu = VectorXd::Zero(d);
  post.B = MatrixXd::Identity(d, d);
  return post;
}

VectorXd reduce_context(const OnlineContext& x, const Mask& mask) {
  const auto p = static_cast<Eigen::Index>(mask.selected.size());
  if (x.size() < p) {
    throw std::invalid_argument("reduce_context: context shorter than mask");
  }
  const Eigen::Index q = x.size() - p;
  VectorXd out(mask.p_eff + q);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < p; ++i) {
    if (mask.selected[static_cast<std::size_t>(i)]) out[k++] = x[i];
  }
  out.tail(q) = x.tail(q);
  return out;
}

PolicyDecision ts_select(const std::vector<GaussianPosterior>& posteriors,
                         const std::vector<VectorXd>& x_eff_per_arm,
                         RandomStream& rng) {
  if (posteriors.empty() || posteriors.size() != x_eff_per_arm.size()) {
    throw std::invalid_argument("ts_select: one posterior and context per arm");
  }
  const int K = static_cast<int>(posteriors.size());
  PolicyDecision decision;
  decision.sampled_scores.resize(K);
  for (int a = 0; a < K; ++a) {
    const GaussianPosterior& post = posteriors[a];
    if (post.mu.size() != x_eff_per_arm[a].size() ||
        post.B.rows() != post.mu.size() || post.B.cols() != post.mu.size()) {
      throw std::invalid_argument("ts_select: dimension mismatch for arm " +
                                  std::to_string(a + 1));
    }
    Eigen::LLT<MatrixXd> llt(post.B);
    if (llt.info() != Eigen::Success) {
      throw std::runtime_error("posterior corrupted");
    }
    VectorXd z(post.mu.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.gaussian();
    // B = L L^T, so L^{-T} z has covariance B^{-1}.
    const VectorXd sample =
        post.mu + llt.matrixU().solve(z);
    decision.sampled_scores[a] = sample.dot(x_eff_per_arm[a]);
  }
  decision.arm = 0;
  for (int a = 1; a < K; ++a) {
    if (decision.sampled_scores[a] > decision.sampled_scores[decision.arm]) {
      decision.arm = a;
    }
  }
  return decision;
}

GaussianPosterior posterior_update(const GaussianPosterior& posterior,
                                   const VectorXd& x_eff, double y) {
  if (posterior.mu.size() != x_eff.size()) {
    throw std::invalid_argument("posterior_update: dimension mismatch");
  }
  GaussianPosterior next;
  next.B = posterior.B + x_eff * x_eff.transpose();
  const VectorXd rhs = posterior.B * posterior.mu + x_eff * y;
  Eigen::LDLT<MatrixXd> ldlt(next.B);
  if (ldlt.info() != Eigen::Success) {
    throw std::runtime_error("posterior_update: factorization failed");
  }
  next.mu = ldlt.solve(rhs);
  return next;
}

OfulArmState oful_init(int d, double lambda_reg) {
  if (d < 1) throw std::invalid_argument("oful_init: d must be >= 1");
  if (!(lambda_reg > 0.0)) throw std::invalid_argument("oful_init: lambda_reg > 0");
  OfulArmState state;
  state.V = lambda_reg * MatrixXd::Identity(d, d);
  state.b = VectorXd::Zero(d);
  state.pulls = 0;
  return state;
}

int oful_select(const std::vector<OfulArmState>& states, const VectorXd& x,
                const OfulConfig& cfg) {
  if (states.empty()) throw std::invalid_argument("oful_select: no arms");
  const double d = static_cast<double>(x.size());
  int best = 0;
  double best_ucb = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < static_cast<int>(states.size()); ++a) {
    const OfulArmState& s = states[a];
    Eigen::LDLT<MatrixXd> ldlt(s.V);
    const VectorXd theta = ldlt.solve(s.b);
    const double t = static_cast<double>(s.pulls);
    const double width =
        std::sqrt(cfg.lambda_reg) * cfg.param_norm_bound +
        std::sqrt(2.0 * std::log(1.0 / cfg.delta) +
                  d * std::log(1.0 + t / (cfg.lambda_reg * d)));
    const double ellipsoid_norm = std::sqrt(x.dot(ldlt.solve(x)));
    const double ucb = theta.dot(x) + width * ellipsoid_norm;
    if (ucb > best_ucb) {
      best_ucb = ucb;
      best = a;
    }
  }
  return best;
}

void oful_update(OfulArmState& state, const VectorXd& x, double y) {
  state.V += x * x.transpose();
  state.b += x * y;
  state.pulls += 1;
}

int oracle_select(const std::vector<ArmParams>& all_params,
                  const OnlineContext& x) {
  return best_arm(all_params, x).first;
}

std::string GaussianPosterior::to_json() const {
  json j;
  j["d"] = mu.size();
  j["mu"] = std::vector<double>(mu.begin(), mu.end());
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(B.size()));
  for (Eigen::Index r = 0; r < B.rows(); ++r) {
    for (Eigen::Index c = 0; c < B.cols(); ++c) flat.push_back(B(r, c));
  }
  j["B"] = flat;  // row-major
  return j.dump();
}

GaussianPosterior GaussianPosterior::from_json(const std::string& text) {
  json j = json::parse(text);
  const auto d = j.at("d").get<Eigen::Index>();
  const auto mu_vals = j.at("mu").get<std::vector<double>>();
  const auto b_vals = j.at("B").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(mu_vals.size()) != d ||
      static_cast<Eigen::Index>(b_vals.size()) != d * d) {
    throw std::invalid_argument("GaussianPosterior: inconsistent dimensions");
  }
  GaussianPosterior post;
  post.mu.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) post.mu[i] = mu_vals[static_cast<std::size_t>(i)];
  post.B.resize(d, d);
  for (Eigen::Index r = 0; r < d; ++r) {
    for (Eigen::Index c = 0; c < d; ++c) {
      post.B(r, c) = b_vals[static_cast<std::size_t>(r * d + c)];
    }
  }
  return post;
}

}  // namespace dwts
