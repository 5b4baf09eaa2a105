#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "dwts/rng.hpp"

namespace dwts {

// Symmetric PSD operator Q that caps the singular values of the matrix it was
// built from at tau and acts as the identity on the orthogonal complement of
// the data's column span. Stored in factored form Q = I - U diag(f) U^T with
// f_l = 1 - min(d_l, tau)/d_l, so applying it costs O(n x rank).
struct TrimTransform {
  Eigen::MatrixXd basis;            // n x r, left singular directions
  Eigen::VectorXd removal;          // f_l in [0, 1), one per direction
  Eigen::VectorXd singular_values;  // positive singular values of the source
  double tau = 0.0;

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const;
  Eigen::MatrixXd apply(const Eigen::MatrixXd& m) const;
  Eigen::MatrixXd dense() const;  // materialized n x n operator
};

// Builds the trim transform from an SVD of Z. The trim level tau is the
// ceil(trim_quantile * m)-th largest of the m positive singular values, an
// order statistic, so re-trimming an already trimmed matrix changes nothing.
// Throws "degenerate design" if Z has no positive singular value.
TrimTransform trim_transform(const Eigen::MatrixXd& Z, double trim_quantile = 0.5);

struct LassoFit {
  Eigen::VectorXd beta;
  bool converged = true;
  int sweeps = 0;
};

// Cyclic coordinate descent with soft-thresholding for
//   (1/2n) ||y - X beta||^2 + lambda ||beta||_1.
// Stops when the largest coordinate change in a sweep drops below tol.
// All-zero columns keep coefficient 0. An optional warm start speeds up
// pathwise fits.
LassoFit lasso_cd(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                  double lambda, double tol = 1e-7, int max_iter = 100000,
                  const Eigen::VectorXd* warm_start = nullptr);

// k-fold CV over a log-spaced grid from lambda_max = ||X^T y||_inf / n down
// to lambda_max * 1e-3; returns the grid value with the lowest mean held-out
// squared error (largest lambda on ties). Fold assignment is a deterministic
// shuffle of the provided stream.
double select_lambda_cv(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                        int n_folds, int grid_size, RandomStream& rng);

enum class LambdaRule {
  kCv,     // select_lambda_cv per fit
  kFixed,  // A * sigma_hat * sqrt(2 log(d) / n), pilot-estimated sigma_hat
};

struct DdlOptions {
  double trim_quantile = 0.5;
  LambdaRule lambda_rule = LambdaRule::kCv;
  int cv_folds = 10;
  int cv_grid = 30;
  double fixed_rule_scale = 1.1;  // A in the fixed rule
  double tol = 1e-7;
  int max_iter = 100000;
};

// Per-coordinate doubly debiased estimates with standard errors.
// Coordinates whose projection residual is orthogonal to the trimmed column
// (|w_j^T Q z_j| < 1e-10) or whose column is degenerate carry
// sigma_hat = +infinity.
struct DdlEstimate {
  Eigen::VectorXd theta_hat;
  Eigen::VectorXd sigma_hat;
  double lambda = 0.0;       // penalty used for the outcome fit
  int support_size = 0;      // nonzeros of the initial lasso fit
  double noise_sd_hat = 0.0;

  std::string to_json() const;
};

// Offline estimation phase for one arm:
//   1. trim-transform the design, lasso the transformed problem,
//   2. per coordinate, regress the trimmed column on the trimmed remaining
//      columns and use the projection residual w_j to debias:
//        theta_j = beta_j + w_j^T Q (y - Z beta) / (w_j^T Q z_j),
//        sigma_j = noise_sd_hat * ||Q w_j|| / |w_j^T Q z_j|.
// The rng drives CV fold assignment (one child stream per fitted model).
DdlEstimate ddl_fit(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y,
                    const DdlOptions& options, RandomStream& rng);

struct Mask {
  std::vector<bool> selected;
  int p_eff = 0;

  std::string to_json() const;
  static Mask from_json(const std::string& text);
};

// kappa = beta_theta - max_{a,i} z_{1-alpha/2} sigma_hat_{a,i}, clamped at
// zero from below by default. literal_mode applies min{., 0} instead (the
// verbatim rule, which always selects everything). Infinite sigma_hat entries
// are excluded from the max with a warning on stderr.
double choose_kappa_theoretical(const std::vector<DdlEstimate>& estimates,
                                double alpha, double beta_theta,
                                bool literal_mode = false);

Mask build_mask(const Eigen::VectorXd& theta_hat, double kappa);

// Entries of v at selected positions, order preserved.
Eigen::VectorXd apply_mask(const Eigen::VectorXd& v, const Mask& mask);

}  // namespace dwts
