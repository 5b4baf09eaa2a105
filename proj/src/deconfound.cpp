#include "dwts/deconfound.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <json.hpp>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "dwts/math_util.hpp"

namespace dwts {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

namespace {

constexpr double kRankRelTol = 1e-9;   // singular values below d_max * this are treated as zero
constexpr double kDebiasDenomTol = 1e-10;

// Order-statistic trim level: the ceil(q * m)-th largest positive singular
// value. Being an actual sample value makes trimming idempotent.
double trim_level(const VectorXd& singular_values_desc, double q) {
  const int m = static_cast<int>(singular_values_desc.size());
  int k = static_cast<int>(std::ceil(q * m));
  k = std::clamp(k, 1, m);
  return singular_values_desc[k - 1];
}

struct SpectralBasis {
  MatrixXd vectors;  // eigenvectors of the Gram matrix, one column per positive direction
  VectorXd d;        // positive singular values, descending
};

// Eigendecomposition of M^T M (or M M^T, whichever is smaller) restricted to
// positive directions, sorted descending.
SpectralBasis gram_spectrum(const MatrixXd& gram) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(gram);
  if (eig.info() != Eigen::Success) {
    throw std::runtime_error("trim_transform: eigendecomposition failed");
  }
  const VectorXd& evals = eig.eigenvalues();  // ascending
  const double max_eval = evals[evals.size() - 1];
  if (!(max_eval > 0.0)) {
    throw std::runtime_error("degenerate design");
  }
  const double threshold = max_eval * kRankRelTol * kRankRelTol;
  int rank = 0;
  for (Eigen::Index i = 0; i < evals.size(); ++i) {
    if (evals[i] > threshold) ++rank;
  }
  SpectralBasis basis;
  basis.vectors.resize(gram.rows(), rank);
  basis.d.resize(rank);
  for (int k = 0; k < rank; ++k) {
    const Eigen::Index src = evals.size() - 1 - k;  // descending
    basis.vectors.col(k) = eig.eigenvectors().col(src);
    basis.d[k] = std::sqrt(evals[src]);
  }
  return basis;
}

VectorXd removal_factors(const VectorXd& d, double tau) {
  VectorXd f(d.size());
  for (Eigen::Index l = 0; l < d.size(); ++l) {
    f[l] = 1.0 - std::min(d[l], tau) / d[l];
  }
  return f;
}

double lambda_max_of(const MatrixXd& X, const VectorXd& y) {
  return (X.transpose() * y).cwiseAbs().maxCoeff() / static_cast<double>(X.rows());
}

// Descending log-spaced grid over three decades below lambda_max.
std::vector<double> lambda_grid(double lambda_max, int grid_size) {
  std::vector<double> grid;
  grid.reserve(grid_size);
  if (grid_size <= 1) {
    grid.push_back(lambda_max);
    return grid;
  }
  const double log_hi = std::log(lambda_max);
  const double log_lo = std::log(lambda_max * 1e-3);
  for (int i = 0; i < grid_size; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(grid_size - 1);
    grid.push_back(std::exp(log_hi + t * (log_lo - log_hi)));
  }
  return grid;
}

// Pilot-then-refit fixed-rule lasso: lambda = A * sigma_hat * sqrt(2 log d / n)
// with sigma_hat from the pilot residuals.
LassoFit lasso_fixed_rule(const MatrixXd& X, const VectorXd& y, double scale,
                          double tol, int max_iter, double* lambda_out) {
  const double n = static_cast<double>(X.rows());
  const double d = static_cast<double>(X.cols());
  const double rate = std::sqrt(2.0 * std::log(std::max(d, 2.0)) / n);
  const double sd_y = std::sqrt(y.squaredNorm() / n);
  if (sd_y < 1e-12) {
    LassoFit fit;
    fit.beta = VectorXd::Zero(X.cols());
    if (lambda_out) *lambda_out = scale * rate;
    return fit;
  }
  const double pilot_lambda = scale * sd_y * rate;
  LassoFit pilot = lasso_cd(X, y, pilot_lambda, tol, max_iter);
  int support = static_cast<int>((pilot.beta.array() != 0.0).count());
  const double dof = std::max(static_cast<double>(X.rows() - support), 1.0);
  const double sigma_hat = std::sqrt((y - X * pilot.beta).squaredNorm() / dof);
  const double lambda = std::max(scale * sigma_hat * rate, 1e-12);
  if (lambda_out) *lambda_out = lambda;
  return lasso_cd(X, y, lambda, tol, max_iter, &pilot.beta);
}

}  // namespace

VectorXd TrimTransform::apply(const VectorXd& v) const {
  return v - basis * (removal.asDiagonal() * (basis.transpose() * v));
}

MatrixXd TrimTransform::apply(const MatrixXd& m) const {
  return m - basis * (removal.asDiagonal() * (basis.transpose() * m));
}

MatrixXd TrimTransform::dense() const {
  const Eigen::Index n = basis.rows();
  return MatrixXd::Identity(n, n) -
         basis * removal.asDiagonal() * basis.transpose();
}

TrimTransform trim_transform(const MatrixXd& Z, double trim_quantile) {
  if (Z.rows() < 2 || Z.cols() < 1) {
    throw std::invalid_argument("trim_transform: need n >= 2, p >= 1");
  }
  if (!(trim_quantile > 0.0 && trim_quantile <= 1.0)) {
    throw std::invalid_argument("trim_transform: trim_quantile must be in (0,1]");
  }
  if (!Z.allFinite()) {
    throw std::invalid_argument("trim_transform: non-finite design");
  }

  TrimTransform t;
  if (Z.rows() <= Z.cols()) {
    // Left Gram directly yields the left singular vectors.
    SpectralBasis basis = gram_spectrum(Z * Z.transpose());
    t.basis = std::move(basis.vectors);
    t.singular_values = std::move(basis.d);
  } else {
    SpectralBasis basis = gram_spectrum(Z.transpose() * Z);
    t.singular_values = basis.d;
    t.basis = Z * (basis.vectors * basis.d.cwiseInverse().asDiagonal());
  }
  t.tau = trim_level(t.singular_values, trim_quantile);
  t.removal = removal_factors(t.singular_values, t.tau);
  return t;
}

LassoFit lasso_cd(const MatrixXd& X, const VectorXd& y, double lambda,
                  double tol, int max_iter, const VectorXd* warm_start) {
  if (X.rows() != y.size()) {
    throw std::invalid_argument("lasso_cd: row mismatch");
  }
  if (!(lambda > 0.0)) {
    throw std::invalid_argument("lasso_cd: lambda must be > 0");
  }
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  const double n_inv = 1.0 / static_cast<double>(n);

  VectorXd col_sq(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    col_sq[j] = X.col(j).squaredNorm() * n_inv;
  }

  LassoFit fit;
  fit.beta = warm_start ? *warm_start : VectorXd::Zero(d);
  if (warm_start && warm_start->size() != d) {
    throw std::invalid_argument("lasso_cd: warm start size mismatch");
  }
  for (Eigen::Index j = 0; j < d; ++j) {
    if (col_sq[j] == 0.0) fit.beta[j] = 0.0;
  }
  VectorXd residual = y - X * fit.beta;

  fit.converged = false;
  for (int sweep = 0; sweep < max_iter; ++sweep) {
    double max_change = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      if (col_sq[j] == 0.0) continue;
      const double old = fit.beta[j];
      const double rho = X.col(j).dot(residual) * n_inv + col_sq[j] * old;
      const double updated = soft_threshold(rho, lambda) / col_sq[j];
      if (updated != old) {
        residual -= (updated - old) * X.col(j);
        fit.beta[j] = updated;
        max_change = std::max(max_change, std::abs(updated - old));
      }
    }
    fit.sweeps = sweep + 1;
    if (max_change < tol) {
      fit.converged = true;
      break;
    }
  }
  return fit;
}

double select_lambda_cv(const MatrixXd& X, const VectorXd& y, int n_folds,
                        int grid_size, RandomStream& rng) {
  const Eigen::Index n = X.rows();
  if (n_folds < 2) throw std::invalid_argument("select_lambda_cv: n_folds >= 2");
  if (n < n_folds) throw std::invalid_argument("select_lambda_cv: rows >= n_folds");
  if (grid_size < 1) throw std::invalid_argument("select_lambda_cv: grid_size >= 1");

  const std::vector<double> grid = lambda_grid(lambda_max_of(X, y), grid_size);
  if (grid.size() == 1) return grid[0];

  // Deterministic shuffle, then round-robin fold labels.
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (Eigen::Index i = n - 1; i > 0; --i) {
    const auto k = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(i + 1)));
    std::swap(perm[i], perm[k]);
  }
  std::vector<int> fold(n);
  for (Eigen::Index i = 0; i < n; ++i) fold[perm[i]] = static_cast<int>(i % n_folds);

  std::vector<double> mse(grid.size(), 0.0);
  for (int f = 0; f < n_folds; ++f) {
    Eigen::Index n_test = 0;
    for (Eigen::Index i = 0; i < n; ++i) n_test += (fold[i] == f);
    const Eigen::Index n_train = n - n_test;
    MatrixXd X_train(n_train, X.cols()), X_test(n_test, X.cols());
    VectorXd y_train(n_train), y_test(n_test);
    Eigen::Index it = 0, iv = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (fold[i] == f) {
        X_test.row(iv) = X.row(i);
        y_test[iv++] = y[i];
      } else {
        X_train.row(it) = X.row(i);
        y_train[it++] = y[i];
      }
    }
    VectorXd warm = VectorXd::Zero(X.cols());
    for (std::size_t g = 0; g < grid.size(); ++g) {
      LassoFit fit = lasso_cd(X_train, y_train, grid[g], 1e-6, 2000, &warm);
      warm = fit.beta;
      mse[g] += (y_test - X_test * fit.beta).squaredNorm() /
                static_cast<double>(n_test);
    }
  }
  std::size_t best = 0;
  for (std::size_t g = 1; g < grid.size(); ++g) {
    if (mse[g] < mse[best]) best = g;
  }
  return grid[best];
}

DdlEstimate ddl_fit(const MatrixXd& Z, const VectorXd& y,
                    const DdlOptions& options, RandomStream& rng) {
  const Eigen::Index n = Z.rows();
  const Eigen::Index p = Z.cols();
  if (n <= 10) throw std::invalid_argument("ddl_fit: need n > 10");
  if (p < 2) throw std::invalid_argument("ddl_fit: need p >= 2");
  if (y.size() != n) throw std::invalid_argument("ddl_fit: row mismatch");

  const double inf = std::numeric_limits<double>::infinity();

  // Outcome model on the trimmed problem.
  TrimTransform Q = trim_transform(Z, options.trim_quantile);
  MatrixXd Z_trim = Q.apply(Z);
  VectorXd y_trim = Q.apply(y);

  DdlEstimate est;
  LassoFit outcome;
  if (options.lambda_rule == LambdaRule::kCv) {
    RandomStream cv_rng = rng.child("cv_outcome");
    est.lambda = select_lambda_cv(Z_trim, y_trim, options.cv_folds,
                                  options.cv_grid, cv_rng);
    outcome = lasso_cd(Z_trim, y_trim, est.lambda, options.tol, options.max_iter);
  } else {
    outcome = lasso_fixed_rule(Z_trim, y_trim, options.fixed_rule_scale,
                               options.tol, options.max_iter, &est.lambda);
  }
  est.support_size = static_cast<int>((outcome.beta.array() != 0.0).count());
  const VectorXd trimmed_residual = y_trim - Z_trim * outcome.beta;  // = Q(y - Z beta)
  const double dof = std::max(static_cast<double>(n - est.support_size), 1.0);
  est.noise_sd_hat = std::sqrt(trimmed_residual.squaredNorm() / dof);

  est.theta_hat.resize(p);
  est.sigma_hat.resize(p);

  const MatrixXd gram = Z.transpose() * Z;
  const bool fast_path = (p - 1 <= n) && (p >= 2);

  MatrixXd Z_minus(n, p - 1);
  MatrixXd gram_minus(p - 1, p - 1);
  VectorXd gram_col(p - 1);

  for (Eigen::Index j = 0; j < p; ++j) {
    const double col_min = Z.col(j).minCoeff();
    const double col_max = Z.col(j).maxCoeff();
    if (col_min == col_max) {
      // Zero-variance column: not identifiable, never selected.
      est.theta_hat[j] = 0.0;
      est.sigma_hat[j] = inf;
      continue;
    }

    // Z without column j, plus the matching Gram slices.
    Eigen::Index c = 0;
    for (Eigen::Index k = 0; k < p; ++k) {
      if (k == j) continue;
      Z_minus.col(c) = Z.col(k);
      gram_col[c] = gram(k, j);
      Eigen::Index cc = 0;
      for (Eigen::Index l = 0; l < p; ++l) {
        if (l == j) continue;
        gram_minus(c, cc) = gram(k, l);
        ++cc;
      }
      ++c;
    }

    // Column regression design P_j Z_-j and response P_j z_j.
    MatrixXd design;
    VectorXd response;
    if (fast_path) {
      SpectralBasis basis = gram_spectrum(gram_minus);
      const double tau_j = trim_level(basis.d, options.trim_quantile);
      const VectorXd f = removal_factors(basis.d, tau_j);
      // P_j M = M - U f U^T M with U = Z_-j V diag(1/d); in V-coordinates
      // P_j Z_-j = Z_-j (I - V f V^T) and
      // P_j z_j  = z_j - Z_-j V diag(f / d^2) V^T (Z_-j^T z_j).
      MatrixXd t_mat = MatrixXd::Identity(p - 1, p - 1) -
                       basis.vectors * f.asDiagonal() * basis.vectors.transpose();
      design = Z_minus * t_mat;
      const VectorXd coeffs =
          basis.vectors *
          ((f.array() / basis.d.array().square()).matrix().asDiagonal() *
           (basis.vectors.transpose() * gram_col));
      response = Z.col(j) - Z_minus * coeffs;
    } else {
      TrimTransform P = trim_transform(Z_minus, options.trim_quantile);
      design = P.apply(Z_minus);
      response = P.apply(VectorXd(Z.col(j)));
    }

    // Projection residual w_j.
    VectorXd w;
    const double response_scale =
        std::sqrt(response.squaredNorm() / static_cast<double>(n));
    if (response_scale < 1e-12) {
      w = response;
    } else if (options.lambda_rule == LambdaRule::kCv) {
      RandomStream cv_rng = rng.child("cv_column").child(static_cast<std::uint64_t>(j));
      const double lambda_j = select_lambda_cv(design, response, options.cv_folds,
                                               options.cv_grid, cv_rng);
      LassoFit gamma = lasso_cd(design, response, lambda_j, options.tol,
                                options.max_iter);
      w = response - design * gamma.beta;
    } else {
      LassoFit gamma = lasso_fixed_rule(design, response, options.fixed_rule_scale,
                                        options.tol, options.max_iter, nullptr);
      w = response - design * gamma.beta;
    }

    const VectorXd w_trimmed = Q.apply(w);
    const double denom = w.dot(Q.apply(VectorXd(Z.col(j))));
    if (std::abs(denom) < kDebiasDenomTol) {
      std::cerr << "ddl_fit: non-identifiable coordinate " << j + 1 << "\n";
      est.theta_hat[j] = outcome.beta[j];
      est.sigma_hat[j] = inf;
      continue;
    }
    est.theta_hat[j] = outcome.beta[j] + w.dot(trimmed_residual) / denom;
    est.sigma_hat[j] = est.noise_sd_hat * w_trimmed.norm() / std::abs(denom);
  }
  return est;
}

std::string DdlEstimate::to_json() const {
  json j;
  j["theta_hat"] = std::vector<double>(theta_hat.begin(), theta_hat.end());
  json sigma = json::array();
  for (Eigen::Index i = 0; i < sigma_hat.size(); ++i) {
    if (std::isfinite(sigma_hat[i])) {
      sigma.push_back(sigma_hat[i]);
    } else {
      sigma.push_back(nullptr);  // +infinity sentinel
    }
  }
  j["sigma_hat"] = sigma;
  j["lambda"] = lambda;
  j["support_size"] = support_size;
  j["noise_sd_hat"] = noise_sd_hat;
  return j.dump(2);
}

double choose_kappa_theoretical(const std::vector<DdlEstimate>& estimates,
                                double alpha, double beta_theta,
                                bool literal_mode) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("choose_kappa_theoretical: alpha in (0,1)");
  }
  if (!(beta_theta > 0.0)) {
    throw std::invalid_argument("choose_kappa_theoretical: beta_theta > 0");
  }
  const double z = normal_quantile(1.0 - alpha / 2.0);
  double max_half_width = -1.0;
  int skipped = 0;
  for (const DdlEstimate& est : estimates) {
    for (Eigen::Index i = 0; i < est.sigma_hat.size(); ++i) {
      if (!std::isfinite(est.sigma_hat[i])) {
        ++skipped;
        continue;
      }
      max_half_width = std::max(max_half_width, z * est.sigma_hat[i]);
    }
  }
  if (skipped > 0) {
    std::cerr << "choose_kappa_theoretical: excluded " << skipped
              << " non-identifiable coordinate(s)\n";
  }
  if (max_half_width < 0.0) {
    throw std::invalid_argument(
        "choose_kappa_theoretical: no identifiable coordinates");
  }
  const double value = beta_theta - max_half_width;
  return literal_mode ? std::min(value, 0.0) : std::max(value, 0.0);
}

Mask build_mask(const VectorXd& theta_hat, double kappa) {
  Mask mask;
  mask.selected.resize(static_cast<std::size_t>(theta_hat.size()));
  mask.p_eff = 0;
  for (Eigen::Index i = 0; i < theta_hat.size(); ++i) {
    const bool keep = std::abs(theta_hat[i]) >= kappa;
    mask.selected[static_cast<std::size_t>(i)] = keep;
    mask.p_eff += keep;
  }
  return mask;
}

VectorXd apply_mask(const VectorXd& v, const Mask& mask) {
  if (static_cast<std::size_t>(v.size()) != mask.selected.size()) {
    throw std::invalid_argument("apply_mask: length mismatch");
  }
  VectorXd out(mask.p_eff);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (mask.selected[static_cast<std::size_t>(i)]) out[k++] = v[i];
  }
  return out;
}

std::string Mask::to_json() const {
  json j = json::array();
  for (bool b : selected) j.push_back(b);
  return j.dump();
}

Mask Mask::from_json(const std::string& text) {
  json j = json::parse(text);
  if (!j.is_array()) throw std::invalid_argument("Mask: expected JSON array");
  Mask mask;
  mask.p_eff = 0;
  for (const auto& item : j) {
    if (!item.is_boolean()) {
      throw std::invalid_argument("Mask: expected boolean entries");
    }
    mask.selected.push_back(item.get<bool>());
    mask.p_eff += item.get<bool>();
  }
  return mask;
}

}  // namespace dwts
