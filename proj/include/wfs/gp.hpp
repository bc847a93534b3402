#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "wfs/bundle.hpp"
#include "wfs/field.hpp"

namespace wfs {

enum class KernelKind { RBF = 0, RationalQuadratic = 1, Matern = 2, WhiteNoise = 3 };

const char* to_string(KernelKind k);
KernelKind kernel_kind_from_string(const std::string& s);

/// Covariance kernel. Which hyperparameters are live depends on the kind:
/// RBF (gamma, tau), rational quadratic (gamma, l, tau), Matern (gamma, tau,
/// nu with nu in {0.5, 1.5, 2.5}), white noise (gamma).
struct Kernel {
  KernelKind kind = KernelKind::Matern;
  double gamma = 1.0;
  double tau = 1.0;
  double l = 1.0;
  double nu = 1.5;

  static Kernel rbf(double gamma, double tau) { return {KernelKind::RBF, gamma, tau, 1.0, 0.0}; }
  static Kernel rational_quadratic(double gamma, double l, double tau) {
    return {KernelKind::RationalQuadratic, gamma, tau, l, 0.0};
  }
  static Kernel matern(double gamma, double tau, double nu) {
    return {KernelKind::Matern, gamma, tau, 1.0, nu};
  }
  static Kernel white_noise(double gamma) { return {KernelKind::WhiteNoise, gamma, 1.0, 1.0, 0.0}; }

  void validate() const;

  /// Covariance as a function of the distance r (a != b). White noise is 0.
  double of_distance(double r) const;
  /// Prior variance k(a, a).
  double variance() const { return gamma * gamma; }

  /// Logs of the optimizable hyperparameters, in a fixed per-kind order.
  Eigen::VectorXd log_params() const;
  Kernel with_log_params(const Eigen::VectorXd& p) const;
  /// d k / d log(param) for each entry of log_params(), at distance r.
  Eigen::VectorXd log_param_gradient(double r, bool same_point) const;
};

template <typename A, typename B>
double kernel_eval(const Kernel& k, const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.size() != b.size()) throw Error(Errc::invalid_argument, "kernel: dimension mismatch");
  if (!a.allFinite() || !b.allFinite()) throw Error(Errc::non_finite, "kernel: non-finite input");
  if (k.kind == KernelKind::WhiteNoise) return a == b ? k.variance() : 0.0;
  return k.of_distance((a - b).norm());
}

/// Gram matrix over the rows of X.
Eigen::MatrixXd covariance(const Kernel& k, const Eigen::MatrixXd& X);
/// k(X_i, x) for every row of X.
Eigen::VectorXd cross_covariance(const Kernel& k, const Eigen::MatrixXd& X,
                                 const Eigen::VectorXd& x);

/// Per-dimension standardization to zero mean, unit std. Dimensions with zero
/// spread keep a scale of one.
struct Standardization {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static Standardization fit(const Eigen::MatrixXd& X_raw);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& X_raw) const;
  Eigen::VectorXd apply(const Eigen::VectorXd& x_raw) const;
};

/// A family of C*H*W GPs sharing inputs, kernel and noise: one Cholesky factor
/// and one weight column per output pixel.
struct GpFamilyModel {
  Eigen::MatrixXd X;  // standardized inputs, N x d
  Standardization stats;
  Kernel kernel;
  double sigma_n2 = 0.0;
  double jitter = 0.0;  // diagonal added on top of sigma_n2 to reach PD
  Eigen::MatrixXd L_chol;  // lower factor of K + (sigma_n2 + jitter) I
  Eigen::MatrixXd alpha;  // N x (C*H*W)
  Index channels = 0;
  Index height = 0;
  Index width = 0;

  Index n_train() const { return X.rows(); }
  Index n_outputs() const { return channels * height * width; }

  Bundle to_bundle() const;
  static GpFamilyModel from_bundle(const Bundle& b);
};

/// Lower Cholesky factor of A + jitter*I with jitter escalating from 0 through
/// 1e-10 .. 1e-6 of the mean diagonal. Throws Errc::not_pd after the last try.
Eigen::LLT<Eigen::MatrixXd> robust_cholesky(const Eigen::MatrixXd& A, double* jitter_used);

/// Fit on raw inputs (N x d) and outputs Y (N x C*H*W, channel-major rows).
GpFamilyModel fit_family(const Eigen::MatrixXd& X_raw, const Eigen::MatrixXd& Y, Index channels,
                         Index height, Index width, const Kernel& k, double sigma_n2);

template <typename Scalar>
GpFamilyModel fit_family(const Eigen::MatrixXd& X_raw, const std::vector<BasicField<Scalar>>& Y,
                         const Kernel& k, double sigma_n2) {
  if (Y.empty() || Index(Y.size()) != X_raw.rows())
    throw Error(Errc::invalid_argument, "fit_family: need one field per input row");
  const auto& f0 = Y.front();
  Eigen::MatrixXd Ym(X_raw.rows(), f0.size());
  for (std::size_t i = 0; i < Y.size(); ++i) {
    if (!Y[i].same_shape(f0)) throw Error(Errc::invalid_argument, "fit_family: field shapes differ");
    Ym.row(Index(i)) = Y[i].data().template cast<double>().transpose();
  }
  return fit_family(X_raw, Ym, f0.channels(), f0.height(), f0.width(), k, sigma_n2);
}

struct GpPrediction {
  BasicField<double> mean;
  BasicField<double> variance;  // the same value at every pixel
};

GpPrediction predict(const GpFamilyModel& model, const Eigen::VectorXd& xi_raw);

struct LmlResult {
  double value = 0.0;
  /// Kernel log-parameters followed by d/d log(sigma_n2).
  Eigen::VectorXd gradient;
};

/// Sum over the columns of Y of the standard GP log evidence
/// -1/2 y^T A^-1 y - 1/2 log|A| - N/2 log(2 pi), A = K + sigma_n2 I.
/// X is used as given (no standardization).
LmlResult log_marginal_likelihood(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                  const Kernel& k, double sigma_n2);

struct Hyperparameters {
  Kernel kernel;
  double sigma_n2 = 0.0;
  double objective = 0.0;
};

/// Backtracking gradient ascent on the log evidence in log-hyperparameter
/// space. sigma0 == 0 keeps the noise fixed at zero.
Hyperparameters optimize_hyperparameters(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                         const Kernel& k0, double sigma0, int steps);

}  // namespace wfs
