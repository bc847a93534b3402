#include "wfs/gp.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace wfs {

const char* to_string(KernelKind k) {
  switch (k) {
    case KernelKind::RBF: return "rbf";
    case KernelKind::RationalQuadratic: return "rational_quadratic";
    case KernelKind::Matern: return "matern";
    case KernelKind::WhiteNoise: return "white_noise";
  }
  return "matern";
}

KernelKind kernel_kind_from_string(const std::string& s) {
  if (s == "rbf") return KernelKind::RBF;
  if (s == "rational_quadratic") return KernelKind::RationalQuadratic;
  if (s == "matern") return KernelKind::Matern;
  if (s == "white_noise") return KernelKind::WhiteNoise;
  throw Error(Errc::config, "unknown kernel '" + s + "'");
}

void Kernel::validate() const {
  if (!(gamma > 0.0) || !(tau > 0.0) || !(l > 0.0))
    throw Error(Errc::config, "kernel hyperparameters must be > 0");
  if (kind == KernelKind::Matern && nu != 0.5 && nu != 1.5 && nu != 2.5)
    throw Error(Errc::config, "Matern nu must be 0.5, 1.5 or 2.5");
}

double Kernel::of_distance(double r) const {
  const double g2 = gamma * gamma;
  switch (kind) {
    case KernelKind::RBF:
      return g2 * std::exp(-r * r / (2.0 * tau * tau));
    case KernelKind::RationalQuadratic:
      return g2 * std::pow(1.0 + r * r / (2.0 * tau * l * l), -tau);
    case KernelKind::Matern: {
      if (nu == 0.5) return g2 * std::exp(-r / tau);
      if (nu == 1.5) {
        const double a = std::sqrt(3.0) * r / tau;
        return g2 * (1.0 + a) * std::exp(-a);
      }
      if (nu == 2.5) {
        const double a = std::sqrt(5.0) * r / tau;
        return g2 * (1.0 + a + a * a / 3.0) * std::exp(-a);
      }
      throw Error(Errc::config, "Matern nu must be 0.5, 1.5 or 2.5");
    }
    case KernelKind::WhiteNoise:
      return r == 0.0 ? g2 : 0.0;
  }
  return 0.0;
}

Eigen::VectorXd Kernel::log_params() const {
  switch (kind) {
    case KernelKind::RBF:
    case KernelKind::Matern:
      return Eigen::Vector2d(std::log(gamma), std::log(tau));
    case KernelKind::RationalQuadratic:
      return Eigen::Vector3d(std::log(gamma), std::log(l), std::log(tau));
    case KernelKind::WhiteNoise:
      return Eigen::VectorXd::Constant(1, std::log(gamma));
  }
  return {};
}

Kernel Kernel::with_log_params(const Eigen::VectorXd& p) const {
  if (p.size() != log_params().size())
    throw Error(Errc::invalid_argument, "kernel: wrong hyperparameter count");
  Kernel k = *this;
  k.gamma = std::exp(p[0]);
  if (kind == KernelKind::RBF || kind == KernelKind::Matern) k.tau = std::exp(p[1]);
  if (kind == KernelKind::RationalQuadratic) {
    k.l = std::exp(p[1]);
    k.tau = std::exp(p[2]);
  }
  return k;
}

Eigen::VectorXd Kernel::log_param_gradient(double r, bool same_point) const {
  const double g2 = gamma * gamma;
  switch (kind) {
    case KernelKind::RBF: {
      const double k = of_distance(r);
      return Eigen::Vector2d(2.0 * k, k * r * r / (tau * tau));
    }
    case KernelKind::RationalQuadratic: {
      const double k = of_distance(r);
      const double s = r * r / (2.0 * tau * l * l);
      const double base = 1.0 + s;
      return Eigen::Vector3d(2.0 * k, k * 2.0 * tau * s / base,
                             k * tau * (-std::log(base) + s / base));
    }
    case KernelKind::Matern: {
      const double k = of_distance(r);
      double dtau = 0.0;
      if (nu == 0.5) {
        dtau = k * r / tau;
      } else if (nu == 1.5) {
        const double a = std::sqrt(3.0) * r / tau;
        dtau = g2 * a * a * std::exp(-a);
      } else {
        const double a = std::sqrt(5.0) * r / tau;
        dtau = g2 * a * a * (1.0 + a) * std::exp(-a) / 3.0;
      }
      return Eigen::Vector2d(2.0 * k, dtau);
    }
    case KernelKind::WhiteNoise:
      return Eigen::VectorXd::Constant(1, same_point ? 2.0 * g2 : 0.0);
  }
  return {};
}

Eigen::MatrixXd covariance(const Kernel& k, const Eigen::MatrixXd& X) {
  const Index n = X.rows();
  Eigen::MatrixXd K(n, n);
  for (Index i = 0; i < n; ++i) {
    K(i, i) = kernel_eval(k, X.row(i), X.row(i));
    for (Index j = 0; j < i; ++j) K(i, j) = K(j, i) = kernel_eval(k, X.row(i), X.row(j));
  }
  return K;
}

Eigen::VectorXd cross_covariance(const Kernel& k, const Eigen::MatrixXd& X,
                                 const Eigen::VectorXd& x) {
  Eigen::VectorXd v(X.rows());
  for (Index i = 0; i < X.rows(); ++i) v[i] = kernel_eval(k, X.row(i).transpose(), x);
  return v;
}

Standardization Standardization::fit(const Eigen::MatrixXd& X_raw) {
  Standardization s;
  s.mean = X_raw.colwise().mean();
  s.scale = ((X_raw.rowwise() - s.mean).array().square().colwise().sum() / double(X_raw.rows()))
                .sqrt()
                .matrix();
  for (Index j = 0; j < s.scale.size(); ++j)
    if (!(s.scale[j] > 0.0)) s.scale[j] = 1.0;
  return s;
}

Eigen::MatrixXd Standardization::apply(const Eigen::MatrixXd& X_raw) const {
  return ((X_raw.rowwise() - mean).array().rowwise() / scale.array()).matrix();
}

Eigen::VectorXd Standardization::apply(const Eigen::VectorXd& x_raw) const {
  return ((x_raw.transpose() - mean).array() / scale.array()).matrix().transpose();
}

Eigen::LLT<Eigen::MatrixXd> robust_cholesky(const Eigen::MatrixXd& A, double* jitter_used) {
  const double mean_diag = A.diagonal().mean();
  const Index n = A.rows();
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() == Eigen::Success) {
    if (jitter_used) *jitter_used = 0.0;
    return llt;
  }
  for (double rel = 1e-10; rel <= 1.0000001e-6; rel *= 10.0) {
    const double jitter = rel * mean_diag;
    llt.compute(A + jitter * Eigen::MatrixXd::Identity(n, n));
    if (llt.info() == Eigen::Success) {
      if (jitter_used) *jitter_used = jitter;
      return llt;
    }
  }
  throw Error(Errc::not_pd, "covariance not PD");
}

GpFamilyModel fit_family(const Eigen::MatrixXd& X_raw, const Eigen::MatrixXd& Y, Index channels,
                         Index height, Index width, const Kernel& k, double sigma_n2) {
  k.validate();
  if (X_raw.rows() < 1) throw Error(Errc::invalid_argument, "fit_family: need N >= 1");
  if (Y.rows() != X_raw.rows() || Y.cols() != channels * height * width)
    throw Error(Errc::invalid_argument, "fit_family: output shape mismatch");
  if (!(sigma_n2 >= 0.0)) throw Error(Errc::invalid_argument, "fit_family: sigma_n2 < 0");
  if (!X_raw.allFinite() || !Y.allFinite())
    throw Error(Errc::non_finite, "fit_family: non-finite data");

  GpFamilyModel m;
  m.stats = Standardization::fit(X_raw);
  m.X = m.stats.apply(X_raw);
  m.kernel = k;
  m.sigma_n2 = sigma_n2;
  m.channels = channels;
  m.height = height;
  m.width = width;

  Eigen::MatrixXd A = covariance(k, m.X);
  A.diagonal().array() += sigma_n2;
  const auto llt = robust_cholesky(A, &m.jitter);
  m.L_chol = llt.matrixL();
  m.alpha = llt.solve(Y);
  return m;
}

GpPrediction predict(const GpFamilyModel& model, const Eigen::VectorXd& xi_raw) {
  if (xi_raw.size() != model.X.cols())
    throw Error(Errc::invalid_argument, "predict: input dimension mismatch");
  const Eigen::VectorXd x = model.stats.apply(xi_raw);
  const Eigen::VectorXd ks = cross_covariance(model.kernel, model.X, x);

  GpPrediction p{BasicField<double>(model.channels, model.height, model.width),
                 BasicField<double>(model.channels, model.height, model.width)};
  p.mean.data().noalias() = model.alpha.transpose() * ks;

  const Eigen::VectorXd w = model.L_chol.triangularView<Eigen::Lower>().solve(ks);
  const double var = kernel_eval(model.kernel, x, x) - w.squaredNorm();
  p.variance.data().setConstant(std::max(var, 0.0));
  return p;
}

LmlResult log_marginal_likelihood(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                  const Kernel& k, double sigma_n2) {
  const Index n = X.rows();
  if (n < 1 || Y.rows() != n) throw Error(Errc::invalid_argument, "lml: shape mismatch");
  const double cols = double(Y.cols());

  Eigen::MatrixXd A = covariance(k, X);
  A.diagonal().array() += sigma_n2;
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw Error(Errc::not_pd, "covariance not PD");

  const Eigen::MatrixXd alpha = llt.solve(Y);
  const Eigen::MatrixXd L = llt.matrixL();
  const double log_det = 2.0 * L.diagonal().array().log().sum();

  LmlResult r;
  r.value = -0.5 * (Y.array() * alpha.array()).sum() -
            cols * (0.5 * log_det + 0.5 * double(n) * std::log(2.0 * std::numbers::pi));

  // d/dtheta = 1/2 tr(W dA/dtheta) with W = alpha alpha^T - cols * A^-1.
  const Eigen::MatrixXd W =
      alpha * alpha.transpose() - cols * llt.solve(Eigen::MatrixXd::Identity(n, n));
  const Index np = k.log_params().size();
  r.gradient = Eigen::VectorXd::Zero(np + 1);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const bool same = i == j || X.row(i) == X.row(j);
      const double dist = (X.row(i) - X.row(j)).norm();
      r.gradient.head(np) += 0.5 * W(i, j) * k.log_param_gradient(dist, same);
    }
  }
  r.gradient[np] = 0.5 * sigma_n2 * W.trace();
  return r;
}

Hyperparameters optimize_hyperparameters(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y,
                                         const Kernel& k0, double sigma0, int steps) {
  if (Y.cols() < 1) throw Error(Errc::invalid_argument, "optimize: empty pixel subset");
  const bool fit_noise = sigma0 > 0.0;
  const Index np = k0.log_params().size();

  auto unpack = [&](const Eigen::VectorXd& p) {
    return std::pair{k0.with_log_params(p.head(np)), fit_noise ? std::exp(p[np]) : 0.0};
  };
  auto evaluate = [&](const Eigen::VectorXd& p, Eigen::VectorXd* grad) {
    const auto [k, s2] = unpack(p);
    try {
      const auto r = log_marginal_likelihood(X, Y, k, s2);
      if (grad) {
        *grad = r.gradient.head(p.size());
        if (!fit_noise) grad->conservativeResize(np);
      }
      return std::isfinite(r.value) ? r.value : -std::numeric_limits<double>::infinity();
    } catch (const Error&) {
      return -std::numeric_limits<double>::infinity();
    }
  };

  Eigen::VectorXd p(fit_noise ? np + 1 : np);
  p.head(np) = k0.log_params();
  if (fit_noise) p[np] = std::log(sigma0);

  Eigen::VectorXd g;
  double best = evaluate(p, &g);
  double step = 0.5;
  for (int it = 0; it < steps && std::isfinite(best); ++it) {
    const double gn = g.norm();
    if (!(gn > 1e-12)) break;
    bool accepted = false;
    while (step > 1e-10) {
      const Eigen::VectorXd trial = p + (step / gn) * g;
      Eigen::VectorXd g_trial;
      const double v = evaluate(trial, &g_trial);
      if (v > best) {
        p = trial;
        g = g_trial;
        best = v;
        step *= 1.5;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }
  const auto [k, s2] = unpack(p);
  return {k, fit_noise ? s2 : sigma0, best};
}

Bundle GpFamilyModel::to_bundle() const {
  Bundle b;
  Eigen::MatrixXd hyper(1, 10);
  hyper << double(int(kernel.kind)), kernel.gamma, kernel.tau, kernel.l, kernel.nu, sigma_n2,
      jitter, double(channels), double(height), double(width);
  b.put("gp.hyper", hyper);
  b.put("gp.X", X);
  b.put("gp.stats.mean", Eigen::MatrixXd(stats.mean));
  b.put("gp.stats.scale", Eigen::MatrixXd(stats.scale));
  b.put("gp.L", L_chol);
  b.put("gp.alpha", alpha);
  return b;
}

GpFamilyModel GpFamilyModel::from_bundle(const Bundle& b) {
  const auto& h = b.matrix("gp.hyper");
  if (h.size() != 10) throw Error(Errc::config, "gp model: malformed hyperparameter record");
  GpFamilyModel m;
  const int kind = int(h(0, 0));
  if (kind < 0 || kind > 3) throw Error(Errc::config, "gp model: unknown kernel id");
  m.kernel = {KernelKind(kind), h(0, 1), h(0, 2), h(0, 3), h(0, 4)};
  m.sigma_n2 = h(0, 5);
  m.jitter = h(0, 6);
  m.channels = Index(h(0, 7));
  m.height = Index(h(0, 8));
  m.width = Index(h(0, 9));
  m.X = b.matrix("gp.X");
  m.stats.mean = b.matrix("gp.stats.mean");
  m.stats.scale = b.matrix("gp.stats.scale");
  m.L_chol = b.matrix("gp.L");
  m.alpha = b.matrix("gp.alpha");
  if (m.alpha.rows() != m.X.rows() || m.alpha.cols() != m.n_outputs() ||
      m.L_chol.rows() != m.X.rows())
    throw Error(Errc::config, "gp model: inconsistent shapes");
  return m;
}

}  // namespace wfs
