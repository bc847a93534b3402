#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/LU>

#include "doctest.h"
#include "wfs/gp.hpp"

using namespace wfs;
using doctest::Approx;

namespace {

const std::vector<Kernel> kAllKernels{Kernel::rbf(1.3, 0.8), Kernel::rational_quadratic(0.9, 1.2, 1.7),
                                      Kernel::matern(1.0, 1.0, 1.5), Kernel::matern(1.1, 0.7, 0.5),
                                      Kernel::matern(0.8, 1.4, 2.5), Kernel::white_noise(1.5)};

Eigen::MatrixXd random_matrix(std::mt19937_64& rng, Index r, Index c) {
  std::normal_distribution<double> g;
  Eigen::MatrixXd m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// Textbook formulas written out per kernel, independent of Kernel::of_distance.
double reference_kernel(const Kernel& k, const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double r = (a - b).norm();
  const double g2 = k.gamma * k.gamma;
  switch (k.kind) {
    case KernelKind::RBF: return g2 * std::exp(-0.5 * std::pow(r / k.tau, 2));
    case KernelKind::RationalQuadratic:
      return g2 * std::pow(1.0 + r * r / (2.0 * k.tau * k.l * k.l), -k.tau);
    case KernelKind::Matern: {
      const double s = std::sqrt(2.0 * k.nu) * r / k.tau;
      if (k.nu == 0.5) return g2 * std::exp(-s);
      if (k.nu == 1.5) return g2 * (1.0 + s) * std::exp(-s);
      return g2 * (1.0 + s + s * s / 3.0) * std::exp(-s);
    }
    case KernelKind::WhiteNoise: return a == b ? g2 : 0.0;
  }
  return 0.0;
}

// One GP per output column, solved with a full-pivot LU on explicitly
// standardized inputs.
Eigen::VectorXd naive_predict(const Eigen::MatrixXd& X_raw, const Eigen::MatrixXd& Y,
                              const Kernel& k, double s2, const Eigen::VectorXd& x_raw) {
  const Index n = X_raw.rows();
  const Index d = X_raw.cols();
  Eigen::MatrixXd Xs(n, d);
  Eigen::VectorXd xs(d);
  for (Index j = 0; j < d; ++j) {
    const double m = X_raw.col(j).mean();
    double v = 0.0;
    for (Index i = 0; i < n; ++i) v += (X_raw(i, j) - m) * (X_raw(i, j) - m);
    const double sd = std::sqrt(v / double(n));
    Xs.col(j) = (X_raw.col(j).array() - m) / sd;
    xs[j] = (x_raw[j] - m) / sd;
  }
  Eigen::VectorXd out(Y.cols());
  for (Index p = 0; p < Y.cols(); ++p) {
    Eigen::MatrixXd K(n, n);
    Eigen::VectorXd ks(n);
    for (Index i = 0; i < n; ++i) {
      ks[i] = reference_kernel(k, Xs.row(i).transpose(), xs);
      for (Index j = 0; j < n; ++j)
        K(i, j) = reference_kernel(k, Xs.row(i).transpose(), Xs.row(j).transpose());
    }
    K.diagonal().array() += s2;
    out[p] = ks.dot(K.fullPivLu().solve(Eigen::VectorXd(Y.col(p))));
  }
  return out;
}

}  // namespace

TEST_CASE("kernel examples") {
  const Eigen::Vector2d a(0.3, -1.0), b(1.3, -1.0);
  CHECK(kernel_eval(Kernel::rbf(1, 1), a, a) == 1.0);
  CHECK(kernel_eval(Kernel::matern(1, 1, 1.5), a, b) ==
        Approx((1 + std::sqrt(3.0)) * std::exp(-std::sqrt(3.0))).epsilon(1e-14));
  CHECK(kernel_eval(Kernel::matern(1, 1, 1.5), a, b) == Approx(0.483358).epsilon(1e-6));
  CHECK(kernel_eval(Kernel::white_noise(2), a, b) == 0.0);
  CHECK(kernel_eval(Kernel::white_noise(2), a, a) == 4.0);

  CHECK_THROWS_AS(kernel_eval(Kernel::rbf(1, 1), Eigen::VectorXd(Eigen::Vector2d(0, 0)),
                              Eigen::VectorXd(Eigen::Vector3d(0, 0, 0))),
                  Error);
  const Eigen::Vector2d bad(std::numeric_limits<double>::quiet_NaN(), 0);
  CHECK_THROWS_AS(kernel_eval(Kernel::rbf(1, 1), a, bad), Error);
  CHECK_THROWS_AS(Kernel::matern(1, 1, 1.0).validate(), Error);
  CHECK_THROWS_AS(Kernel::rbf(-1, 1).validate(), Error);
}

TEST_CASE("kernels match textbook forms, are symmetric and peak at zero distance") {
  std::mt19937_64 rng(1);
  for (const auto& k : kAllKernels) {
    for (int t = 0; t < 200; ++t) {
      const Eigen::VectorXd a = random_matrix(rng, 3, 1), b = random_matrix(rng, 3, 1);
      const double kab = kernel_eval(k, a, b);
      CHECK(kab == Approx(reference_kernel(k, a, b)).epsilon(1e-13));
      CHECK(kab == kernel_eval(k, b, a));
      CHECK(kernel_eval(k, a, a) >= kab);
    }
  }
}

TEST_CASE("covariance matrices are positive definite") {
  std::mt19937_64 rng(2);
  for (const auto& k : kAllKernels) {
    for (Index n : {1, 5, 30, 100}) {
      const Eigen::MatrixXd X = random_matrix(rng, n, 3);
      const Eigen::MatrixXd K = covariance(k, X);
      CHECK(K.isApprox(K.transpose(), 0.0));
      double jitter = -1.0;
      CHECK_NOTHROW(robust_cholesky(K, &jitter));
      CHECK(jitter >= 0.0);
    }
  }
  const Eigen::Matrix2d neg = -Eigen::Matrix2d::Identity();
  CHECK_THROWS_WITH_AS(robust_cholesky(neg, nullptr), "covariance not PD", Error);
}

TEST_CASE("single point fit") {
  const Eigen::MatrixXd X = Eigen::MatrixXd::Constant(1, 1, 0.0);
  const Eigen::MatrixXd Y = Eigen::MatrixXd::Constant(1, 1, 5.0);
  const auto k = Kernel::matern(1.5, 1.0, 1.5);
  const auto m = fit_family(X, Y, 1, 1, 1, k, 0.0);
  CHECK(m.alpha(0, 0) == Approx(5.0 / 2.25).epsilon(1e-15));
  CHECK(m.jitter == 0.0);
}

TEST_CASE("scalar posterior") {
  const Eigen::MatrixXd X = Eigen::MatrixXd::Zero(1, 1);
  const Eigen::MatrixXd Y = Eigen::MatrixXd::Constant(1, 1, 2.0);
  const auto m = fit_family(X, Y, 1, 1, 1, Kernel::rbf(1, 1), 0.0);
  const auto p = predict(m, Eigen::VectorXd::Constant(1, 1.0));
  CHECK(p.mean.data()[0] == Approx(2.0 * std::exp(-0.5)).epsilon(1e-14));
  CHECK(p.mean.data()[0] == Approx(1.21306).epsilon(1e-5));
  CHECK(p.variance.data()[0] == Approx(1.0 - std::exp(-1.0)).epsilon(1e-14));

  const auto far = predict(m, Eigen::VectorXd::Constant(1, 1e3));
  CHECK(std::abs(far.mean.data()[0]) < 1e-12);
  CHECK(far.variance.data()[0] == Approx(1.0));
  CHECK_THROWS_AS(predict(m, Eigen::VectorXd::Zero(2)), Error);
}

TEST_CASE("family prediction equals independent per-pixel GPs") {
  std::mt19937_64 rng(3);
  for (const auto& k : kAllKernels) {
    const Eigen::MatrixXd X = random_matrix(rng, 10, 3);
    std::vector<Field> fields;
    Eigen::MatrixXd Y(10, 64);
    for (int i = 0; i < 10; ++i) {
      Field f(1, 8, 8);
      std::uniform_real_distribution<float> u(-1.0f, 1.0f);
      for (Index p = 0; p < 64; ++p) f.data()[p] = u(rng);
      Y.row(i) = f.data().cast<double>().transpose();
      fields.push_back(f);
    }
    const double s2 = 1e-6;
    const auto model = fit_family(X, fields, k, s2);
    CHECK(model.alpha.cols() == 64);
    CHECK(model.L_chol.rows() == 10);
    for (int t = 0; t < 3; ++t) {
      const Eigen::VectorXd x = random_matrix(rng, 3, 1);
      const auto fam = predict(model, x);
      const auto ref = naive_predict(X, Y, k, s2, x);
      CHECK((fam.mean.data() - ref).cwiseAbs().maxCoeff() <= 1e-10);
    }
    // L L^T reproduces the regularized covariance.
    Eigen::MatrixXd A = covariance(k, model.X);
    A.diagonal().array() += s2 + model.jitter;
    const Eigen::MatrixXd LLt = model.L_chol * model.L_chol.transpose();
    CHECK((LLt - A).norm() <= 1e-10 * A.norm());
  }
}

TEST_CASE("noiseless GP interpolates its training data") {
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd X = random_matrix(rng, 12, 3) * 50.0;
  const Eigen::MatrixXd Y = random_matrix(rng, 12, 30);
  const auto m = fit_family(X, Y, 3, 2, 5, Kernel::matern(1, 1, 1.5), 0.0);
  for (Index i = 0; i < X.rows(); ++i) {
    const auto p = predict(m, X.row(i).transpose());
    const Eigen::VectorXd y = Y.row(i).transpose();
    CHECK((p.mean.data() - y).norm() <= 1e-8 * y.norm());
    CHECK(p.variance.data().maxCoeff() <= 1e-10);
    CHECK(p.mean.channels() == 3);
    CHECK(p.mean.height() == 2);
    CHECK(p.mean.width() == 5);
  }
}

TEST_CASE("prediction properties") {
  std::mt19937_64 rng(5);
  const Eigen::MatrixXd X = random_matrix(rng, 15, 4);
  const Eigen::MatrixXd Y1 = random_matrix(rng, 15, 20), Y2 = random_matrix(rng, 15, 20);
  const auto k = Kernel::matern(1, 1, 1.5);
  const double a = 0.7, b = -2.5;
  const auto m1 = fit_family(X, Y1, 1, 4, 5, k, 1e-8);
  const auto m2 = fit_family(X, Y2, 1, 4, 5, k, 1e-8);
  const auto m12 = fit_family(X, a * Y1 + b * Y2, 1, 4, 5, k, 1e-8);

  // Shifting and scaling the raw inputs is absorbed by the standardization.
  Eigen::RowVectorXd shift(4), scale(4);
  shift << 500, -3, 0.1, 1e4;
  scale << 1e3, 0.01, 7, 2;
  auto transform = [&](const Eigen::MatrixXd& M) {
    return Eigen::MatrixXd((M.array().rowwise() * scale.array()).rowwise() + shift.array());
  };
  const auto mt = fit_family(transform(X), Y1, 1, 4, 5, k, 1e-8);

  for (int t = 0; t < 20; ++t) {
    const Eigen::VectorXd x = random_matrix(rng, 4, 1);
    const auto p1 = predict(m1, x), p2 = predict(m2, x), p12 = predict(m12, x);
    CHECK((p12.mean.data() - (a * p1.mean.data() + b * p2.mean.data())).cwiseAbs().maxCoeff() <=
          1e-10);
    CHECK(p1.variance.data().maxCoeff() <= kernel_eval(k, x, x) + 1e-10);
    CHECK(p1.variance.data().minCoeff() >= 0.0);

    const Eigen::VectorXd xt = transform(x.transpose()).transpose();
    const auto pt = predict(mt, xt);
    CHECK((pt.mean.data() - p1.mean.data()).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("standardization") {
  Eigen::MatrixXd X(3, 2);
  X << 1, 5, 2, 5, 3, 5;
  const auto s = Standardization::fit(X);
  CHECK(s.mean[0] == 2.0);
  CHECK(s.scale[0] == Approx(std::sqrt(2.0 / 3.0)));
  CHECK(s.scale[1] == 1.0);
  const auto Z = s.apply(X);
  CHECK(Z.col(1).isZero());
  CHECK(Z.col(0).mean() == Approx(0.0));
}

TEST_CASE("log marginal likelihood value") {
  const Eigen::MatrixXd X = Eigen::MatrixXd::Zero(1, 2);
  const Eigen::MatrixXd y = Eigen::MatrixXd::Constant(1, 1, 2.0);
  // K + s2 = 3 + 1 = 4.
  const auto r = log_marginal_likelihood(X, y, Kernel::rbf(std::sqrt(3.0), 1.0), 1.0);
  const double expect = -0.5 - 0.5 * std::log(4.0) - 0.5 * std::log(2.0 * std::numbers::pi);
  CHECK(r.value == Approx(expect).epsilon(1e-14));
  CHECK(r.value == Approx(-2.11209).epsilon(1e-5));

  // White-noise amplitude and observation noise are interchangeable.
  std::mt19937_64 rng(6);
  const Eigen::MatrixXd X2 = random_matrix(rng, 8, 2);
  const Eigen::MatrixXd Y2 = random_matrix(rng, 8, 3);
  const auto a = log_marginal_likelihood(X2, Y2, Kernel::white_noise(1.0), 0.5);
  const auto b = log_marginal_likelihood(X2, Y2, Kernel::white_noise(std::sqrt(1.25)), 0.25);
  CHECK(a.value == Approx(b.value).epsilon(1e-13));

  CHECK_THROWS_AS(log_marginal_likelihood(X2, Y2, Kernel::white_noise(1.0), -2.0), Error);
}

TEST_CASE("log marginal likelihood gradient matches finite differences") {
  std::mt19937_64 rng(7);
  for (const auto& k : kAllKernels) {
    for (int t = 0; t < 3; ++t) {
      const Eigen::MatrixXd X = random_matrix(rng, 10, 2);
      const Eigen::MatrixXd Y = random_matrix(rng, 10, 2);
      const double s2 = 0.05;
      const auto r = log_marginal_likelihood(X, Y, k, s2);
      const Index np = k.log_params().size();
      REQUIRE(r.gradient.size() == np + 1);

      Eigen::VectorXd p(np + 1);
      p.head(np) = k.log_params();
      p[np] = std::log(s2);
      auto f = [&](const Eigen::VectorXd& q) {
        return log_marginal_likelihood(X, Y, k.with_log_params(q.head(np)), std::exp(q[np])).value;
      };
      const double h = 1e-5;
      Eigen::VectorXd fd(np + 1);
      for (Index i = 0; i <= np; ++i) {
        Eigen::VectorXd qp = p, qm = p;
        qp[i] += h;
        qm[i] -= h;
        fd[i] = (f(qp) - f(qm)) / (2 * h);
      }
      const double rel = (r.gradient - fd).norm() / std::max(fd.norm(), 1e-8);
      CHECK(rel <= 1e-5);
    }
  }
}

TEST_CASE("hyperparameter optimization") {
  std::mt19937_64 rng(8);
  const Index n = 40;
  Eigen::MatrixXd X(n, 1);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (Index i = 0; i < n; ++i) X(i, 0) = u(rng);
  const auto truth = Kernel::rbf(1.0, 0.5);
  Eigen::MatrixXd A = covariance(truth, X);
  A.diagonal().array() += 1e-4;
  const Eigen::MatrixXd L = A.llt().matrixL();
  const Eigen::MatrixXd Y = L * random_matrix(rng, n, 64);

  const auto k0 = Kernel::rbf(1.0, 1.0);
  const auto same = optimize_hyperparameters(X, Y, k0, 1e-2, 0);
  CHECK(same.kernel.tau == k0.tau);
  CHECK(same.kernel.gamma == k0.gamma);
  CHECK(same.sigma_n2 == Approx(1e-2).epsilon(1e-12));

  const auto fit = optimize_hyperparameters(X, Y, k0, 1e-2, 200);
  MESSAGE("recovered tau " << fit.kernel.tau << ", gamma " << fit.kernel.gamma << ", noise "
                           << fit.sigma_n2);
  CHECK(std::abs(fit.kernel.tau - 0.5) <= 0.25 * 0.5);
  CHECK(fit.objective >= same.objective);

  // Noise held at zero.
  const auto fixed = optimize_hyperparameters(X, Y, Kernel::matern(1, 1, 2.5), 0.0, 20);
  CHECK(fixed.sigma_n2 == 0.0);
}

TEST_CASE("model bundle round trip is bit exact") {
  std::mt19937_64 rng(9);
  const Eigen::MatrixXd X = random_matrix(rng, 7, 3) * 100.0;
  const Eigen::MatrixXd Y = random_matrix(rng, 7, 2 * 3 * 4);
  const auto m = fit_family(X, Y, 2, 3, 4, Kernel::rational_quadratic(1.1, 0.9, 2.0), 1e-8);
  const auto bytes = m.to_bundle().encode();
  const auto back = GpFamilyModel::from_bundle(Bundle::decode(bytes));
  CHECK(back.to_bundle().encode() == bytes);
  CHECK(back.kernel.kind == KernelKind::RationalQuadratic);
  const Eigen::VectorXd x = random_matrix(rng, 3, 1);
  CHECK(predict(back, x).mean == predict(m, x).mean);
}
