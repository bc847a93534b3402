#include <cmath>
#include <random>

#include "doctest.h"
#include "wfs/carn.hpp"

using namespace wfs;
using doctest::Approx;
using T = Tensor<double>;

namespace {

T random_tensor(std::mt19937_64& rng, Index c, Index h, Index w, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  T t(c, h, w);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

template <typename S>
void randomize(Conv2d<S>& c, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (Index i = 0; i < c.weight.size(); ++i) c.weight.data()[i] = S(u(rng));
  for (Index i = 0; i < c.bias.size(); ++i) c.bias.data()[i] = S(u(rng));
}

// Direct loop over the cross-correlation sum.
T brute_conv(const T& x, const Conv2d<double>& c, Padding pad) {
  const Index k = c.kernel;
  const Index p = pad == Padding::Same ? k / 2 : 0;
  const Index ho = pad == Padding::Same ? x.height() : x.height() - k + 1;
  const Index wo = pad == Padding::Same ? x.width() : x.width() - k + 1;
  const Index ipg = c.in_channels / c.groups, opg = c.out_channels / c.groups;
  T y(c.out_channels, ho, wo);
  for (Index o = 0; o < c.out_channels; ++o) {
    const Index g = o / opg;
    for (Index i = 0; i < ho; ++i)
      for (Index j = 0; j < wo; ++j) {
        double s = c.bias[o];
        for (Index ci = 0; ci < ipg; ++ci)
          for (Index q = 0; q < k; ++q)
            for (Index r = 0; r < k; ++r) {
              const Index yy = i + q - p, xx = j + r - p;
              if (yy < 0 || yy >= x.height() || xx < 0 || xx >= x.width()) continue;
              s += x(g * ipg + ci, yy, xx) * c.weight(o, (ci * k + q) * k + r);
            }
        y(o, i, j) = s;
      }
  }
  return y;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

// Scalar objective sum(weights * f(x)) and its central difference.
template <typename F>
double central(F&& f, double& slot, double h = 1e-4) {
  const double keep = slot;
  slot = keep + h;
  const double up = f();
  slot = keep - h;
  const double down = f();
  slot = keep;
  return (up - down) / (2 * h);
}

double dot(const T& a, const T& b) { return a.data().dot(b.data()); }

CarnConfig small_config(Index width = 8, Index groups = 4) {
  CarnConfig c;
  c.width = width;
  c.groups = groups;
  return c;
}

}  // namespace

TEST_CASE("cross_correlate examples") {
  Conv2d<double> one(1, 1, 1);
  one.weight(0, 0) = 2.0;
  std::mt19937_64 rng(1);
  const T x = random_tensor(rng, 1, 5, 4);
  const T y = cross_correlate(x, one);
  CHECK(y.data().isApprox(2.0 * x.data(), 0.0));

  T small(1, 2, 2);
  small.data() << 1, 2, 3, 4;
  Conv2d<double> ones(1, 1, 2);
  ones.weight.setOnes();
  const T s = cross_correlate(small, ones, Padding::Valid);
  REQUIRE(s.size() == 1);
  CHECK(s.data()[0] == 10.0);

  CHECK_THROWS_AS(Conv2d<double>(6, 4, 3, 4), Error);
  Conv2d<double> c3(3, 4, 3);
  CHECK_THROWS_AS(c3.forward(T(2, 4, 4)), Error);
  CHECK_THROWS_AS(Conv2d<double>(1, 1, 2).forward(small, Padding::Same), Error);
}

TEST_CASE("centered delta kernel is the identity") {
  std::mt19937_64 rng(2);
  for (auto [c, g] : {std::pair<Index, Index>{1, 1}, {3, 1}, {4, 2}, {8, 4}, {6, 6}}) {
    Conv2d<double> d(c, c, 3, g);
    const Index ipg = c / g;
    for (Index o = 0; o < c; ++o) d.weight(o, ((o % ipg) * 3 + 1) * 3 + 1) = 1.0;
    const T x = random_tensor(rng, c, 7, 9);
    CHECK(cross_correlate(x, d) == x);
  }
}

TEST_CASE("conv agrees with the brute-force loop") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const Index g = 1 + t % 3;
    const Index cin = g * (1 + t % 2), cout = g * (1 + (t / 2) % 3);
    const Index k = t % 4 == 0 ? 1 : (t % 4 == 3 ? 2 : 3);
    const Padding pad = (k % 2 == 0 || t % 5 == 0) ? Padding::Valid : Padding::Same;
    Conv2d<double> c(cin, cout, k, g);
    randomize(c, rng);
    const T x = random_tensor(rng, cin, 3 + t % 6, 4 + t % 5);
    const T fast = c.forward(x, pad);
    const T ref = brute_conv(x, c, pad);
    REQUIRE(fast.same_shape(ref));
    CHECK((fast.data() - ref.data()).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("relu and maxpool") {
  T x(1, 1, 3);
  x.data() << -1, 0, 2;
  const T r = relu(x);
  CHECK(r.data()[0] == 0);
  CHECK(r.data()[1] == 0);
  CHECK(r.data()[2] == 2);
  CHECK(relu(r) == r);

  T q(1, 2, 2);
  q.data() << 1, 2, 3, 4;
  const T m = maxpool2(q);
  REQUIRE(m.size() == 1);
  CHECK(m.data()[0] == 4);

  T c(2, 6, 4);
  c.data().setConstant(0.3);
  const T mc = maxpool2(c);
  CHECK(mc.height() == 3);
  CHECK(mc.width() == 2);
  CHECK((mc.data().array() == 0.3).all());

  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const T a = random_tensor(rng, 2, 4 + t % 3, 4 + t % 2);
    const T p = maxpool2(a);
    for (Index ch = 0; ch < 2; ++ch)
      for (Index i = 0; i < p.height(); ++i)
        for (Index j = 0; j < p.width(); ++j) {
          double best = -1e300;
          for (Index u = 0; u < 2; ++u)
            for (Index v = 0; v < 2; ++v) best = std::max(best, a(ch, 2 * i + u, 2 * j + v));
          CHECK(p(ch, i, j) == best);
        }
    const T b = random_tensor(rng, 2, 5, 5, 0.0, 1.0);
    const T rb = relu(b);
    CHECK(rb == b);
  }
  CHECK_THROWS_AS(maxpool2(T(1, 1, 4)), Error);
}

TEST_CASE("pixel shuffle round trip") {
  std::mt19937_64 rng(5);
  const T x = random_tensor(rng, 8, 3, 5);
  const T y = pixel_shuffle2(x);
  CHECK(y.channels() == 2);
  CHECK(y.height() == 6);
  CHECK(y.width() == 10);
  CHECK(y(1, 3, 4) == x(4 + 2 + 0, 1, 2));
  CHECK(pixel_unshuffle2(y) == x);
}

TEST_CASE("layer gradients match finite differences") {
  std::mt19937_64 rng(6);
  SUBCASE("conv") {
    for (auto [k, g, pad] : {std::tuple{3, 2, Padding::Same}, {1, 1, Padding::Same},
                             {3, 1, Padding::Valid}, {2, 2, Padding::Valid}}) {
      Conv2d<double> c(4, 6, k, g);
      randomize(c, rng);
      T x = random_tensor(rng, 4, 6, 7);
      const T w = random_tensor(rng, 6, c.forward(x, pad).height(), c.forward(x, pad).width());
      c.zero_grad();
      const T dx = c.backward(x, w, pad);
      auto f = [&] { return dot(w, c.forward(x, pad)); };
      for (int t = 0; t < 10; ++t) {
        const Index wi = Index(rng() % std::uint64_t(c.weight.size()));
        CHECK(rel_err(c.grad_weight.data()[wi], central(f, c.weight.data()[wi])) <= 1e-4);
        const Index xi = Index(rng() % std::uint64_t(x.size()));
        CHECK(rel_err(dx.data()[xi], central(f, x.data()[xi])) <= 1e-4);
      }
      const Index bi = Index(rng() % std::uint64_t(c.bias.size()));
      CHECK(rel_err(c.grad_bias[bi], central(f, c.bias[bi])) <= 1e-4);
    }
  }
  SUBCASE("relu, maxpool, shuffle") {
    T x = random_tensor(rng, 4, 6, 6);
    for (Index i = 0; i < x.size(); ++i)
      if (std::abs(x.data()[i]) < 1e-2) x.data()[i] = 0.5;
    const T wr = random_tensor(rng, 4, 6, 6);
    const T wm = random_tensor(rng, 4, 3, 3);
    const T ws = random_tensor(rng, 1, 12, 12);
    const T dr = relu_backward(x, wr);
    const T dm = maxpool2_backward(x, wm);
    const T ds = pixel_unshuffle2(ws);
    for (Index i = 0; i < x.size(); ++i) {
      CHECK(rel_err(dr.data()[i], central([&] { return dot(wr, relu(x)); }, x.data()[i])) <= 1e-4);
      CHECK(rel_err(dm.data()[i], central([&] { return dot(wm, maxpool2(x)); }, x.data()[i])) <=
            1e-4);
      CHECK(rel_err(ds.data()[i], central([&] { return dot(ws, pixel_shuffle2(x)); }, x.data()[i])) <=
            1e-4);
    }
  }
  SUBCASE("residual block") {
    for (bool after : {true, false}) {
      ResidualBlock<double> b(8, 4, after);
      randomize(b.conv1, rng);
      randomize(b.conv2, rng);
      randomize(b.conv3, rng);
      T x = random_tensor(rng, 8, 6, 5);
      const T w = random_tensor(rng, 8, 6, 5);
      ResidualBlock<double>::Cache cache;
      b.forward(x, &cache);
      const T dx = b.backward(cache, w);
      auto f = [&] { return dot(w, b.forward(x, nullptr)); };
      for (auto* conv : {&b.conv1, &b.conv2, &b.conv3}) {
        for (int t = 0; t < 5; ++t) {
          const Index wi = Index(rng() % std::uint64_t(conv->weight.size()));
          CHECK(rel_err(conv->grad_weight.data()[wi], central(f, conv->weight.data()[wi])) <= 1e-4);
        }
      }
      for (int t = 0; t < 10; ++t) {
        const Index xi = Index(rng() % std::uint64_t(x.size()));
        CHECK(rel_err(dx.data()[xi], central(f, x.data()[xi])) <= 1e-4);
      }
    }
  }
  SUBCASE("local cascade") {
    LocalCascade<double> lc(4, 2, 3, true);
    for (auto& b : lc.blocks) randomize(b.conv1, rng), randomize(b.conv2, rng), randomize(b.conv3, rng);
    for (auto& f : lc.fuse) randomize(f, rng, 0.3);
    T x = random_tensor(rng, 4, 5, 6);
    const T w = random_tensor(rng, 4, 5, 6);
    LocalCascade<double>::Cache cache;
    lc.forward(x, &cache);
    const T dx = lc.backward(cache, w);
    auto f = [&] { return dot(w, lc.forward(x, nullptr)); };
    for (int t = 0; t < 15; ++t) {
      const Index xi = Index(rng() % std::uint64_t(x.size()));
      CHECK(rel_err(dx.data()[xi], central(f, x.data()[xi])) <= 1e-4);
    }
    for (auto& fc : lc.fuse) {
      const Index wi = Index(rng() % std::uint64_t(fc.weight.size()));
      CHECK(rel_err(fc.grad_weight.data()[wi], central(f, fc.weight.data()[wi])) <= 1e-4);
    }
    const Index wi = Index(rng() % std::uint64_t(lc.blocks[0].conv1.weight.size()));
    CHECK(rel_err(lc.blocks[0].conv1.grad_weight.data()[wi],
                  central(f, lc.blocks[0].conv1.weight.data()[wi])) <= 1e-4);
  }
}

TEST_CASE("residual block examples") {
  std::mt19937_64 rng(7);
  ResidualBlock<double> b(8, 4, true);
  const T x = random_tensor(rng, 8, 5, 5);
  CHECK(b.forward(x, nullptr) == relu(x));
  randomize(b.conv1, rng);
  randomize(b.conv2, rng);
  randomize(b.conv3, rng);
  b.conv1.bias.setZero();
  b.conv2.bias.setZero();
  b.conv3.bias.setZero();
  CHECK(b.forward(T(8, 5, 5), nullptr).data().isZero(0.0));
}

TEST_CASE("local cascade structure") {
  LocalCascade<double> lc(16, 4, 3, true);
  for (std::size_t j = 0; j < 3; ++j) CHECK(lc.fuse[j].in_channels == 16 * Index(j + 3));

  // One step: fuse(concat[y, y, Res(y)]).
  std::mt19937_64 rng(8);
  LocalCascade<double> one(4, 2, 1, true);
  randomize(one.blocks[0].conv1, rng);
  randomize(one.blocks[0].conv2, rng);
  randomize(one.blocks[0].conv3, rng);
  randomize(one.fuse[0], rng);
  const T y = random_tensor(rng, 4, 6, 6);
  const T r = one.blocks[0].forward(y, nullptr);
  const T manual = one.fuse[0].forward(concat_channels<double>({&y, &y, &r}));
  CHECK(one.forward(y, nullptr) == manual);

  // Fusion weights that pick the residual slice turn the cascade into stacked blocks.
  LocalCascade<double> sel(4, 2, 3, true);
  for (std::size_t j = 0; j < 3; ++j) {
    randomize(sel.blocks[j].conv1, rng);
    randomize(sel.blocks[j].conv2, rng);
    randomize(sel.blocks[j].conv3, rng);
    const Index offset = 4 * Index(j + 2);
    for (Index o = 0; o < 4; ++o) sel.fuse[j].weight(o, offset + o) = 1.0;
  }
  T stacked = y;
  for (const auto& b : sel.blocks) stacked = b.forward(stacked, nullptr);
  CHECK((sel.forward(y, nullptr).data() - stacked.data()).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("carn shapes and trivial outputs") {
  Carn<float> full(CarnConfig{});
  std::mt19937_64 rng(9);
  full.init(rng);
  Tensor<float> x(3, 32, 32);
  x.data().setRandom();
  const auto y = full.infer(x);
  CHECK(y.channels() == 3);
  CHECK(y.height() == 64);
  CHECK(y.width() == 64);
  CHECK(y.data().minCoeff() >= 0.0f);
  CHECK(y.data().maxCoeff() <= 1.0f);
  MESSAGE("width-64 parameter count: " << full.parameter_count());
  CHECK(full.parameter_count() > 0);

  Carn<float> zero(CarnConfig{});
  CHECK(zero.infer(x).data().isZero(0.0f));
  CHECK_THROWS_WITH_AS(zero.forward(Tensor<float>(3, 7, 12)), "input too small", Error);

  Carn<float> small(small_config());
  small.init(rng);
  std::uniform_int_distribution<Index> hw(8, 64);
  for (int t = 0; t < 10; ++t) {
    const Index h = hw(rng), w = hw(rng);
    const auto out = small.forward(Tensor<float>(3, h, w));
    CHECK(out.channels() == 3);
    CHECK(out.height() == 2 * h);
    CHECK(out.width() == 2 * w);
  }
}

TEST_CASE("carn gradient matches finite differences") {
  std::mt19937_64 rng(10);
  for (bool after : {true, false}) {
    CarnConfig cfg = small_config(4, 2);
    cfg.activation_after_skip = after;
    Carn<double> net(cfg);
    net.init(rng);
    net.visit([&](const std::string&, Conv2d<double>& c) {
      std::uniform_real_distribution<double> u(-0.1, 0.1);
      for (Index i = 0; i < c.bias.size(); ++i) c.bias[i] = u(rng);
    });
    T x = random_tensor(rng, 3, 8, 8, 0.0, 1.0);
    const T w = random_tensor(rng, 3, 16, 16);
    Carn<double>::Cache cache;
    net.forward(x, &cache);
    net.zero_grad();
    const T dx = net.backward(cache, w);
    auto f = [&] { return dot(w, net.forward(x)); };

    std::vector<std::pair<double*, double>> params;
    net.visit([&](const std::string&, Conv2d<double>& c) {
      const Index i = Index(rng() % std::uint64_t(c.weight.size()));
      params.emplace_back(&c.weight.data()[i], c.grad_weight.data()[i]);
      params.emplace_back(&c.bias[0], c.grad_bias[0]);
    });
    std::shuffle(params.begin(), params.end(), rng);
    for (std::size_t i = 0; i < 12; ++i)
      CHECK(rel_err(params[i].second, central(f, *params[i].first)) <= 1e-4);
    for (int t = 0; t < 5; ++t) {
      const Index xi = Index(rng() % std::uint64_t(x.size()));
      CHECK(rel_err(dx.data()[xi], central(f, x.data()[xi])) <= 1e-4);
    }
  }
}

TEST_CASE("mse loss") {
  std::mt19937_64 rng(11);
  const T a = random_tensor(rng, 3, 4, 4), b = random_tensor(rng, 3, 4, 4);
  CHECK(mse_loss<double>({a}, {a}) == 0.0);
  T c = a;
  c.data().array() += 1.0;
  CHECK(mse_loss<double>({a}, {c}) == Approx(48.0));
  double brute = 0.0;
  for (Index i = 0; i < a.size(); ++i) brute += std::pow(a.data()[i] - b.data()[i], 2);
  CHECK(mse_loss<double>({a, a}, {b, a}) == Approx(brute / 2));
  CHECK_THROWS_AS(mse_loss<double>({a}, {T(3, 4, 5)}), Error);
  CHECK_THROWS_AS(mse_loss<double>({a}, {a, a}), Error);
}

TEST_CASE("adam update rules") {
  AdamState s;
  s.eta = 1e-3;
  Eigen::MatrixXd p = Eigen::MatrixXd::Constant(2, 2, 1.0);
  const Eigen::MatrixXd p0 = p;
  Eigen::MatrixXd m, v;
  ++s.step;
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(2, 2);
  adam_update(p, zero, m, v, s);
  CHECK(p == p0);
  CHECK(s.step == 1);

  Eigen::MatrixXd g(2, 2);
  g << 0.3, -2.0, 1e-3, -5e2;
  AdamState first;
  first.eta = 1e-3;
  first.step = 1;
  Eigen::MatrixXd m1, v1;
  Eigen::MatrixXd q = p0;
  adam_update(q, g, m1, v1, first);
  for (Index i = 0; i < 4; ++i) {
    const double expect = -1e-3 * std::abs(g.data()[i]) / (std::abs(g.data()[i]) + 1e-8) *
                          (g.data()[i] > 0 ? 1.0 : -1.0);
    CHECK(q.data()[i] - p0.data()[i] == Approx(expect).epsilon(1e-9));
  }

  AdamState plain;
  plain.beta1 = plain.beta2 = 0.0;
  plain.eta = 0.1;
  Eigen::MatrixXd r = p0, m2, v2;
  for (int k = 1; k <= 3; ++k) {
    plain.step = k;
    const Eigen::MatrixXd before = r;
    adam_update(r, g, m2, v2, plain);
    for (Index i = 0; i < 4; ++i)
      CHECK(r.data()[i] - before.data()[i] ==
            Approx(-0.1 * g.data()[i] / (std::abs(g.data()[i]) + 1e-8)).epsilon(1e-12));
  }
}

namespace {

// Smooth random wave-like patterns at 64 x 64 and their bilinear 32 x 32 versions.
std::vector<SrPair<float>> synthetic_corpus(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SrPair<float>> corpus;
  for (std::size_t s = 0; s < n; ++s) {
    Field hi(3, 64, 64);
    const double kx = 0.05 + 0.2 * u(rng), ky = 0.05 + 0.2 * u(rng), ph = 6.3 * u(rng);
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < 64; ++i)
        for (Index j = 0; j < 64; ++j)
          hi(c, i, j) = float(0.5 + 0.4 * std::sin(kx * j + ky * i + ph + 0.7 * double(c)));
    corpus.push_back({resample_bilinear(hi, 32, 32), hi});
  }
  return corpus;
}

}  // namespace

TEST_CASE("training contracts") {
  const auto corpus = synthetic_corpus(6, 1);
  Carn<float> a(small_config());
  std::mt19937_64 rng(12);
  a.init(rng);
  const Carn<float> a0 = a;

  TrainConfig cfg;
  cfg.epochs = 0;
  const auto t0 = train_sr(a, corpus, cfg);
  CHECK(t0.size() == 1);
  CHECK(a.to_bundle().encode() == a0.to_bundle().encode());

  cfg.epochs = 2;
  cfg.eta = 0.0;
  train_sr(a, corpus, cfg);
  CHECK(a.to_bundle().encode() == a0.to_bundle().encode());

  cfg.eta = 1e-3;
  Carn<float> b = a0, c = a0;
  const auto tb = train_sr(b, corpus, cfg);
  const auto tc = train_sr(c, corpus, cfg);
  CHECK(tb == tc);
  CHECK(tb.size() == 3);
  CHECK(b.to_bundle().encode() == c.to_bundle().encode());

  CHECK_THROWS_AS(train_sr(b, {}, cfg), Error);
  std::vector<SrPair<float>> bad{{Field(3, 10, 10), Field(3, 21, 20)}};
  CHECK_THROWS_AS(train_sr(b, bad, cfg), Error);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Carn<float> net(small_config());
  std::mt19937_64 rng(13);
  net.init(rng);
  const auto bytes = net.to_bundle().encode();
  const auto back = Carn<float>::from_bundle(Bundle::decode(bytes));
  CHECK(back.to_bundle().encode() == bytes);
  Tensor<float> x(3, 9, 11);
  x.data().setRandom();
  CHECK(back.forward(x) == net.forward(x));
  CHECK(carn_config_from_text(carn_config_to_text(net.config())).width == 8);
}

TEST_CASE("training halves the loss on synthetic pairs") {
  const auto corpus = synthetic_corpus(50, 2);
  Carn<float> net(small_config(16, 4));
  std::mt19937_64 rng(14);
  net.init(rng);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.stop_fraction = 0.5;
  const auto trace = train_sr(net, corpus, cfg);
  MESSAGE("initial " << trace.front() << ", final " << trace.back() << " after "
                     << trace.size() - 1 << " epochs");
  CHECK(trace.back() <= 0.5 * trace.front());
}
