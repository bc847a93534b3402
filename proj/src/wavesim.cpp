#include "wfs/wavesim.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <string>

namespace wfs {

namespace {

using std::numbers::pi;

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// Strain/stress of the one-sided stencil anchored at (j, i) in orientation
// (sx, sy). Returns false when the stencil leaves the grid.
struct Stencil {
  double exx, eyy, gxy;  // gxy = dux/dy + duy/dx
  double sxx, syy, sxy;
};

constexpr std::array<std::array<int, 2>, 4> kOrientations{{{1, 1}, {-1, 1}, {1, -1}, {-1, -1}}};

inline bool in_grid(Index j, Index i, Index ny, Index nx) {
  return j >= 0 && j < ny && i >= 0 && i < nx;
}

void zero_ring(BasicField<double>& f) {
  const Index ny = f.height();
  const Index nx = f.width();
  for (Index c = 0; c < f.channels(); ++c) {
    auto p = f.channel(c);
    p.row(0).setZero();
    p.row(ny - 1).setZero();
    p.col(0).setZero();
    p.col(nx - 1).setZero();
  }
}

// Sum over orientations of the one-sided strain energy gradient, scaled by
// 1/h^2 so the result is a force density. `energy` accumulates h^2 * W.
void elastic_force(const BasicField<double>& u, const MaterialGrid& g, BasicField<double>* force,
                   double* energy) {
  const Index nx = g.nx;
  const Index ny = g.ny;
  const double inv_h = 1.0 / g.h;
  const double* ux = u.data().data();
  const double* uy = ux + nx * ny;
  double* fx = force ? force->data().data() : nullptr;
  double* fy = force ? fx + nx * ny : nullptr;
  double w_sum = 0.0;

  for (const auto& o : kOrientations) {
    const int sx = o[0];
    const int sy = o[1];
    for (Index j = 0; j < ny; ++j) {
      if (!in_grid(j + sy, 0, ny, nx)) continue;
      for (Index i = 0; i < nx; ++i) {
        if (i + sx < 0 || i + sx >= nx) continue;
        const Index c = j * nx + i;
        const Index cx = c + sx;
        const Index cy = c + sy * nx;
        const double dux_dx = sx * (ux[cx] - ux[c]) * inv_h;
        const double duy_dx = sx * (uy[cx] - uy[c]) * inv_h;
        const double dux_dy = sy * (ux[cy] - ux[c]) * inv_h;
        const double duy_dy = sy * (uy[cy] - uy[c]) * inv_h;
        const double lam = g.lambda.data()[c];
        const double mu = g.mu.data()[c];
        const double tr = dux_dx + duy_dy;
        const double sxx = lam * tr + 2.0 * mu * dux_dx;
        const double syy = lam * tr + 2.0 * mu * duy_dy;
        const double sxy = mu * (dux_dy + duy_dx);
        if (energy) w_sum += 0.5 * (sxx * dux_dx + syy * duy_dy + sxy * (dux_dy + duy_dx));
        if (!force) continue;
        // -dW/du, with the 1/4 orientation average applied below.
        const double ax = sx * inv_h;
        const double ay = sy * inv_h;
        fx[cx] -= sxx * ax;
        fx[c] += sxx * ax;
        fx[cy] -= sxy * ay;
        fx[c] += sxy * ay;
        fy[cx] -= sxy * ax;
        fy[c] += sxy * ax;
        fy[cy] -= syy * ay;
        fy[c] += syy * ay;
      }
    }
  }
  if (force) force->data() *= 0.25;
  if (energy) *energy = 0.25 * w_sum * g.h * g.h;
}

void check_finite(const WaveState& s, const std::string& where) {
  if (!s.u.data().allFinite() || !s.v.data().allFinite())
    throw Error(Errc::blow_up, "solver blow-up at " + where);
}

}  // namespace

void SimConfig::validate() const {
  if (!(dt_out > 0.0) || !(T > 0.0)) throw Error(Errc::config, "dt_out and T must be > 0");
  const double ratio = T / dt_out;
  if (std::abs(ratio - std::round(ratio)) > 1e-6 * ratio)
    throw Error(Errc::config, "dt_out must divide T");
  if (!(cfl_safety > 0.0 && cfl_safety <= 1.0))
    throw Error(Errc::config, "cfl_safety must lie in (0, 1]");
  if (!(source_radius > 0.0) || !(f_c > 0.0) || !(n_c > 0.0))
    throw Error(Errc::config, "source radius, f_c and n_c must be > 0");
}

Index SimConfig::output_steps() const { return static_cast<Index>(std::llround(T / dt_out)); }

WaveState WaveState::zero(Index nx, Index ny) {
  return {BasicField<double>(2, ny, nx), BasicField<double>(2, ny, nx), 0.0};
}

double burst_radius(double t, double f_c, double n_c) {
  return 0.25 * std::cos(2.0 * pi * f_c * t) * (sign(t) - sign(t - n_c / f_c)) *
         (1.0 - std::cos(2.0 * pi * (f_c / n_c) * t));
}

double angle_phi(const Eigen::Vector2d& x) {
  const double x1 = x[0];
  const double x2 = x[1];
  if (x1 > 0.0 && x2 >= 0.0) return std::atan(x2 / x1);
  if (x1 == 0.0 && x2 > 0.0) return pi / 2.0;
  if (x1 < 0.0) return pi + std::atan(x2 / x1);
  if (x1 == 0.0 && x2 < 0.0) return 3.0 * pi / 2.0;
  if (x1 > 0.0 && x2 < 0.0) return 2.0 * pi + std::atan(x2 / x1);
  throw Error(Errc::invalid_argument, "angle_phi: undefined at the origin");
}

Eigen::Vector2d body_force(const Eigen::Vector2d& x, double t, double r_fs, double f_c,
                           double n_c) {
  if (x.squaredNorm() > r_fs * r_fs || (x[0] == 0.0 && x[1] == 0.0))
    return Eigen::Vector2d::Zero();
  const double phi = angle_phi(x);
  const double r = burst_radius(t, f_c, n_c);
  return {r * std::cos(phi), r * std::sin(phi)};
}

double cell_x(const MaterialGrid& grid, Index i) {
  return (double(i) + 0.5 - 0.5 * double(grid.nx)) * grid.h;
}

double cell_y(const MaterialGrid& grid, Index j) {
  return (double(j) + 0.5 - 0.5 * double(grid.ny)) * grid.h;
}

BurstSource BurstSource::none(Index nx, Index ny) {
  return {BasicField<double>(2, ny, nx), 5000.0, 5.0};
}

BurstSource BurstSource::centered(const MaterialGrid& grid, const SimConfig& cfg) {
  BurstSource s{BasicField<double>(2, grid.ny, grid.nx), cfg.f_c, cfg.n_c};
  const double r2 = cfg.source_radius * cfg.source_radius;
  for (Index j = 1; j + 1 < grid.ny; ++j) {
    for (Index i = 1; i + 1 < grid.nx; ++i) {
      const Eigen::Vector2d x(cell_x(grid, i), cell_y(grid, j));
      if (x.squaredNorm() > r2 || (x[0] == 0.0 && x[1] == 0.0)) continue;
      const double phi = angle_phi(x);
      s.direction(0, j, i) = std::cos(phi);
      s.direction(1, j, i) = std::sin(phi);
    }
  }
  return s;
}

double stable_dt(const MaterialGrid& grid, double cfl_safety) {
  return cfl_safety * grid.h / (grid.max_wave_speed() * std::sqrt(2.0));
}

Index substeps(double dt_out, double dt_cfl) {
  Index k = static_cast<Index>(std::ceil(dt_out / dt_cfl));
  if (k < 1) k = 1;
  // Guard against ceil landing one short through rounding.
  while (dt_out / double(k) > dt_cfl) ++k;
  return k;
}

BasicField<double> acceleration(const BasicField<double>& u, const MaterialGrid& grid,
                                const BurstSource& source, double t) {
  BasicField<double> a(2, grid.ny, grid.nx);
  elastic_force(u, grid, &a, nullptr);
  const double r = source.amplitude(t);
  if (r != 0.0) a.data() += r * source.direction.data();
  const Index n = grid.nx * grid.ny;
  const double* rho = grid.rho.data();
  for (Index c = 0; c < 2; ++c)
    for (Index k = 0; k < n; ++k) a.data()[c * n + k] /= rho[k];
  zero_ring(a);
  return a;
}

WaveState step(const WaveState& state, const MaterialGrid& grid, const BurstSource& source,
               double dt) {
  WaveState next = state;
  const auto a0 = acceleration(state.u, grid, source, state.t);
  next.v.data() += 0.5 * dt * a0.data();
  next.u.data() += dt * next.v.data();
  zero_ring(next.u);
  next.t = state.t + dt;
  const auto a1 = acceleration(next.u, grid, source, next.t);
  next.v.data() += 0.5 * dt * a1.data();
  zero_ring(next.v);
  check_finite(next, "t = " + std::to_string(next.t));
  return next;
}

double energy(const WaveState& state, const MaterialGrid& grid) {
  const Index n = grid.nx * grid.ny;
  const double* rho = grid.rho.data();
  const double* v = state.v.data().data();
  double kinetic = 0.0;
  for (Index k = 0; k < n; ++k) kinetic += 0.5 * rho[k] * (v[k] * v[k] + v[n + k] * v[n + k]);
  double strain = 0.0;
  elastic_force(state.u, grid, nullptr, &strain);
  return kinetic * grid.h * grid.h + strain;
}

void run(const MaterialGrid& grid, const SimConfig& cfg,
         const std::function<void(Index, const WaveState&)>& observer) {
  cfg.validate();
  const BurstSource source = BurstSource::centered(grid, cfg);
  const Index sub = substeps(cfg.dt_out, stable_dt(grid, cfg.cfl_safety));
  const double dt = cfg.dt_out / double(sub);
  const Index n_out = cfg.output_steps();

  WaveState s = WaveState::zero(grid.nx, grid.ny);
  // Carry the end-of-step acceleration into the next kick instead of
  // recomputing it; the update is the same as step().
  auto a = acceleration(s.u, grid, source, s.t);
  for (Index k = 1; k <= n_out; ++k) {
    for (Index m = 0; m < sub; ++m) {
      s.v.data() += 0.5 * dt * a.data();
      s.u.data() += dt * s.v.data();
      zero_ring(s.u);
      const Index done = (k - 1) * sub + m + 1;
      s.t = double(done) * dt;
      a = acceleration(s.u, grid, source, s.t);
      s.v.data() += 0.5 * dt * a.data();
      zero_ring(s.v);
    }
    check_finite(s, "output step " + std::to_string(k));
    observer(k, s);
  }
}

std::vector<Field> simulate(const MaterialGrid& grid, const SimConfig& cfg) {
  std::vector<Field> out;
  out.reserve(std::size_t(cfg.output_steps()));
  run(grid, cfg, [&](Index, const WaveState& s) {
    BasicField<double> ux(1, grid.ny, grid.nx, s.u.data().head(grid.nx * grid.ny));
    out.push_back(normalize(ux).cast<float>());
  });
  return out;
}

std::vector<Field> simulate(const ParameterSample& sample, const Plate& plate,
                            const SimConfig& cfg) {
  return simulate(rasterize(sample, plate), cfg);
}

}  // namespace wfs
