#include "wfs/scenario.hpp"

#include <cmath>

namespace wfs {

namespace {

constexpr long kMaxRejections = 1'000'000;

double draw(const Distribution& d, std::mt19937_64& rng) {
  if (const auto* u = std::get_if<Uniform>(&d)) {
    const auto [lo, hi] = uniform_bounds(u->mean, u->std);
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  }
  const auto& g = std::get<TruncatedGaussian>(d);
  std::normal_distribution<double> normal(g.mean, g.std);
  for (long i = 0; i < kMaxRejections; ++i) {
    const double v = normal(rng);
    if (v > g.lower) return v;
  }
  throw Error(Errc::sampling_exhausted,
              "truncated gaussian: rejection limit reached (pathological spec)");
}

}  // namespace

void ParameterSpec::validate() const {
  for (const auto& [name, dist] : params) {
    const double sd = std::visit([](const auto& d) { return d.std; }, dist);
    if (!(sd > 0.0)) throw Error(Errc::config, "parameter '" + name + "': std must be > 0");
    if (const auto* g = std::get_if<TruncatedGaussian>(&dist); g && !(g->lower < g->mean))
      throw Error(Errc::config, "parameter '" + name + "': truncation bound must be < mean");
    if (name != "E_Y" && name != "nu" && name != "rho_s" && name != "r_c")
      throw Error(Errc::config, "unknown parameter '" + name + "'");
  }
}

bool ParameterSpec::has(const std::string& name) const {
  for (const auto& p : params)
    if (p.first == name) return true;
  return false;
}

ParameterSpec material_spec() {
  return {{{"E_Y", TruncatedGaussian{500.0, 10.0, 0.0}},
           {"nu", Uniform{0.4, 0.0577}},
           {"rho_s", Uniform{1000.0, 5.77}}}};
}

ParameterSpec material_and_radius_spec() {
  return {{{"r_c", Uniform{0.01, 0.0029}},
           {"E_Y", TruncatedGaussian{500.0, 10.0, 0.0}},
           {"nu", Uniform{0.4, 0.0577}},
           {"rho_s", Uniform{1000.0, 5.77}}}};
}

const char* to_string(Shape s) {
  switch (s) {
    case Shape::None: return "none";
    case Shape::Circle: return "circle";
    case Shape::Square: return "square";
    case Shape::Rectangle: return "rectangle";
  }
  return "none";
}

Shape shape_from_string(const std::string& s) {
  if (s == "none") return Shape::None;
  if (s == "circle") return Shape::Circle;
  if (s == "square") return Shape::Square;
  if (s == "rectangle") return Shape::Rectangle;
  throw Error(Errc::config, "unknown inclusion shape '" + s + "'");
}

void ParameterSample::validate() const {
  if (!(E_Y > 0.0)) throw Error(Errc::invalid_argument, "E_Y must be > 0");
  if (!(nu > 0.0 && nu < 0.5)) throw Error(Errc::invalid_argument, "nu must lie in (0, 0.5)");
  if (!(rho_s > 0.0)) throw Error(Errc::invalid_argument, "rho_s must be > 0");
  if (r_c && !(*r_c > 0.0)) throw Error(Errc::invalid_argument, "r_c must be > 0");
}

Eigen::VectorXd ParameterSample::to_vector(const ParameterSpec& spec) const {
  Eigen::VectorXd x(spec.dimension());
  for (Index i = 0; i < x.size(); ++i) {
    const auto& name = spec.params[std::size_t(i)].first;
    if (name == "E_Y") x[i] = E_Y;
    else if (name == "nu") x[i] = nu;
    else if (name == "rho_s") x[i] = rho_s;
    else if (name == "r_c") {
      if (!r_c) throw Error(Errc::invalid_argument, "sample has no r_c");
      x[i] = *r_c;
    } else {
      throw Error(Errc::config, "unknown parameter '" + name + "'");
    }
  }
  return x;
}

std::pair<double, double> uniform_bounds(double mean, double std) {
  const double half = std::sqrt(3.0) * std;
  return {mean - half, mean + half};
}

ParameterSample sample(const ParameterSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  ParameterSample s;
  for (const auto& [name, dist] : spec.params) {
    const double v = draw(dist, rng);
    if (name == "E_Y") s.E_Y = v;
    else if (name == "nu") s.nu = v;
    else if (name == "rho_s") s.rho_s = v;
    else s.r_c = v;
  }
  return s;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Lame lame_from_engineering(double E_Y, double nu) {
  if (!(E_Y > 0.0)) throw Error(Errc::invalid_argument, "E_Y must be > 0");
  if (nu >= 0.5) throw Error(Errc::invalid_argument, "nu >= 0.5 (incompressible limit)");
  if (nu < 0.0) throw Error(Errc::invalid_argument, "nu must be >= 0");
  return {E_Y / (2.0 * (1.0 + nu)), nu * E_Y / ((1.0 + nu) * (1.0 - 2.0 * nu))};
}

double MaterialGrid::max_wave_speed() const {
  return ((lambda + 2.0 * mu) / rho).sqrt().maxCoeff();
}

MaterialGrid homogeneous_grid(Index nx, Index ny, double h, double rho, Lame lame) {
  MaterialGrid g;
  g.nx = nx;
  g.ny = ny;
  g.h = h;
  g.rho = MaterialGrid::Array::Constant(ny, nx, rho);
  g.lambda = MaterialGrid::Array::Constant(ny, nx, lame.lambda);
  g.mu = MaterialGrid::Array::Constant(ny, nx, lame.mu);
  g.inclusion_mask = MaterialGrid::Mask::Constant(ny, nx, false);
  return g;
}

MaterialGrid rasterize(const ParameterSample& sample, const Plate& plate) {
  if (plate.nx < 16 || plate.ny < 16)
    throw Error(Errc::invalid_argument, "rasterize: grid must be at least 16x16");
  sample.validate();

  const Lame solid = lame_from_engineering(sample.E_Y * 1e3, sample.nu);
  MaterialGrid g = homogeneous_grid(plate.nx, plate.ny, plate.h(), sample.rho_s, solid);
  g.fluid_c = plate.c_f;
  if (sample.shape == Shape::None) return g;

  const double r = sample.r_c.value_or(plate.default_radius);
  double hw = r;  // half extents of the bounding box
  double hh = r;
  if (sample.shape == Shape::Rectangle) {
    hw = 0.5 * plate.rect_width_factor * r;
    hh = 0.5 * plate.rect_height_factor * r;
  }
  const double cx = plate.center_x;
  const double cy = plate.center_y;

  // Distance from the source center to the inclusion.
  double gap;
  if (sample.shape == Shape::Circle) {
    gap = std::hypot(cx, cy) - r;
  } else {
    const double dx = std::max(std::abs(cx) - hw, 0.0);
    const double dy = std::max(std::abs(cy) - hh, 0.0);
    gap = (std::abs(cx) <= hw && std::abs(cy) <= hh) ? -1.0 : std::hypot(dx, dy);
  }
  if (gap <= plate.source_radius)
    throw Error(Errc::degenerate_geometry, "degenerate geometry: inclusion meets the source");
  const double x_lim = 0.5 * plate.length - plate.h();
  const double y_lim = 0.5 * double(plate.ny) * plate.h() - plate.h();
  if (std::abs(cx) + hw >= x_lim || std::abs(cy) + hh >= y_lim)
    throw Error(Errc::degenerate_geometry, "degenerate geometry: inclusion meets the boundary");

  const double lambda_f = plate.rho_f * plate.c_f * plate.c_f;
  for (Index j = 0; j < plate.ny; ++j) {
    const double dy = plate.cell_y(j) - cy;
    for (Index i = 0; i < plate.nx; ++i) {
      const double dx = plate.cell_x(i) - cx;
      const bool inside = sample.shape == Shape::Circle
                              ? dx * dx + dy * dy <= r * r
                              : std::abs(dx) <= hw && std::abs(dy) <= hh;
      if (!inside) continue;
      g.inclusion_mask(j, i) = true;
      g.rho(j, i) = plate.rho_f;
      g.lambda(j, i) = lambda_f;
      g.mu(j, i) = 0.0;
    }
  }
  return g;
}

}  // namespace wfs
