#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "wfs/field.hpp"

namespace wfs {

/// Uniform law given by its mean and standard deviation.
struct Uniform {
  double mean = 0.0;
  double std = 1.0;
};

/// Gaussian(mean, std) conditioned on samples > lower.
struct TruncatedGaussian {
  double mean = 0.0;
  double std = 1.0;
  double lower = 0.0;
};

using Distribution = std::variant<Uniform, TruncatedGaussian>;

/// Named uncertain inputs. Recognized names: "E_Y" (kN/m^2), "nu",
/// "rho_s" (kg/m^3), "r_c" (m).
struct ParameterSpec {
  std::vector<std::pair<std::string, Distribution>> params;

  void validate() const;
  Index dimension() const { return Index(params.size()); }
  bool has(const std::string& name) const;
};

/// Material uncertainty shared by both examples.
ParameterSpec material_spec();
/// Material uncertainty plus a uniform inclusion radius.
ParameterSpec material_and_radius_spec();

enum class Shape { None, Circle, Square, Rectangle };

const char* to_string(Shape s);
Shape shape_from_string(const std::string& s);

struct ParameterSample {
  double E_Y = 500.0;  // kN/m^2
  double nu = 0.4;
  double rho_s = 1000.0;  // kg/m^3
  std::optional<double> r_c;  // m
  Shape shape = Shape::None;
  std::uint64_t seed = 0;

  void validate() const;
  /// Input vector of the surrogate, ordered as the spec that produced it.
  Eigen::VectorXd to_vector(const ParameterSpec& spec) const;
};

/// Bounds of the uniform law with the given mean and std: mean -/+ sqrt(3) std.
std::pair<double, double> uniform_bounds(double mean, double std);

ParameterSample sample(const ParameterSpec& spec, std::mt19937_64& rng);

/// Per-realization seed derived from a master seed (SplitMix64).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

struct Lame {
  double mu = 0.0;
  double lambda = 0.0;
};

Lame lame_from_engineering(double E_Y, double nu);

/// Plate, inclusion placement and fluid. The plate is centered on the source
/// at the origin; x spans nx cells of size h = length / nx, y spans ny cells.
struct Plate {
  double length = 0.35;  // m
  Index nx = 270;
  Index ny = 270;
  double center_x = 0.35 / 4.0;  // inclusion center, m
  double center_y = 0.0;
  double default_radius = 0.01;  // used when the sample has no r_c
  double rect_width_factor = 4.0;  // rectangle x extent in units of r_c
  double rect_height_factor = 1.0;
  double rho_f = 1000.0;  // kg/m^3
  double c_f = 33.0;  // m/s
  double source_radius = 7.5e-3;  // m

  double h() const { return length / double(nx); }
  double cell_x(Index i) const { return -0.5 * length + (double(i) + 0.5) * h(); }
  double cell_y(Index j) const { return -0.5 * double(ny) * h() + (double(j) + 0.5) * h(); }
};

/// Per-cell coefficients, indexed (row j, column i) with j along y.
struct MaterialGrid {
  using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Index nx = 0;
  Index ny = 0;
  double h = 0.0;
  Array rho;
  Array lambda;
  Array mu;
  Mask inclusion_mask;
  double fluid_c = 0.0;

  /// Largest pressure-wave speed sqrt((lambda + 2 mu) / rho) over all cells.
  double max_wave_speed() const;
  Index inclusion_cells() const { return inclusion_mask.count(); }
};

MaterialGrid homogeneous_grid(Index nx, Index ny, double h, double rho, Lame lame);

MaterialGrid rasterize(const ParameterSample& sample, const Plate& plate);

}  // namespace wfs
