#pragma once

#include <Eigen/Core>

#include <functional>
#include <vector>

#include "wfs/field.hpp"
#include "wfs/scenario.hpp"

namespace wfs {

struct SimConfig {
  double dt_out = 1e-5;  // s
  double T = 3e-3;  // s
  double cfl_safety = 0.9;
  double source_radius = 7.5e-3;  // m
  double f_c = 5000.0;  // Hz
  double n_c = 5.0;  // cycles

  void validate() const;
  Index output_steps() const;
};

/// Displacement and velocity, both C=2 (x, y components) on an ny x nx grid.
struct WaveState {
  BasicField<double> u;
  BasicField<double> v;
  double t = 0.0;

  static WaveState zero(Index nx, Index ny);
};

/// Burst amplitude: a cosine carrier under a raised-cosine window, gated to
/// [0, n_c / f_c]. sign(0) is taken as 0.
double burst_radius(double t, double f_c = 5000.0, double n_c = 5.0);

/// Polar angle in [0, 2 pi) by explicit quadrant cases; throws at the origin.
double angle_phi(const Eigen::Vector2d& x);

/// Radial burst force density; zero outside the source disc and at the origin.
Eigen::Vector2d body_force(const Eigen::Vector2d& x, double t, double r_fs,
                           double f_c = 5000.0, double n_c = 5.0);

/// Spatial part of the source sampled at cell centers, C=2.
struct BurstSource {
  BasicField<double> direction;
  double f_c = 5000.0;
  double n_c = 5.0;

  static BurstSource none(Index nx, Index ny);
  static BurstSource centered(const MaterialGrid& grid, const SimConfig& cfg);
  double amplitude(double t) const { return burst_radius(t, f_c, n_c); }
  bool active() const { return direction.data().any(); }
};

double cell_x(const MaterialGrid& grid, Index i);
double cell_y(const MaterialGrid& grid, Index j);

/// safety * h / (c_max * sqrt(2)).
double stable_dt(const MaterialGrid& grid, double cfl_safety);

/// Smallest k >= 1 with dt_out / k <= dt_cfl.
Index substeps(double dt_out, double dt_cfl);

/// (div sigma(u) + f) / rho at every cell; zero on the boundary ring.
BasicField<double> acceleration(const BasicField<double>& u, const MaterialGrid& grid,
                                const BurstSource& source, double t);

/// One kick-drift-kick step of size dt. Throws on non-finite values.
WaveState step(const WaveState& state, const MaterialGrid& grid, const BurstSource& source,
               double dt);

/// Kinetic plus strain energy, summed with cell area h^2.
double energy(const WaveState& state, const MaterialGrid& grid);

/// Runs to cfg.T calling observer(k, state) after output step k = 1..N.
void run(const MaterialGrid& grid, const SimConfig& cfg,
         const std::function<void(Index, const WaveState&)>& observer);

/// Normalized u_x snapshots (C=1) at t = k * dt_out, k = 1..T/dt_out.
std::vector<Field> simulate(const MaterialGrid& grid, const SimConfig& cfg);
std::vector<Field> simulate(const ParameterSample& sample, const Plate& plate,
                            const SimConfig& cfg);

}  // namespace wfs
