#pragma once

#include <cstddef>

#include <Eigen/Dense>

namespace painvrl {

// Convex weights of the ERM and IRM mask gradients.
struct ParetoWeights {
  double w_erm = 0.5;
  double w_irm = 0.5;
  // Closed-form value before clipping; NaN for the degenerate branch.
  double raw_w_erm = 0.5;
};

struct DescentCheck {
  double dot_erm = 0.0;  // g_erm . dm
  double dot_irm = 0.0;  // g_irm . dm
  double sq_norm = 0.0;  // |dm|^2
  // -sq_norm when dm != 0, otherwise 0.
  double zeta = 0.0;
  bool kkt_stationary = false;
};

// Minimiser of |w g_erm + (1-w) g_irm|^2 over w in [0,1]:
//   w* = (g_irm - g_erm)^T g_irm / |g_erm - g_irm|^2, clipped to [0,1].
// Returns (0.5, 0.5) when |g_erm - g_irm|^2 < 1e-12.
ParetoWeights solve_weights(const Eigen::VectorXd& g_erm,
                            const Eigen::VectorXd& g_irm);

Eigen::VectorXd combined_direction(const Eigen::VectorXd& g_erm,
                                   const Eigen::VectorXd& g_irm,
                                   const ParetoWeights& w);

// Evaluates the step dm = -combined_direction against both gradients.
DescentCheck check_descent(const Eigen::VectorXd& g_erm,
                           const Eigen::VectorXd& g_irm,
                           const ParetoWeights& w);

// Grid search over grid_steps + 1 uniformly spaced w in [0,1]; the first
// minimiser wins ties.
double oracle_min_norm(const Eigen::VectorXd& g_erm,
                       const Eigen::VectorXd& g_irm, std::size_t grid_steps);

}  // namespace painvrl
