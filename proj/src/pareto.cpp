#include "painvrl/pareto.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace painvrl {
namespace {

void check_pair(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (a.size() != b.size()) throw std::invalid_argument("gradient length mismatch");
  if (!a.allFinite() || !b.allFinite()) {
    throw std::invalid_argument("non-finite gradient");
  }
}

}  // namespace

ParetoWeights solve_weights(const Eigen::VectorXd& g_erm,
                            const Eigen::VectorXd& g_irm) {
  check_pair(g_erm, g_irm);
  const Eigen::VectorXd diff = g_erm - g_irm;
  const double denom = diff.squaredNorm();
  ParetoWeights w;
  if (denom < 1e-12) {
    w.raw_w_erm = std::numeric_limits<double>::quiet_NaN();
    return w;
  }
  w.raw_w_erm = (g_irm - g_erm).dot(g_irm) / denom;
  w.w_erm = std::clamp(w.raw_w_erm, 0.0, 1.0);
  w.w_irm = 1.0 - w.w_erm;
  return w;
}

Eigen::VectorXd combined_direction(const Eigen::VectorXd& g_erm,
                                   const Eigen::VectorXd& g_irm,
                                   const ParetoWeights& w) {
  check_pair(g_erm, g_irm);
  return w.w_erm * g_erm + w.w_irm * g_irm;
}

DescentCheck check_descent(const Eigen::VectorXd& g_erm,
                           const Eigen::VectorXd& g_irm,
                           const ParetoWeights& w) {
  const Eigen::VectorXd step = -combined_direction(g_erm, g_irm, w);
  DescentCheck out;
  out.dot_erm = g_erm.dot(step);
  out.dot_irm = g_irm.dot(step);
  out.sq_norm = step.squaredNorm();
  out.kkt_stationary = step.norm() < 1e-10;
  out.zeta = out.kkt_stationary ? 0.0 : -out.sq_norm;
  return out;
}

double oracle_min_norm(const Eigen::VectorXd& g_erm,
                       const Eigen::VectorXd& g_irm, std::size_t grid_steps) {
  check_pair(g_erm, g_irm);
  if (grid_steps == 0) throw std::invalid_argument("grid needs at least one step");
  // |w a + (1-w) b|^2 = w^2 |a-b|^2 + 2 w (a-b).b + |b|^2
  const Eigen::VectorXd diff = g_erm - g_irm;
  const double aa = diff.squaredNorm();
  const double ab = diff.dot(g_irm);
  const double bb = g_irm.squaredNorm();
  double best_w = 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s <= grid_steps; ++s) {
    const double w = static_cast<double>(s) / static_cast<double>(grid_steps);
    const double value = w * w * aa + 2.0 * w * ab + bb;
    if (value < best) {
      best = value;
      best_w = w;
    }
  }
  return best_w;
}

}  // namespace painvrl
