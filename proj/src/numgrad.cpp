#include "painvrl/numgrad.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace painvrl {

std::span<double> ParamVector::segment(const std::string& name) {
  for (const auto& s : layout) {
    if (s.name == name) return {values.data() + s.offset, s.size};
  }
  throw std::out_of_range("no segment named " + name);
}

std::span<const double> ParamVector::segment(const std::string& name) const {
  for (const auto& s : layout) {
    if (s.name == name) return {values.data() + s.offset, s.size};
  }
  throw std::out_of_range("no segment named " + name);
}

void ParamVector::validate() const {
  std::size_t cursor = 0;
  for (const auto& s : layout) {
    if (s.offset != cursor) throw std::invalid_argument("segment gap at " + s.name);
    cursor += s.size;
  }
  if (cursor != values.size()) {
    throw std::invalid_argument("segments do not cover the vector");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite parameter");
  }
}

std::vector<double> finite_diff_grad(const ScalarFn& f,
                                     std::span<const double> x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("step must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = probe[k];
    probe[k] = orig + h;
    const double up = f(probe);
    probe[k] = orig - h;
    const double down = f(probe);
    probe[k] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("non-finite function value probing coordinate " +
                              std::to_string(k));
    }
    grad[k] = (up - down) / (2.0 * h);
  }
  return grad;
}

GradReport check_gradient(std::span<const double> analytic,
                          std::span<const double> numeric, double tol) {
  if (analytic.size() != numeric.size()) {
    throw std::invalid_argument("gradient length mismatch");
  }
  GradReport report;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    const double diff = std::abs(analytic[k] - numeric[k]);
    const double denom =
        std::max({std::abs(analytic[k]), std::abs(numeric[k]), 1e-8});
    const double rel = diff / denom;
    report.max_abs_diff = std::max(report.max_abs_diff, diff);
    if (rel > report.max_rel_diff) {
      report.max_rel_diff = rel;
      report.worst_index = k;
    }
  }
  report.pass = report.max_rel_diff <= tol;
  return report;
}

}  // namespace painvrl
