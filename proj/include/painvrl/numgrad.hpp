#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace painvrl {

// Named slice of a flat parameter vector.
struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;

  bool operator==(const Segment&) const = default;
};

// Flat real vector with a named-segment layout.
struct ParamVector {
  std::vector<double> values;
  std::vector<Segment> layout;

  std::span<double> segment(const std::string& name);
  std::span<const double> segment(const std::string& name) const;
  // Throws if the segments do not tile `values` in order.
  void validate() const;
};

struct GradReport {
  double max_abs_diff = 0.0;
  double max_rel_diff = 0.0;
  std::size_t worst_index = 0;
  bool pass = true;
};

using ScalarFn = std::function<double(std::span<const double>)>;

// Central differences (f(x + h e_k) - f(x - h e_k)) / 2h for every k.
std::vector<double> finite_diff_grad(const ScalarFn& f,
                                     std::span<const double> x,
                                     double h = 1e-5);

// Relative difference per coordinate uses max(|a_k|, |n_k|, 1e-8) as the
// denominator; pass iff the worst one is <= tol.
GradReport check_gradient(std::span<const double> analytic,
                          std::span<const double> numeric, double tol);

}  // namespace painvrl
