#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "painvrl/backbone.hpp"
#include "painvrl/dataset.hpp"
#include "painvrl/maskgen.hpp"
#include "painvrl/numgrad.hpp"

namespace painvrl {

// A random instance with at most 5 users, 5 items, k <= 4 and d <= 6. Every
// user keeps at least one non-interacted item and both environments are
// non-empty.
struct TinyInstance {
  InteractionSet data;  // negatives sampled
  FeatureTable features;
  EnvPartition envs;
  ModelParams params;
  MaskState mask;
  Eigen::VectorXd epsilon;  // frozen noise, away from the clip kinks
};

TinyInstance make_tiny_instance(std::uint64_t seed);

struct GradcheckCase {
  std::string name;
  GradReport report;
};

// Compares analytic and central-difference gradients of total_loss over the
// model, the ERM mask loss over m, and the ERM mask loss over the model. The
// ERM differences are taken on an extended-precision recomputation of the
// loss, whose value is checked against erm_loss as well.
// `inject_bug` perturbs one analytic entry of the first case.
std::vector<GradcheckCase> gradcheck(const TinyInstance& inst, double tol,
                                     bool inject_bug = false, double h = 1e-5);

}  // namespace painvrl
