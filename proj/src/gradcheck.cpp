#include "painvrl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace painvrl {
namespace {

using Wide = long double;

Wide wide_mlp(const AttentionMlp& mlp, const std::vector<Wide>& x) {
  Wide out = mlp.out_b;
  for (Eigen::Index j = 0; j < mlp.hidden_w.rows(); ++j) {
    Wide a = mlp.hidden_b(j);
    for (std::size_t c = 0; c < x.size(); ++c) {
      a += static_cast<Wide>(mlp.hidden_w(j, static_cast<Eigen::Index>(c))) * x[c];
    }
    out += static_cast<Wide>(mlp.out_w(j)) * std::tanh(a);
  }
  return out;
}

Wide wide_softplus(Wide x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// The masked ERM loss recomputed term by term in extended precision.
// Differences against a base point are taken before rounding to double, so
// central differences resolve entries far below the loss's own ulp.
Wide wide_erm_loss(const MaskProblem& problem, const ModelParams& p,
                     const Eigen::VectorXd& m, const Eigen::VectorXd& eps, bool softmax) {
  const auto& f = problem.features().vectors;
  const auto k = p.user_collab.cols();
  const auto d = f.cols();
  std::vector<Wide> env_loss(problem.envs().num_envs, 0);
  std::vector<bool> active(problem.envs().num_envs, false);
  for (const auto& t : problem.terms()) {
    const auto u = t.term.user;
    const auto i = t.term.item;
    std::vector<Wide> x;
    for (Eigen::Index c = 0; c < k; ++c) x.push_back(p.user_collab(u, c));
    for (Eigen::Index c = 0; c < k; ++c) x.push_back(p.user_content(u, c));
    for (Eigen::Index c = 0; c < k; ++c) x.push_back(p.item_collab(i, c));
    for (Eigen::Index c = 0; c < d; ++c) x.push_back(f(i, c));
    const Wide o_inv = wide_mlp(p.attn_invariant, x);
    const Wide o_var = wide_mlp(p.attn_variant, x);
    Wide a_inv, a_var;
    if (softmax) {
      const Wide top = std::max(o_inv, o_var);
      const Wide ei = std::exp(o_inv - top), ev = std::exp(o_var - top);
      a_inv = ei / (ei + ev);
      a_var = ev / (ei + ev);
    } else {
      a_inv = 1 / (1 + std::exp(-o_inv));
      a_var = 1 / (1 + std::exp(-o_var));
    }
    Wide s = 0;
    for (Eigen::Index c = 0; c < k; ++c) {
      s += static_cast<Wide>(p.user_collab(u, c)) * p.item_collab(i, c);
    }
    for (Eigen::Index r = 0; r < k; ++r) {
      Wide wc = 0;
      for (Eigen::Index c = 0; c < d; ++c) {
        const Wide mk = m(c);
        const Wide mu = std::clamp<Wide>(mk + eps(c), 0, 1);
        const Wide h = (a_inv * mk + a_var * (1 - mk)) * f(i, c);
        wc += static_cast<Wide>(p.projection(r, c)) * mu * h;
      }
      s += static_cast<Wide>(p.user_content(u, r)) * wc;
    }
    env_loss[t.env] += static_cast<Wide>(t.term.weight) * t.env_weight * wide_softplus(-t.term.sign * s);
    active[t.env] = true;
  }
  Wide sum = 0;
  Wide count = 0;
  for (std::size_t e = 0; e < env_loss.size(); ++e) {
    if (!active[e]) continue;
    sum += env_loss[e];
    count += 1;
  }
  return count > 0 ? sum / count : 0;
}

}  // namespace


TinyInstance make_tiny_instance(std::uint64_t seed) {
  Rng rng = make_rng(seed, "tiny");
  const std::size_t users = 2 + uniform_index(rng, 4);
  const std::size_t items = 3 + uniform_index(rng, 3);
  const std::size_t k = 1 + uniform_index(rng, 4);
  const std::size_t d = 1 + uniform_index(rng, 6);

  std::vector<Pair> pairs;
  for (std::size_t u = 0; u < users; ++u) {
    std::vector<ItemId> all(items);
    for (std::size_t i = 0; i < items; ++i) all[i] = static_cast<ItemId>(i);
    shuffle(all, rng);
    const std::size_t n = 1 + uniform_index(rng, items - 1);
    for (std::size_t j = 0; j < n; ++j) pairs.push_back({static_cast<UserId>(u), all[j]});
  }
  TinyInstance inst;
  inst.data = make_interaction_set(pairs, users, items);
  inst.data.negatives = sample_negatives(inst.data, 1, rng).negatives;

  inst.features.dim = d;
  inst.features.vectors.resize(static_cast<Eigen::Index>(items), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < inst.features.vectors.size(); ++i) {
    inst.features.vectors.data()[i] = standard_normal(rng);
  }

  inst.envs.num_envs = 2;
  const std::size_t n = inst.data.positives.size();
  inst.envs.assignment.resize(n);
  for (auto& a : inst.envs.assignment) a = static_cast<std::uint32_t>(uniform_index(rng, 2));
  inst.envs.assignment[0] = 0;
  inst.envs.assignment[n - 1] = 1;

  inst.params = ModelParams::zeros(users, items, k, d);
  inst.params.for_each_block([&](const char*, double* v, std::size_t size) {
    for (std::size_t j = 0; j < size; ++j) v[j] = 0.5 * standard_normal(rng);
  });

  inst.mask = MaskState::constant(d, 0.5);
  inst.epsilon.resize(static_cast<Eigen::Index>(d));
  for (std::size_t j = 0; j < d; ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    inst.mask.m(jj) = 0.1 + 0.8 * uniform_unit(rng);
    double e = 0.0;
    do {
      e = 0.2 * standard_normal(rng);
    } while (std::abs(inst.mask.m(jj) + e) < 0.01 || std::abs(inst.mask.m(jj) + e - 1.0) < 0.01);
    inst.epsilon(jj) = e;
  }
  return inst;
}

std::vector<GradcheckCase> gradcheck(const TinyInstance& inst, double tol, bool inject_bug,
                                     double h) {
  std::vector<GradcheckCase> out;
  const InteractionSet& data = inst.data;

  {
    const ItemGraph graph = ItemGraph::from_interactions(data, 10);
    const RowMatrix& content = inst.features.vectors;
    const LossContext ctx{data, graph, content};
    const Batch batch{data.positives, data.negatives};
    const LossWeights weights;
    ParamVector analytic = grad_total_loss(batch, ctx, inst.params, weights).flatten();
    if (inject_bug) {
      auto& a = analytic.values;
      const std::size_t idx = a.size() / 2;
      a[idx] += 0.1 * (std::abs(a[idx]) + 1.0);
    }
    ModelParams probe = inst.params;
    const auto x = inst.params.flatten().values;
    const auto numeric = finite_diff_grad(
        [&](std::span<const double> v) {
          probe.unflatten(v);
          return total_loss(batch, ctx, probe, weights);
        },
        x, h);
    out.push_back({"total_loss/params", check_gradient(analytic.values, numeric, tol)});
  }

  MaskConfig config;
  config.num_neighbors = 10;
  MaskProblem problem(data, inst.envs, inst.features, config);
  problem.set_negatives(data.negatives);
  const MaskSample sample = sample_from_noise(inst.mask.m, inst.epsilon);

  {
    const double lib = erm_loss(problem, sample, inst.params, inst.mask);
    const auto wide = static_cast<double>(
        wide_erm_loss(problem, inst.params, inst.mask.m, inst.epsilon, false));
    out.push_back({"erm/value", check_gradient(std::span(&lib, 1), std::span(&wide, 1), tol)});
  }

  {
    const Eigen::VectorXd analytic =
        grad_mask(problem, sample, inst.params, inst.mask, Objective::Erm);
    MaskState state = inst.mask;
    const Wide base = wide_erm_loss(problem, inst.params, inst.mask.m, inst.epsilon, false);
    const std::vector<double> x(inst.mask.m.data(), inst.mask.m.data() + inst.mask.m.size());
    const auto numeric = finite_diff_grad(
        [&](std::span<const double> v) {
          state.m = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
          return static_cast<double>(
              wide_erm_loss(problem, inst.params, state.m, inst.epsilon, false) - base);
        },
        x, h);
    out.push_back({"erm/mask", check_gradient(std::span(analytic.data(), analytic.size()),
                                              numeric, tol)});
  }

  {
    const auto analytic = grad_params_erm(problem, sample, inst.params, inst.mask).flatten();
    ModelParams probe = inst.params;
    const Wide base = wide_erm_loss(problem, inst.params, inst.mask.m, inst.epsilon, false);
    const auto numeric = finite_diff_grad(
        [&](std::span<const double> v) {
          probe.unflatten(v);
          return static_cast<double>(wide_erm_loss(problem, probe, inst.mask.m, inst.epsilon, false) - base);
        },
        inst.params.flatten().values, h);
    out.push_back({"erm/params", check_gradient(analytic.values, numeric, tol)});
  }
  return out;
}

}  // namespace painvrl
