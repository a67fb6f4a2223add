#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "painvrl/gradcheck.hpp"
#include "painvrl/maskgen.hpp"

using namespace painvrl;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index k = 0;
  for (double x : v) out(k++) = x;
  return out;
}

FeatureTable random_features(std::size_t items, std::size_t d, Rng& rng) {
  FeatureTable t;
  t.dim = d;
  t.vectors.resize(static_cast<Eigen::Index>(items), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < t.vectors.rows(); ++i) {
    for (Eigen::Index k = 0; k < t.vectors.cols(); ++k) t.vectors(i, k) = standard_normal(rng);
  }
  return t;
}

ModelParams random_params(std::size_t users, std::size_t items, std::size_t k,
                          std::size_t d, Rng& rng) {
  auto p = ModelParams::zeros(users, items, k, d);
  auto flat = p.flatten();
  for (double& v : flat.values) v = 0.5 * standard_normal(rng);
  p.unflatten(flat.values);
  return p;
}

double loop_mlp(const AttentionMlp& mlp, const std::vector<double>& x) {
  double out = mlp.out_b;
  for (Eigen::Index j = 0; j < mlp.hidden_w.rows(); ++j) {
    double a = mlp.hidden_b(j);
    for (std::size_t c = 0; c < x.size(); ++c) {
      a += mlp.hidden_w(j, static_cast<Eigen::Index>(c)) * x[c];
    }
    out += mlp.out_w(j) * std::tanh(a);
  }
  return out;
}

}  // namespace

TEST_CASE("sample_mu") {
  auto state = MaskState::constant(3, 0.4);
  state.sigma = 0.0;
  Rng rng(1);
  CHECK(sample_mu(state, rng).mu == state.m);

  const auto s = sample_from_noise(vec({0.9, 0.2, 0.5}), vec({0.3, -0.5, 0.1}));
  CHECK(s.mu(0) == 1.0);
  CHECK(s.mu(1) == 0.0);
  CHECK(s.mu(2) == 0.6);

  state.sigma = 0.7;
  for (int t = 0; t < 100; ++t) {
    const auto x = sample_mu(state, rng);
    for (Eigen::Index k = 0; k < 3; ++k) {
      CHECK(x.mu(k) == std::clamp(state.m(k) + x.epsilon(k), 0.0, 1.0));
    }
  }
}

TEST_CASE("complementarity") {
  const Eigen::VectorXd f = vec({1.5, -3.25, 0.1, 7e-5});
  CHECK(to_invariant(Eigen::VectorXd::Ones(4), f) == f);
  CHECK(to_variant(Eigen::VectorXd::Ones(4), f) == Eigen::VectorXd::Zero(4));
  const Eigen::VectorXd half = Eigen::VectorXd::Constant(4, 0.5);
  CHECK(to_invariant(half, f) == 0.5 * f);
  CHECK(to_variant(half, f) == 0.5 * f);

  Rng rng(77);
  std::size_t failures = 0;
  for (int t = 0; t < 20000; ++t) {
    Eigen::VectorXd m(8), g(8);
    for (Eigen::Index k = 0; k < 8; ++k) {
      m(k) = uniform_unit(rng);
      g(k) = standard_normal(rng) * std::pow(10.0, static_cast<double>(uniform_index(rng, 12)) - 6);
    }
    const Eigen::VectorXd sum = to_invariant(m, g) + to_variant(m, g);
    if (sum != g) ++failures;
    const Eigen::VectorXd phi = to_invariant(m, g);
    for (Eigen::Index k = 0; k < 8; ++k) {
      CHECK(std::abs(phi(k) - m(k) * g(k)) <= 4e-16 * std::abs(g(k)));
    }
  }
  CHECK(failures == 0);
}

TEST_CASE("attention fusion") {
  Rng rng(3);
  const auto features = random_features(3, 4, rng);
  auto params = ModelParams::zeros(2, 3, 2, 4);
  const Eigen::VectorXd f = features.vectors.row(1).transpose();
  const Eigen::VectorXd m = vec({0.2, 0.7, 0.5, 1.0});
  const auto phi = to_invariant(m, f), psi = to_variant(m, f);

  params.attn_invariant.out_b = 800.0;
  params.attn_variant.out_b = -800.0;
  CHECK(attention_fuse(0, 1, phi, psi, params, features, false) == phi);

  params.attn_invariant.out_b = 0.0;
  params.attn_variant.out_b = 0.0;
  CHECK(attention_fuse(0, 1, phi, psi, params, features, false) == 0.5 * f);

  const auto q = random_params(2, 3, 2, 4, rng);
  std::vector<double> x;
  for (int c = 0; c < 2; ++c) x.push_back(q.user_collab(1, c));
  for (int c = 0; c < 2; ++c) x.push_back(q.user_content(1, c));
  for (int c = 0; c < 2; ++c) x.push_back(q.item_collab(2, c));
  for (int c = 0; c < 4; ++c) x.push_back(features.vectors(2, c));
  const double a_inv = 1.0 / (1.0 + std::exp(-loop_mlp(q.attn_invariant, x)));
  const double a_var = 1.0 / (1.0 + std::exp(-loop_mlp(q.attn_variant, x)));
  const Eigen::VectorXd f2 = features.vectors.row(2).transpose();
  const auto phi2 = to_invariant(m, f2), psi2 = to_variant(m, f2);
  const auto h = attention_fuse(1, 2, phi2, psi2, q, features, false);
  for (Eigen::Index k = 0; k < 4; ++k) {
    CHECK(h(k) == doctest::Approx(a_inv * phi2(k) + a_var * psi2(k)).epsilon(1e-13));
  }
  const auto soft = attention_weights(1, 2, q, features, true);
  CHECK(soft.invariant + soft.variant == doctest::Approx(1.0));
  CHECK(soft.invariant == doctest::Approx(a_inv * (1 - a_var) / (a_inv * (1 - a_var) + a_var * (1 - a_inv))));
}

TEST_CASE("irm penalty from gradients") {
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(2);
  CHECK(irm_penalty_from_gradients({vec({1, 0}), vec({0, 1})}, ones) == 0.125);
  CHECK(irm_penalty_from_gradients({vec({1, 2}), vec({1, 2}), vec({1, 2})}, ones) == 0.0);
  CHECK(irm_penalty_from_gradients({vec({1, 0}), vec({0, 1})}, Eigen::VectorXd::Zero(2)) == 0.0);
  CHECK(irm_penalty_from_gradients({vec({4, 5})}, ones) == 0.0);
}

TEST_CASE("masked objectives") {
  const auto inst = make_tiny_instance(4);
  MaskConfig cfg;
  const MaskProblem problem(inst.data, inst.envs, inst.features, cfg);
  MaskProblem with_neg = problem;
  with_neg.set_negatives(inst.data.negatives);
  const auto sample = sample_from_noise(inst.mask.m, inst.epsilon);

  const auto losses = env_losses(with_neg, sample, inst.params, inst.mask);
  REQUIRE(losses.size() == 2);
  CHECK(erm_loss(with_neg, sample, inst.params, inst.mask) ==
        doctest::Approx((losses[0] + losses[1]) / 2.0).epsilon(1e-14));

  const auto grads = env_scale_gradients(with_neg, sample, inst.params, inst.mask);
  CHECK(irm_penalty(with_neg, sample, inst.params, inst.mask) ==
        doctest::Approx(irm_penalty_from_gradients(grads, sample.mu)).epsilon(1e-14));

  // The fused content depends on m only, so moving the noise moves mu alone.
  for (std::size_t e = 0; e < 2; ++e) {
    std::vector<double> eps(inst.epsilon.data(), inst.epsilon.data() + inst.epsilon.size());
    const auto numeric = finite_diff_grad(
        [&](std::span<const double> x) {
          const Eigen::Map<const Eigen::VectorXd> v(x.data(), static_cast<Eigen::Index>(x.size()));
          return env_losses(with_neg, sample_from_noise(inst.mask.m, v), inst.params, inst.mask)[e];
        },
        eps);
    const std::vector<double> analytic(grads[e].data(), grads[e].data() + grads[e].size());
    const auto report = check_gradient(analytic, numeric, 1e-4);
    CHECK_MESSAGE(report.pass, "env " << e << " rel " << report.max_rel_diff);
  }

  ParetoWeights erm_only{1.0, 0.0};
  MaskState no_reg = inst.mask;
  no_reg.lambda = 0.0;
  CHECK(mask_objective(with_neg, sample, inst.params, no_reg, erm_only) ==
        doctest::Approx(erm_loss(with_neg, sample, inst.params, no_reg)).epsilon(1e-14));

  EnvPartition single;
  single.num_envs = 1;
  single.assignment.assign(inst.data.positives.size(), 0);
  const MaskProblem one(inst.data, single, inst.features, cfg);
  MaskState half = MaskState::constant(inst.features.dim, 0.5);
  const auto mid = sample_from_noise(half.m, Eigen::VectorXd::Zero(half.m.size()));
  CHECK(irm_penalty(one, mid, inst.params, half) == 0.0);
  CHECK(grad_mask(one, mid, inst.params, half, Objective::Irm).norm() == 0.0);
  CHECK(erm_loss(one, mid, inst.params, half) == env_losses(one, mid, inst.params, half)[0]);
  const double dim = static_cast<double>(inst.features.dim);
  CHECK(mask_objective(one, mid, inst.params, half, {0.0, 1.0}) ==
        doctest::Approx(0.5 * 0.25 * dim).epsilon(1e-15));
}

TEST_CASE("mask objective with four coordinates") {
  Rng rng(9);
  const auto features = random_features(3, 4, rng);
  const auto data = make_interaction_set({{0, 0}, {1, 1}}, 2, 3);
  EnvPartition envs{1, {0, 0}};
  const MaskProblem problem(data, envs, features, {});
  const auto params = random_params(2, 3, 2, 4, rng);
  const auto state = MaskState::constant(4, 0.5);
  const auto sample = sample_from_noise(state.m, Eigen::VectorXd::Zero(4));
  CHECK(mask_objective(problem, sample, params, state, {0.0, 1.0}) == 0.5);
  CHECK(state.lambda == 1.0);
}

TEST_CASE("erm mask gradient") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto inst = make_tiny_instance(seed);
    for (const auto& c : gradcheck(inst, 1e-4)) {
      CHECK_MESSAGE(c.report.pass, c.name << " seed " << seed << " rel " << c.report.max_rel_diff);
    }
  }
  const auto inst = make_tiny_instance(1);
  const auto bad = gradcheck(inst, 1e-4, true);
  CHECK_FALSE(bad.front().report.pass);

  SUBCASE("saturated coordinate") {
    Rng rng(2);
    FeatureTable features = random_features(3, 2, rng);
    features.vectors.col(1).setZero();
    features.vectors(0, 1) = 2.0;
    const auto data = make_interaction_set({{0, 0}, {1, 2}}, 2, 3);
    const MaskProblem problem(data, EnvPartition{2, {0, 1}}, features, {});
    const auto params = random_params(2, 3, 2, 2, rng);
    MaskState state = MaskState::constant(2, 0.3);
    state.m(1) = 0.2;
    const auto sample = sample_from_noise(state.m, vec({0.05, -0.5}));
    REQUIRE(sample.mu(1) == 0.0);
    const auto g = grad_mask(problem, sample, params, state, Objective::Erm);
    CHECK(g(1) == 0.0);
    CHECK(g(0) != 0.0);
  }
}

TEST_CASE("irm mask gradient vanishes for identical environments") {
  Rng rng(5);
  const auto features = random_features(3, 3, rng);
  auto params = random_params(2, 3, 2, 3, rng);
  params.user_collab.row(1) = params.user_collab.row(0);
  params.user_content.row(1) = params.user_content.row(0);
  const auto data = make_interaction_set({{0, 0}, {1, 0}}, 2, 3);
  MaskProblem problem(data, EnvPartition{2, {0, 1}}, features, {});
  problem.set_negatives({{0, 2}, {1, 2}});
  const auto state = MaskState::constant(3, 0.4);
  const auto sample = sample_from_noise(state.m, vec({0.1, -0.05, 0.02}));
  CHECK(irm_penalty(problem, sample, params, state) == 0.0);
  CHECK(grad_mask(problem, sample, params, state, Objective::Irm) == Eigen::VectorXd::Zero(3));

  // A mismatched pair of environments does produce a non-zero penalty.
  problem.set_negatives({{0, 2}, {1, 1}});
  CHECK(irm_penalty(problem, sample, params, state) > 0.0);
}

TEST_CASE("update_mask") {
  auto state = MaskState::constant(3, 0.5);
  state.step = 0.1;
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(3);
  CHECK((update_mask(state, zero, zero).m - Eigen::VectorXd::Constant(3, 0.45)).norm() < 1e-15);

  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    MaskState s;
    s.m.resize(5);
    Eigen::VectorXd ge(5), gi(5);
    for (Eigen::Index k = 0; k < 5; ++k) {
      s.m(k) = uniform_unit(rng);
      ge(k) = 4.0 * standard_normal(rng);
      gi(k) = 4.0 * standard_normal(rng);
    }
    s.step = 0.2 * uniform_unit(rng) + 1e-3;
    s.lambda = uniform_unit(rng);
    ParetoWeights used;
    const auto next = update_mask(s, ge, gi, std::nullopt, &used);
    const auto w = solve_weights(ge, gi);
    CHECK(used.w_erm == w.w_erm);
    CHECK(used.w_erm >= 0.0);
    CHECK(used.w_irm >= 0.0);
    for (Eigen::Index k = 0; k < 5; ++k) {
      const double raw = s.m(k) - s.step * (w.w_erm * ge(k) + w.w_irm * gi(k) + s.lambda * s.m(k));
      CHECK(next.m(k) == doctest::Approx(std::clamp(raw, 0.0, 1.0)).epsilon(1e-14));
      CHECK(next.m(k) >= 0.0);
      CHECK(next.m(k) <= 1.0);
    }
  }

  MaskState frozen = state;
  frozen.step = 0.0;
  CHECK_THROWS(frozen.validate());
  CHECK(update_mask(frozen, Eigen::VectorXd::Ones(3), zero).m == frozen.m);
}

TEST_CASE("fit_mask") {
  const auto inst = make_tiny_instance(6);
  MaskConfig cfg;
  cfg.iters = 0;
  MaskProblem problem(inst.data, inst.envs, inst.features, cfg);
  ModelParams params = inst.params;
  Rng rng(1);
  CHECK(fit_mask(problem, params, inst.mask, rng) == inst.mask);
  CHECK(params == inst.params);

  cfg.iters = 15;
  cfg.loss_scale = 8.0;
  cfg.sigma_decay_every = 5;
  auto run = [&](std::vector<MaskIterLog>* log) {
    MaskProblem p(inst.data, inst.envs, inst.features, cfg);
    ModelParams q = inst.params;
    Rng r(21);
    return fit_mask(p, q, inst.mask, r, [&](const MaskIterLog& e) {
      if (log) log->push_back(e);
    });
  };
  std::vector<MaskIterLog> log;
  const auto a = run(&log);
  const auto b = run(nullptr);
  CHECK(a == b);
  CHECK(a.m != inst.mask.m);
  CHECK(a.iteration == log.size());
  CHECK(a.sigma == doctest::Approx(inst.mask.sigma * std::pow(0.9, static_cast<double>(log.size() / 5))));
  for (const auto& e : log) {
    CHECK(e.weights.w_erm >= 0.0);
    CHECK(e.weights.w_erm <= 1.0);
    CHECK(e.weights.w_erm + e.weights.w_irm == doctest::Approx(1.0));
  }
  CHECK(((a.m.array() >= 0.0) && (a.m.array() <= 1.0)).all());

  SUBCASE("single environment reduces to regularised erm") {
    EnvPartition single{1, std::vector<std::uint32_t>(inst.data.positives.size(), 0)};
    MaskProblem p(inst.data, single, inst.features, cfg);
    ModelParams q = inst.params;
    Rng r(3);
    fit_mask(p, q, inst.mask, r, [&](const MaskIterLog& e) {
      CHECK(e.irm == 0.0);
      CHECK(e.irm_grad_norm == 0.0);
    });
  }
}

TEST_CASE("mask dump") {
  testing::TempDir dir;
  Rng rng(2);
  auto features = random_features(2, 3, rng);
  set_modalities(features, "V:2,A:1");
  MaskState state = MaskState::constant(3, 0.25);
  state.m(2) = 1.0 / 3.0;
  write_mask(dir / "mask.tsv", state, features);
  const auto text = testing::read_file(dir / "mask.tsv");
  CHECK(text.rfind("0\tV\t0.25\n1\tV\t0.25\n2\tA\t", 0) == 0);
  CHECK(load_mask(dir / "mask.tsv") == state.m);
}
