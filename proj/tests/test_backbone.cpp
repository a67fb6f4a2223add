#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "painvrl/backbone.hpp"
#include "painvrl/checkpoint.hpp"
#include "painvrl/numgrad.hpp"

using namespace painvrl;

namespace {

RowMatrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  RowMatrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = standard_normal(rng);
  }
  return m;
}

ModelParams random_params(std::size_t users, std::size_t items, std::size_t k,
                          std::size_t d, Rng& rng) {
  auto p = ModelParams::zeros(users, items, k, d);
  auto flat = p.flatten();
  for (double& v : flat.values) v = 0.5 * standard_normal(rng);
  p.unflatten(flat.values);
  return p;
}

// Straight-line recomputation of the score with explicit loops.
double loop_score(UserId u, ItemId i, const RowMatrix& content, const ModelParams& p) {
  double s = 0.0;
  for (Eigen::Index a = 0; a < p.user_collab.cols(); ++a) {
    s += p.user_collab(u, a) * p.item_collab(i, a);
  }
  for (Eigen::Index a = 0; a < p.projection.rows(); ++a) {
    double wc = 0.0;
    for (Eigen::Index b = 0; b < p.projection.cols(); ++b) {
      wc += p.projection(a, b) * content(i, b);
    }
    s += p.user_content(u, a) * wc;
  }
  return s;
}

double naive_nll(double x, double sign) { return std::log(1.0 + std::exp(-sign * x)); }

}  // namespace

TEST_CASE("score") {
  const RowMatrix content = RowMatrix::Constant(2, 3, 0.0);
  auto p = ModelParams::zeros(1, 2, 2, 3);
  const std::vector<double> c{3.0, 4.0, 5.0};
  CHECK(score(0, 1, c, p) == 0.0);
  p.user_content(0, 0) = 1.0;
  p.projection(0, 0) = 1.0;
  p.projection(1, 1) = 1.0;
  CHECK(score(0, 1, c, p) == 3.0);

  Rng rng(5);
  const auto q = random_params(3, 4, 3, 5, rng);
  const RowMatrix f = random_matrix(4, 5, rng);
  for (UserId u = 0; u < 3; ++u) {
    for (ItemId i = 0; i < 4; ++i) {
      const std::vector<double> row(f.row(i).data(), f.row(i).data() + 5);
      CHECK(score(u, i, row, q) == doctest::Approx(loop_score(u, i, f, q)).epsilon(1e-13));
    }
  }
  std::vector<double> bad{1.0, NAN, 0.0};
  CHECK_THROWS(score(0, 0, bad, p));
}

TEST_CASE("degree_coeff") {
  CHECK(degree_coeff(1, 1) == 1.0);
  CHECK(std::abs(degree_coeff(2, 3) - 0.43301) < 1e-5);
  CHECK(std::abs(degree_coeff(4, 0) - 0.55902) < 1e-5);
  CHECK_THROWS(degree_coeff(0, 3));
}

TEST_CASE("item_similarity") {
  Eigen::MatrixXd g(2, 2);
  g << 0, 2, 2, 0;
  auto graph = ItemGraph::from_dense(g, 5);
  CHECK(item_similarity(graph, 0, 1) == 1.0);

  Eigen::MatrixXd h(3, 3);
  h << 1, 2, 0, 2, 3, 4, 0, 4, 5;
  graph = ItemGraph::from_dense(h, 5);
  CHECK(item_similarity(graph, 0, 2) == 0.0);
  const double gi = 3, gj = 9, gii = 1, gjj = 3;
  CHECK(item_similarity(graph, 0, 1) * item_similarity(graph, 1, 0) ==
        doctest::Approx(4.0 / ((gi - gii) * (gj - gjj))));

  std::size_t degenerate = 0;
  CHECK(item_similarity(graph, 1, 2, &degenerate) > 0.0);
  CHECK(degenerate == 0);
}

TEST_CASE("neighbour lists are ranked") {
  Rng rng(8);
  std::vector<Pair> pairs;
  for (UserId u = 0; u < 12; ++u) {
    for (ItemId i = 0; i < 9; ++i) {
      if (uniform_unit(rng) < 0.4) pairs.push_back({u, i});
    }
  }
  const auto data = make_interaction_set(pairs, 12, 9);
  const auto graph = ItemGraph::from_interactions(data, 3);
  for (ItemId i = 0; i < 9; ++i) {
    const auto nb = graph.neighbors(i);
    CHECK(nb.size() <= 3);
    double lowest = INFINITY;
    for (const auto& n : nb) {
      CHECK(n.score == item_similarity(graph, i, n.item));
      lowest = std::min(lowest, n.score);
    }
    for (ItemId j = 0; j < 9; ++j) {
      bool listed = false;
      for (const auto& n : nb) listed |= n.item == j;
      if (!listed && j != i && nb.size() == 3) CHECK(item_similarity(graph, i, j) <= lowest);
    }
    CHECK(graph.cooccurrence(i, (i + 1) % 9) == graph.cooccurrence((i + 1) % 9, i));
  }
}

TEST_CASE("loss_O") {
  const RowMatrix content = RowMatrix::Zero(3, 2);
  auto p = ModelParams::zeros(1, 3, 1, 2);
  const std::vector<Pair> pos{{0, 0}}, neg{{0, 1}};
  CHECK(std::abs(loss_O({pos, {}}, content, p) - 0.69315) < 1e-5);

  p.user_collab(0, 0) = 1.0;
  p.item_collab(0, 0) = 50.0;
  p.item_collab(1, 0) = -50.0;
  CHECK(loss_O({pos, neg}, content, p) < 1e-8);
  p.item_collab(0, 0) = -1e4;
  CHECK(std::isfinite(loss_O({pos, neg}, content, p)));
  CHECK(loss_O({pos, {}}, content, p) == doctest::Approx(1e4));

  Rng rng(3);
  const auto q = random_params(3, 4, 2, 3, rng);
  const RowMatrix f = random_matrix(4, 3, rng);
  const std::vector<Pair> bp{{0, 1}, {2, 3}, {1, 0}}, bn{{0, 2}, {2, 0}, {1, 1}};
  double expect = 0.0;
  for (const Pair& x : bp) expect += naive_nll(loop_score(x.user, x.item, f, q), 1.0);
  for (const Pair& x : bn) expect += naive_nll(loop_score(x.user, x.item, f, q), -1.0);
  CHECK(loss_O({bp, bn}, f, q) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("loss_U") {
  const RowMatrix content = RowMatrix::Zero(3, 2);
  Rng rng(4);
  auto p = random_params(2, 3, 2, 2, rng);

  // Every user and item has degree 1, so every weight is 1.
  const auto unit = make_interaction_set({{0, 0}, {1, 1}}, 2, 3);
  const std::vector<Pair> pos{{0, 0}}, neg{{0, 1}};
  CHECK(loss_U({pos, neg}, content, p, unit) ==
        doctest::Approx(loss_O({pos, neg}, content, p)).epsilon(1e-14));

  const auto half = make_interaction_set({{0, 0}, {0, 1}, {1, 0}}, 2, 3);
  CHECK(degree_coeff(2, 2) == 0.5);
  const auto zero = ModelParams::zeros(2, 3, 2, 2);
  CHECK(std::abs(loss_U({pos, {}}, content, zero, half) - 0.34657) < 1e-5);

  const RowMatrix f = random_matrix(3, 2, rng);
  const std::vector<Pair> bp{{0, 0}, {0, 1}, {1, 0}}, bn{{0, 2}, {1, 2}, {1, 1}};
  double expect = 0.0;
  for (const Pair& x : bp) {
    expect += degree_coeff(half.user_degree[x.user], half.item_degree[x.item]) *
              naive_nll(loop_score(x.user, x.item, f, p), 1.0);
  }
  for (const Pair& x : bn) {
    expect += degree_coeff(half.user_degree[x.user], half.item_degree[x.item]) *
              naive_nll(loop_score(x.user, x.item, f, p), -1.0);
  }
  CHECK(loss_U({bp, bn}, f, p, half) == doctest::Approx(expect).epsilon(1e-12));

  const std::vector<Pair> bp2{{0, 0}, {0, 1}, {1, 0}, {0, 0}, {0, 1}, {1, 0}};
  CHECK(loss_U({bp2, {}}, f, p, half) ==
        doctest::Approx(2.0 * loss_U({bp, {}}, f, p, half)).epsilon(1e-14));
}

TEST_CASE("loss_I") {
  const RowMatrix content = RowMatrix::Zero(2, 2);
  const auto zero = ModelParams::zeros(1, 2, 1, 2);
  const std::vector<Pair> pos{{0, 0}};

  Eigen::MatrixXd g(2, 2);
  g << 0, 2, 2, 0;
  CHECK(std::abs(loss_I(pos, ItemGraph::from_dense(g, 5), content, zero) - 0.69315) < 1e-5);
  CHECK(loss_I(pos, ItemGraph::from_dense(g, 0), content, zero) == 0.0);
  CHECK(loss_I(pos, ItemGraph::from_dense(Eigen::MatrixXd::Zero(2, 2), 5), content, zero) ==
        0.0);
}

TEST_CASE("total_loss") {
  Rng rng(12);
  const auto data = make_interaction_set({{0, 0}, {0, 1}, {1, 1}, {2, 2}, {2, 0}}, 3, 4);
  const auto graph = ItemGraph::from_interactions(data, 2);
  const RowMatrix f = random_matrix(4, 3, rng);
  const auto p = random_params(3, 4, 2, 3, rng);
  const std::vector<Pair> neg{{0, 3}, {1, 2}, {2, 3}, {0, 2}, {1, 0}};
  const Batch batch{data.positives, neg};
  const LossContext ctx{data, graph, f};

  CHECK(total_loss(batch, ctx, p, {0.0, 0.0}) == loss_O(batch, f, p));
  LossWeights defaults;
  CHECK(defaults.eta == 1e-4);
  CHECK(defaults.kappa == 0.01);
  const LossWeights w{0.3, 0.7};
  const double expect = loss_O(batch, f, p) + 0.3 * loss_U(batch, f, p, data) +
                        0.7 * loss_I(data.positives, graph, f, p);
  CHECK(total_loss(batch, ctx, p, w) == doctest::Approx(expect).epsilon(1e-13));
  CHECK_THROWS(LossWeights{-1.0, 0.0}.validate());
}

TEST_CASE("grad_total_loss") {
  SUBCASE("finite differences on random tiny instances") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      const std::size_t users = 2 + uniform_index(rng, 4), items = 3 + uniform_index(rng, 3);
      const std::size_t k = 1 + uniform_index(rng, 4), d = 1 + uniform_index(rng, 6);
      std::vector<Pair> pairs;
      for (UserId u = 0; u < users; ++u) {
        pairs.push_back({u, static_cast<ItemId>(uniform_index(rng, items - 1))});
        if (uniform_unit(rng) < 0.5) pairs.push_back({u, static_cast<ItemId>(items - 2)});
      }
      auto data = make_interaction_set(pairs, users, items);
      data = sample_negatives(data, 1, rng);
      const auto graph = ItemGraph::from_interactions(data, 2);
      const RowMatrix f = random_matrix(static_cast<Eigen::Index>(items),
                                        static_cast<Eigen::Index>(d), rng);
      const auto p = random_params(users, items, k, d, rng);
      const Batch batch{data.positives, data.negatives};
      const LossContext ctx{data, graph, f};
      const LossWeights w{0.5, 0.5};

      const auto analytic = grad_total_loss(batch, ctx, p, w).flatten();
      const auto x = p.flatten();
      const auto numeric = finite_diff_grad(
          [&](std::span<const double> v) {
            auto q = p;
            q.unflatten(v);
            return total_loss(batch, ctx, q, w);
          },
          x.values);
      const auto report = check_gradient(analytic.values, numeric, 1e-4);
      CHECK_MESSAGE(report.pass, "seed " << seed << " rel " << report.max_rel_diff);
    }
  }
  SUBCASE("single pair touches only its rows") {
    Rng rng(2);
    const auto data = make_interaction_set({{1, 2}, {0, 0}}, 3, 4);
    const auto graph = ItemGraph::from_interactions(data, 0);
    const RowMatrix f = random_matrix(4, 2, rng);
    const auto p = random_params(3, 4, 2, 2, rng);
    const std::vector<Pair> pos{{1, 2}};
    const auto g = grad_total_loss({pos, {}}, {data, graph, f}, p, {});
    for (Eigen::Index u = 0; u < 3; ++u) {
      CHECK((g.user_collab.row(u).norm() != 0.0) == (u == 1));
      CHECK((g.user_content.row(u).norm() != 0.0) == (u == 1));
    }
    for (Eigen::Index i = 0; i < 4; ++i) CHECK((g.item_collab.row(i).norm() != 0.0) == (i == 2));
    CHECK(g.projection.norm() != 0.0);
    CHECK(g.attn_invariant.hidden_w.norm() == 0.0);

    const std::vector<Pair> twice{{1, 2}, {1, 2}};
    const auto g2 = grad_total_loss({twice, {}}, {data, graph, f}, p, {0.0, 0.0});
    const auto g1 = grad_total_loss({pos, {}}, {data, graph, f}, p, {0.0, 0.0});
    CHECK((g2.user_collab - 2.0 * g1.user_collab).norm() < 1e-14);
    CHECK((g2.projection - 2.0 * g1.projection).norm() < 1e-14);
  }
}

TEST_CASE("train") {
  auto data = make_interaction_set({{0, 0}}, 1, 2);
  const auto graph = ItemGraph::from_interactions(data, 1);
  Rng rng(1);
  const RowMatrix f = random_matrix(2, 2, rng);
  const auto init = ModelParams::init(1, 2, 4, 2, 0, rng);
  for (double v : init.flatten().values) CHECK(std::abs(v) <= 0.5 / 4);

  TrainConfig cfg;
  cfg.epochs = 0;
  Rng r0(3);
  CHECK(train(init, data, graph, f, cfg, r0) == init);

  cfg.epochs = 10;
  cfg.adam.learning_rate = 0.01;
  const std::vector<Pair> pos{{0, 0}}, neg{{0, 1}};
  std::vector<double> losses{loss_O({pos, neg}, f, init)};
  Rng r1(3);
  const auto trained = train(init, data, graph, f, cfg, r1,
                             [&](std::size_t, const ModelParams& p, double) {
                               losses.push_back(loss_O({pos, neg}, f, p));
                             });
  REQUIRE(losses.size() == 11);
  for (std::size_t e = 1; e < losses.size(); ++e) CHECK(losses[e] < losses[e - 1]);

  Rng r2(3);
  CHECK(train(init, data, graph, f, cfg, r2) == trained);
}

TEST_CASE("checkpoint round trip") {
  testing::TempDir dir;
  Rng rng(6);
  const auto p = random_params(3, 4, 2, 5, rng);
  Checkpoint ck;
  store_model(ck, "model", p);
  ck.put_scalar("sigma", 0.25);
  ck.put("mask", 1, 3, {0.1, 0.5, 1.0});
  ck.save(dir / "a.ckpt");
  const auto back = Checkpoint::load(dir / "a.ckpt");
  CHECK(back == ck);
  CHECK(load_model(back, "model") == p);
  CHECK(back.scalar("sigma") == 0.25);
  CHECK_THROWS(back.get("missing"));

  const auto bytes = testing::read_file(dir / "a.ckpt");
  CHECK(bytes.substr(0, 8) == "PIRLCKPT");
  testing::write_file(dir / "b.ckpt", "NOTACKPT" + bytes.substr(8));
  CHECK_THROWS(Checkpoint::load(dir / "b.ckpt"));
  testing::write_file(dir / "c.ckpt", bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS(Checkpoint::load(dir / "c.ckpt"));
}
