#include <cmath>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "painvrl/eval.hpp"

using namespace painvrl;

namespace {

struct Brute {
  double p = 0, r = 0, n = 0;
};

// Rank of item i = number of candidates that beat it; metrics summed term by term.
Brute brute_user(const std::vector<double>& scores, const std::set<ItemId>& train,
                 const std::set<ItemId>& test, std::size_t k) {
  std::vector<ItemId> cand;
  for (ItemId i = 0; i < scores.size(); ++i) {
    if (!train.count(i)) cand.push_back(i);
  }
  Brute b;
  double dcg = 0, hits = 0;
  for (ItemId i : cand) {
    std::size_t rank = 1;
    for (ItemId j : cand) {
      if (scores[j] > scores[i] || (scores[j] == scores[i] && j < i)) ++rank;
    }
    if (rank <= k && test.count(i)) {
      hits += 1;
      dcg += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
    }
  }
  double ideal = 0;
  for (std::size_t r = 1; r <= std::min(k, test.size()); ++r) ideal += 1.0 / std::log2(r + 1.0);
  b.p = hits / static_cast<double>(k);
  b.r = hits / static_cast<double>(test.size());
  b.n = dcg / ideal;
  return b;
}

}  // namespace

TEST_CASE("rank_topk") {
  const std::vector<ItemId> none;
  CHECK(rank_topk(std::vector<double>{0.1, 0.9, 0.5}, 2, none) == std::vector<ItemId>{1, 2});
  const std::vector<ItemId> all{0, 1, 2};
  CHECK(rank_topk(std::vector<double>{0.1, 0.9, 0.5}, 2, all).empty());
  CHECK(rank_topk(std::vector<double>{0.3, 0.3, 0.3}, 2, none) == std::vector<ItemId>{0, 1});
  const std::vector<ItemId> one{1};
  CHECK(rank_topk(std::vector<double>{0.1, 0.9, 0.5}, 5, one) == std::vector<ItemId>{2, 0});
}

TEST_CASE("metric examples") {
  const std::vector<ItemId> ranked{4, 7, 0, 1, 2, 3, 5, 6, 8, 9};
  const std::vector<ItemId> both{4, 7};
  CHECK(precision_at_k(ranked, both, 10) == doctest::Approx(0.2));
  CHECK(recall_at_k(ranked, both, 10) == 1.0);
  CHECK(ndcg_at_k(ranked, both, 10) == doctest::Approx(1.0));

  const std::vector<ItemId> second{7};
  CHECK(std::abs(ndcg_at_k(ranked, second, 10) - 0.63093) <= 1e-5);

  const std::vector<ItemId> miss{11};
  CHECK(precision_at_k(ranked, miss, 10) == 0.0);
  CHECK(recall_at_k(ranked, miss, 10) == 0.0);
  CHECK(ndcg_at_k(ranked, miss, 10) == 0.0);
}

TEST_CASE("evaluate matches a brute-force oracle") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t users = 1 + uniform_index(rng, 5);
    const std::size_t items = 2 + uniform_index(rng, 7);
    const std::size_t k = 1 + uniform_index(rng, 6);
    std::vector<std::vector<double>> table(users, std::vector<double>(items));
    for (auto& row : table) {
      // coarse values so ties occur
      for (auto& v : row) v = static_cast<double>(uniform_index(rng, 4));
    }
    std::vector<Pair> tr, te;
    std::vector<std::set<ItemId>> trs(users), tes(users);
    for (UserId u = 0; u < users; ++u) {
      for (ItemId i = 0; i < items; ++i) {
        const double roll = uniform_unit(rng);
        if (roll < 0.25) {
          tr.push_back({u, i});
          trs[u].insert(i);
        } else if (roll < 0.5) {
          te.push_back({u, i});
          tes[u].insert(i);
        }
      }
    }
    if (te.empty()) continue;
    if (tr.empty()) {
      // keep the train set non-empty without touching test items
      bool placed = false;
      for (UserId u = 0; u < users && !placed; ++u) {
        for (ItemId i = 0; i < items && !placed; ++i) {
          if (!tes[u].count(i)) {
            tr.push_back({u, i});
            trs[u].insert(i);
            placed = true;
          }
        }
      }
      if (!placed) continue;
    }
    const auto train = make_interaction_set(tr, users, items);
    const auto test = make_interaction_set(te, users, items);
    const Scorer scorer = [&](UserId u, std::span<double> out) {
      std::copy(table[u].begin(), table[u].end(), out.begin());
    };
    const auto got = evaluate_split(scorer, train, test, k, "iid");
    double p = 0, r = 0, n = 0, count = 0;
    for (UserId u = 0; u < users; ++u) {
      if (tes[u].empty()) continue;
      const Brute b = brute_user(table[u], trs[u], tes[u], k);
      p += b.p;
      r += b.r;
      n += b.n;
      count += 1;
    }
    CHECK(got.users == static_cast<std::size_t>(count));
    CHECK(got.precision == doctest::Approx(p / count).epsilon(1e-12));
    CHECK(got.recall == doctest::Approx(r / count).epsilon(1e-12));
    CHECK(got.ndcg == doctest::Approx(n / count).epsilon(1e-12));
    for (const auto& um : got.per_user) {
      CHECK(um.precision >= 0.0);
      CHECK(um.recall <= 1.0);
      CHECK(um.ndcg <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("random scores give recall near K over the catalogue") {
  constexpr std::size_t users = 60, items = 100, k = 10;
  std::vector<Pair> tr, te;
  for (UserId u = 0; u < users; ++u) {
    for (ItemId j = 0; j < 5; ++j) te.push_back({u, static_cast<ItemId>((u * 7 + j * 13) % items)});
  }
  const auto train = make_interaction_set({}, users, items);
  const auto test = make_interaction_set(te, users, items);
  std::vector<double> per_seed;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Scorer scorer = [&](UserId, std::span<double> out) {
      for (auto& v : out) v = uniform_unit(rng);
    };
    per_seed.push_back(evaluate_split(scorer, train, test, k, "iid").recall);
  }
  double mean = 0;
  for (double v : per_seed) mean += v;
  mean /= 20.0;
  double var = 0;
  for (double v : per_seed) var += (v - mean) * (v - mean);
  const double se = std::sqrt(var / 19.0 / 20.0);
  CHECK(std::abs(mean - static_cast<double>(k) / items) <= 3.0 * se);
}

TEST_CASE("exclusion, bounds and monotone recall") {
  Rng rng(21);
  const std::size_t users = 8, items = 30;
  std::vector<Pair> tr, te;
  for (UserId u = 0; u < users; ++u) {
    for (ItemId i = 0; i < items; ++i) {
      const double roll = uniform_unit(rng);
      if (roll < 0.2) tr.push_back({u, i});
      else if (roll < 0.3) te.push_back({u, i});
    }
  }
  const auto train = make_interaction_set(tr, users, items);
  const auto test = make_interaction_set(te, users, items);
  RowMatrix scores(users, items);
  for (Eigen::Index a = 0; a < scores.size(); ++a) scores.data()[a] = uniform_unit(rng);
  const Scorer scorer = [&](UserId u, std::span<double> out) {
    for (std::size_t i = 0; i < items; ++i) out[i] = scores(u, i);
  };
  const auto by_user = items_by_user(train);
  for (UserId u = 0; u < users; ++u) {
    std::vector<double> row(items);
    scorer(u, row);
    for (ItemId i : rank_topk(row, items, by_user[u])) {
      CHECK_FALSE(std::binary_search(by_user[u].begin(), by_user[u].end(), i));
    }
  }
  double last = 0.0;
  for (std::size_t k = 1; k <= items; ++k) {
    const auto m = evaluate_split(scorer, train, test, k, "iid");
    CHECK(m.recall >= last);
    last = m.recall;
    for (double v : {m.precision, m.recall, m.ndcg}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0 + 1e-12);
    }
  }
  CHECK(last == doctest::Approx(1.0));
}

TEST_CASE("perfect ranking reaches the per-user maxima") {
  const auto train = make_interaction_set({{0, 0}}, 2, 6);
  const auto test = make_interaction_set({{0, 3}, {0, 5}, {1, 1}}, 2, 6);
  const Scorer scorer = [&](UserId u, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (const Pair& p : test.positives) {
      if (p.user == u) out[p.item] = 1.0;
    }
  };
  const auto m = evaluate_split(scorer, train, test, 3, "ood");
  CHECK(m.recall == 1.0);
  CHECK(m.ndcg == doctest::Approx(1.0));
  CHECK(m.precision == doctest::Approx((2.0 / 3.0 + 1.0 / 3.0) / 2.0));
}

TEST_CASE("write_metrics") {
  testing::TempDir dir;
  MetricTable t;
  t.iid = {"iid", 10, 3, 0.2, 1.0, 0.630929753, {}};
  t.ood = {"ood", 10, 2, 0.0, 0.0, 0.0, {}};
  write_metrics(dir / "m.tsv", t);
  CHECK(testing::read_file(dir / "m.tsv") ==
        "iid\tprecision\t10\t0.200000\n"
        "iid\trecall\t10\t1.000000\n"
        "iid\tndcg\t10\t0.630930\n"
        "ood\tprecision\t10\t0.000000\n"
        "ood\trecall\t10\t0.000000\n"
        "ood\tndcg\t10\t0.000000\n");
}
