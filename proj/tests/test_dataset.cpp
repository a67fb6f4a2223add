#include <algorithm>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "painvrl/dataset.hpp"
#include "painvrl/text_io.hpp"

using namespace painvrl;

TEST_CASE("text helpers") {
  std::int64_t v = 0;
  CHECK(parse_int("42", v));
  CHECK(v == 42);
  CHECK_FALSE(parse_int("4x", v));
  CHECK_FALSE(parse_int("", v));
  double x = 0;
  CHECK(parse_double("-1.5e3", x));
  CHECK(x == -1500.0);
  CHECK_FALSE(parse_double("1.0abc", x));
  for (double d : {0.1, 1.0 / 3.0, -2.5e-300, 123456789.125}) {
    double back = 0;
    REQUIRE(parse_double(format_double(d), back));
    CHECK(back == d);
  }
  CHECK(format_fixed(0.630929753, 6) == "0.630930");
  auto f = split_fields("a\tb\t", '\t');
  REQUIRE(f.size() == 3);
  CHECK(f[2].empty());
}

TEST_CASE("rng streams") {
  Rng a = make_rng(7, "x", 0), b = make_rng(7, "x", 0), c = make_rng(7, "x", 1);
  CHECK(a() == b());
  CHECK(make_rng(7, "x", 0)() != c());
  CHECK(sub_seed(7, "x") != sub_seed(7, "y"));
  Rng r(1);
  for (int t = 0; t < 1000; ++t) {
    CHECK(uniform_index(r, 5) < 5);
    const double u = uniform_unit(r);
    CHECK((u >= 0.0 && u < 1.0));
  }
}

TEST_CASE("load_interactions") {
  testing::TempDir dir;
  SUBCASE("counts") {
    testing::write_file(dir / "a.tsv", "10\t1\n10\t2\n20\t1\n");
    const auto s = load_interactions(dir / "a.tsv");
    CHECK(s.positives.size() == 3);
    CHECK(s.num_users == 2);
    CHECK(s.num_items == 2);
    CHECK(s.negatives.empty());
    CHECK(s.user_degree == std::vector<std::size_t>{2, 1});
    CHECK(s.item_degree == std::vector<std::size_t>{2, 1});
  }
  SUBCASE("non-integer field") {
    testing::write_file(dir / "a.tsv", "a\tb\n");
    try {
      load_interactions(dir / "a.tsv");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 1);
    }
  }
  SUBCASE("wrong field count on line 2") {
    testing::write_file(dir / "a.tsv", "1\t2\n1\t2\t3\n");
    try {
      load_interactions(dir / "a.tsv");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 2);
    }
  }
  SUBCASE("duplicates collapse") {
    testing::write_file(dir / "a.tsv", "1\t2\n1\t2\n");
    CHECK(load_interactions(dir / "a.tsv").positives.size() == 1);
  }
  SUBCASE("empty file") {
    testing::write_file(dir / "a.tsv", "");
    CHECK_THROWS_WITH_AS(load_interactions(dir / "a.tsv"),
                         doctest::Contains("no interactions"), ParseError);
  }
  SUBCASE("first appearance order and idempotence") {
    testing::write_file(dir / "a.tsv", "7\t9\n3\t9\n7\t4\n");
    IdMap ids;
    const auto s = load_interactions(dir / "a.tsv", ids);
    CHECK(ids.users == std::vector<std::int64_t>{7, 3});
    CHECK(ids.items == std::vector<std::int64_t>{9, 4});
    CHECK(s.positives[2] == Pair{0, 1});
    CHECK(load_interactions(dir / "a.tsv") == load_interactions(dir / "a.tsv"));
  }
}

TEST_CASE("features round trip") {
  testing::TempDir dir;
  testing::write_file(dir / "i.tsv", "5\t1\n6\t2\n");
  testing::write_file(dir / "f.tsv", "2\t1.5,2,3\n1\t-1,0,0.25\n");
  IdMap ids;
  load_interactions(dir / "i.tsv", ids);
  auto table = load_features(dir / "f.tsv", ids, true);
  CHECK(table.dim == 3);
  CHECK(table.vectors(1, 0) == 1.5);
  CHECK(table.vectors(0, 2) == 0.25);
  set_modalities(table, "V:2,T:1");
  CHECK(table.modality_of(1) == "V");
  CHECK(table.modality_of(2) == "T");
  CHECK_THROWS(set_modalities(table, "V:2,T:2"));
  write_features(dir / "g.tsv", table, &ids);
  IdMap ids2 = ids;
  auto again = load_features(dir / "g.tsv", ids2, true);
  CHECK(again.vectors == table.vectors);

  testing::write_file(dir / "bad.tsv", "1\t1,2\n2\t1,2,3\n");
  IdMap ids3 = ids;
  CHECK_THROWS_AS(load_features(dir / "bad.tsv", ids3, true), ParseError);
}

TEST_CASE("sample_negatives") {
  const auto s = make_interaction_set({{0, 0}, {1, 2}}, 2, 4);
  SUBCASE("count and validity") {
    Rng rng(3);
    const auto n = sample_negatives(s, 3, rng);
    CHECK(n.negatives.size() == 6);
    std::set<Pair> pos(s.positives.begin(), s.positives.end());
    for (const Pair& p : n.negatives) CHECK(pos.count(p) == 0);
    n.validate();
  }
  SUBCASE("exhausted user") {
    const auto full = make_interaction_set({{0, 0}, {0, 1}, {1, 0}}, 2, 2);
    Rng rng(1);
    CHECK_THROWS_WITH(sample_negatives(full, 1, rng), doctest::Contains("user 0"));
  }
  SUBCASE("determinism") {
    Rng a(11), b(11);
    CHECK(sample_negatives(s, 2, a).negatives == sample_negatives(s, 2, b).negatives);
  }
  SUBCASE("exclusions") {
    const auto extra = make_interaction_set({{0, 1}, {0, 2}}, 2, 4);
    Rng rng(5);
    const auto n = sample_negatives(s, 20, rng, &extra);
    for (const Pair& p : n.negatives) {
      if (p.user == 0) CHECK(p.item == 3);
    }
  }
}

TEST_CASE("split_iid_ood") {
  std::vector<Pair> pairs;
  for (UserId u = 0; u < 10; ++u) {
    for (ItemId i = 0; i < 10; ++i) pairs.push_back({u, i});
  }
  const auto data = make_interaction_set(pairs, 10, 10);
  EnvPartition envs;
  envs.num_envs = 2;
  envs.assignment.assign(100, 0);
  for (std::size_t k = 0; k < 10; ++k) envs.assignment[k * 10 + 3] = 1;

  SUBCASE("90/10") {
    Rng rng(0);
    const auto split = split_iid_ood(data, envs, 0.1, rng);
    CHECK(split.train.positives.size() == 81);
    CHECK(split.test_iid.positives.size() == 9);
    CHECK(split.test_ood.positives.size() == 10);
    std::set<Pair> all;
    for (const auto* s : {&split.train, &split.test_iid, &split.test_ood}) {
      for (const Pair& p : s->positives) CHECK(all.insert(p).second);
    }
    CHECK(all.size() == 100);
    for (const Pair& p : split.test_ood.positives) CHECK(p.item == 3);
  }
  SUBCASE("tie goes to env 0") {
    const auto small = make_interaction_set(
        std::vector<Pair>(pairs.begin(), pairs.begin() + 20), 10, 10);
    EnvPartition tie;
    tie.num_envs = 2;
    tie.assignment.assign(20, 0);
    std::fill(tie.assignment.begin() + 10, tie.assignment.end(), 1u);
    Rng rng(0);
    const auto split = split_iid_ood(small, tie, 0.1, rng);
    CHECK(split.test_ood.positives.front() == small.positives[10]);
    CHECK(split.train.positives.size() == 9);
  }
  SUBCASE("bad inputs") {
    Rng rng(0);
    CHECK_THROWS(split_iid_ood(data, envs, 0.0, rng));
    EnvPartition empty = envs;
    std::fill(empty.assignment.begin(), empty.assignment.end(), 0u);
    CHECK_THROWS_WITH(split_iid_ood(data, empty, 0.1, rng), doctest::Contains("empty"));
  }
  SUBCASE("manifest round trip") {
    testing::TempDir dir;
    Rng rng(4);
    const auto split = split_iid_ood(data, envs, 0.1, rng);
    IdMap ids;
    for (int k = 0; k < 10; ++k) {
      ids.users.push_back(100 + k);
      ids.items.push_back(200 + k);
    }
    write_split(dir.path(), split, ids);
    IdMap loaded;
    const auto back = load_split(dir.path(), loaded);
    CHECK(loaded == ids);
    CHECK(back.train.positives == split.train.positives);
    CHECK(back.test_iid.positives == split.test_iid.positives);
    CHECK(back.test_ood.positives == split.test_ood.positives);
    CHECK(back.ratio == split.ratio);
  }
}

TEST_CASE("make_synthetic") {
  SyntheticSpec spec;
  spec.num_users = 30;
  spec.num_items = 40;
  spec.seed = 9;
  const auto a = make_synthetic(spec);
  CHECK(a.features.dim == 8);
  CHECK(a.data.positives.size() == 30 * 2);
  a.data.validate();
  a.envs.validate(a.data);
  const auto b = make_synthetic(spec);
  CHECK(a.data == b.data);
  CHECK(a.features == b.features);
  CHECK(a.envs == b.envs);

  spec.flip_strength = 0.0;
  spec.num_envs_true = 4;
  const auto same = make_synthetic(spec);
  for (const auto& signs : same.spurious_signs) CHECK(signs == same.spurious_signs[0]);

  spec.flip_strength = 1.0;
  const auto flipped = make_synthetic(spec);
  for (std::size_t e = 1; e < 4; ++e) {
    for (int s : flipped.spurious_signs[e]) CHECK(s == -1);
  }

  spec.density = 0.001;
  CHECK_THROWS_WITH(make_synthetic(spec), doctest::Contains("unreachable"));
  spec.density = 0.05;
  spec.d_spu = 0;
  CHECK_THROWS(make_synthetic(spec));
}
