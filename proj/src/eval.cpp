#include "painvrl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "painvrl/text_io.hpp"

namespace painvrl {
namespace {

std::size_t hits(std::span<const ItemId> ranked, std::span<const ItemId> relevant,
                 std::size_t k) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
    if (std::binary_search(relevant.begin(), relevant.end(), ranked[r])) ++n;
  }
  return n;
}

void check_k(std::size_t k) {
  if (k == 0) throw std::invalid_argument("K must be at least 1");
}

}  // namespace

std::vector<ItemId> rank_topk(std::span<const double> scores, std::size_t k,
                              std::span<const ItemId> excluded) {
  std::vector<bool> skip(scores.size(), false);
  for (ItemId i : excluded) {
    if (i < skip.size()) skip[i] = true;
  }
  std::vector<ItemId> items;
  items.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!skip[i]) items.push_back(static_cast<ItemId>(i));
  }
  auto better = [&](ItemId a, ItemId b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  const std::size_t keep = std::min(k, items.size());
  std::partial_sort(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(keep),
                    items.end(), better);
  items.resize(keep);
  return items;
}

std::vector<ItemId> rank_topk(UserId u, std::size_t k, std::span<const ItemId> excluded,
                              const ModelParams& params, const RowMatrix& content) {
  std::vector<double> scores(params.num_items());
  model_scorer(params, content)(u, scores);
  return rank_topk(scores, k, excluded);
}

double precision_at_k(std::span<const ItemId> ranked, std::span<const ItemId> relevant,
                      std::size_t k) {
  check_k(k);
  return static_cast<double>(hits(ranked, relevant, k)) / static_cast<double>(k);
}

double recall_at_k(std::span<const ItemId> ranked, std::span<const ItemId> relevant,
                   std::size_t k) {
  check_k(k);
  if (relevant.empty()) throw std::invalid_argument("recall needs a relevant item");
  return static_cast<double>(hits(ranked, relevant, k)) /
         static_cast<double>(relevant.size());
}

double ndcg_at_k(std::span<const ItemId> ranked, std::span<const ItemId> relevant,
                 std::size_t k) {
  check_k(k);
  if (relevant.empty()) throw std::invalid_argument("ndcg needs a relevant item");
  double dcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ranked.size()); ++r) {
    if (std::binary_search(relevant.begin(), relevant.end(), ranked[r])) {
      dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
  }
  double ideal = 0.0;
  for (std::size_t r = 0; r < std::min(k, relevant.size()); ++r) {
    ideal += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  }
  return dcg / ideal;
}

Scorer model_scorer(const ModelParams& params, const RowMatrix& content) {
  if (content.rows() != static_cast<Eigen::Index>(params.num_items()) ||
      content.cols() != static_cast<Eigen::Index>(params.content_dim())) {
    throw std::invalid_argument("content does not match model shape");
  }
  // Item content projected once: items x k.
  RowMatrix projected = content * params.projection.transpose();
  return [&params, projected = std::move(projected)](UserId u, std::span<double> out) {
    const Eigen::VectorXd s = params.item_collab * params.user_collab.row(u).transpose() +
                              projected * params.user_content.row(u).transpose();
    std::copy(s.data(), s.data() + s.size(), out.begin());
  };
}

SplitMetrics evaluate_split(const Scorer& scorer, const InteractionSet& train,
                            const InteractionSet& test, std::size_t k,
                            const std::string& name) {
  check_k(k);
  SplitMetrics m;
  m.split = name;
  m.k = k;
  const auto train_items = items_by_user(train);
  const auto test_items = items_by_user(test);
  std::vector<double> scores(test.num_items);
  for (std::size_t u = 0; u < test_items.size(); ++u) {
    const auto& relevant = test_items[u];
    if (relevant.empty()) continue;
    std::span<const ItemId> excluded;
    if (u < train_items.size()) excluded = train_items[u];
    scorer(static_cast<UserId>(u), scores);
    const auto ranked = rank_topk(scores, k, excluded);
    UserMetrics um{static_cast<UserId>(u), precision_at_k(ranked, relevant, k),
                   recall_at_k(ranked, relevant, k), ndcg_at_k(ranked, relevant, k)};
    m.precision += um.precision;
    m.recall += um.recall;
    m.ndcg += um.ndcg;
    m.per_user.push_back(um);
  }
  m.users = m.per_user.size();
  if (m.users > 0) {
    const double n = static_cast<double>(m.users);
    m.precision /= n;
    m.recall /= n;
    m.ndcg /= n;
  }
  return m;
}

MetricTable evaluate(const Scorer& scorer, const SplitSpec& split, std::size_t k) {
  return {evaluate_split(scorer, split.train, split.test_iid, k, "iid"),
          evaluate_split(scorer, split.train, split.test_ood, k, "ood")};
}

MetricTable evaluate(const ModelParams& params, const RowMatrix& content,
                     const SplitSpec& split, std::size_t k) {
  return evaluate(model_scorer(params, content), split, k);
}

void write_metrics(const std::filesystem::path& path, const MetricTable& table) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const SplitMetrics* s : {&table.iid, &table.ood}) {
    const std::string k = std::to_string(s->k);
    out << s->split << "\tprecision\t" << k << '\t' << format_fixed(s->precision, 6) << '\n';
    out << s->split << "\trecall\t" << k << '\t' << format_fixed(s->recall, 6) << '\n';
    out << s->split << "\tndcg\t" << k << '\t' << format_fixed(s->ndcg, 6) << '\n';
  }
}

}  // namespace painvrl
