#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "painvrl/backbone.hpp"
#include "painvrl/dataset.hpp"

namespace painvrl {

// Top-K items by descending score, ties to the lower id. Items flagged in
// `excluded` are dropped before truncation.
std::vector<ItemId> rank_topk(std::span<const double> scores, std::size_t k,
                              std::span<const ItemId> excluded);
std::vector<ItemId> rank_topk(UserId u, std::size_t k, std::span<const ItemId> excluded,
                              const ModelParams& params, const RowMatrix& content);

// `relevant` must be sorted ascending.
double precision_at_k(std::span<const ItemId> ranked, std::span<const ItemId> relevant,
                      std::size_t k);
double recall_at_k(std::span<const ItemId> ranked, std::span<const ItemId> relevant,
                   std::size_t k);
double ndcg_at_k(std::span<const ItemId> ranked, std::span<const ItemId> relevant,
                 std::size_t k);

struct UserMetrics {
  UserId user = 0;
  double precision = 0.0;
  double recall = 0.0;
  double ndcg = 0.0;
};

struct SplitMetrics {
  std::string split;
  std::size_t k = 0;
  std::size_t users = 0;  // users with at least one test positive
  double precision = 0.0;
  double recall = 0.0;
  double ndcg = 0.0;
  std::vector<UserMetrics> per_user;
};

struct MetricTable {
  SplitMetrics iid;
  SplitMetrics ood;
};

// Fills `out` (length num_items) with the scores of user u.
using Scorer = std::function<void(UserId u, std::span<double> out)>;

Scorer model_scorer(const ModelParams& params, const RowMatrix& content);

// Macro-averaged metrics over the users of `test` with test positives,
// ranking the full catalogue minus each user's `train` positives.
SplitMetrics evaluate_split(const Scorer& scorer, const InteractionSet& train,
                            const InteractionSet& test, std::size_t k,
                            const std::string& name);
MetricTable evaluate(const Scorer& scorer, const SplitSpec& split, std::size_t k);
MetricTable evaluate(const ModelParams& params, const RowMatrix& content,
                     const SplitSpec& split, std::size_t k);

// `split<TAB>metric<TAB>K<TAB>value` rows, six fractional digits.
void write_metrics(const std::filesystem::path& path, const MetricTable& table);

}  // namespace painvrl
