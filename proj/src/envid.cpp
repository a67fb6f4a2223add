#include "painvrl/envid.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace painvrl {

void IdentifyConfig::validate() const {
  if (num_envs == 0) throw std::invalid_argument("num_envs must be at least 1");
  if (max_rounds == 0) throw std::invalid_argument("max_rounds must be at least 1");
  if (embedding_size == 0) throw std::invalid_argument("embedding_size must be at least 1");
  train.weights.validate();
}

EnvPartition init_partition(const InteractionSet& data, std::size_t num_envs, Rng& rng) {
  if (num_envs == 0) throw std::invalid_argument("num_envs must be at least 1");
  EnvPartition p;
  p.num_envs = num_envs;
  p.assignment.resize(data.positives.size());
  for (auto& a : p.assignment) a = static_cast<std::uint32_t>(uniform_index(rng, num_envs));
  return p;
}

std::size_t repair_empty(EnvPartition& partition, Rng& rng) {
  std::size_t repaired = 0;
  for (std::size_t e = 0; e < partition.num_envs; ++e) {
    const auto sizes = partition.sizes();
    if (sizes[e] > 0) continue;
    const auto largest = static_cast<std::size_t>(
        std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    if (sizes[largest] < 2) {
      throw std::invalid_argument("too few interactions to fill every environment");
    }
    std::vector<std::size_t> donors;
    for (std::size_t k = 0; k < partition.assignment.size(); ++k) {
      if (partition.assignment[k] == largest) donors.push_back(k);
    }
    partition.assignment[donors[uniform_index(rng, donors.size())]] =
        static_cast<std::uint32_t>(e);
    ++repaired;
  }
  return repaired;
}

EnvModels train_env_models(EnvPartition& partition, const InteractionSet& data,
                           const RowMatrix& content, const IdentifyConfig& config,
                           Rng& rng, const EnvModels* init, std::size_t* repaired) {
  config.validate();
  if (partition.num_envs != config.num_envs) {
    throw std::invalid_argument("partition and config disagree on num_envs");
  }
  if (init && init->size() != config.num_envs) {
    throw std::invalid_argument("initial models do not match num_envs");
  }
  partition.validate(data);
  const std::size_t fixed = repair_empty(partition, rng);
  if (repaired) *repaired = fixed;

  EnvModels out;
  out.models.reserve(config.num_envs);
  TrainConfig tc = config.train;
  tc.epochs = config.epochs;
  if (config.exclude_all_positives) tc.negative_exclusions = &data;
  for (std::size_t e = 0; e < config.num_envs; ++e) {
    const InteractionSet subset = partition.subset(data, e);
    const ItemGraph graph = ItemGraph::from_interactions(subset, config.num_neighbors);
    ModelParams start = init ? init->models[e]
                             : ModelParams::init(data.num_users, data.num_items,
                                                 config.embedding_size,
                                                 static_cast<std::size_t>(content.cols()),
                                                 config.hidden_width, rng);
    out.models.push_back(train(std::move(start), subset, graph, content, tc, rng));
  }
  return out;
}

std::size_t assign_environment(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("no environment scores");
  std::size_t best = 0;
  for (std::size_t e = 1; e < scores.size(); ++e) {
    if (scores[e] > scores[best]) best = e;
  }
  return best;
}

std::size_t assign_environment(UserId u, ItemId i, const EnvModels& models,
                               const RowMatrix& content) {
  std::vector<double> scores(models.size());
  const std::span<const double> row(content.row(i).data(),
                                    static_cast<std::size_t>(content.cols()));
  for (std::size_t e = 0; e < models.size(); ++e) scores[e] = score(u, i, row, models.models[e]);
  return assign_environment(scores);
}

IdentifyResult identify(const InteractionSet& data, const RowMatrix& content,
                        const IdentifyConfig& config, Rng& rng,
                        std::optional<EnvPartition> initial, const IdentifyLogFn& log) {
  config.validate();
  if (static_cast<std::size_t>(content.rows()) != data.num_items) {
    throw std::invalid_argument("content rows do not match the catalogue");
  }
  IdentifyResult result;
  result.partition = initial ? std::move(*initial) : init_partition(data, config.num_envs, rng);
  for (std::size_t round = 1; round <= config.max_rounds; ++round) {
    IdentifyRound info;
    info.round = round;
    result.models = train_env_models(result.partition, data, content, config, rng,
                                     round > 1 ? &result.models : nullptr, &info.repaired);
    for (std::size_t k = 0; k < data.positives.size(); ++k) {
      const Pair p = data.positives[k];
      const auto e = static_cast<std::uint32_t>(
          assign_environment(p.user, p.item, result.models, content));
      if (e != result.partition.assignment[k]) {
        result.partition.assignment[k] = e;
        ++info.reassigned;
      }
    }
    result.rounds.push_back(info);
    if (log) log(info);
    if (info.reassigned == 0) {
      result.converged = true;
      break;
    }
  }
  return result;
}

double adjusted_rand_index(std::span<const std::uint32_t> a,
                           std::span<const std::uint32_t> b) {
  if (a.size() != b.size()) throw std::invalid_argument("labelings differ in length");
  const double n = static_cast<double>(a.size());
  if (a.size() < 2) return 1.0;
  auto pairs = [](double c) { return c * (c - 1.0) / 2.0; };
  std::map<std::pair<std::uint32_t, std::uint32_t>, double> joint;
  std::map<std::uint32_t, double> rows, cols;
  for (std::size_t k = 0; k < a.size(); ++k) {
    joint[{a[k], b[k]}] += 1.0;
    rows[a[k]] += 1.0;
    cols[b[k]] += 1.0;
  }
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [key, c] : joint) index += pairs(c);
  for (const auto& [key, c] : rows) sum_a += pairs(c);
  for (const auto& [key, c] : cols) sum_b += pairs(c);
  const double expected = sum_a * sum_b / pairs(n);
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace painvrl
