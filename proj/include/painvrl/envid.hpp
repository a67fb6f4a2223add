#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "painvrl/backbone.hpp"
#include "painvrl/dataset.hpp"
#include "painvrl/rng.hpp"

namespace painvrl {

// One backbone model per environment.
struct EnvModels {
  std::vector<ModelParams> models;

  std::size_t size() const { return models.size(); }
  bool operator==(const EnvModels&) const = default;
};

struct IdentifyConfig {
  std::size_t num_envs = 10;
  std::size_t max_rounds = 10;
  // Backbone epochs per environment per round.
  std::size_t epochs = 2;
  std::size_t embedding_size = 64;
  std::size_t hidden_width = 0;
  std::size_t num_neighbors = 10;
  TrainConfig train;
  // Negatives of every environment avoid all of the user's positives, not
  // only those inside the environment.
  bool exclude_all_positives = true;

  void validate() const;
};

// Uniform random assignment of every positive.
EnvPartition init_partition(const InteractionSet& data, std::size_t num_envs, Rng& rng);

// Moves one random interaction from the largest environment into every
// empty one. Returns how many environments were repaired.
std::size_t repair_empty(EnvPartition& partition, Rng& rng);

// Trains one model per environment on its subset with `content` (one row of
// Psi per item). Models start from `init` when given, else from fresh
// initialisations drawn from `rng`. Empty environments are repaired first.
EnvModels train_env_models(EnvPartition& partition, const InteractionSet& data,
                           const RowMatrix& content, const IdentifyConfig& config,
                           Rng& rng, const EnvModels* init = nullptr,
                           std::size_t* repaired = nullptr);

// Index of the largest score; ties go to the lowest index.
std::size_t assign_environment(std::span<const double> scores);
std::size_t assign_environment(UserId u, ItemId i, const EnvModels& models,
                               const RowMatrix& content);

struct IdentifyRound {
  std::size_t round = 0;
  std::size_t reassigned = 0;
  std::size_t repaired = 0;
};

struct IdentifyResult {
  EnvPartition partition;
  EnvModels models;
  std::vector<IdentifyRound> rounds;
  bool converged = false;
};

using IdentifyLogFn = std::function<void(const IdentifyRound&)>;

// Alternates train_env_models and argmax reassignment until no interaction
// moves or max_rounds passes have run.
IdentifyResult identify(const InteractionSet& data, const RowMatrix& content,
                        const IdentifyConfig& config, Rng& rng,
                        std::optional<EnvPartition> initial = std::nullopt,
                        const IdentifyLogFn& log = {});

// Adjusted Rand index of two labelings of the same items.
double adjusted_rand_index(std::span<const std::uint32_t> a,
                           std::span<const std::uint32_t> b);

}  // namespace painvrl
