#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "painvrl/rng.hpp"

namespace painvrl {

using UserId = std::uint32_t;
using ItemId = std::uint32_t;
using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// A single labelled user-item observation.
struct Interaction {
  UserId user = 0;
  ItemId item = 0;
  bool label = true;
};

struct Pair {
  UserId user = 0;
  ItemId item = 0;
  auto operator<=>(const Pair&) const = default;
};

// Thrown for malformed input files. `line` is 1-based, 0 when not applicable.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Positive pairs (deduplicated, first-appearance order), sampled negatives
// and per-node positive degrees.
struct InteractionSet {
  std::vector<Pair> positives;
  std::vector<Pair> negatives;
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::vector<std::size_t> user_degree;
  std::vector<std::size_t> item_degree;

  // Recomputes both degree vectors from `positives`.
  void recount_degrees();
  // Throws std::invalid_argument when an invariant is violated.
  void validate() const;

  bool operator==(const InteractionSet&) const = default;
};

// Builds a set from explicit pairs; duplicates are dropped.
InteractionSet make_interaction_set(const std::vector<Pair>& positives,
                                    std::size_t num_users,
                                    std::size_t num_items);

// Positive items of every user, sorted ascending.
std::vector<std::vector<ItemId>> items_by_user(const InteractionSet& set);

// Raw file ids for every dense index.
struct IdMap {
  std::vector<std::int64_t> users;
  std::vector<std::int64_t> items;

  std::uint32_t user_index(std::int64_t raw, bool extend);
  std::uint32_t item_index(std::int64_t raw, bool extend);

  bool operator==(const IdMap&) const = default;
};

// Reads `user<TAB>item` lines. Ids unseen so far are appended to `ids` in
// first-appearance order unless `frozen` is set, in which case an unknown id
// is a ParseError.
InteractionSet load_interactions(const std::filesystem::path& path,
                                 IdMap& ids, bool frozen = false);
InteractionSet load_interactions(const std::filesystem::path& path);

void write_interactions(const std::filesystem::path& path,
                        const std::vector<Pair>& pairs, const IdMap* ids);

void write_id_map(const std::filesystem::path& path, const IdMap& ids);
IdMap load_id_map(const std::filesystem::path& path);

// For each positive (u,i), appends `ratio` uniformly drawn items j with
// (u,j) not a positive. Throws if some user with positives has no
// non-interacted item.
// When `exclude` is given, its positives are rejected as well.
InteractionSet sample_negatives(const InteractionSet& set, std::size_t ratio,
                                Rng& rng, const InteractionSet* exclude = nullptr);

// Per-item raw multimedia vectors f_i, concatenated modality blocks.
struct FeatureTable {
  std::size_t dim = 0;
  std::vector<std::size_t> modality_offsets{0};
  std::vector<std::string> modality_names{"V"};
  RowMatrix vectors;  // num_items x dim

  std::size_t num_items() const {
    return static_cast<std::size_t>(vectors.rows());
  }
  // Name of the modality block containing coordinate k.
  const std::string& modality_of(std::size_t k) const;
  void validate() const;

  bool operator==(const FeatureTable& other) const {
    return dim == other.dim && modality_offsets == other.modality_offsets &&
           modality_names == other.modality_names &&
           vectors == other.vectors;
  }
};

// Parses "V:2048,A:128,T:10" into names and offsets for `dim` coordinates.
// An empty spec yields a single block named "V".
void set_modalities(FeatureTable& table, const std::string& spec);
std::string modality_spec(const FeatureTable& table);

// Reads `item<TAB>v1,v2,...` lines. Items are mapped through `ids` (new
// items extend the map unless frozen). Every item of the map must end up
// with exactly one vector.
FeatureTable load_features(const std::filesystem::path& path, IdMap& ids,
                           bool frozen = false);
void write_features(const std::filesystem::path& path,
                    const FeatureTable& table, const IdMap* ids);

// Assignment of every positive of an InteractionSet to one environment.
struct EnvPartition {
  std::size_t num_envs = 0;
  std::vector<std::uint32_t> assignment;  // aligned with positives

  std::vector<std::size_t> sizes() const;
  std::vector<std::vector<std::size_t>> members() const;
  // Positives of environment `env` with degrees recounted on the subset.
  InteractionSet subset(const InteractionSet& data, std::size_t env) const;
  void validate(const InteractionSet& data) const;

  bool operator==(const EnvPartition&) const = default;
};

// `user<TAB>item<TAB>env` lines.
void write_partition(const std::filesystem::path& path,
                     const InteractionSet& data, const EnvPartition& envs,
                     const IdMap* ids);
EnvPartition load_partition(const std::filesystem::path& path,
                            const InteractionSet& data, const IdMap* ids);

struct SplitSpec {
  InteractionSet train;
  InteractionSet test_iid;
  InteractionSet test_ood;
  double ratio = 0.1;
};

// The larger of two environments (ties: lower index) is shuffled and cut
// into train / test_iid with `ratio` going to test_iid; the smaller one
// becomes test_ood in full.
SplitSpec split_iid_ood(const InteractionSet& data, const EnvPartition& envs,
                        double ratio, Rng& rng);

// Text manifest naming the three interaction files and the id map, all
// relative to the manifest's directory.
void write_split(const std::filesystem::path& dir, const SplitSpec& split,
                 const IdMap& ids);
SplitSpec load_split(const std::filesystem::path& dir, IdMap& ids);

struct SyntheticSpec {
  std::size_t num_users = 200;
  std::size_t num_items = 300;
  std::size_t d_inv = 4;
  std::size_t d_spu = 4;
  std::size_t num_envs_true = 2;
  double flip_strength = 1.0;
  double density = 0.05;
  std::uint64_t seed = 0;
  // Probability that a user-item pair lives in generator environment 0; the
  // rest is shared equally by the other environments.
  double major_share = 0.6;
  // Scale of the spurious affinity term relative to the invariant one.
  double spurious_scale = 1.0;
  // Standard deviation of the per-pair affinity noise.
  double noise_scale = 0.3;

  void validate() const;
  bool operator==(const SyntheticSpec&) const = default;
};

struct SyntheticData {
  InteractionSet data;
  FeatureTable features;
  // Generator environment of every positive. Diagnostics only.
  EnvPartition envs;
  // Sign pattern of the spurious block in each generator environment.
  std::vector<std::vector<int>> spurious_signs;
  std::vector<std::size_t> invariant_dims;
  std::vector<std::size_t> spurious_dims;
};

// Item features are standard normal. Every user-item pair is placed in a
// generator environment; its affinity combines fixed user weights on the
// invariant block with environment-signed weights on the spurious block.
// Each user's positives are its top round(density * num_items) pairs.
SyntheticData make_synthetic(const SyntheticSpec& spec);

}  // namespace painvrl
