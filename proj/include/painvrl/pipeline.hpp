#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "painvrl/backbone.hpp"
#include "painvrl/dataset.hpp"
#include "painvrl/envid.hpp"
#include "painvrl/eval.hpp"
#include "painvrl/maskgen.hpp"

namespace painvrl {

// Where the IID/OOD split comes from.
enum class SplitSource {
  Identify,   // two-environment identification on the full data
  Generator,  // ground-truth environments (synthetic data or `environments` file)
  Manifest,   // a split directory written by write_split
};

const char* to_string(SplitSource source);
SplitSource parse_split_source(const std::string& text);

struct RunConfig {
  std::uint64_t seed = 0;

  // Inputs. With `interactions` empty the synthetic generator is used.
  std::string interactions;
  std::string features;
  std::string modalities;
  std::string environments;
  SyntheticSpec synthetic;
  SplitSource split_source = SplitSource::Identify;
  std::string split_dir;
  // Generator environments held out as OOD: comma list, or "last".
  std::string ood_envs = "last";
  double split_ratio = 0.1;

  std::string run_dir;
  std::string output_dir;

  // Outer loop.
  std::size_t T = 3;
  double outer_tol = 1e-3;

  // Environment identification.
  std::size_t num_envs = 10;
  std::size_t max_rounds = 10;
  std::size_t epochs_per_round = 2;

  // Mask generation.
  std::size_t iters_mask = 40;
  std::size_t mask_warmup = 0;
  double mask_init = 0.5;
  double sigma = 0.1;
  double sigma_decay = 0.9;
  std::size_t sigma_decay_every = 10;
  double lambda = 1.0;
  double mask_step = 0.01;
  double mask_tol = 1e-5;
  double fd_step = 1e-5;
  bool attention_softmax = false;
  bool normalize_env_loss = true;
  // Environment losses are per-positive means times this (a batch-sum scale).
  double loss_scale = 512.0;
  WeightMode weight_mode = WeightMode::Pareto;

  // Final model.
  std::size_t epochs_final = 500;

  // Backbone and optimiser.
  std::size_t embedding_size = 64;
  std::size_t hidden_width = 0;
  std::size_t num_neighbors = 10;
  double eta = 1e-4;
  double kappa = 0.01;
  std::size_t neg_ratio = 1;
  std::size_t batch_size = 512;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  std::size_t K = 10;

  void validate() const;
  bool operator==(const RunConfig&) const = default;

  TrainConfig train_config(std::size_t epochs) const;
  IdentifyConfig identify_config() const;
  MaskConfig mask_config() const;
  MaskState initial_mask(std::size_t dim) const;
};

// Loaded inputs with the IID/OOD split already applied.
struct PreparedData {
  IdMap ids;
  FeatureTable features;
  SplitSpec split;
  // Generator environments of split.train positives, when known.
  std::optional<EnvPartition> train_truth;
};

PreparedData prepare_data(const RunConfig& config);

struct LogEntry {
  std::size_t epoch = 0;
  std::string stage;
  double loss = 0.0;
  std::optional<double> w_erm;

  bool operator==(const LogEntry&) const = default;
};

struct OuterRecord {
  std::size_t t = 0;
  std::vector<std::size_t> reassigned;  // per identification round
  std::vector<double> w_erm;            // per mask iteration
  Eigen::VectorXd mask;                 // m after this iteration
  // Items whose Phi + Psi differs from f after this iteration.
  std::size_t complementarity_violations = 0;
};

struct RunArtifacts {
  ModelParams final_model;
  MaskState mask;
  EnvPartition partition;  // last identified partition of split.train
  std::vector<OuterRecord> outer;
  std::vector<LogEntry> log;
  MetricTable metrics;
};

// Items i with to_invariant(m, f_i) + to_variant(m, f_i) != f_i.
std::size_t complementarity_violations(const Eigen::VectorXd& m, const FeatureTable& features);

// Fresh model trained on Phi = to_invariant(m, f) only.
ModelParams train_final(const MaskState& mask, const InteractionSet& train,
                        const FeatureTable& features, const RunConfig& config, Rng& rng,
                        const EpochCallback& on_epoch = {});

struct RunOptions {
  // Reuse checkpoints already present in the run directory.
  bool resume = false;
  // Stop after the named phase ("t1_envid", "t2_mask", ...) has been
  // checkpointed. Empty runs to completion.
  std::string stop_after;
};

// Runs the outer loop and the final model, writing every artifact into
// config.run_dir. Stage failures are rethrown as StageError.
RunArtifacts run(const RunConfig& config, const RunOptions& options = {});

class StageError : public std::runtime_error {
 public:
  StageError(const std::string& stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Thrown when `stop_after` interrupts a run.
class RunStopped : public std::runtime_error {
 public:
  explicit RunStopped(const std::string& phase)
      : std::runtime_error("stopped after " + phase) {}
};

void write_log(const std::filesystem::path& path, const std::vector<LogEntry>& log);

}  // namespace painvrl
