#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "painvrl/backbone.hpp"
#include "painvrl/dataset.hpp"
#include "painvrl/pareto.hpp"
#include "painvrl/rng.hpp"

namespace painvrl {

// Global invariant mask m in [0,1]^d with its noise and update settings.
struct MaskState {
  Eigen::VectorXd m;
  double sigma = 0.1;
  double lambda = 1.0;
  double step = 0.1;
  // Mask updates applied so far; drives the sigma schedule.
  std::size_t iteration = 0;

  static MaskState constant(std::size_t dim, double value);
  void validate() const;

  bool operator==(const MaskState& o) const {
    return m == o.m && sigma == o.sigma && lambda == o.lambda &&
           step == o.step && iteration == o.iteration;
  }
};

// mu = clip(m + epsilon, 0, 1) with the drawn noise kept for replay.
struct MaskSample {
  Eigen::VectorXd mu;
  Eigen::VectorXd epsilon;
};

MaskSample sample_mu(const MaskState& state, Rng& rng);
MaskSample sample_from_noise(const Eigen::VectorXd& m, Eigen::VectorXd epsilon);

// Phi = m * f and Psi = (1 - m) * f, constructed so Phi + Psi == f holds
// exactly in floating point.
Eigen::VectorXd to_invariant(const Eigen::VectorXd& m, const Eigen::VectorXd& f);
Eigen::VectorXd to_variant(const Eigen::VectorXd& m, const Eigen::VectorXd& f);
RowMatrix invariant_content(const Eigen::VectorXd& m, const FeatureTable& features);
RowMatrix variant_content(const Eigen::VectorXd& m, const FeatureTable& features);

struct AttentionWeights {
  double invariant = 0.0;  // alpha^Phi
  double variant = 0.0;    // alpha^Psi
};

// Runs both attention MLPs on [p_t[u], p_f[u], t_i, f_i]. Outputs are
// independent sigmoids, or a two-way softmax when `softmax` is set.
AttentionWeights attention_weights(UserId u, ItemId i, const ModelParams& params,
                                   const FeatureTable& features, bool softmax);

// h = alpha^Phi * Phi + alpha^Psi * Psi.
Eigen::VectorXd fuse(const AttentionWeights& alpha, const Eigen::VectorXd& phi,
                     const Eigen::VectorXd& psi);
Eigen::VectorXd attention_fuse(UserId u, ItemId i, const Eigen::VectorXd& phi,
                               const Eigen::VectorXd& psi, const ModelParams& params,
                               const FeatureTable& features, bool softmax);

enum class Objective { Erm, Irm };
enum class WeightMode { Pareto, ErmOnly, IrmOnly };

const char* to_string(WeightMode mode);
WeightMode parse_weight_mode(const std::string& text);

struct MaskConfig {
  std::size_t iters = 40;
  LossWeights weights;
  std::size_t negative_ratio = 1;
  std::size_t num_neighbors = 10;
  std::size_t batch_size = 512;
  AdamConfig adam;
  // Model epochs run before the first mask update of a fit.
  std::size_t warmup_epochs = 0;
  double sigma_decay = 0.9;
  std::size_t sigma_decay_every = 10;
  bool attention_softmax = false;
  WeightMode weight_mode = WeightMode::Pareto;
  double tol = 1e-5;
  double fd_step = 1e-5;
  // Divide each environment's loss by its positive count.
  bool normalize_env_loss = true;
  // Multiplies every environment loss.
  double loss_scale = 1.0;
};

// Population variance across environments of the per-environment feature
// scale gradients, times mu, squared norm. Fewer than two gradients give 0.
double irm_penalty_from_gradients(const std::vector<Eigen::VectorXd>& env_grads,
                                  const Eigen::VectorXd& mu);

// Training positives partitioned into environments together with the frozen
// negatives and item graph the masked objectives are evaluated on.
class MaskProblem {
 public:
  MaskProblem(const InteractionSet& data, EnvPartition envs,
              const FeatureTable& features, MaskConfig config);

  // Redraws `negative_ratio` negatives per positive.
  void resample_negatives(Rng& rng);
  // negatives[k * ratio + r] belongs to positive k.
  void set_negatives(std::vector<Pair> negatives);

  const InteractionSet& data() const { return data_; }
  const EnvPartition& envs() const { return envs_; }
  const FeatureTable& features() const { return features_; }
  const MaskConfig& config() const { return config_; }
  const ItemGraph& graph() const { return graph_; }
  std::size_t active_envs() const;

  // Loss terms of the positives `which` (all when empty), each carrying its
  // environment and the environment weighting used by L_ERM.
  struct Term {
    LossTerm term;
    std::uint32_t env = 0;
    double env_weight = 1.0;  // loss_scale / N_e, or loss_scale
  };
  std::vector<Term> terms(std::span<const std::size_t> which = {}) const;

 private:
  InteractionSet data_;
  EnvPartition envs_;
  const FeatureTable& features_;
  MaskConfig config_;
  ItemGraph graph_;
  std::vector<std::size_t> env_sizes_;
};

// Per-environment losses L^e on the masked fused content mu * h.
std::vector<double> env_losses(const MaskProblem& problem, const MaskSample& sample,
                               const ModelParams& params, const MaskState& state);
// Mean of the non-empty environments' losses.
double erm_loss(const MaskProblem& problem, const MaskSample& sample,
                const ModelParams& params, const MaskState& state);
// d L^e / d mu for every environment.
std::vector<Eigen::VectorXd> env_scale_gradients(const MaskProblem& problem,
                                                 const MaskSample& sample,
                                                 const ModelParams& params,
                                                 const MaskState& state);
double irm_penalty(const MaskProblem& problem, const MaskSample& sample,
                   const ModelParams& params, const MaskState& state);
// w_erm L_ERM + w_irm L_IRM + lambda/2 |m|^2.
double mask_objective(const MaskProblem& problem, const MaskSample& sample,
                      const ModelParams& params, const MaskState& state,
                      const ParetoWeights& w);
// Gradient over m with epsilon frozen. ERM is analytic (clip derivative is 1
// strictly inside (0,1), 0 otherwise); IRM uses central differences.
Eigen::VectorXd grad_mask(const MaskProblem& problem, const MaskSample& sample,
                          const ModelParams& params, const MaskState& state,
                          Objective which);
// Gradient of erm_loss over the model parameters, attention included.
ModelParams grad_params_erm(const MaskProblem& problem, const MaskSample& sample,
                            const ModelParams& params, const MaskState& state);

// m <- clip(m - step (w_erm g_erm + w_irm g_irm + lambda m), 0, 1). Weights
// come from solve_weights unless `fixed` is given; the ones used are written
// to `used`.
MaskState update_mask(const MaskState& state, const Eigen::VectorXd& g_erm,
                      const Eigen::VectorXd& g_irm,
                      std::optional<ParetoWeights> fixed = std::nullopt,
                      ParetoWeights* used = nullptr);

struct MaskIterLog {
  std::size_t iteration = 0;
  double erm = 0.0;
  double irm = 0.0;
  ParetoWeights weights;
  double erm_grad_norm = 0.0;
  double irm_grad_norm = 0.0;
  double max_step = 0.0;
};
using MaskLogFn = std::function<void(const MaskIterLog&)>;

// Alternates one model epoch on L_ERM with one mask update, for
// config.iters iterations or until max|dm| < config.tol.
MaskState fit_mask(MaskProblem& problem, ModelParams& params, MaskState state,
                   Rng& rng, const MaskLogFn& log = {});

// `index<TAB>modality<TAB>m` per coordinate.
void write_mask(const std::filesystem::path& path, const MaskState& state,
                const FeatureTable& features);
Eigen::VectorXd load_mask(const std::filesystem::path& path);

}  // namespace painvrl
