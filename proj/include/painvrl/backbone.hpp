#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "painvrl/dataset.hpp"
#include "painvrl/numgrad.hpp"
#include "painvrl/rng.hpp"

namespace painvrl {

// One-hidden-layer perceptron with tanh hidden units and a scalar output.
struct AttentionMlp {
  RowMatrix hidden_w;       // hidden x input
  Eigen::VectorXd hidden_b;  // hidden
  Eigen::VectorXd out_w;     // hidden
  double out_b = 0.0;

  bool operator==(const AttentionMlp& o) const {
    return hidden_w == o.hidden_w && hidden_b == o.hidden_b &&
           out_w == o.out_w && out_b == o.out_b;
  }
};

// Collaborative and content embeddings, the content projection W, and the
// two attention MLPs used by the masked model. Gradients share this type.
struct ModelParams {
  RowMatrix user_collab;   // p^(t): users x k
  RowMatrix item_collab;   // t:     items x k
  RowMatrix user_content;  // p^(f): users x k
  RowMatrix projection;    // W:     k x d
  AttentionMlp attn_invariant;
  AttentionMlp attn_variant;

  std::size_t num_users() const { return static_cast<std::size_t>(user_collab.rows()); }
  std::size_t num_items() const { return static_cast<std::size_t>(item_collab.rows()); }
  std::size_t embedding_size() const { return static_cast<std::size_t>(user_collab.cols()); }
  std::size_t content_dim() const { return static_cast<std::size_t>(projection.cols()); }
  std::size_t hidden_width() const {
    return static_cast<std::size_t>(attn_invariant.hidden_w.rows());
  }

  // All-zero parameters of the given shape. hidden == 0 selects 2k.
  static ModelParams zeros(std::size_t users, std::size_t items, std::size_t k,
                           std::size_t d, std::size_t hidden = 0);
  // Every entry uniform in [-0.5/k, 0.5/k].
  static ModelParams init(std::size_t users, std::size_t items, std::size_t k,
                          std::size_t d, std::size_t hidden, Rng& rng);

  ModelParams zeros_like() const;
  // Visits every parameter block as (name, data, size) in layout order.
  void for_each_block(const std::function<void(const char*, double*, std::size_t)>& fn);
  void for_each_block(const std::function<void(const char*, const double*, std::size_t)>& fn) const;

  ParamVector flatten() const;
  void unflatten(std::span<const double> values);
  std::size_t size() const;
  bool all_finite() const;

  bool operator==(const ModelParams& o) const {
    return user_collab == o.user_collab && item_collab == o.item_collab &&
           user_content == o.user_content && projection == o.projection &&
           attn_invariant == o.attn_invariant && attn_variant == o.attn_variant;
  }
};

struct LossWeights {
  double eta = 1e-4;   // weight of the degree-weighted term
  double kappa = 0.01;  // weight of the item-item term

  void validate() const;
};

struct Neighbor {
  ItemId item = 0;
  double score = 0.0;
};

// Item-item co-occurrence graph G = R^T R with per-item top-K neighbour
// lists ranked by similarity.
class ItemGraph {
 public:
  ItemGraph() = default;

  static ItemGraph from_interactions(const InteractionSet& data,
                                     std::size_t num_neighbors);
  static ItemGraph from_dense(const Eigen::MatrixXd& cooccurrence,
                              std::size_t num_neighbors);

  std::size_t num_items() const { return rows_.size(); }
  std::size_t num_neighbors() const { return num_neighbors_; }
  double cooccurrence(ItemId i, ItemId j) const;
  double row_sum(ItemId i) const { return row_sums_.at(i); }
  std::span<const Neighbor> neighbors(ItemId i) const { return neighbors_.at(i); }
  // Pairs whose similarity hit a zero denominator while building the lists.
  std::size_t degenerate_count() const { return degenerate_; }

 private:
  void build_neighbors();

  std::size_t num_neighbors_ = 0;
  std::vector<std::vector<std::pair<ItemId, double>>> rows_;  // sorted by id
  std::vector<double> row_sums_;
  std::vector<std::vector<Neighbor>> neighbors_;
  std::size_t degenerate_ = 0;
};

// Positive and negative pairs scored together.
struct Batch {
  std::span<const Pair> positives;
  std::span<const Pair> negatives;
};

// Everything the loss needs besides parameters. `content` holds one row of
// length d per item (Psi, Phi or raw f depending on the caller).
struct LossContext {
  const InteractionSet& data;  // degrees
  const ItemGraph& graph;
  const RowMatrix& content;
};

// <p_t[u], t_i> + <p_f[u], W content>.
double score(UserId u, ItemId i, std::span<const double> content,
             const ModelParams& params);

// (1/d_u) * sqrt((d_u + 1) / (d_i + 1)).
double degree_coeff(std::size_t user_degree, std::size_t item_degree);

// G_ij / (g_i - G_ii) * sqrt(g_i / g_j); zero denominators give 0 and bump
// `degenerate` when provided.
double item_similarity(const ItemGraph& graph, ItemId i, ItemId j,
                       std::size_t* degenerate = nullptr);

double log_sigmoid(double x);
double sigmoid(double x);

double loss_O(const Batch& batch, const RowMatrix& content,
              const ModelParams& params);
double loss_U(const Batch& batch, const RowMatrix& content,
              const ModelParams& params, const InteractionSet& degrees);
double loss_I(std::span<const Pair> positives, const ItemGraph& graph,
              const RowMatrix& content, const ModelParams& params);
// L_O + eta L_U + kappa L_I.
double total_loss(const Batch& batch, const LossContext& ctx,
                  const ModelParams& params, const LossWeights& weights);

// A scored pair with its merged coefficient: the loss is
// weight * softplus(-sign * score).
struct LossTerm {
  UserId user = 0;
  ItemId item = 0;
  double sign = 1.0;
  double weight = 1.0;
};

// Expands a batch into the terms of total_loss.
std::vector<LossTerm> expand_terms(const Batch& batch, const InteractionSet& data,
                                   const ItemGraph& graph,
                                   const LossWeights& weights);

// Gradient of total_loss over every ModelParams block (attention blocks are
// untouched and stay zero).
ModelParams grad_total_loss(const Batch& batch, const LossContext& ctx,
                            const ModelParams& params,
                            const LossWeights& weights);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(const ModelParams& shape, const AdamConfig& config);
  void step(ModelParams& params, const ModelParams& grad);
  std::size_t steps() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  std::size_t epochs = 0;
  std::size_t batch_size = 512;
  std::size_t negative_ratio = 1;
  LossWeights weights;
  AdamConfig adam;
  // Positives that must never be drawn as negatives besides the training
  // set's own (e.g. the full data when training on a subset).
  const InteractionSet* negative_exclusions = nullptr;
};

// Called after every epoch with the summed minibatch loss of that epoch.
using EpochCallback =
    std::function<void(std::size_t epoch, const ModelParams&, double loss)>;

// Minibatch Adam on total_loss. Negatives are resampled every epoch; the
// positive order is reshuffled every epoch.
ModelParams train(ModelParams params, const InteractionSet& data,
                  const ItemGraph& graph, const RowMatrix& content,
                  const TrainConfig& config, Rng& rng,
                  const EpochCallback& on_epoch = {});

}  // namespace painvrl
