#include "painvrl/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

namespace painvrl {
namespace {

void fill_uniform(double* data, std::size_t n, double bound, Rng& rng) {
  for (std::size_t k = 0; k < n; ++k) {
    data[k] = (2.0 * uniform_unit(rng) - 1.0) * bound;
  }
}

AttentionMlp zero_mlp(std::size_t hidden, std::size_t input) {
  AttentionMlp mlp;
  mlp.hidden_w = RowMatrix::Zero(static_cast<Eigen::Index>(hidden),
                                 static_cast<Eigen::Index>(input));
  mlp.hidden_b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(hidden));
  mlp.out_w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(hidden));
  mlp.out_b = 0.0;
  return mlp;
}

// W^T p_f[u]: the content-side user vector in feature space.
Eigen::VectorXd content_user_vector(UserId u, const ModelParams& params) {
  return params.projection.transpose() * params.user_content.row(u).transpose();
}

// Accumulates loss and gradient of the given terms. `grad` may be null.
double accumulate_terms(const std::vector<LossTerm>& terms,
                        const RowMatrix& content, const ModelParams& params,
                        ModelParams* grad) {
  double loss = 0.0;
  Eigen::VectorXd projected;
  for (const LossTerm& t : terms) {
    const auto c = content.row(t.item);
    projected = params.projection * c.transpose();
    const double s = params.user_collab.row(t.user).dot(params.item_collab.row(t.item)) +
                     params.user_content.row(t.user).dot(projected);
    loss -= t.weight * log_sigmoid(t.sign * s);
    if (!grad) continue;
    const double g = -t.sign * t.weight * sigmoid(-t.sign * s);
    if (!std::isfinite(g)) {
      throw std::domain_error("non-finite gradient for user " +
                              std::to_string(t.user) + ", item " +
                              std::to_string(t.item));
    }
    grad->user_collab.row(t.user) += g * params.item_collab.row(t.item);
    grad->item_collab.row(t.item) += g * params.user_collab.row(t.user);
    grad->user_content.row(t.user) += g * projected.transpose();
    grad->projection.noalias() +=
        g * params.user_content.row(t.user).transpose() * c;
  }
  return loss;
}

void check_row_range(const ModelParams& params, const RowMatrix& content) {
  if (static_cast<std::size_t>(content.cols()) != params.content_dim() ||
      static_cast<std::size_t>(content.rows()) != params.num_items()) {
    throw std::invalid_argument("content matrix shape does not match model");
  }
}

double loss_and_grad(const Batch& batch, const LossContext& ctx,
                     const ModelParams& params, const LossWeights& weights,
                     ModelParams* grad) {
  check_row_range(params, ctx.content);
  const auto terms = expand_terms(batch, ctx.data, ctx.graph, weights);
  return accumulate_terms(terms, ctx.content, params, grad);
}

}  // namespace

ModelParams ModelParams::zeros(std::size_t users, std::size_t items,
                               std::size_t k, std::size_t d,
                               std::size_t hidden) {
  if (hidden == 0) hidden = 2 * k;
  ModelParams p;
  const auto ku = static_cast<Eigen::Index>(k);
  p.user_collab = RowMatrix::Zero(static_cast<Eigen::Index>(users), ku);
  p.item_collab = RowMatrix::Zero(static_cast<Eigen::Index>(items), ku);
  p.user_content = RowMatrix::Zero(static_cast<Eigen::Index>(users), ku);
  p.projection = RowMatrix::Zero(ku, static_cast<Eigen::Index>(d));
  p.attn_invariant = zero_mlp(hidden, 3 * k + d);
  p.attn_variant = zero_mlp(hidden, 3 * k + d);
  return p;
}

ModelParams ModelParams::init(std::size_t users, std::size_t items,
                              std::size_t k, std::size_t d, std::size_t hidden,
                              Rng& rng) {
  ModelParams p = zeros(users, items, k, d, hidden);
  const double bound = 0.5 / static_cast<double>(k);
  p.for_each_block([&](const char*, double* data, std::size_t n) {
    fill_uniform(data, n, bound, rng);
  });
  return p;
}

ModelParams ModelParams::zeros_like() const {
  return zeros(num_users(), num_items(), embedding_size(), content_dim(),
               hidden_width());
}

void ModelParams::for_each_block(
    const std::function<void(const char*, double*, std::size_t)>& fn) {
  auto mat = [&](const char* name, auto& m) {
    fn(name, m.data(), static_cast<std::size_t>(m.size()));
  };
  mat("user_collab", user_collab);
  mat("item_collab", item_collab);
  mat("user_content", user_content);
  mat("projection", projection);
  mat("attn_inv.hidden_w", attn_invariant.hidden_w);
  mat("attn_inv.hidden_b", attn_invariant.hidden_b);
  mat("attn_inv.out_w", attn_invariant.out_w);
  fn("attn_inv.out_b", &attn_invariant.out_b, 1);
  mat("attn_var.hidden_w", attn_variant.hidden_w);
  mat("attn_var.hidden_b", attn_variant.hidden_b);
  mat("attn_var.out_w", attn_variant.out_w);
  fn("attn_var.out_b", &attn_variant.out_b, 1);
}

void ModelParams::for_each_block(
    const std::function<void(const char*, const double*, std::size_t)>& fn) const {
  const_cast<ModelParams*>(this)->for_each_block(
      [&](const char* name, double* data, std::size_t n) { fn(name, data, n); });
}

ParamVector ModelParams::flatten() const {
  ParamVector out;
  for_each_block([&](const char* name, const double* data, std::size_t n) {
    out.layout.push_back({name, out.values.size(), n});
    out.values.insert(out.values.end(), data, data + n);
  });
  return out;
}

void ModelParams::unflatten(std::span<const double> values) {
  if (values.size() != size()) {
    throw std::invalid_argument("flat parameter vector has the wrong length");
  }
  std::size_t cursor = 0;
  for_each_block([&](const char*, double* data, std::size_t n) {
    std::copy_n(values.data() + cursor, n, data);
    cursor += n;
  });
}

std::size_t ModelParams::size() const {
  std::size_t total = 0;
  for_each_block([&](const char*, const double*, std::size_t n) { total += n; });
  return total;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  for_each_block([&](const char*, const double* data, std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) ok = ok && std::isfinite(data[k]);
  });
  return ok;
}

void LossWeights::validate() const {
  if (!(eta >= 0.0) || !(kappa >= 0.0)) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

ItemGraph ItemGraph::from_interactions(const InteractionSet& data,
                                       std::size_t num_neighbors) {
  std::vector<std::unordered_map<ItemId, double>> counts(data.num_items);
  for (const auto& items : items_by_user(data)) {
    for (ItemId a : items) {
      for (ItemId b : items) counts[a][b] += 1.0;
    }
  }
  ItemGraph g;
  g.num_neighbors_ = num_neighbors;
  g.rows_.resize(data.num_items);
  g.row_sums_.assign(data.num_items, 0.0);
  for (std::size_t i = 0; i < data.num_items; ++i) {
    g.rows_[i].assign(counts[i].begin(), counts[i].end());
    std::sort(g.rows_[i].begin(), g.rows_[i].end());
    for (const auto& [j, c] : g.rows_[i]) g.row_sums_[i] += c;
  }
  g.build_neighbors();
  return g;
}

ItemGraph ItemGraph::from_dense(const Eigen::MatrixXd& cooccurrence,
                                std::size_t num_neighbors) {
  if (cooccurrence.rows() != cooccurrence.cols()) {
    throw std::invalid_argument("co-occurrence matrix must be square");
  }
  if (!cooccurrence.isApprox(cooccurrence.transpose()) ||
      (cooccurrence.array() < 0.0).any()) {
    throw std::invalid_argument(
        "co-occurrence matrix must be symmetric and non-negative");
  }
  ItemGraph g;
  g.num_neighbors_ = num_neighbors;
  const auto n = static_cast<std::size_t>(cooccurrence.rows());
  g.rows_.resize(n);
  g.row_sums_.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double c = cooccurrence(static_cast<Eigen::Index>(i),
                                    static_cast<Eigen::Index>(j));
      if (c != 0.0) g.rows_[i].emplace_back(static_cast<ItemId>(j), c);
      g.row_sums_[i] += c;
    }
  }
  g.build_neighbors();
  return g;
}

double ItemGraph::cooccurrence(ItemId i, ItemId j) const {
  const auto& row = rows_.at(i);
  auto it = std::lower_bound(
      row.begin(), row.end(), j,
      [](const std::pair<ItemId, double>& e, ItemId key) { return e.first < key; });
  return (it != row.end() && it->first == j) ? it->second : 0.0;
}

void ItemGraph::build_neighbors() {
  neighbors_.assign(rows_.size(), {});
  degenerate_ = 0;
  if (num_neighbors_ == 0) return;
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    auto& out = neighbors_[i];
    for (const auto& [j, c] : rows_[i]) {
      if (j == i) continue;
      const double s = item_similarity(*this, static_cast<ItemId>(i), j, &degenerate_);
      if (s > 0.0) out.push_back({j, s});
    }
    std::sort(out.begin(), out.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.score != b.score ? a.score > b.score : a.item < b.item;
    });
    if (out.size() > num_neighbors_) out.resize(num_neighbors_);
  }
}

double score(UserId u, ItemId i, std::span<const double> content,
             const ModelParams& params) {
  if (u >= params.num_users() || i >= params.num_items()) {
    throw std::out_of_range("user or item id out of range");
  }
  if (content.size() != params.content_dim()) {
    throw std::invalid_argument("content length does not match model");
  }
  for (double v : content) {
    if (!std::isfinite(v)) throw std::domain_error("non-finite content");
  }
  const Eigen::Map<const Eigen::VectorXd> c(content.data(),
                                            static_cast<Eigen::Index>(content.size()));
  return params.user_collab.row(u).dot(params.item_collab.row(i)) +
         content_user_vector(u, params).dot(c);
}

double degree_coeff(std::size_t user_degree, std::size_t item_degree) {
  if (user_degree == 0) {
    throw std::invalid_argument("degree_coeff: user has no positives");
  }
  const double du = static_cast<double>(user_degree);
  const double di = static_cast<double>(item_degree);
  return (1.0 / du) * std::sqrt((du + 1.0) / (di + 1.0));
}

double item_similarity(const ItemGraph& graph, ItemId i, ItemId j,
                       std::size_t* degenerate) {
  const double gij = graph.cooccurrence(i, j);
  if (gij == 0.0) return 0.0;
  const double gi = graph.row_sum(i);
  const double gj = graph.row_sum(j);
  const double denom = gi - graph.cooccurrence(i, i);
  if (!(denom > 0.0) || !(gj > 0.0)) {
    if (degenerate) ++*degenerate;
    return 0.0;
  }
  return gij / denom * std::sqrt(gi / gj);
}

double log_sigmoid(double x) {
  // log sigma(x) = -softplus(-x)
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double loss_O(const Batch& batch, const RowMatrix& content,
              const ModelParams& params) {
  double loss = 0.0;
  for (const Pair& p : batch.positives) {
    loss -= log_sigmoid(score(p.user, p.item, {content.row(p.item).data(),
                                                params.content_dim()},
                              params));
  }
  for (const Pair& p : batch.negatives) {
    loss -= log_sigmoid(-score(p.user, p.item, {content.row(p.item).data(),
                                                 params.content_dim()},
                               params));
  }
  return loss;
}

double loss_U(const Batch& batch, const RowMatrix& content,
              const ModelParams& params, const InteractionSet& degrees) {
  double loss = 0.0;
  for (const Pair& p : batch.positives) {
    const double nu = degree_coeff(degrees.user_degree.at(p.user),
                                   degrees.item_degree.at(p.item));
    loss -= nu * log_sigmoid(score(p.user, p.item,
                                   {content.row(p.item).data(), params.content_dim()},
                                   params));
  }
  for (const Pair& p : batch.negatives) {
    const double nu = degree_coeff(degrees.user_degree.at(p.user),
                                   degrees.item_degree.at(p.item));
    loss -= nu * log_sigmoid(-score(p.user, p.item,
                                    {content.row(p.item).data(), params.content_dim()},
                                    params));
  }
  return loss;
}

double loss_I(std::span<const Pair> positives, const ItemGraph& graph,
              const RowMatrix& content, const ModelParams& params) {
  double loss = 0.0;
  for (const Pair& p : positives) {
    for (const Neighbor& n : graph.neighbors(p.item)) {
      loss -= n.score * log_sigmoid(score(p.user, n.item,
                                          {content.row(n.item).data(),
                                           params.content_dim()},
                                          params));
    }
  }
  return loss;
}

double total_loss(const Batch& batch, const LossContext& ctx,
                  const ModelParams& params, const LossWeights& weights) {
  check_row_range(params, ctx.content);
  return loss_O(batch, ctx.content, params) +
         weights.eta * loss_U(batch, ctx.content, params, ctx.data) +
         weights.kappa * loss_I(batch.positives, ctx.graph, ctx.content, params);
}

std::vector<LossTerm> expand_terms(const Batch& batch, const InteractionSet& data,
                                   const ItemGraph& graph,
                                   const LossWeights& weights) {
  std::vector<LossTerm> terms;
  terms.reserve(batch.positives.size() * (1 + graph.num_neighbors()) +
                batch.negatives.size());
  for (const Pair& p : batch.positives) {
    const double nu = degree_coeff(data.user_degree.at(p.user),
                                   data.item_degree.at(p.item));
    terms.push_back({p.user, p.item, 1.0, 1.0 + weights.eta * nu});
  }
  for (const Pair& p : batch.negatives) {
    const double nu = degree_coeff(data.user_degree.at(p.user),
                                   data.item_degree.at(p.item));
    terms.push_back({p.user, p.item, -1.0, 1.0 + weights.eta * nu});
  }
  if (weights.kappa != 0.0) {
    for (const Pair& p : batch.positives) {
      for (const Neighbor& n : graph.neighbors(p.item)) {
        terms.push_back({p.user, n.item, 1.0, weights.kappa * n.score});
      }
    }
  }
  return terms;
}

ModelParams grad_total_loss(const Batch& batch, const LossContext& ctx,
                            const ModelParams& params,
                            const LossWeights& weights) {
  ModelParams grad = params.zeros_like();
  loss_and_grad(batch, ctx, params, weights, &grad);
  return grad;
}

Adam::Adam(const ModelParams& shape, const AdamConfig& config)
    : config_(config), m_(shape.size(), 0.0), v_(shape.size(), 0.0) {}

void Adam::step(ModelParams& params, const ModelParams& grad) {
  ++t_;
  const double t = static_cast<double>(t_);
  const double bias1 = 1.0 - std::pow(config_.beta1, t);
  const double bias2 = 1.0 - std::pow(config_.beta2, t);
  std::vector<const double*> grads;
  grad.for_each_block([&](const char*, const double* data, std::size_t) {
    grads.push_back(data);
  });
  std::size_t block = 0;
  std::size_t cursor = 0;
  params.for_each_block([&](const char*, double* data, std::size_t n) {
    const double* g = grads[block++];
    for (std::size_t k = 0; k < n; ++k, ++cursor) {
      m_[cursor] = config_.beta1 * m_[cursor] + (1.0 - config_.beta1) * g[k];
      v_[cursor] = config_.beta2 * v_[cursor] + (1.0 - config_.beta2) * g[k] * g[k];
      const double mhat = m_[cursor] / bias1;
      const double vhat = v_[cursor] / bias2;
      data[k] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  });
}

ModelParams train(ModelParams params, const InteractionSet& data,
                  const ItemGraph& graph, const RowMatrix& content,
                  const TrainConfig& config, Rng& rng,
                  const EpochCallback& on_epoch) {
  config.weights.validate();
  if (config.epochs == 0 || data.positives.empty()) return params;
  check_row_range(params, content);
  const std::size_t batch_size = std::max<std::size_t>(1, config.batch_size);
  const std::size_t ratio = config.negative_ratio;
  Adam adam(params, config.adam);
  const LossContext ctx{data, graph, content};
  std::vector<std::size_t> order(data.positives.size());
  std::vector<Pair> pos;
  std::vector<Pair> neg;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const InteractionSet sampled =
        ratio > 0 ? sample_negatives(data, ratio, rng, config.negative_exclusions) : data;
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      pos.clear();
      neg.clear();
      for (std::size_t k = start; k < end; ++k) {
        pos.push_back(data.positives[order[k]]);
        for (std::size_t r = 0; r < ratio; ++r) {
          neg.push_back(sampled.negatives[order[k] * ratio + r]);
        }
      }
      ModelParams grad = params.zeros_like();
      epoch_loss += loss_and_grad({pos, neg}, ctx, params, config.weights, &grad);
      adam.step(params, grad);
    }
    if (!params.all_finite()) {
      throw std::domain_error("training diverged at epoch " + std::to_string(epoch));
    }
    if (on_epoch) on_epoch(epoch, params, epoch_loss);
  }
  return params;
}

}  // namespace painvrl
