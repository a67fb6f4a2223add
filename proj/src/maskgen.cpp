#include "painvrl/maskgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "painvrl/text_io.hpp"

namespace painvrl {
namespace {

// m * f rounded so that f - result is exact; then result + (f - result)
// reproduces f bit for bit.
double invariant_part(double m, double f) {
  const double phi = m * f;
  if (phi + (f - phi) == f) return phi;
  int exponent = 0;
  std::frexp(f, &exponent);
  const int ulp_exp = exponent - 53;
  return std::ldexp(std::nearbyint(std::ldexp(phi, -ulp_exp)), ulp_exp);
}

Eigen::VectorXd mlp_input(UserId u, ItemId i, const ModelParams& params,
                          const FeatureTable& features) {
  const auto k = static_cast<Eigen::Index>(params.embedding_size());
  const auto d = static_cast<Eigen::Index>(features.dim);
  Eigen::VectorXd x(3 * k + d);
  x.segment(0, k) = params.user_collab.row(u).transpose();
  x.segment(k, k) = params.user_content.row(u).transpose();
  x.segment(2 * k, k) = params.item_collab.row(i).transpose();
  x.segment(3 * k, d) = features.vectors.row(i).transpose();
  return x;
}

double mlp_forward(const AttentionMlp& mlp, const Eigen::VectorXd& x,
                   Eigen::VectorXd& hidden) {
  hidden = (mlp.hidden_w * x + mlp.hidden_b).array().tanh().matrix();
  return mlp.out_w.dot(hidden) + mlp.out_b;
}

AttentionWeights squash(double o_inv, double o_var, bool softmax) {
  if (!softmax) return {sigmoid(o_inv), sigmoid(o_var)};
  const double top = std::max(o_inv, o_var);
  const double a = std::exp(o_inv - top);
  const double b = std::exp(o_var - top);
  return {a / (a + b), b / (a + b)};
}

double clip01(double x) { return std::clamp(x, 0.0, 1.0); }

bool interior(double m, double eps) {
  const double x = m + eps;
  return x > 0.0 && x < 1.0;
}

// Per-term quantities that do not depend on the mask.
struct TermCache {
  std::vector<MaskProblem::Term> terms;
  std::vector<double> collab;
  RowMatrix user_vec;  // W^T p_f[u] per term
  std::vector<double> alpha_inv;
  std::vector<double> alpha_var;
  std::vector<bool> active;
  double env_count = 0.0;
};

TermCache build_cache(const MaskProblem& problem, const ModelParams& params) {
  TermCache c;
  c.terms = problem.terms();
  const auto n = c.terms.size();
  const auto d = static_cast<Eigen::Index>(problem.features().dim);
  c.collab.resize(n);
  c.alpha_inv.resize(n);
  c.alpha_var.resize(n);
  c.user_vec.resize(static_cast<Eigen::Index>(n), d);
  const bool softmax = problem.config().attention_softmax;
  Eigen::VectorXd hidden;
  for (std::size_t t = 0; t < n; ++t) {
    const LossTerm& lt = c.terms[t].term;
    c.collab[t] = params.user_collab.row(lt.user).dot(params.item_collab.row(lt.item));
    c.user_vec.row(static_cast<Eigen::Index>(t)) =
        (params.projection.transpose() * params.user_content.row(lt.user).transpose())
            .transpose();
    const auto x = mlp_input(lt.user, lt.item, params, problem.features());
    const double o_inv = mlp_forward(params.attn_invariant, x, hidden);
    const double o_var = mlp_forward(params.attn_variant, x, hidden);
    const auto alpha = squash(o_inv, o_var, softmax);
    if (!std::isfinite(alpha.invariant) || !std::isfinite(alpha.variant)) {
      throw std::domain_error("non-finite attention weight");
    }
    c.alpha_inv[t] = alpha.invariant;
    c.alpha_var[t] = alpha.variant;
  }
  c.active.assign(problem.envs().num_envs, false);
  for (const auto& t : c.terms) c.active[t.env] = true;
  c.env_count = static_cast<double>(std::count(c.active.begin(), c.active.end(), true));
  return c;
}

struct Evaluation {
  std::vector<double> env_loss;
  std::vector<Eigen::VectorXd> scale_grad;  // per environment
  Eigen::VectorXd erm_grad;                 // over m
};

// Evaluates the masked objectives at (m, epsilon) on cached terms.
Evaluation evaluate(const TermCache& cache, const FeatureTable& features,
                    const Eigen::VectorXd& m, const Eigen::VectorXd& epsilon,
                    bool want_scale, bool want_erm_grad) {
  const auto d = m.size();
  const std::size_t num_envs = cache.active.size();
  Evaluation out;
  out.env_loss.assign(num_envs, 0.0);
  if (want_scale) out.scale_grad.assign(num_envs, Eigen::VectorXd::Zero(d));
  if (want_erm_grad) out.erm_grad = Eigen::VectorXd::Zero(d);

  Eigen::VectorXd mu(d), dmu(d);
  for (Eigen::Index k = 0; k < d; ++k) {
    mu(k) = clip01(m(k) + epsilon(k));
    dmu(k) = interior(m(k), epsilon(k)) ? 1.0 : 0.0;
  }
  Eigen::VectorXd h(d);
  for (std::size_t t = 0; t < cache.terms.size(); ++t) {
    const auto& term = cache.terms[t];
    const auto f = features.vectors.row(term.term.item);
    const auto q = cache.user_vec.row(static_cast<Eigen::Index>(t));
    const double a_inv = cache.alpha_inv[t];
    const double a_var = cache.alpha_var[t];
    double s = cache.collab[t];
    for (Eigen::Index k = 0; k < d; ++k) {
      h(k) = (a_inv * m(k) + a_var * (1.0 - m(k))) * f(k);
      s += q(k) * mu(k) * h(k);
    }
    const double coef = term.term.weight * term.env_weight;
    out.env_loss[term.env] -= coef * log_sigmoid(term.term.sign * s);
    if (!want_scale && !want_erm_grad) continue;
    const double g = -term.term.sign * coef * sigmoid(-term.term.sign * s);
    if (want_scale) {
      auto& sg = out.scale_grad[term.env];
      for (Eigen::Index k = 0; k < d; ++k) sg(k) += g * q(k) * h(k);
    }
    if (want_erm_grad) {
      const double scale = g / cache.env_count;
      for (Eigen::Index k = 0; k < d; ++k) {
        const double dc = dmu(k) * h(k) + mu(k) * (a_inv - a_var) * f(k);
        out.erm_grad(k) += scale * q(k) * dc;
      }
    }
  }
  return out;
}

double mean_active(const std::vector<double>& values, const std::vector<bool>& active) {
  double sum = 0.0;
  double count = 0.0;
  for (std::size_t e = 0; e < values.size(); ++e) {
    if (!active[e]) continue;
    sum += values[e];
    count += 1.0;
  }
  return count > 0.0 ? sum / count : 0.0;
}

std::vector<Eigen::VectorXd> active_grads(const Evaluation& ev,
                                          const std::vector<bool>& active) {
  std::vector<Eigen::VectorXd> out;
  for (std::size_t e = 0; e < active.size(); ++e) {
    if (active[e]) out.push_back(ev.scale_grad[e]);
  }
  return out;
}

Eigen::VectorXd clipped_mu(const Eigen::VectorXd& m, const Eigen::VectorXd& eps) {
  return (m + eps).cwiseMax(0.0).cwiseMin(1.0);
}

double penalty_at(const TermCache& cache, const FeatureTable& features,
                  const Eigen::VectorXd& m, const Eigen::VectorXd& eps) {
  const auto ev = evaluate(cache, features, m, eps, true, false);
  return irm_penalty_from_gradients(active_grads(ev, cache.active), clipped_mu(m, eps));
}

Eigen::VectorXd irm_grad_fd(const TermCache& cache, const FeatureTable& features,
                            const Eigen::VectorXd& m, const Eigen::VectorXd& eps,
                            double h) {
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(m.size());
  if (cache.env_count < 2.0) return grad;
  Eigen::VectorXd probe = m;
  for (Eigen::Index k = 0; k < m.size(); ++k) {
    probe(k) = m(k) + h;
    const double up = penalty_at(cache, features, probe, eps);
    probe(k) = m(k) - h;
    const double down = penalty_at(cache, features, probe, eps);
    probe(k) = m(k);
    grad(k) = (up - down) / (2.0 * h);
  }
  return grad;
}

void check_sample(const MaskSample& sample, const MaskState& state) {
  if (sample.mu.size() != state.m.size() || sample.epsilon.size() != state.m.size()) {
    throw std::invalid_argument("mask sample does not match mask length");
  }
}

// Backpropagates the ERM objective of `terms` into `grad`, returning the
// loss. Each term is scaled by env_weight / env_count.
double erm_backprop(const std::vector<MaskProblem::Term>& terms, double env_count,
                    const FeatureTable& features, bool softmax,
                    const MaskSample& sample, const ModelParams& params,
                    const MaskState& state, ModelParams& grad) {
  const auto k = static_cast<Eigen::Index>(params.embedding_size());
  const auto d = static_cast<Eigen::Index>(features.dim);
  const Eigen::VectorXd& m = state.m;
  const Eigen::VectorXd& mu = sample.mu;
  Eigen::VectorXd hid_inv, hid_var, phi(d), psi(d), c(d), dx;
  double loss = 0.0;
  for (const auto& term : terms) {
    const UserId u = term.term.user;
    const ItemId i = term.term.item;
    const auto f = features.vectors.row(i);
    const Eigen::VectorXd x = mlp_input(u, i, params, features);
    const double o_inv = mlp_forward(params.attn_invariant, x, hid_inv);
    const double o_var = mlp_forward(params.attn_variant, x, hid_var);
    const auto alpha = squash(o_inv, o_var, softmax);
    for (Eigen::Index j = 0; j < d; ++j) {
      phi(j) = m(j) * f(j);
      psi(j) = (1.0 - m(j)) * f(j);
      c(j) = mu(j) * (alpha.invariant * phi(j) + alpha.variant * psi(j));
    }
    const Eigen::VectorXd projected = params.projection * c;
    const double s = params.user_collab.row(u).dot(params.item_collab.row(i)) +
                     params.user_content.row(u).dot(projected);
    const double coef = term.term.weight * term.env_weight / env_count;
    loss -= coef * log_sigmoid(term.term.sign * s);
    const double g = -term.term.sign * coef * sigmoid(-term.term.sign * s);

    grad.user_collab.row(u) += g * params.item_collab.row(i);
    grad.item_collab.row(i) += g * params.user_collab.row(u);
    grad.user_content.row(u) += g * projected.transpose();
    grad.projection.noalias() += g * params.user_content.row(u).transpose() * c.transpose();

    // Attention path.
    const Eigen::VectorXd q = params.projection.transpose() *
                              params.user_content.row(u).transpose();
    const double ds_dainv = q.dot(mu.cwiseProduct(phi));
    const double ds_davar = q.dot(mu.cwiseProduct(psi));
    double do_inv = 0.0;
    double do_var = 0.0;
    if (softmax) {
      const double cross = alpha.invariant * alpha.variant;
      do_inv = g * cross * (ds_dainv - ds_davar);
      do_var = -do_inv;
    } else {
      do_inv = g * ds_dainv * alpha.invariant * (1.0 - alpha.invariant);
      do_var = g * ds_davar * alpha.variant * (1.0 - alpha.variant);
    }
    dx = Eigen::VectorXd::Zero(x.size());
    auto backprop = [&](const AttentionMlp& mlp, AttentionMlp& gmlp,
                        const Eigen::VectorXd& hidden, double dout) {
      gmlp.out_b += dout;
      gmlp.out_w += dout * hidden;
      const Eigen::VectorXd dz =
          (dout * mlp.out_w.array() * (1.0 - hidden.array().square())).matrix();
      gmlp.hidden_b += dz;
      gmlp.hidden_w.noalias() += dz * x.transpose();
      dx.noalias() += mlp.hidden_w.transpose() * dz;
    };
    backprop(params.attn_invariant, grad.attn_invariant, hid_inv, do_inv);
    backprop(params.attn_variant, grad.attn_variant, hid_var, do_var);
    grad.user_collab.row(u) += dx.segment(0, k).transpose();
    grad.user_content.row(u) += dx.segment(k, k).transpose();
    grad.item_collab.row(i) += dx.segment(2 * k, k).transpose();
  }
  return loss;
}

}  // namespace

MaskState MaskState::constant(std::size_t dim, double value) {
  MaskState s;
  s.m = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(dim), value);
  return s;
}

void MaskState::validate() const {
  if ((m.array() < 0.0).any() || (m.array() > 1.0).any() || !m.allFinite()) {
    throw std::invalid_argument("mask entries must lie in [0,1]");
  }
  if (!(sigma >= 0.0) || !(lambda >= 0.0) || !(step > 0.0)) {
    throw std::invalid_argument("mask needs sigma >= 0, lambda >= 0, step > 0");
  }
}

MaskSample sample_mu(const MaskState& state, Rng& rng) {
  Eigen::VectorXd eps(state.m.size());
  for (Eigen::Index k = 0; k < eps.size(); ++k) {
    eps(k) = state.sigma * standard_normal(rng);
  }
  return sample_from_noise(state.m, std::move(eps));
}

MaskSample sample_from_noise(const Eigen::VectorXd& m, Eigen::VectorXd epsilon) {
  if (epsilon.size() != m.size()) {
    throw std::invalid_argument("noise length does not match mask");
  }
  MaskSample s;
  s.mu = clipped_mu(m, epsilon);
  s.epsilon = std::move(epsilon);
  return s;
}

Eigen::VectorXd to_invariant(const Eigen::VectorXd& m, const Eigen::VectorXd& f) {
  if (m.size() != f.size()) throw std::invalid_argument("mask/feature length mismatch");
  Eigen::VectorXd out(f.size());
  for (Eigen::Index k = 0; k < f.size(); ++k) out(k) = invariant_part(m(k), f(k));
  return out;
}

Eigen::VectorXd to_variant(const Eigen::VectorXd& m, const Eigen::VectorXd& f) {
  if (m.size() != f.size()) throw std::invalid_argument("mask/feature length mismatch");
  Eigen::VectorXd out(f.size());
  for (Eigen::Index k = 0; k < f.size(); ++k) out(k) = f(k) - invariant_part(m(k), f(k));
  return out;
}

RowMatrix invariant_content(const Eigen::VectorXd& m, const FeatureTable& features) {
  RowMatrix out(features.vectors.rows(), features.vectors.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index k = 0; k < out.cols(); ++k) {
      out(i, k) = invariant_part(m(k), features.vectors(i, k));
    }
  }
  return out;
}

RowMatrix variant_content(const Eigen::VectorXd& m, const FeatureTable& features) {
  RowMatrix out(features.vectors.rows(), features.vectors.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index k = 0; k < out.cols(); ++k) {
      const double f = features.vectors(i, k);
      out(i, k) = f - invariant_part(m(k), f);
    }
  }
  return out;
}

AttentionWeights attention_weights(UserId u, ItemId i, const ModelParams& params,
                                   const FeatureTable& features, bool softmax) {
  Eigen::VectorXd hidden;
  const auto x = mlp_input(u, i, params, features);
  const double o_inv = mlp_forward(params.attn_invariant, x, hidden);
  const double o_var = mlp_forward(params.attn_variant, x, hidden);
  const auto alpha = squash(o_inv, o_var, softmax);
  if (!std::isfinite(alpha.invariant) || !std::isfinite(alpha.variant)) {
    throw std::domain_error("non-finite attention weight");
  }
  return alpha;
}

Eigen::VectorXd fuse(const AttentionWeights& alpha, const Eigen::VectorXd& phi,
                     const Eigen::VectorXd& psi) {
  if (phi.size() != psi.size()) throw std::invalid_argument("phi/psi length mismatch");
  return alpha.invariant * phi + alpha.variant * psi;
}

Eigen::VectorXd attention_fuse(UserId u, ItemId i, const Eigen::VectorXd& phi,
                               const Eigen::VectorXd& psi, const ModelParams& params,
                               const FeatureTable& features, bool softmax) {
  if (static_cast<std::size_t>(phi.size()) != features.dim) {
    throw std::invalid_argument("representation length does not match features");
  }
  return fuse(attention_weights(u, i, params, features, softmax), phi, psi);
}

const char* to_string(WeightMode mode) {
  switch (mode) {
    case WeightMode::Pareto: return "pareto";
    case WeightMode::ErmOnly: return "erm";
    case WeightMode::IrmOnly: return "irm";
  }
  return "pareto";
}

WeightMode parse_weight_mode(const std::string& text) {
  if (text == "pareto") return WeightMode::Pareto;
  if (text == "erm") return WeightMode::ErmOnly;
  if (text == "irm") return WeightMode::IrmOnly;
  throw std::invalid_argument("weight mode must be pareto, erm or irm, got '" + text + "'");
}

double irm_penalty_from_gradients(const std::vector<Eigen::VectorXd>& env_grads,
                                  const Eigen::VectorXd& mu) {
  if (env_grads.size() < 2) return 0.0;
  const double n = static_cast<double>(env_grads.size());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(mu.size());
  for (const auto& g : env_grads) mean += g;
  mean /= n;
  Eigen::VectorXd var = Eigen::VectorXd::Zero(mu.size());
  for (const auto& g : env_grads) var += (g - mean).cwiseAbs2();
  var /= n;
  return var.cwiseProduct(mu).squaredNorm();
}

MaskProblem::MaskProblem(const InteractionSet& data, EnvPartition envs,
                         const FeatureTable& features, MaskConfig config)
    : data_(data), envs_(std::move(envs)), features_(features), config_(config) {
  envs_.validate(data_);
  config_.weights.validate();
  if (features_.num_items() != data_.num_items) {
    throw std::invalid_argument("feature table does not cover the catalogue");
  }
  data_.negatives.clear();
  graph_ = ItemGraph::from_interactions(data_, config_.num_neighbors);
  env_sizes_ = envs_.sizes();
}

void MaskProblem::resample_negatives(Rng& rng) {
  if (config_.negative_ratio == 0) {
    data_.negatives.clear();
    return;
  }
  data_.negatives = sample_negatives(data_, config_.negative_ratio, rng).negatives;
}

void MaskProblem::set_negatives(std::vector<Pair> negatives) {
  if (negatives.size() != data_.positives.size() * config_.negative_ratio) {
    throw std::invalid_argument("expected negative_ratio negatives per positive");
  }
  data_.negatives = std::move(negatives);
  data_.validate();
}

std::size_t MaskProblem::active_envs() const {
  return static_cast<std::size_t>(
      std::count_if(env_sizes_.begin(), env_sizes_.end(), [](auto n) { return n > 0; }));
}

std::vector<MaskProblem::Term> MaskProblem::terms(std::span<const std::size_t> which) const {
  std::vector<std::size_t> all;
  if (which.empty()) {
    all.resize(data_.positives.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    which = all;
  }
  const std::size_t ratio = data_.negatives.empty() ? 0 : config_.negative_ratio;
  const auto& w = config_.weights;
  std::vector<Term> out;
  out.reserve(which.size() * (1 + ratio + graph_.num_neighbors()));
  for (std::size_t k : which) {
    const Pair p = data_.positives[k];
    const std::uint32_t env = envs_.assignment[k];
    const double env_weight =
        config_.normalize_env_loss
            ? config_.loss_scale / static_cast<double>(env_sizes_[env])
            : config_.loss_scale;
    const double nu = degree_coeff(data_.user_degree[p.user], data_.item_degree[p.item]);
    out.push_back({{p.user, p.item, 1.0, 1.0 + w.eta * nu}, env, env_weight});
    for (std::size_t r = 0; r < ratio; ++r) {
      const Pair n = data_.negatives[k * ratio + r];
      const double nu_n = degree_coeff(data_.user_degree[n.user], data_.item_degree[n.item]);
      out.push_back({{n.user, n.item, -1.0, 1.0 + w.eta * nu_n}, env, env_weight});
    }
    if (w.kappa != 0.0) {
      for (const Neighbor& nb : graph_.neighbors(p.item)) {
        out.push_back({{p.user, nb.item, 1.0, w.kappa * nb.score}, env, env_weight});
      }
    }
  }
  return out;
}

std::vector<double> env_losses(const MaskProblem& problem, const MaskSample& sample,
                               const ModelParams& params, const MaskState& state) {
  check_sample(sample, state);
  const auto cache = build_cache(problem, params);
  return evaluate(cache, problem.features(), state.m, sample.epsilon, false, false).env_loss;
}

double erm_loss(const MaskProblem& problem, const MaskSample& sample,
                const ModelParams& params, const MaskState& state) {
  check_sample(sample, state);
  const auto cache = build_cache(problem, params);
  const auto ev = evaluate(cache, problem.features(), state.m, sample.epsilon, false, false);
  return mean_active(ev.env_loss, cache.active);
}

std::vector<Eigen::VectorXd> env_scale_gradients(const MaskProblem& problem,
                                                 const MaskSample& sample,
                                                 const ModelParams& params,
                                                 const MaskState& state) {
  check_sample(sample, state);
  const auto cache = build_cache(problem, params);
  return evaluate(cache, problem.features(), state.m, sample.epsilon, true, false).scale_grad;
}

double irm_penalty(const MaskProblem& problem, const MaskSample& sample,
                   const ModelParams& params, const MaskState& state) {
  check_sample(sample, state);
  const auto cache = build_cache(problem, params);
  return penalty_at(cache, problem.features(), state.m, sample.epsilon);
}

double mask_objective(const MaskProblem& problem, const MaskSample& sample,
                      const ModelParams& params, const MaskState& state,
                      const ParetoWeights& w) {
  check_sample(sample, state);
  const auto cache = build_cache(problem, params);
  const auto ev = evaluate(cache, problem.features(), state.m, sample.epsilon, true, false);
  const double erm = mean_active(ev.env_loss, cache.active);
  const double irm = irm_penalty_from_gradients(active_grads(ev, cache.active),
                                                clipped_mu(state.m, sample.epsilon));
  return w.w_erm * erm + w.w_irm * irm + 0.5 * state.lambda * state.m.squaredNorm();
}

Eigen::VectorXd grad_mask(const MaskProblem& problem, const MaskSample& sample,
                          const ModelParams& params, const MaskState& state,
                          Objective which) {
  check_sample(sample, state);
  const auto cache = build_cache(problem, params);
  if (which == Objective::Erm) {
    return evaluate(cache, problem.features(), state.m, sample.epsilon, false, true).erm_grad;
  }
  return irm_grad_fd(cache, problem.features(), state.m, sample.epsilon,
                     problem.config().fd_step);
}

ModelParams grad_params_erm(const MaskProblem& problem, const MaskSample& sample,
                            const ModelParams& params, const MaskState& state) {
  check_sample(sample, state);
  ModelParams grad = params.zeros_like();
  const double envs = static_cast<double>(std::max<std::size_t>(1, problem.active_envs()));
  erm_backprop(problem.terms(), envs, problem.features(),
               problem.config().attention_softmax, sample, params, state, grad);
  return grad;
}

MaskState update_mask(const MaskState& state, const Eigen::VectorXd& g_erm,
                      const Eigen::VectorXd& g_irm, std::optional<ParetoWeights> fixed,
                      ParetoWeights* used) {
  if (g_erm.size() != state.m.size() || g_irm.size() != state.m.size()) {
    throw std::invalid_argument("gradient length does not match mask");
  }
  const ParetoWeights w = fixed ? *fixed : solve_weights(g_erm, g_irm);
  if (used) *used = w;
  MaskState next = state;
  const Eigen::VectorXd direction = combined_direction(g_erm, g_irm, w);
  next.m = (state.m - state.step * (direction + state.lambda * state.m))
               .cwiseMax(0.0)
               .cwiseMin(1.0);
  return next;
}

MaskState fit_mask(MaskProblem& problem, ModelParams& params, MaskState state,
                   Rng& rng, const MaskLogFn& log) {
  state.validate();
  const MaskConfig& config = problem.config();
  if (static_cast<std::size_t>(state.m.size()) != problem.features().dim) {
    throw std::invalid_argument("mask length does not match features");
  }
  if (config.iters == 0) return state;
  Adam adam(params, config.adam);
  const double envs = static_cast<double>(std::max<std::size_t>(1, problem.active_envs()));
  std::vector<std::size_t> order(problem.data().positives.size());
  const std::size_t batch = std::max<std::size_t>(1, config.batch_size);

  auto model_epoch = [&](const MaskSample& sample) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      const auto terms = problem.terms(std::span(order).subspan(start, end - start));
      ModelParams grad = params.zeros_like();
      erm_backprop(terms, envs, problem.features(), config.attention_softmax, sample,
                   params, state, grad);
      adam.step(params, grad);
    }
    if (!params.all_finite()) throw std::domain_error("mask model diverged");
  };

  for (std::size_t w = 0; w < config.warmup_epochs; ++w) {
    const MaskSample sample = sample_mu(state, rng);
    problem.resample_negatives(rng);
    model_epoch(sample);
  }

  for (std::size_t it = 0; it < config.iters; ++it) {
    const MaskSample sample = sample_mu(state, rng);
    problem.resample_negatives(rng);
    model_epoch(sample);

    const auto cache = build_cache(problem, params);
    const auto ev = evaluate(cache, problem.features(), state.m, sample.epsilon, true, true);
    const Eigen::VectorXd g_irm =
        irm_grad_fd(cache, problem.features(), state.m, sample.epsilon, config.fd_step);

    std::optional<ParetoWeights> fixed;
    if (config.weight_mode == WeightMode::ErmOnly) fixed = ParetoWeights{1.0, 0.0, 1.0};
    if (config.weight_mode == WeightMode::IrmOnly) fixed = ParetoWeights{0.0, 1.0, 0.0};
    ParetoWeights used;
    MaskState next = update_mask(state, ev.erm_grad, g_irm, fixed, &used);
    const double max_step = (next.m - state.m).cwiseAbs().maxCoeff();
    next.iteration = state.iteration + 1;
    if (config.sigma_decay_every > 0 && next.iteration % config.sigma_decay_every == 0) {
      next.sigma *= config.sigma_decay;
    }
    if (log) {
      MaskIterLog entry;
      entry.iteration = next.iteration;
      entry.erm = mean_active(ev.env_loss, cache.active);
      entry.irm = irm_penalty_from_gradients(active_grads(ev, cache.active), sample.mu);
      entry.weights = used;
      entry.erm_grad_norm = ev.erm_grad.norm();
      entry.irm_grad_norm = g_irm.norm();
      entry.max_step = max_step;
      log(entry);
    }
    state = std::move(next);
    if (max_step < config.tol) break;
  }
  return state;
}

void write_mask(const std::filesystem::path& path, const MaskState& state,
                const FeatureTable& features) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (Eigen::Index k = 0; k < state.m.size(); ++k) {
    out << k << '\t' << features.modality_of(static_cast<std::size_t>(k)) << '\t'
        << format_double(state.m(k)) << '\n';
  }
}

Eigen::VectorXd load_mask(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<double> values;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_fields(line, '\t');
    std::int64_t index = 0;
    double v = 0.0;
    if (fields.size() != 3 || !parse_int(fields[0], index) ||
        index != static_cast<std::int64_t>(values.size()) || !parse_double(fields[2], v)) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad mask line",
                       line_no);
    }
    values.push_back(v);
  }
  return Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace painvrl
