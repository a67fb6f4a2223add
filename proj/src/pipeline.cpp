#include "painvrl/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "painvrl/checkpoint.hpp"
#include "painvrl/config.hpp"
#include "painvrl/text_io.hpp"

namespace painvrl {
namespace fs = std::filesystem;

namespace {

// Advisory exclusive lock on <run_dir>/.lock for the lifetime of a run.
class RunLock {
 public:
  explicit RunLock(const fs::path& path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) {
      throw std::runtime_error("cannot open lock " + path.string() + ": " +
                               std::strerror(errno));
    }
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw std::runtime_error("run directory is locked by another process: " +
                               path.parent_path().string());
    }
  }
  ~RunLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

template <typename Fn>
auto in_stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const RunStopped&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

std::vector<std::uint32_t> parse_ood_envs(const std::string& text, std::size_t num_envs) {
  if (num_envs < 2) throw std::invalid_argument("generator split needs at least two environments");
  if (text == "last") return {static_cast<std::uint32_t>(num_envs - 1)};
  std::vector<std::uint32_t> out;
  for (auto field : split_fields(text, ',')) {
    std::int64_t e = 0;
    if (!parse_int(trim(field), e) || e < 0 || static_cast<std::size_t>(e) >= num_envs) {
      throw std::invalid_argument("bad ood_envs entry '" + std::string(field) + "'");
    }
    out.push_back(static_cast<std::uint32_t>(e));
  }
  if (out.empty()) throw std::invalid_argument("ood_envs is empty");
  return out;
}

std::vector<double> to_doubles(const std::vector<std::size_t>& v) {
  return {v.begin(), v.end()};
}

std::vector<std::size_t> to_counts(const std::vector<double>& v) {
  std::vector<std::size_t> out;
  for (double x : v) out.push_back(static_cast<std::size_t>(x));
  return out;
}

void store_mask(Checkpoint& ckpt, const MaskState& s) {
  ckpt.put("mask/m", 1, static_cast<std::uint64_t>(s.m.size()),
           std::vector<double>(s.m.data(), s.m.data() + s.m.size()));
  ckpt.put_scalar("mask/sigma", s.sigma);
  ckpt.put_scalar("mask/lambda", s.lambda);
  ckpt.put_scalar("mask/step", s.step);
  ckpt.put_scalar("mask/iteration", static_cast<double>(s.iteration));
}

MaskState restore_mask(const Checkpoint& ckpt) {
  MaskState s;
  const auto& m = ckpt.get("mask/m").values;
  s.m = Eigen::Map<const Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
  s.sigma = ckpt.scalar("mask/sigma");
  s.lambda = ckpt.scalar("mask/lambda");
  s.step = ckpt.scalar("mask/step");
  s.iteration = static_cast<std::size_t>(ckpt.scalar("mask/iteration"));
  return s;
}

void put_vector(Checkpoint& ckpt, const std::string& name, std::vector<double> v) {
  const auto n = static_cast<std::uint64_t>(v.size());
  ckpt.put(name, 1, n, std::move(v));
}

}  // namespace

const char* to_string(SplitSource source) {
  switch (source) {
    case SplitSource::Identify: return "identify";
    case SplitSource::Generator: return "generator";
    case SplitSource::Manifest: return "manifest";
  }
  return "identify";
}

SplitSource parse_split_source(const std::string& text) {
  if (text == "identify") return SplitSource::Identify;
  if (text == "generator") return SplitSource::Generator;
  if (text == "manifest") return SplitSource::Manifest;
  throw std::invalid_argument("split source must be identify, generator or manifest");
}

void RunConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument(what); };
  if (T < 1) fail("T must be at least 1");
  if (num_envs < 1) fail("num_envs must be at least 1");
  if (max_rounds < 1) fail("max_rounds must be at least 1");
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) fail("split_ratio must lie in (0,1)");
  if (K < 1) fail("K must be at least 1");
  if (embedding_size < 1) fail("embedding_size must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (!(mask_init >= 0.0 && mask_init <= 1.0)) fail("mask_init must lie in [0,1]");
  if (!(sigma >= 0.0)) fail("sigma must be non-negative");
  if (!(sigma_decay > 0.0 && sigma_decay <= 1.0)) fail("sigma_decay must lie in (0,1]");
  if (!(lambda >= 0.0)) fail("lambda must be non-negative");
  if (!(mask_step > 0.0)) fail("mask_step must be positive");
  if (!(mask_tol >= 0.0) || !(outer_tol >= 0.0)) fail("tolerances must be non-negative");
  if (!(fd_step > 0.0)) fail("fd_step must be positive");
  if (!(loss_scale > 0.0)) fail("loss_scale must be positive");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    fail("beta1 and beta2 must lie in [0,1)");
  }
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  LossWeights{eta, kappa}.validate();
  if (split_source == SplitSource::Manifest) {
    if (split_dir.empty()) fail("split_source = manifest needs split_dir");
    if (features.empty()) fail("split_source = manifest needs features");
  }
  if (!interactions.empty() && features.empty()) fail("interactions given without features");
  if (interactions.empty() && split_source != SplitSource::Manifest) synthetic.validate();
  if (!interactions.empty() && split_source == SplitSource::Generator && environments.empty()) {
    fail("split_source = generator needs environments for file input");
  }
}

TrainConfig RunConfig::train_config(std::size_t epochs) const {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = batch_size;
  tc.negative_ratio = neg_ratio;
  tc.weights = {eta, kappa};
  tc.adam = {learning_rate, beta1, beta2, adam_eps};
  return tc;
}

IdentifyConfig RunConfig::identify_config() const {
  IdentifyConfig ic;
  ic.num_envs = num_envs;
  ic.max_rounds = max_rounds;
  ic.epochs = epochs_per_round;
  ic.embedding_size = embedding_size;
  ic.hidden_width = hidden_width;
  ic.num_neighbors = num_neighbors;
  ic.train = train_config(epochs_per_round);
  return ic;
}

MaskConfig RunConfig::mask_config() const {
  MaskConfig mc;
  mc.iters = iters_mask;
  mc.weights = {eta, kappa};
  mc.negative_ratio = neg_ratio;
  mc.num_neighbors = num_neighbors;
  mc.batch_size = batch_size;
  mc.adam = {learning_rate, beta1, beta2, adam_eps};
  mc.warmup_epochs = mask_warmup;
  mc.sigma_decay = sigma_decay;
  mc.sigma_decay_every = sigma_decay_every;
  mc.attention_softmax = attention_softmax;
  mc.weight_mode = weight_mode;
  mc.tol = mask_tol;
  mc.fd_step = fd_step;
  mc.normalize_env_loss = normalize_env_loss;
  mc.loss_scale = loss_scale;
  return mc;
}

MaskState RunConfig::initial_mask(std::size_t dim) const {
  MaskState s = MaskState::constant(dim, mask_init);
  s.sigma = sigma;
  s.lambda = lambda;
  s.step = mask_step;
  return s;
}

PreparedData prepare_data(const RunConfig& config) {
  config.validate();
  PreparedData out;
  if (config.split_source == SplitSource::Manifest) {
    out.split = load_split(config.split_dir, out.ids);
    out.features = load_features(config.features, out.ids, true);
    set_modalities(out.features, config.modalities);
    return out;
  }

  InteractionSet full;
  std::optional<EnvPartition> truth;
  if (config.interactions.empty()) {
    SyntheticSpec spec = config.synthetic;
    spec.seed = config.seed;
    SyntheticData synth = make_synthetic(spec);
    full = std::move(synth.data);
    out.features = std::move(synth.features);
    truth = std::move(synth.envs);
    for (std::size_t u = 0; u < full.num_users; ++u) out.ids.users.push_back(static_cast<std::int64_t>(u));
    for (std::size_t i = 0; i < full.num_items; ++i) out.ids.items.push_back(static_cast<std::int64_t>(i));
  } else {
    full = load_interactions(config.interactions, out.ids);
    out.features = load_features(config.features, out.ids);
    if (out.ids.items.size() != full.num_items) {
      full.num_items = out.ids.items.size();
      full.recount_degrees();
    }
    set_modalities(out.features, config.modalities);
    if (!config.environments.empty()) {
      truth = load_partition(config.environments, full, &out.ids);
    }
  }

  EnvPartition two;
  if (config.split_source == SplitSource::Generator) {
    if (!truth) throw std::invalid_argument("no generator environments available");
    const auto ood = parse_ood_envs(config.ood_envs, truth->num_envs);
    two.num_envs = 2;
    two.assignment.reserve(truth->assignment.size());
    for (auto e : truth->assignment) {
      two.assignment.push_back(std::find(ood.begin(), ood.end(), e) != ood.end() ? 1u : 0u);
    }
    const auto sizes = two.sizes();
    if (sizes[1] >= sizes[0]) {
      throw std::invalid_argument("held-out environments must be smaller than the rest");
    }
  } else {
    IdentifyConfig ic = config.identify_config();
    ic.num_envs = 2;
    Rng rng = make_rng(config.seed, "split");
    const RowMatrix psi =
        variant_content(config.initial_mask(out.features.dim).m, out.features);
    two = identify(full, psi, ic, rng).partition;
  }
  Rng cut = make_rng(config.seed, "split", 1);
  out.split = split_iid_ood(full, two, config.split_ratio, cut);

  if (truth) {
    std::map<Pair, std::uint32_t> env_of;
    for (std::size_t k = 0; k < full.positives.size(); ++k) {
      env_of[full.positives[k]] = truth->assignment[k];
    }
    EnvPartition t;
    t.num_envs = truth->num_envs;
    for (const Pair& p : out.split.train.positives) t.assignment.push_back(env_of.at(p));
    out.train_truth = std::move(t);
  }
  return out;
}

std::size_t complementarity_violations(const Eigen::VectorXd& m, const FeatureTable& features) {
  const RowMatrix phi = invariant_content(m, features);
  const RowMatrix psi = variant_content(m, features);
  std::size_t bad = 0;
  for (Eigen::Index i = 0; i < features.vectors.rows(); ++i) {
    for (Eigen::Index k = 0; k < features.vectors.cols(); ++k) {
      if (phi(i, k) + psi(i, k) != features.vectors(i, k)) {
        ++bad;
        break;
      }
    }
  }
  return bad;
}

ModelParams train_final(const MaskState& mask, const InteractionSet& train,
                        const FeatureTable& features, const RunConfig& config, Rng& rng,
                        const EpochCallback& on_epoch) {
  const RowMatrix phi = invariant_content(mask.m, features);
  ModelParams params = ModelParams::init(train.num_users, train.num_items,
                                         config.embedding_size, features.dim,
                                         config.hidden_width, rng);
  const ItemGraph graph = ItemGraph::from_interactions(train, config.num_neighbors);
  return painvrl::train(std::move(params), train, graph, phi,
                        config.train_config(config.epochs_final), rng, on_epoch);
}

void write_log(const fs::path& path, const std::vector<LogEntry>& log) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& e : log) {
    out << e.epoch << '\t' << e.stage << '\t' << format_double(e.loss) << '\t'
        << (e.w_erm ? format_double(*e.w_erm) : std::string("-")) << '\n';
  }
}

RunArtifacts run(const RunConfig& config, const RunOptions& options) {
  in_stage("config", [&] {
    config.validate();
    if (config.run_dir.empty()) throw std::invalid_argument("run_dir is not set");
  });
  const fs::path dir = config.run_dir;
  const fs::path ckpt_dir = dir / "checkpoints";
  in_stage("setup", [&] { fs::create_directories(dir); });
  RunLock lock(dir / ".lock");

  in_stage("setup", [&] {
    const fs::path echo = dir / "config";
    if (options.resume && fs::exists(echo)) {
      if (!(load_config(echo) == config)) {
        throw std::invalid_argument("config differs from the one recorded in " + echo.string());
      }
    }
    if (!options.resume) fs::remove_all(ckpt_dir);
    fs::create_directories(ckpt_dir);
    std::ofstream(echo, std::ios::binary | std::ios::trunc) << echo_config(config);
  });
  auto stop_point = [&](const std::string& phase) {
    if (options.stop_after == phase) throw RunStopped(phase);
  };

  PreparedData data = in_stage("data", [&] {
    PreparedData d = prepare_data(config);
    write_split(dir / "split", d.split, d.ids);
    return d;
  });
  const InteractionSet& train = data.split.train;
  const FeatureTable& features = data.features;

  RunArtifacts art;
  art.mask = config.initial_mask(features.dim);
  ModelParams mask_model = in_stage("maskgen", [&] {
    Rng rng = make_rng(config.seed, "maskgen", 0);
    return ModelParams::init(train.num_users, train.num_items, config.embedding_size,
                             features.dim, config.hidden_width, rng);
  });
  const IdentifyConfig icfg = config.identify_config();
  const MaskConfig mcfg = config.mask_config();

  for (std::size_t t = 1; t <= config.T; ++t) {
    const std::string tag = "t" + std::to_string(t);
    const fs::path envid_path = ckpt_dir / (tag + "_envid.ckpt");
    const fs::path mask_path = ckpt_dir / (tag + "_mask.ckpt");
    OuterRecord rec;
    rec.t = t;
    const Eigen::VectorXd previous = art.mask.m;

    in_stage(tag + ".envid", [&] {
      if (options.resume && fs::exists(envid_path)) {
        const Checkpoint ckpt = Checkpoint::load(envid_path);
        art.partition.num_envs = static_cast<std::size_t>(ckpt.scalar("partition/num_envs"));
        art.partition.assignment.clear();
        for (double v : ckpt.get("partition/assignment").values) {
          art.partition.assignment.push_back(static_cast<std::uint32_t>(v));
        }
        art.partition.validate(train);
        rec.reassigned = to_counts(ckpt.get("log/reassigned").values);
        return;
      }
      const RowMatrix psi = variant_content(art.mask.m, features);
      Rng rng = make_rng(config.seed, "envid", t);
      IdentifyResult r = identify(train, psi, icfg, rng);
      art.partition = std::move(r.partition);
      for (const auto& round : r.rounds) rec.reassigned.push_back(round.reassigned);
      Checkpoint ckpt;
      ckpt.put_scalar("partition/num_envs", static_cast<double>(art.partition.num_envs));
      put_vector(ckpt, "partition/assignment",
                 std::vector<double>(art.partition.assignment.begin(),
                                     art.partition.assignment.end()));
      put_vector(ckpt, "log/reassigned", to_doubles(rec.reassigned));
      ckpt.save(envid_path);
    });
    for (std::size_t r = 0; r < rec.reassigned.size(); ++r) {
      art.log.push_back({r + 1, tag + ".envid.reassigned",
                         static_cast<double>(rec.reassigned[r]), std::nullopt});
    }
    stop_point(tag + "_envid");

    std::vector<double> erm;
    in_stage(tag + ".mask", [&] {
      if (options.resume && fs::exists(mask_path)) {
        const Checkpoint ckpt = Checkpoint::load(mask_path);
        art.mask = restore_mask(ckpt);
        mask_model = load_model(ckpt, "mask_model");
        rec.w_erm = ckpt.get("log/w_erm").values;
        erm = ckpt.get("log/erm").values;
        return;
      }
      MaskProblem problem(train, art.partition, features, mcfg);
      Rng rng = make_rng(config.seed, "maskgen", t);
      art.mask = fit_mask(problem, mask_model, art.mask, rng, [&](const MaskIterLog& e) {
        rec.w_erm.push_back(e.weights.w_erm);
        erm.push_back(e.erm);
      });
      Checkpoint ckpt;
      store_mask(ckpt, art.mask);
      store_model(ckpt, "mask_model", mask_model);
      put_vector(ckpt, "log/w_erm", rec.w_erm);
      put_vector(ckpt, "log/erm", erm);
      ckpt.save(mask_path);
    });
    for (std::size_t i = 0; i < erm.size(); ++i) {
      art.log.push_back({i + 1, tag + ".mask", erm[i], rec.w_erm[i]});
    }
    rec.mask = art.mask.m;
    rec.complementarity_violations = complementarity_violations(art.mask.m, features);
    art.outer.push_back(std::move(rec));
    stop_point(tag + "_mask");

    if ((art.mask.m - previous).cwiseAbs().maxCoeff() < config.outer_tol) break;
  }

  const fs::path final_path = ckpt_dir / "final.ckpt";
  std::vector<double> final_loss;
  art.final_model = in_stage("final", [&] {
    if (options.resume && fs::exists(final_path)) {
      const Checkpoint ckpt = Checkpoint::load(final_path);
      final_loss = ckpt.get("log/loss").values;
      return load_model(ckpt, "final");
    }
    Rng rng = make_rng(config.seed, "final");
    ModelParams model = train_final(art.mask, train, features, config, rng,
                                    [&](std::size_t, const ModelParams&, double loss) {
                                      final_loss.push_back(loss);
                                    });
    Checkpoint ckpt;
    store_model(ckpt, "final", model);
    put_vector(ckpt, "log/loss", final_loss);
    ckpt.save(final_path);
    return model;
  });
  for (std::size_t e = 0; e < final_loss.size(); ++e) {
    art.log.push_back({e + 1, "final", final_loss[e], std::nullopt});
  }
  stop_point("final");

  in_stage("evaluate", [&] {
    const RowMatrix phi = invariant_content(art.mask.m, features);
    art.metrics = evaluate(art.final_model, phi, data.split, config.K);
    write_metrics(dir / "metrics.tsv", art.metrics);
    write_mask(dir / "mask.tsv", art.mask, features);
    write_partition(dir / "partition.tsv", train, art.partition, &data.ids);
    write_log(dir / "log.txt", art.log);
  });
  return art;
}

}  // namespace painvrl
