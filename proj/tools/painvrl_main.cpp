#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "painvrl/checkpoint.hpp"
#include "painvrl/config.hpp"
#include "painvrl/gradcheck.hpp"
#include "painvrl/pareto.hpp"
#include "painvrl/pipeline.hpp"
#include "painvrl/text_io.hpp"

namespace fs = std::filesystem;
using namespace painvrl;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int cmd_synth(const std::string& config_path) {
  const std::string text = read_text(config_path);
  require_keys(text, {"output_dir"});
  const RunConfig config = parse_config(text);
  SyntheticSpec spec = config.synthetic;
  spec.seed = config.seed;
  const SyntheticData synth = make_synthetic(spec);
  const fs::path out = config.output_dir;
  fs::create_directories(out);
  write_interactions(out / "interactions.tsv", synth.data.positives, nullptr);
  write_features(out / "features.tsv", synth.features, nullptr);
  write_partition(out / "environments.tsv", synth.data, synth.envs, nullptr);
  std::cout << "wrote " << synth.data.positives.size() << " interactions, "
            << synth.features.num_items() << " feature rows to " << out.string() << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& run_dir, bool resume) {
  RunConfig config = load_config(config_path);
  if (!run_dir.empty()) config.run_dir = run_dir;
  if (config.run_dir.empty()) throw ConfigError("missing required key 'run_dir'");
  if (!config.interactions.empty() && !fs::exists(config.interactions)) {
    throw std::runtime_error("interactions file not found: " + config.interactions);
  }
  if (!config.features.empty() && !fs::exists(config.features)) {
    throw std::runtime_error("features file not found: " + config.features);
  }
  RunOptions options;
  options.resume = resume;
  const RunArtifacts art = run(config, options);
  for (const auto* s : {&art.metrics.iid, &art.metrics.ood}) {
    std::cout << s->split << "\tP@" << s->k << ' ' << format_fixed(s->precision, 6)
              << "\tR@" << s->k << ' ' << format_fixed(s->recall, 6) << "\tN@" << s->k
              << ' ' << format_fixed(s->ndcg, 6) << '\n';
  }
  return 0;
}

int cmd_evaluate(const std::string& run_dir, std::size_t k_override, const std::string& output) {
  const fs::path dir = run_dir;
  RunConfig config = load_config(dir / "config");
  const fs::path ckpt_path = dir / "checkpoints" / "final.ckpt";
  if (!fs::exists(ckpt_path)) throw std::runtime_error("missing checkpoint " + ckpt_path.string());
  const ModelParams model = load_model(Checkpoint::load(ckpt_path), "final");
  MaskState mask;
  mask.m = load_mask(dir / "mask.tsv");
  IdMap ids;
  const SplitSpec split = load_split(dir / "split", ids);
  FeatureTable features;
  if (config.interactions.empty() && config.split_source != SplitSource::Manifest) {
    SyntheticSpec spec = config.synthetic;
    spec.seed = config.seed;
    features = make_synthetic(spec).features;
  } else {
    features = load_features(config.features, ids, true);
    set_modalities(features, config.modalities);
  }
  const std::size_t k = k_override > 0 ? k_override : config.K;
  const MetricTable table = evaluate(model, invariant_content(mask.m, features), split, k);
  const fs::path out = output.empty() ? dir / "metrics.tsv" : fs::path(output);
  write_metrics(out, table);
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

Eigen::VectorXd parse_vector(const std::string& line) {
  std::istringstream in(line);
  std::vector<double> v;
  std::string tok;
  while (in >> tok) {
    double x = 0.0;
    if (!parse_double(tok, x)) throw std::runtime_error("bad number '" + tok + "'");
    v.push_back(x);
  }
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

int cmd_pareto_demo(const std::string& input) {
  std::ifstream file;
  std::istream* in = &std::cin;
  if (!input.empty() && input != "-") {
    file.open(input);
    if (!file) throw std::runtime_error("cannot open " + input);
    in = &file;
  }
  std::string a, b;
  if (!std::getline(*in, a) || !std::getline(*in, b)) {
    throw std::runtime_error("expected two lines: g_erm then g_irm");
  }
  const Eigen::VectorXd g_erm = parse_vector(a);
  const Eigen::VectorXd g_irm = parse_vector(b);
  if (g_erm.size() != g_irm.size() || g_erm.size() == 0) {
    throw std::runtime_error("gradients must be non-empty and of equal length");
  }
  const ParetoWeights w = solve_weights(g_erm, g_irm);
  const DescentCheck c = check_descent(g_erm, g_irm, w);
  const Eigen::VectorXd dir = combined_direction(g_erm, g_irm, w);
  std::cout << "w_erm\t" << format_double(w.w_erm) << "\nw_irm\t" << format_double(w.w_irm)
            << "\ndirection";
  for (Eigen::Index k = 0; k < dir.size(); ++k) std::cout << '\t' << format_double(dir(k));
  std::cout << "\ndot_erm\t" << format_double(c.dot_erm) << "\ndot_irm\t"
            << format_double(c.dot_irm) << "\nsq_norm\t" << format_double(c.sq_norm)
            << "\nkkt_stationary\t" << (c.kkt_stationary ? "true" : "false") << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& config_path, double tol, bool inject_bug) {
  std::uint64_t seed = 0;
  if (!config_path.empty()) seed = load_config(config_path).seed;
  const auto cases = gradcheck(make_tiny_instance(seed), tol, inject_bug);
  bool ok = true;
  for (const auto& c : cases) {
    std::cout << c.name << "\tmax_rel " << format_double(c.report.max_rel_diff) << "\tmax_abs "
              << format_double(c.report.max_abs_diff) << "\tworst_index "
              << c.report.worst_index << '\t' << (c.report.pass ? "pass" : "FAIL") << '\n';
    ok = ok && c.report.pass;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Invariant feature masking for multimedia recommenders"};
  app.require_subcommand(1);

  std::string config_path, run_dir, output, input;
  bool resume = false, inject_bug = false;
  std::size_t k = 0;
  double tol = 1e-4;

  auto* synth = app.add_subcommand("synth", "write a planted synthetic dataset");
  synth->add_option("-c,--config", config_path, "config file")->required();

  auto* train = app.add_subcommand("train", "run the full training pipeline");
  train->add_option("-c,--config", config_path, "config file")->required();
  train->add_option("--run-dir", run_dir, "overrides run_dir");
  train->add_flag("--resume", resume, "continue from existing checkpoints");

  auto* eval = app.add_subcommand("evaluate", "recompute metrics of a finished run");
  eval->add_option("--run-dir", run_dir, "run directory")->required();
  eval->add_option("-k,--k", k, "cutoff K (default from config)");
  eval->add_option("-o,--output", output, "metrics file (default <run-dir>/metrics.tsv)");

  auto* pareto = app.add_subcommand("pareto-demo", "solve the two-gradient weights");
  pareto->add_option("input", input, "file with g_erm and g_irm lines (default stdin)");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grad->add_option("-c,--config", config_path, "config file (seed)");
  grad->add_option("--tol", tol, "relative tolerance");
  grad->add_flag("--inject-bug", inject_bug, "perturb one analytic entry");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(config_path);
    if (*train) return cmd_train(config_path, run_dir, resume);
    if (*eval) return cmd_evaluate(run_dir, k, output);
    if (*pareto) return cmd_pareto_demo(input);
    if (*grad) return cmd_gradcheck(config_path, tol, inject_bug);
  } catch (const StageError& e) {
    std::cerr << "error in stage " << e.stage() << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
