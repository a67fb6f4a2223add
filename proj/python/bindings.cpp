#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "painvrl/config.hpp"
#include "painvrl/envid.hpp"
#include "painvrl/eval.hpp"
#include "painvrl/gradcheck.hpp"
#include "painvrl/maskgen.hpp"
#include "painvrl/pareto.hpp"
#include "painvrl/pipeline.hpp"

namespace py = pybind11;
using namespace painvrl;

namespace {

Eigen::Matrix<std::int64_t, Eigen::Dynamic, 2, Eigen::RowMajor> pairs_array(
    const std::vector<Pair>& pairs) {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, 2, Eigen::RowMajor> out(
      static_cast<Eigen::Index>(pairs.size()), 2);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    out(static_cast<Eigen::Index>(k), 0) = pairs[k].user;
    out(static_cast<Eigen::Index>(k), 1) = pairs[k].item;
  }
  return out;
}

py::dict split_dict(const SplitMetrics& s) {
  py::dict d;
  d["k"] = s.k;
  d["users"] = s.users;
  d["precision"] = s.precision;
  d["recall"] = s.recall;
  d["ndcg"] = s.ndcg;
  return d;
}

std::vector<ItemId> to_items(const std::vector<std::int64_t>& v) {
  return {v.begin(), v.end()};
}

}  // namespace

PYBIND11_MODULE(_painvrl, m) {
  m.doc() = "Invariant feature masking for multimedia recommenders";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  py::class_<ParetoWeights>(m, "ParetoWeights")
      .def_readonly("w_erm", &ParetoWeights::w_erm)
      .def_readonly("w_irm", &ParetoWeights::w_irm)
      .def_readonly("raw_w_erm", &ParetoWeights::raw_w_erm)
      .def("__repr__", [](const ParetoWeights& w) {
        return "ParetoWeights(w_erm=" + std::to_string(w.w_erm) +
               ", w_irm=" + std::to_string(w.w_irm) + ")";
      });

  py::class_<DescentCheck>(m, "DescentCheck")
      .def_readonly("dot_erm", &DescentCheck::dot_erm)
      .def_readonly("dot_irm", &DescentCheck::dot_irm)
      .def_readonly("sq_norm", &DescentCheck::sq_norm)
      .def_readonly("zeta", &DescentCheck::zeta)
      .def_readonly("kkt_stationary", &DescentCheck::kkt_stationary);

  m.def("solve_weights", &solve_weights, py::arg("g_erm"), py::arg("g_irm"));
  m.def(
      "combined_direction",
      [](const Eigen::VectorXd& a, const Eigen::VectorXd& b, double w_erm) {
        ParetoWeights w;
        w.w_erm = w_erm;
        w.w_irm = 1.0 - w_erm;
        return combined_direction(a, b, w);
      },
      py::arg("g_erm"), py::arg("g_irm"), py::arg("w_erm"));
  m.def(
      "check_descent",
      [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
        return check_descent(a, b, solve_weights(a, b));
      },
      py::arg("g_erm"), py::arg("g_irm"));
  m.def("oracle_min_norm", &oracle_min_norm, py::arg("g_erm"), py::arg("g_irm"),
        py::arg("grid_steps"));

  m.def("degree_coeff", &degree_coeff, py::arg("user_degree"), py::arg("item_degree"));
  m.def("to_invariant", &to_invariant, py::arg("m"), py::arg("f"));
  m.def("to_variant", &to_variant, py::arg("m"), py::arg("f"));
  m.def("irm_penalty_from_gradients", &irm_penalty_from_gradients, py::arg("env_grads"),
        py::arg("mu"));

  m.def(
      "rank_topk",
      [](const std::vector<double>& scores, std::size_t k, const std::vector<std::int64_t>& excl) {
        const auto items = rank_topk(scores, k, to_items(excl));
        return std::vector<std::int64_t>(items.begin(), items.end());
      },
      py::arg("scores"), py::arg("k"), py::arg("excluded") = std::vector<std::int64_t>{});
  m.def(
      "metrics_at_k",
      [](const std::vector<std::int64_t>& ranked, std::vector<std::int64_t> relevant,
         std::size_t k) {
        std::sort(relevant.begin(), relevant.end());
        const auto r = to_items(ranked), rel = to_items(relevant);
        return py::make_tuple(precision_at_k(r, rel, k), recall_at_k(r, rel, k),
                              ndcg_at_k(r, rel, k));
      },
      py::arg("ranked"), py::arg("relevant"), py::arg("k"),
      "(precision, recall, ndcg) of one ranked list");

  m.def("adjusted_rand_index",
        [](const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
          return adjusted_rand_index(a, b);
        });

  m.def(
      "make_synthetic",
      [](std::size_t num_users, std::size_t num_items, std::size_t d_inv, std::size_t d_spu,
         std::size_t num_envs_true, double flip_strength, double density, std::uint64_t seed) {
        SyntheticSpec spec;
        spec.num_users = num_users;
        spec.num_items = num_items;
        spec.d_inv = d_inv;
        spec.d_spu = d_spu;
        spec.num_envs_true = num_envs_true;
        spec.flip_strength = flip_strength;
        spec.density = density;
        spec.seed = seed;
        const SyntheticData syn = make_synthetic(spec);
        py::dict d;
        d["positives"] = pairs_array(syn.data.positives);
        d["features"] = Eigen::MatrixXd(syn.features.vectors);
        d["environments"] = syn.envs.assignment;
        d["invariant_dims"] = syn.invariant_dims;
        d["spurious_dims"] = syn.spurious_dims;
        return d;
      },
      py::arg("num_users") = 200, py::arg("num_items") = 300, py::arg("d_inv") = 4,
      py::arg("d_spu") = 4, py::arg("num_envs_true") = 2, py::arg("flip_strength") = 1.0,
      py::arg("density") = 0.05, py::arg("seed") = 0);

  m.def(
      "gradcheck",
      [](std::uint64_t seed, double tol) {
        py::list out;
        for (const auto& c : gradcheck(make_tiny_instance(seed), tol)) {
          out.append(py::make_tuple(c.name, c.report.max_rel_diff, c.report.pass));
        }
        return out;
      },
      py::arg("seed") = 0, py::arg("tol") = 1e-4,
      "list of (case, max relative error, passed)");

  m.def("echo_config", [](const std::string& text) { return echo_config(parse_config(text)); },
        py::arg("text"), "parse a config and return it with every key resolved");

  m.def(
      "run",
      [](const std::string& text, const std::filesystem::path& run_dir) {
        RunConfig config = parse_config(text);
        config.run_dir = run_dir.string();
        RunArtifacts art;
        {
          py::gil_scoped_release release;
          art = run(config);
        }
        py::dict d;
        d["mask"] = art.mask.m;
        d["iid"] = split_dict(art.metrics.iid);
        d["ood"] = split_dict(art.metrics.ood);
        py::list w;
        for (const auto& rec : art.outer) w.append(rec.w_erm);
        d["w_erm"] = w;
        return d;
      },
      py::arg("config_text"), py::arg("run_dir"),
      "run the full pipeline; returns the mask, metrics and per-iteration ERM weights");
}
