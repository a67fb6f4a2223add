#include "painvrl/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <tuple>

#include "painvrl/text_io.hpp"

namespace painvrl {
namespace {

struct Entry {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* expected) {
  throw ConfigError("key '" + key + "': expected " + expected + ", got '" + value + "'");
}

template <typename T>
Entry count_entry(const char* key, T RunConfig::*field) {
  return {key,
          [key, field](RunConfig& c, const std::string& v) {
            std::int64_t x = 0;
            if (!parse_int(v, x) || x < 0) bad_value(key, v, "a non-negative integer");
            c.*field = static_cast<T>(x);
          },
          [field](const RunConfig& c) { return std::to_string(c.*field); }};
}

template <typename T>
Entry synth_count(const char* key, T SyntheticSpec::*field) {
  return {key,
          [key, field](RunConfig& c, const std::string& v) {
            std::int64_t x = 0;
            if (!parse_int(v, x) || x < 0) bad_value(key, v, "a non-negative integer");
            c.synthetic.*field = static_cast<T>(x);
          },
          [field](const RunConfig& c) { return std::to_string(c.synthetic.*field); }};
}

Entry real_entry(const char* key, double RunConfig::*field) {
  return {key,
          [key, field](RunConfig& c, const std::string& v) {
            if (!parse_double(v, c.*field)) bad_value(key, v, "a number");
          },
          [field](const RunConfig& c) { return format_double(c.*field); }};
}

Entry synth_real(const char* key, double SyntheticSpec::*field) {
  return {key,
          [key, field](RunConfig& c, const std::string& v) {
            if (!parse_double(v, c.synthetic.*field)) bad_value(key, v, "a number");
          },
          [field](const RunConfig& c) { return format_double(c.synthetic.*field); }};
}

Entry text_entry(const char* key, std::string RunConfig::*field) {
  return {key, [field](RunConfig& c, const std::string& v) { c.*field = v; },
          [field](const RunConfig& c) { return c.*field; }};
}

Entry bool_entry(const char* key, bool RunConfig::*field) {
  return {key,
          [key, field](RunConfig& c, const std::string& v) {
            if (v == "true" || v == "1") c.*field = true;
            else if (v == "false" || v == "0") c.*field = false;
            else bad_value(key, v, "true or false");
          },
          [field](const RunConfig& c) { return std::string(c.*field ? "true" : "false"); }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      {"seed",
       [](RunConfig& c, const std::string& v) {
         std::int64_t x = 0;
         if (!parse_int(v, x) || x < 0) bad_value("seed", v, "a non-negative integer");
         c.seed = static_cast<std::uint64_t>(x);
       },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      text_entry("interactions", &RunConfig::interactions),
      text_entry("features", &RunConfig::features),
      text_entry("modalities", &RunConfig::modalities),
      text_entry("environments", &RunConfig::environments),
      {"split_source",
       [](RunConfig& c, const std::string& v) {
         try {
           c.split_source = parse_split_source(v);
         } catch (const std::invalid_argument&) {
           bad_value("split_source", v, "identify, generator or manifest");
         }
       },
       [](const RunConfig& c) { return std::string(to_string(c.split_source)); }},
      text_entry("split_dir", &RunConfig::split_dir),
      text_entry("ood_envs", &RunConfig::ood_envs),
      real_entry("split_ratio", &RunConfig::split_ratio),
      synth_count("num_users", &SyntheticSpec::num_users),
      synth_count("num_items", &SyntheticSpec::num_items),
      synth_count("d_inv", &SyntheticSpec::d_inv),
      synth_count("d_spu", &SyntheticSpec::d_spu),
      synth_count("num_envs_true", &SyntheticSpec::num_envs_true),
      synth_real("flip_strength", &SyntheticSpec::flip_strength),
      synth_real("density", &SyntheticSpec::density),
      synth_real("major_share", &SyntheticSpec::major_share),
      synth_real("spurious_scale", &SyntheticSpec::spurious_scale),
      synth_real("noise_scale", &SyntheticSpec::noise_scale),
      text_entry("run_dir", &RunConfig::run_dir),
      text_entry("output_dir", &RunConfig::output_dir),
      count_entry("T", &RunConfig::T),
      real_entry("outer_tol", &RunConfig::outer_tol),
      count_entry("num_envs", &RunConfig::num_envs),
      count_entry("max_rounds", &RunConfig::max_rounds),
      count_entry("epochs_per_round", &RunConfig::epochs_per_round),
      count_entry("iters_mask", &RunConfig::iters_mask),
      count_entry("mask_warmup", &RunConfig::mask_warmup),
      real_entry("mask_init", &RunConfig::mask_init),
      real_entry("sigma", &RunConfig::sigma),
      real_entry("sigma_decay", &RunConfig::sigma_decay),
      count_entry("sigma_decay_every", &RunConfig::sigma_decay_every),
      real_entry("lambda", &RunConfig::lambda),
      real_entry("mask_step", &RunConfig::mask_step),
      real_entry("mask_tol", &RunConfig::mask_tol),
      real_entry("fd_step", &RunConfig::fd_step),
      bool_entry("attention_softmax", &RunConfig::attention_softmax),
      bool_entry("normalize_env_loss", &RunConfig::normalize_env_loss),
      real_entry("loss_scale", &RunConfig::loss_scale),
      {"weight_mode",
       [](RunConfig& c, const std::string& v) {
         try {
           c.weight_mode = parse_weight_mode(v);
         } catch (const std::invalid_argument&) {
           bad_value("weight_mode", v, "pareto, erm or irm");
         }
       },
       [](const RunConfig& c) { return std::string(to_string(c.weight_mode)); }},
      count_entry("epochs_final", &RunConfig::epochs_final),
      count_entry("embedding_size", &RunConfig::embedding_size),
      count_entry("hidden_width", &RunConfig::hidden_width),
      count_entry("num_neighbors", &RunConfig::num_neighbors),
      real_entry("eta", &RunConfig::eta),
      real_entry("kappa", &RunConfig::kappa),
      count_entry("neg_ratio", &RunConfig::neg_ratio),
      count_entry("batch_size", &RunConfig::batch_size),
      real_entry("learning_rate", &RunConfig::learning_rate),
      real_entry("beta1", &RunConfig::beta1),
      real_entry("beta2", &RunConfig::beta2),
      real_entry("adam_eps", &RunConfig::adam_eps),
      count_entry("K", &RunConfig::K),
  };
  return table;
}

// Parsed (key, value, line) triples without interpretation.
std::vector<std::tuple<std::string, std::string, std::size_t>> scan(const std::string& text) {
  std::vector<std::tuple<std::string, std::string, std::size_t>> out;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::string(key), std::string(value), line_no);
  }
  return out;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig config;
  std::set<std::string> seen;
  for (const auto& [key, value, line] : scan(text)) {
    const auto& table = entries();
    auto it = std::find_if(table.begin(), table.end(),
                           [&](const Entry& e) { return key == e.key; });
    if (it == table.end()) {
      throw ConfigError("line " + std::to_string(line) + ": unknown key '" + key + "'");
    }
    if (!seen.insert(key).second) {
      throw ConfigError("line " + std::to_string(line) + ": key '" + key + "' set twice");
    }
    it->set(config, value);
  }
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return parse_config(text.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string echo_config(const RunConfig& config) {
  std::string out;
  for (const auto& e : entries()) {
    out += e.key;
    out += " = ";
    out += e.get(config);
    out += '\n';
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& e : entries()) keys.emplace_back(e.key);
  return keys;
}

void require_keys(const std::string& text, const std::vector<std::string>& keys) {
  const auto present = scan(text);
  for (const auto& key : keys) {
    const bool found = std::any_of(present.begin(), present.end(),
                                   [&](const auto& p) { return std::get<0>(p) == key; });
    if (!found) throw ConfigError("missing required key '" + key + "'");
  }
}

}  // namespace painvrl
