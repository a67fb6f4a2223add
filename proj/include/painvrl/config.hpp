#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "painvrl/pipeline.hpp"

namespace painvrl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// `key = value` lines; `#` starts a comment. Unknown or repeated keys are
// errors. Keys not present keep their defaults.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// Every key in a fixed order; parse_config(echo_config(c)) == c.
std::string echo_config(const RunConfig& config);

// Keys in echo order.
std::vector<std::string> config_keys();

// Throws ConfigError naming the first key of `keys` that `text` does not set.
void require_keys(const std::string& text, const std::vector<std::string>& keys);

}  // namespace painvrl
