#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace painvrl {

std::vector<std::string_view> split_fields(std::string_view line, char sep);

// Whole-field parses; leading/trailing garbage fails.
bool parse_int(std::string_view text, std::int64_t& out);
bool parse_double(std::string_view text, double& out);

// Shortest decimal form that round-trips to the same double.
std::string format_double(double value);

// Fixed-point with `digits` fractional digits.
std::string format_fixed(double value, int digits);

std::string_view trim(std::string_view text);

}  // namespace painvrl
