#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "painvrl/backbone.hpp"

namespace painvrl {

// Named blocks of doubles. On disk:
//   "PIRLCKPT" | u32 version | u32 block count |
//   per block: u32 name length, name bytes, u64 rows, u64 cols |
//   then every block's values as little-endian IEEE-754 binary64, in order.
class Checkpoint {
 public:
  static constexpr char kMagic[9] = "PIRLCKPT";
  static constexpr std::uint32_t kVersion = 1;

  struct Block {
    std::string name;
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;
    std::vector<double> values;

    bool operator==(const Block&) const = default;
  };

  void put(const std::string& name, std::uint64_t rows, std::uint64_t cols,
           std::vector<double> values);
  void put_scalar(const std::string& name, double value);
  bool has(const std::string& name) const;
  const Block& get(const std::string& name) const;
  double scalar(const std::string& name) const;
  const std::vector<Block>& blocks() const { return blocks_; }

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  bool operator==(const Checkpoint&) const = default;

 private:
  std::vector<Block> blocks_;
};

void store_model(Checkpoint& ckpt, const std::string& prefix,
                 const ModelParams& params);
ModelParams load_model(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace painvrl
