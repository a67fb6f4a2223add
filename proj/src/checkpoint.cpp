#include "painvrl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace painvrl {
namespace {

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t b = 0; b < sizeof(T); ++b) {
    out.push_back(static_cast<char>((value >> (8 * b)) & 0xff));
  }
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <typename T>
  T le() {
    need(sizeof(T));
    T value = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) {
      value |= static_cast<T>(static_cast<unsigned char>(data_[pos_ + b])) << (8 * b);
    }
    pos_ += sizeof(T);
    return value;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw std::runtime_error("checkpoint truncated");
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put(const std::string& name, std::uint64_t rows,
                     std::uint64_t cols, std::vector<double> values) {
  if (rows * cols != values.size()) {
    throw std::invalid_argument("checkpoint block " + name + " has wrong size");
  }
  for (auto& b : blocks_) {
    if (b.name == name) {
      b = {name, rows, cols, std::move(values)};
      return;
    }
  }
  blocks_.push_back({name, rows, cols, std::move(values)});
}

void Checkpoint::put_scalar(const std::string& name, double value) {
  put(name, 1, 1, {value});
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return true;
  }
  return false;
}

const Checkpoint::Block& Checkpoint::get(const std::string& name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return b;
  }
  throw std::out_of_range("checkpoint has no block " + name);
}

double Checkpoint::scalar(const std::string& name) const {
  const auto& b = get(name);
  if (b.values.size() != 1) throw std::invalid_argument(name + " is not a scalar");
  return b.values[0];
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::string out(kMagic, 8);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(blocks_.size()));
  for (const auto& b : blocks_) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(b.name.size()));
    out += b.name;
    put_le<std::uint64_t>(out, b.rows);
    put_le<std::uint64_t>(out, b.cols);
  }
  for (const auto& b : blocks_) {
    for (double v : b.values) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(std::move(data));
  if (r.bytes(8) != std::string(kMagic, 8)) {
    throw std::runtime_error(path.string() + " is not a checkpoint");
  }
  const auto version = r.le<std::uint32_t>();
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.le<std::uint32_t>();
  Checkpoint ckpt;
  for (std::uint32_t k = 0; k < count; ++k) {
    Block b;
    b.name = r.bytes(r.le<std::uint32_t>());
    b.rows = r.le<std::uint64_t>();
    b.cols = r.le<std::uint64_t>();
    ckpt.blocks_.push_back(std::move(b));
  }
  for (auto& b : ckpt.blocks_) {
    b.values.resize(b.rows * b.cols);
    for (auto& v : b.values) v = std::bit_cast<double>(r.le<std::uint64_t>());
  }
  if (!r.done()) throw std::runtime_error("trailing bytes in " + path.string());
  return ckpt;
}

void store_model(Checkpoint& ckpt, const std::string& prefix,
                 const ModelParams& params) {
  ckpt.put_scalar(prefix + "/shape.users", static_cast<double>(params.num_users()));
  ckpt.put_scalar(prefix + "/shape.items", static_cast<double>(params.num_items()));
  ckpt.put_scalar(prefix + "/shape.k", static_cast<double>(params.embedding_size()));
  ckpt.put_scalar(prefix + "/shape.d", static_cast<double>(params.content_dim()));
  ckpt.put_scalar(prefix + "/shape.hidden", static_cast<double>(params.hidden_width()));
  params.for_each_block([&](const char* name, const double* data, std::size_t n) {
    ckpt.put(prefix + "/" + name, 1, n, std::vector<double>(data, data + n));
  });
}

ModelParams load_model(const Checkpoint& ckpt, const std::string& prefix) {
  auto dim = [&](const char* key) {
    return static_cast<std::size_t>(ckpt.scalar(prefix + "/shape." + key));
  };
  ModelParams params = ModelParams::zeros(dim("users"), dim("items"), dim("k"),
                                          dim("d"), dim("hidden"));
  params.for_each_block([&](const char* name, double* data, std::size_t n) {
    const auto& b = ckpt.get(prefix + "/" + name);
    if (b.values.size() != n) {
      throw std::runtime_error("checkpoint block " + b.name + " has wrong size");
    }
    std::copy(b.values.begin(), b.values.end(), data);
  });
  return params;
}

}  // namespace painvrl
