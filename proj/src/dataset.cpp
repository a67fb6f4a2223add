#include "painvrl/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string_view>
#include <unordered_map>
#include <unordered_set>

#include "painvrl/text_io.hpp"

namespace painvrl {
namespace {

std::uint64_t pair_key(Pair p) {
  return (static_cast<std::uint64_t>(p.user) << 32) | p.item;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::uint32_t lookup(std::vector<std::int64_t>& raws,
                     std::unordered_map<std::int64_t, std::uint32_t>& index,
                     std::int64_t raw, bool extend, const char* kind) {
  auto it = index.find(raw);
  if (it != index.end()) return it->second;
  if (!extend) {
    throw std::out_of_range(std::string("unknown ") + kind + " id " +
                            std::to_string(raw));
  }
  const auto dense = static_cast<std::uint32_t>(raws.size());
  raws.push_back(raw);
  index.emplace(raw, dense);
  return dense;
}

std::unordered_map<std::int64_t, std::uint32_t> build_index(
    const std::vector<std::int64_t>& raws) {
  std::unordered_map<std::int64_t, std::uint32_t> index;
  for (std::size_t k = 0; k < raws.size(); ++k) {
    index.emplace(raws[k], static_cast<std::uint32_t>(k));
  }
  return index;
}

std::int64_t raw_or_dense(const std::vector<std::int64_t>* raws,
                          std::uint32_t dense) {
  return raws ? (*raws)[dense] : static_cast<std::int64_t>(dense);
}

}  // namespace

void InteractionSet::recount_degrees() {
  user_degree.assign(num_users, 0);
  item_degree.assign(num_items, 0);
  for (const Pair& p : positives) {
    ++user_degree[p.user];
    ++item_degree[p.item];
  }
}

void InteractionSet::validate() const {
  std::unordered_set<std::uint64_t> pos;
  for (const Pair& p : positives) {
    if (p.user >= num_users || p.item >= num_items) {
      throw std::invalid_argument("positive pair out of range");
    }
    if (!pos.insert(pair_key(p)).second) {
      throw std::invalid_argument("duplicate positive pair");
    }
  }
  for (const Pair& p : negatives) {
    if (p.user >= num_users || p.item >= num_items) {
      throw std::invalid_argument("negative pair out of range");
    }
    if (pos.count(pair_key(p))) {
      throw std::invalid_argument("negative pair is also a positive");
    }
  }
  InteractionSet copy;
  copy.positives = positives;
  copy.num_users = num_users;
  copy.num_items = num_items;
  copy.recount_degrees();
  if (copy.user_degree != user_degree || copy.item_degree != item_degree) {
    throw std::invalid_argument("degrees do not match positives");
  }
}

InteractionSet make_interaction_set(const std::vector<Pair>& positives,
                                    std::size_t num_users,
                                    std::size_t num_items) {
  InteractionSet set;
  set.num_users = num_users;
  set.num_items = num_items;
  std::unordered_set<std::uint64_t> seen;
  for (const Pair& p : positives) {
    if (p.user >= num_users || p.item >= num_items) {
      throw std::invalid_argument("pair out of range");
    }
    if (seen.insert(pair_key(p)).second) set.positives.push_back(p);
  }
  set.recount_degrees();
  return set;
}

std::vector<std::vector<ItemId>> items_by_user(const InteractionSet& set) {
  std::vector<std::vector<ItemId>> out(set.num_users);
  for (const Pair& p : set.positives) out[p.user].push_back(p.item);
  for (auto& items : out) std::sort(items.begin(), items.end());
  return out;
}

std::uint32_t IdMap::user_index(std::int64_t raw, bool extend) {
  auto index = build_index(users);
  return lookup(users, index, raw, extend, "user");
}

std::uint32_t IdMap::item_index(std::int64_t raw, bool extend) {
  auto index = build_index(items);
  return lookup(items, index, raw, extend, "item");
}

InteractionSet load_interactions(const std::filesystem::path& path,
                                 IdMap& ids, bool frozen) {
  auto in = open_input(path);
  auto user_index = build_index(ids.users);
  auto item_index = build_index(ids.items);
  std::vector<Pair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_fields(line, '\t');
    if (fields.size() != 2) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                           ": expected 2 tab-separated fields",
                       line_no);
    }
    std::int64_t raw_user = 0;
    std::int64_t raw_item = 0;
    if (!parse_int(fields[0], raw_user) || !parse_int(fields[1], raw_item)) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                           ": non-integer id",
                       line_no);
    }
    try {
      Pair p;
      p.user = lookup(ids.users, user_index, raw_user, !frozen, "user");
      p.item = lookup(ids.items, item_index, raw_item, !frozen, "item");
      pairs.push_back(p);
    } catch (const std::out_of_range& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " +
                           e.what(),
                       line_no);
    }
  }
  if (pairs.empty()) {
    throw ParseError(path.string() + ": no interactions", 0);
  }
  return make_interaction_set(pairs, ids.users.size(), ids.items.size());
}

InteractionSet load_interactions(const std::filesystem::path& path) {
  IdMap ids;
  return load_interactions(path, ids);
}

void write_interactions(const std::filesystem::path& path,
                        const std::vector<Pair>& pairs, const IdMap* ids) {
  auto out = open_output(path);
  for (const Pair& p : pairs) {
    out << raw_or_dense(ids ? &ids->users : nullptr, p.user) << '\t'
        << raw_or_dense(ids ? &ids->items : nullptr, p.item) << '\n';
  }
}

void write_id_map(const std::filesystem::path& path, const IdMap& ids) {
  auto out = open_output(path);
  for (std::size_t k = 0; k < ids.users.size(); ++k) {
    out << "user\t" << k << '\t' << ids.users[k] << '\n';
  }
  for (std::size_t k = 0; k < ids.items.size(); ++k) {
    out << "item\t" << k << '\t' << ids.items[k] << '\n';
  }
}

IdMap load_id_map(const std::filesystem::path& path) {
  auto in = open_input(path);
  IdMap ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_fields(line, '\t');
    std::int64_t dense = 0;
    std::int64_t raw = 0;
    if (fields.size() != 3 || !parse_int(fields[1], dense) ||
        !parse_int(fields[2], raw)) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                           ": malformed id map line",
                       line_no);
    }
    auto& target = fields[0] == "user" ? ids.users : ids.items;
    if ((fields[0] != "user" && fields[0] != "item") ||
        dense != static_cast<std::int64_t>(target.size())) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                           ": id map out of order",
                       line_no);
    }
    target.push_back(raw);
  }
  return ids;
}

InteractionSet sample_negatives(const InteractionSet& set, std::size_t ratio,
                                Rng& rng, const InteractionSet* exclude) {
  if (ratio < 1) throw std::invalid_argument("negative ratio must be >= 1");
  auto by_user = items_by_user(set);
  if (exclude) {
    if (exclude->num_users != set.num_users || exclude->num_items != set.num_items) {
      throw std::invalid_argument("exclusion set has a different shape");
    }
    const auto extra = items_by_user(*exclude);
    for (std::size_t u = 0; u < by_user.size(); ++u) {
      auto& items = by_user[u];
      items.insert(items.end(), extra[u].begin(), extra[u].end());
      std::sort(items.begin(), items.end());
      items.erase(std::unique(items.begin(), items.end()), items.end());
    }
  }
  for (std::size_t u = 0; u < by_user.size(); ++u) {
    if (!by_user[u].empty() && by_user[u].size() >= set.num_items) {
      throw std::invalid_argument("user " + std::to_string(u) +
                                  " has interacted with every item");
    }
  }
  InteractionSet out = set;
  out.negatives.clear();
  out.negatives.reserve(set.positives.size() * ratio);
  for (const Pair& p : set.positives) {
    const auto& seen = by_user[p.user];
    for (std::size_t r = 0; r < ratio; ++r) {
      ItemId j;
      do {
        j = static_cast<ItemId>(uniform_index(rng, set.num_items));
      } while (std::binary_search(seen.begin(), seen.end(), j));
      out.negatives.push_back({p.user, j});
    }
  }
  return out;
}

const std::string& FeatureTable::modality_of(std::size_t k) const {
  std::size_t block = 0;
  for (std::size_t b = 0; b < modality_offsets.size(); ++b) {
    if (modality_offsets[b] <= k) block = b;
  }
  return modality_names.at(block);
}

void FeatureTable::validate() const {
  if (static_cast<std::size_t>(vectors.cols()) != dim) {
    throw std::invalid_argument("feature width does not match dim");
  }
  if (modality_offsets.empty() || modality_offsets.front() != 0 ||
      modality_offsets.size() != modality_names.size()) {
    throw std::invalid_argument("malformed modality layout");
  }
  for (std::size_t b = 1; b < modality_offsets.size(); ++b) {
    if (modality_offsets[b] <= modality_offsets[b - 1] ||
        modality_offsets[b] >= dim) {
      throw std::invalid_argument("modality offsets must increase within dim");
    }
  }
  if (!vectors.allFinite()) {
    throw std::invalid_argument("non-finite feature value");
  }
}

void set_modalities(FeatureTable& table, const std::string& spec) {
  if (spec.empty()) {
    table.modality_offsets = {0};
    table.modality_names = {"V"};
    return;
  }
  std::vector<std::size_t> offsets;
  std::vector<std::string> names;
  std::size_t total = 0;
  for (const auto& block : split_fields(spec, ',')) {
    const auto colon = block.find(':');
    std::int64_t width = 0;
    if (colon == std::string_view::npos || colon == 0 ||
        !parse_int(block.substr(colon + 1), width) || width <= 0) {
      throw std::invalid_argument("malformed modality block '" +
                                  std::string(block) + "'");
    }
    offsets.push_back(total);
    names.emplace_back(block.substr(0, colon));
    total += static_cast<std::size_t>(width);
  }
  if (total != table.dim) {
    throw std::invalid_argument("modality widths sum to " +
                                std::to_string(total) + ", features have " +
                                std::to_string(table.dim));
  }
  table.modality_offsets = std::move(offsets);
  table.modality_names = std::move(names);
}

std::string modality_spec(const FeatureTable& table) {
  std::ostringstream out;
  for (std::size_t b = 0; b < table.modality_offsets.size(); ++b) {
    const std::size_t end = b + 1 < table.modality_offsets.size()
                                ? table.modality_offsets[b + 1]
                                : table.dim;
    if (b) out << ',';
    out << table.modality_names[b] << ':' << end - table.modality_offsets[b];
  }
  return out.str();
}

FeatureTable load_features(const std::filesystem::path& path, IdMap& ids,
                           bool frozen) {
  auto in = open_input(path);
  auto item_index = build_index(ids.items);
  std::vector<std::pair<std::uint32_t, std::vector<double>>> rows;
  std::size_t dim = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
    const auto fields = split_fields(line, '\t');
    std::int64_t raw = 0;
    if (fields.size() != 2 || !parse_int(fields[0], raw)) {
      throw ParseError(where + "expected item<TAB>v1,...,vd", line_no);
    }
    std::vector<double> values;
    for (const auto& cell : split_fields(fields[1], ',')) {
      double v = 0.0;
      if (!parse_double(cell, v) || !std::isfinite(v)) {
        throw ParseError(where + "bad feature value '" + std::string(cell) +
                             "'",
                         line_no);
      }
      values.push_back(v);
    }
    if (rows.empty()) dim = values.size();
    if (values.size() != dim || dim == 0) {
      throw ParseError(where + "feature length mismatch", line_no);
    }
    try {
      rows.emplace_back(lookup(ids.items, item_index, raw, !frozen, "item"),
                        std::move(values));
    } catch (const std::out_of_range& e) {
      throw ParseError(where + e.what(), line_no);
    }
  }
  if (rows.empty()) throw ParseError(path.string() + ": no features", 0);
  FeatureTable table;
  table.dim = dim;
  table.vectors = RowMatrix::Zero(static_cast<Eigen::Index>(ids.items.size()),
                                  static_cast<Eigen::Index>(dim));
  std::vector<bool> filled(ids.items.size(), false);
  for (const auto& [item, values] : rows) {
    if (filled[item]) {
      throw ParseError(path.string() + ": item " +
                           std::to_string(ids.items[item]) +
                           " listed twice",
                       0);
    }
    filled[item] = true;
    for (std::size_t k = 0; k < dim; ++k) {
      table.vectors(item, static_cast<Eigen::Index>(k)) = values[k];
    }
  }
  for (std::size_t k = 0; k < filled.size(); ++k) {
    if (!filled[k]) {
      throw ParseError(path.string() + ": item " +
                           std::to_string(ids.items[k]) +
                           " has no feature vector",
                       0);
    }
  }
  return table;
}

void write_features(const std::filesystem::path& path,
                    const FeatureTable& table, const IdMap* ids) {
  auto out = open_output(path);
  for (Eigen::Index i = 0; i < table.vectors.rows(); ++i) {
    out << raw_or_dense(ids ? &ids->items : nullptr,
                        static_cast<std::uint32_t>(i))
        << '\t';
    for (Eigen::Index k = 0; k < table.vectors.cols(); ++k) {
      if (k) out << ',';
      out << format_double(table.vectors(i, k));
    }
    out << '\n';
  }
}

std::vector<std::size_t> EnvPartition::sizes() const {
  std::vector<std::size_t> out(num_envs, 0);
  for (auto e : assignment) ++out.at(e);
  return out;
}

std::vector<std::vector<std::size_t>> EnvPartition::members() const {
  std::vector<std::vector<std::size_t>> out(num_envs);
  for (std::size_t k = 0; k < assignment.size(); ++k) {
    out.at(assignment[k]).push_back(k);
  }
  return out;
}

InteractionSet EnvPartition::subset(const InteractionSet& data,
                                    std::size_t env) const {
  InteractionSet out;
  out.num_users = data.num_users;
  out.num_items = data.num_items;
  for (std::size_t k = 0; k < assignment.size(); ++k) {
    if (assignment[k] == env) out.positives.push_back(data.positives[k]);
  }
  out.recount_degrees();
  return out;
}

void EnvPartition::validate(const InteractionSet& data) const {
  if (num_envs == 0) throw std::invalid_argument("partition has no envs");
  if (assignment.size() != data.positives.size()) {
    throw std::invalid_argument("partition does not cover every positive");
  }
  for (auto e : assignment) {
    if (e >= num_envs) {
      throw std::invalid_argument("environment index out of range");
    }
  }
}

void write_partition(const std::filesystem::path& path,
                     const InteractionSet& data, const EnvPartition& envs,
                     const IdMap* ids) {
  envs.validate(data);
  auto out = open_output(path);
  for (std::size_t k = 0; k < data.positives.size(); ++k) {
    const Pair p = data.positives[k];
    out << raw_or_dense(ids ? &ids->users : nullptr, p.user) << '\t'
        << raw_or_dense(ids ? &ids->items : nullptr, p.item) << '\t'
        << envs.assignment[k] << '\n';
  }
}

EnvPartition load_partition(const std::filesystem::path& path,
                            const InteractionSet& data, const IdMap* ids) {
  std::unordered_map<std::uint64_t, std::size_t> position;
  for (std::size_t k = 0; k < data.positives.size(); ++k) {
    position.emplace(pair_key(data.positives[k]), k);
  }
  std::unordered_map<std::int64_t, std::uint32_t> users;
  std::unordered_map<std::int64_t, std::uint32_t> items;
  if (ids) {
    users = build_index(ids->users);
    items = build_index(ids->items);
  }
  auto in = open_input(path);
  EnvPartition envs;
  envs.assignment.assign(data.positives.size(),
                         std::numeric_limits<std::uint32_t>::max());
  std::string line;
  std::size_t line_no = 0;
  std::size_t seen = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_fields(line, '\t');
    std::int64_t u = 0, i = 0, e = 0;
    if (fields.size() != 3 || !parse_int(fields[0], u) ||
        !parse_int(fields[1], i) || !parse_int(fields[2], e) || e < 0) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                           ": expected user<TAB>item<TAB>env",
                       line_no);
    }
    Pair p{static_cast<UserId>(u), static_cast<ItemId>(i)};
    if (ids) {
      auto uu = users.find(u);
      auto ii = items.find(i);
      if (uu == users.end() || ii == items.end()) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) +
                             ": unknown pair",
                         line_no);
      }
      p = {uu->second, ii->second};
    }
    auto it = position.find(pair_key(p));
    if (it == position.end()) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                           ": pair is not a positive",
                       line_no);
    }
    envs.assignment[it->second] = static_cast<std::uint32_t>(e);
    envs.num_envs = std::max<std::size_t>(envs.num_envs,
                                          static_cast<std::size_t>(e) + 1);
    ++seen;
  }
  if (seen != data.positives.size()) {
    throw ParseError(path.string() + ": partition does not cover every positive",
                     0);
  }
  envs.validate(data);
  return envs;
}

SplitSpec split_iid_ood(const InteractionSet& data, const EnvPartition& envs,
                        double ratio, Rng& rng) {
  if (envs.num_envs != 2) {
    throw std::invalid_argument("split needs exactly two environments");
  }
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("split ratio must lie in (0,1)");
  }
  envs.validate(data);
  const auto sizes = envs.sizes();
  if (sizes[0] == 0 || sizes[1] == 0) {
    throw std::invalid_argument("an environment is empty");
  }
  const std::uint32_t larger = sizes[0] >= sizes[1] ? 0 : 1;
  auto members = envs.members();
  auto& major = members[larger];
  shuffle(major, rng);
  const auto n_test =
      static_cast<std::size_t>(std::llround(ratio * static_cast<double>(major.size())));
  std::vector<std::size_t> test_idx(major.begin(), major.begin() + n_test);
  std::vector<std::size_t> train_idx(major.begin() + n_test, major.end());
  std::sort(test_idx.begin(), test_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  auto build = [&](const std::vector<std::size_t>& idx) {
    InteractionSet s;
    s.num_users = data.num_users;
    s.num_items = data.num_items;
    for (auto k : idx) s.positives.push_back(data.positives[k]);
    s.recount_degrees();
    return s;
  };
  SplitSpec split;
  split.train = build(train_idx);
  split.test_iid = build(test_idx);
  split.test_ood = build(members[1 - larger]);
  split.ratio = ratio;
  return split;
}

void write_split(const std::filesystem::path& dir, const SplitSpec& split,
                 const IdMap& ids) {
  std::filesystem::create_directories(dir);
  write_interactions(dir / "train.tsv", split.train.positives, &ids);
  write_interactions(dir / "test_iid.tsv", split.test_iid.positives, &ids);
  write_interactions(dir / "test_ood.tsv", split.test_ood.positives, &ids);
  write_id_map(dir / "idmap.tsv", ids);
  auto out = open_output(dir / "manifest");
  out << "train\ttrain.tsv\n"
      << "test_iid\ttest_iid.tsv\n"
      << "test_ood\ttest_ood.tsv\n"
      << "idmap\tidmap.tsv\n"
      << "ratio\t" << format_double(split.ratio) << '\n';
}

SplitSpec load_split(const std::filesystem::path& dir, IdMap& ids) {
  auto in = open_input(dir / "manifest");
  std::unordered_map<std::string, std::string> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_fields(line, '\t');
    if (fields.size() != 2) {
      throw ParseError((dir / "manifest").string() + ": malformed line", 0);
    }
    entries.emplace(std::string(fields[0]), std::string(fields[1]));
  }
  for (const char* key : {"train", "test_iid", "test_ood", "idmap", "ratio"}) {
    if (!entries.count(key)) {
      throw ParseError((dir / "manifest").string() + ": missing " + key, 0);
    }
  }
  ids = load_id_map(dir / entries["idmap"]);
  SplitSpec split;
  split.train = load_interactions(dir / entries["train"], ids, true);
  split.test_iid = load_interactions(dir / entries["test_iid"], ids, true);
  split.test_ood = load_interactions(dir / entries["test_ood"], ids, true);
  for (auto* s : {&split.train, &split.test_iid, &split.test_ood}) {
    s->num_users = ids.users.size();
    s->num_items = ids.items.size();
    s->recount_degrees();
  }
  if (!parse_double(entries["ratio"], split.ratio)) {
    throw ParseError((dir / "manifest").string() + ": bad ratio", 0);
  }
  return split;
}

void SyntheticSpec::validate() const {
  if (num_users == 0 || num_items < 2) {
    throw std::invalid_argument("synthetic corpus needs users and >= 2 items");
  }
  if (d_inv < 1 || d_spu < 1) {
    throw std::invalid_argument("d_inv and d_spu must be >= 1");
  }
  if (num_envs_true < 1) {
    throw std::invalid_argument("num_envs_true must be >= 1");
  }
  if (!(flip_strength >= 0.0 && flip_strength <= 1.0)) {
    throw std::invalid_argument("flip_strength must lie in [0,1]");
  }
  if (!(density > 0.0 && density < 1.0)) {
    throw std::invalid_argument("density must lie in (0,1)");
  }
  if (!(major_share > 0.0 && major_share <= 1.0)) {
    throw std::invalid_argument("major_share must lie in (0,1]");
  }
  if (!(noise_scale >= 0.0) || !(spurious_scale >= 0.0)) {
    throw std::invalid_argument("scales must be non-negative");
  }
}

SyntheticData make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed, "synthetic");
  const std::size_t d = spec.d_inv + spec.d_spu;
  const auto n_users = spec.num_users;
  const auto n_items = spec.num_items;
  const auto per_user = static_cast<std::size_t>(
      std::llround(spec.density * static_cast<double>(n_items)));
  if (per_user < 1 || per_user >= n_items) {
    throw std::invalid_argument("density unreachable: " +
                                std::to_string(per_user) +
                                " positives per user out of " +
                                std::to_string(n_items) + " items");
  }

  SyntheticData out;
  out.features.dim = d;
  out.features.vectors = RowMatrix(static_cast<Eigen::Index>(n_items),
                                   static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < out.features.vectors.rows(); ++i) {
    for (Eigen::Index k = 0; k < out.features.vectors.cols(); ++k) {
      out.features.vectors(i, k) = standard_normal(rng);
    }
  }
  for (std::size_t k = 0; k < spec.d_inv; ++k) out.invariant_dims.push_back(k);
  for (std::size_t k = spec.d_inv; k < d; ++k) out.spurious_dims.push_back(k);

  out.spurious_signs.assign(spec.num_envs_true,
                            std::vector<int>(spec.d_spu, 1));
  for (std::size_t e = 1; e < spec.num_envs_true; ++e) {
    for (std::size_t k = 0; k < spec.d_spu; ++k) {
      if (uniform_unit(rng) < spec.flip_strength) out.spurious_signs[e][k] = -1;
    }
  }

  Eigen::MatrixXd inv_weights(static_cast<Eigen::Index>(n_users),
                              static_cast<Eigen::Index>(spec.d_inv));
  for (Eigen::Index u = 0; u < inv_weights.rows(); ++u) {
    for (Eigen::Index k = 0; k < inv_weights.cols(); ++k) {
      inv_weights(u, k) = standard_normal(rng);
    }
  }
  Eigen::VectorXd spu_weights(static_cast<Eigen::Index>(spec.d_spu));
  for (Eigen::Index k = 0; k < spu_weights.size(); ++k) {
    spu_weights(k) = standard_normal(rng);
  }

  // Per-environment item scores on the spurious block.
  const double inv_norm = 1.0 / std::sqrt(static_cast<double>(spec.d_inv));
  const double spu_norm =
      spec.spurious_scale / std::sqrt(static_cast<double>(spec.d_spu));
  Eigen::MatrixXd spurious_term(static_cast<Eigen::Index>(spec.num_envs_true),
                                static_cast<Eigen::Index>(n_items));
  for (std::size_t e = 0; e < spec.num_envs_true; ++e) {
    for (std::size_t i = 0; i < n_items; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < spec.d_spu; ++k) {
        s += out.spurious_signs[e][k] * spu_weights(static_cast<Eigen::Index>(k)) *
             out.features.vectors(static_cast<Eigen::Index>(i),
                                  static_cast<Eigen::Index>(spec.d_inv + k));
      }
      spurious_term(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(i)) =
          s * spu_norm;
    }
  }

  auto draw_env = [&]() -> std::uint32_t {
    if (spec.num_envs_true > 1 && uniform_unit(rng) >= spec.major_share) {
      return 1 + static_cast<std::uint32_t>(uniform_index(rng, spec.num_envs_true - 1));
    }
    return 0;
  };

  std::vector<Pair> positives;
  std::vector<std::uint32_t> labels;
  std::vector<double> affinity(n_items);
  std::vector<std::uint32_t> env_of(n_items);
  std::vector<ItemId> order(n_items);
  for (std::size_t u = 0; u < n_users; ++u) {
    for (std::size_t i = 0; i < n_items; ++i) {
      const std::uint32_t e = draw_env();
      double a = 0.0;
      for (std::size_t k = 0; k < spec.d_inv; ++k) {
        a += inv_weights(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(k)) *
             out.features.vectors(static_cast<Eigen::Index>(i),
                                  static_cast<Eigen::Index>(k));
      }
      affinity[i] = a * inv_norm +
                    spurious_term(e, static_cast<Eigen::Index>(i)) +
                    spec.noise_scale * standard_normal(rng);
      env_of[i] = e;
    }
    std::iota(order.begin(), order.end(), ItemId{0});
    std::stable_sort(order.begin(), order.end(), [&](ItemId a, ItemId b) {
      return affinity[a] > affinity[b];
    });
    if (affinity[order[per_user - 1]] == affinity[order[per_user]]) {
      throw std::invalid_argument("density unreachable: degenerate affinity for user " +
                                  std::to_string(u));
    }
    std::vector<ItemId> chosen(order.begin(), order.begin() + per_user);
    std::sort(chosen.begin(), chosen.end());
    for (ItemId i : chosen) {
      positives.push_back({static_cast<UserId>(u), i});
      labels.push_back(env_of[i]);
    }
  }
  out.data = make_interaction_set(positives, n_users, n_items);
  out.envs.num_envs = spec.num_envs_true;
  out.envs.assignment = std::move(labels);
  return out;
}

}  // namespace painvrl
