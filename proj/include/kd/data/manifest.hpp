#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kd/core/error.hpp"
#include "kd/core/rng.hpp"

namespace kd {

enum class Split : int { none = -1, train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "none";
  }
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "none") return Split::none;
  throw DataError("manifest: unknown split label '" + s + "'");
}

struct ManifestEntry {
  std::string id;  // file path, or a synthetic identifier
  int class_index = 0;
  Split split = Split::none;
};

struct DatasetManifest {
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
  std::vector<std::string> diagnostics;
  uint64_t split_seed = 0;
  uint64_t negative_seed = 0;

  int64_t class_count(int c) const {
    int64_t n = 0;
    for (const auto& e : entries)
      if (e.class_index == c) ++n;
    return n;
  }
  int64_t split_count(Split s) const {
    int64_t n = 0;
    for (const auto& e : entries)
      if (e.split == s) ++n;
    return n;
  }
  std::vector<int64_t> split_indices(Split s) const {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < static_cast<int64_t>(entries.size()); ++i)
      if (entries[static_cast<size_t>(i)].split == s) out.push_back(i);
    return out;
  }
};

inline bool has_image_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png";
}

// Deterministic (sorted) enumeration of a directory-per-class image tree.
// Produces a manifest without split assignment; non-image and unreadable
// files go to the diagnostics list.
inline DatasetManifest scan_image_folder(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("scan: not a directory: " + root);

  std::vector<std::string> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
  std::sort(class_dirs.begin(), class_dirs.end());

  DatasetManifest m;
  for (const auto& cls : class_dirs) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(fs::path(root) / cls)) {
      if (!e.is_regular_file()) continue;
      if (!has_image_extension(e.path())) {
        m.diagnostics.push_back("skipped (unsupported extension): " + e.path().string());
        continue;
      }
      std::ifstream probe(e.path(), std::ios::binary);
      if (!probe) {
        m.diagnostics.push_back("skipped (unreadable): " + e.path().string());
        continue;
      }
      files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
      m.diagnostics.push_back("excluded (empty class folder): " + cls);
      continue;
    }
    const int ci = static_cast<int>(m.class_names.size());
    m.class_names.push_back(cls);
    for (auto& f : files) m.entries.push_back({std::move(f), ci, Split::none});
  }
  if (m.class_names.empty()) throw DataError("scan: no classes with images under " + root);
  return m;
}

// Per-class stratified assignment with largest-remainder rounding of the
// requested (train, val, test) ratios.
inline DatasetManifest assign_splits(const DatasetManifest& in, std::array<double, 3> ratios,
                                     uint64_t seed) {
  double sum = 0;
  for (double r : ratios) {
    if (r <= 0) throw ConfigError("splits: all ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("splits: ratios must sum to 1");

  DatasetManifest out = in;
  out.split_seed = seed;
  for (int c = 0; c < static_cast<int>(in.class_names.size()); ++c) {
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < static_cast<int64_t>(in.entries.size()); ++i)
      if (in.entries[static_cast<size_t>(i)].class_index == c) idx.push_back(i);
    const int64_t n = static_cast<int64_t>(idx.size());
    if (n < 3)
      throw ConfigError("splits: class '" + in.class_names[static_cast<size_t>(c)] +
                        "' has fewer files than splits");

    Rng rng(mix_seed(seed, static_cast<uint64_t>(c)));
    std::shuffle(idx.begin(), idx.end(), rng.engine());

    // Largest-remainder rounding; remainder ties resolve to the lower split.
    std::array<int64_t, 3> counts{};
    std::array<double, 3> frac{};
    int64_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
      const double exact = static_cast<double>(n) * ratios[static_cast<size_t>(s)];
      counts[static_cast<size_t>(s)] = static_cast<int64_t>(std::floor(exact));
      frac[static_cast<size_t>(s)] = exact - std::floor(exact);
      assigned += counts[static_cast<size_t>(s)];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return frac[static_cast<size_t>(a)] > frac[static_cast<size_t>(b)]; });
    for (int64_t r = 0; r < n - assigned; ++r) ++counts[static_cast<size_t>(order[static_cast<size_t>(r % 3)])];

    int64_t k = 0;
    for (int s = 0; s < 3; ++s)
      for (int64_t j = 0; j < counts[static_cast<size_t>(s)]; ++j)
        out.entries[static_cast<size_t>(idx[static_cast<size_t>(k++)])].split = static_cast<Split>(s);
  }
  return out;
}

// Seed-purity style binary reformulation: one target class against a seeded
// sample of everything else.
struct OneVsRestSpec {
  std::string target;
  uint64_t seed = 0;
  int64_t margin = 0;  // maximum |positives - negatives|
  std::optional<int64_t> negative_count;  // defaults to the positive count
};

inline DatasetManifest build_one_vs_rest(const DatasetManifest& in, const OneVsRestSpec& spec) {
  int target = -1;
  for (int c = 0; c < static_cast<int>(in.class_names.size()); ++c)
    if (in.class_names[static_cast<size_t>(c)] == spec.target) target = c;
  if (target < 0) throw DataError("one-vs-rest: unknown target class '" + spec.target + "'");

  std::vector<int64_t> pos, pool;
  for (int64_t i = 0; i < static_cast<int64_t>(in.entries.size()); ++i) {
    if (in.entries[static_cast<size_t>(i)].class_index == target)
      pos.push_back(i);
    else
      pool.push_back(i);
  }
  const int64_t positives = static_cast<int64_t>(pos.size());
  int64_t requested = spec.negative_count.value_or(positives);
  if (requested < 0) throw ConfigError("one-vs-rest: negative count must be >= 0");
  if (requested > static_cast<int64_t>(pool.size())) requested = static_cast<int64_t>(pool.size());
  if (std::llabs(positives - requested) > spec.margin)
    throw DataError("one-vs-rest: insufficient negatives for target '" + spec.target + "' (" +
                    std::to_string(requested) + " available vs " + std::to_string(positives) +
                    " positives, margin " + std::to_string(spec.margin) + ")");

  // Uniform sample without replacement, then original order for determinism.
  Rng rng(mix_seed(spec.seed, 0x4f565253ull));
  for (int64_t i = 0; i < requested; ++i) {
    const int64_t j = i + rng.below(static_cast<int64_t>(pool.size()) - i);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(requested));
  std::sort(pool.begin(), pool.end());

  DatasetManifest out;
  out.class_names = {spec.target, "rest"};
  out.negative_seed = spec.seed;
  out.diagnostics = in.diagnostics;
  for (int64_t i : pos)
    out.entries.push_back({in.entries[static_cast<size_t>(i)].id, 0, in.entries[static_cast<size_t>(i)].split});
  for (int64_t i : pool)
    out.entries.push_back({in.entries[static_cast<size_t>(i)].id, 1, in.entries[static_cast<size_t>(i)].split});
  return out;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["class_names"] = m.class_names;
  j["seeds"] = {{"split", m.split_seed}, {"negative", m.negative_seed}};
  j["diagnostics"] = m.diagnostics;
  auto& arr = j["entries"] = nlohmann::json::array();
  for (const auto& e : m.entries)
    arr.push_back({{"id", e.id}, {"class", e.class_index}, {"split", split_name(e.split)}});
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  m.split_seed = j.at("seeds").at("split").get<uint64_t>();
  m.negative_seed = j.at("seeds").at("negative").get<uint64_t>();
  if (j.contains("diagnostics")) m.diagnostics = j.at("diagnostics").get<std::vector<std::string>>();
  for (const auto& e : j.at("entries"))
    m.entries.push_back(
        {e.at("id").get<std::string>(), e.at("class").get<int>(), split_from_name(e.at("split"))});
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("manifest: cannot write " + path);
  os << manifest_to_json(m).dump(2) << "\n";
}

}  // namespace kd
