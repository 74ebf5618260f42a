#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "kd/core/error.hpp"
#include "kd/core/tensor.hpp"

namespace kd {

// Versioned binary checkpoint. Layout (all integers little-endian):
//   "KDF1" | u32 version | u32 tensor_count
//   per tensor: u32 name_len | name bytes | u32 rank | u32 dims[rank] | f32 data
//   u8 has_state; when set:
//     u32 epoch | f64 best_metric | u32 rng_len | rng bytes
//     u32 counter_count | per counter: u32 name_len | name | u64 value
//     u32 moment_count  | moment tensors in the same tensor encoding
// Maps are serialized in name order, so save -> load -> resave is
// byte-identical.
struct CheckpointRecord {
  std::map<std::string, Tensor<float>> tensors;
  bool has_state = false;
  uint32_t epoch = 0;
  double best_metric = 0.0;
  std::string rng_state;
  std::map<std::string, uint64_t> counters;
  std::map<std::string, Tensor<float>> moments;
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

template <typename T>
void write_raw(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_raw<uint32_t>(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void write_tensor(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  write_string(os, name);
  write_raw<uint32_t>(os, static_cast<uint32_t>(t.shape.rank()));
  for (int64_t d : t.shape.dims) write_raw<uint32_t>(os, static_cast<uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.ptr()),
           static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw LoadError("checkpoint: truncated file");
  return v;
}

inline std::string read_string(std::istream& is) {
  const uint32_t len = read_raw<uint32_t>(is);
  if (len > (1u << 20)) throw LoadError("checkpoint: implausible string length");
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw LoadError("checkpoint: truncated file");
  return s;
}

inline std::pair<std::string, Tensor<float>> read_tensor(std::istream& is) {
  std::string name = read_string(is);
  const uint32_t rank = read_raw<uint32_t>(is);
  if (rank > 8) throw LoadError("checkpoint: implausible tensor rank");
  std::vector<int64_t> dims(rank);
  int64_t numel = 1;
  for (auto& d : dims) {
    d = read_raw<uint32_t>(is);
    numel *= d;
  }
  if (numel < 0 || numel > (int64_t(1) << 31)) throw LoadError("checkpoint: implausible tensor size");
  Tensor<float> t{Shape(std::move(dims))};
  is.read(reinterpret_cast<char*>(t.ptr()),
          static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!is) throw LoadError("checkpoint: truncated tensor data");
  return {std::move(name), std::move(t)};
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'K', 'D', 'F', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const CheckpointRecord& rec, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open for writing: " + path);
  os.write(kCheckpointMagic, 4);
  detail::write_raw<uint32_t>(os, kCheckpointVersion);
  detail::write_raw<uint32_t>(os, static_cast<uint32_t>(rec.tensors.size()));
  for (const auto& [name, t] : rec.tensors) detail::write_tensor(os, name, t);
  detail::write_raw<uint8_t>(os, rec.has_state ? 1 : 0);
  if (rec.has_state) {
    detail::write_raw<uint32_t>(os, rec.epoch);
    detail::write_raw<double>(os, rec.best_metric);
    detail::write_string(os, rec.rng_state);
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(rec.counters.size()));
    for (const auto& [name, v] : rec.counters) {
      detail::write_string(os, name);
      detail::write_raw<uint64_t>(os, v);
    }
    detail::write_raw<uint32_t>(os, static_cast<uint32_t>(rec.moments.size()));
    for (const auto& [name, t] : rec.moments) detail::write_tensor(os, name, t);
  }
  if (!os) throw IoError("checkpoint: write failed: " + path);
}

inline CheckpointRecord load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw LoadError("checkpoint: bad magic bytes in " + path);
  const uint32_t version = detail::read_raw<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw LoadError("checkpoint: unsupported format version " + std::to_string(version));
  CheckpointRecord rec;
  const uint32_t count = detail::read_raw<uint32_t>(is);
  for (uint32_t i = 0; i < count; ++i) {
    auto [name, t] = detail::read_tensor(is);
    if (!rec.tensors.emplace(std::move(name), std::move(t)).second)
      throw LoadError("checkpoint: duplicate tensor name");
  }
  rec.has_state = detail::read_raw<uint8_t>(is) != 0;
  if (rec.has_state) {
    rec.epoch = detail::read_raw<uint32_t>(is);
    rec.best_metric = detail::read_raw<double>(is);
    rec.rng_state = detail::read_string(is);
    const uint32_t nc = detail::read_raw<uint32_t>(is);
    for (uint32_t i = 0; i < nc; ++i) {
      std::string name = detail::read_string(is);
      rec.counters[name] = detail::read_raw<uint64_t>(is);
    }
    const uint32_t nm = detail::read_raw<uint32_t>(is);
    for (uint32_t i = 0; i < nm; ++i) {
      auto [name, t] = detail::read_tensor(is);
      rec.moments.emplace(std::move(name), std::move(t));
    }
  }
  return rec;
}

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> skipped_in_file;   // file tensors with no match in the net
  std::vector<std::string> missing_in_file;   // net tensors absent from the file
};

// Copies matching tensors from a record into a network. Names may carry a
// prefix (e.g. "teacher/") which is stripped before matching. Every matching
// name must agree on shape before anything is mutated.
template <typename Net>
LoadReport load_tensors_into(Net& net, const CheckpointRecord& rec, const std::string& prefix) {
  std::map<std::string, Tensor<float>*> dst;
  net.visit_state([&](const std::string& name, Tensor<float>* t) { dst[name] = t; });

  std::map<std::string, const Tensor<float>*> matched;
  LoadReport report;
  for (const auto& [raw_name, t] : rec.tensors) {
    std::string name = raw_name;
    if (!prefix.empty() && name.rfind(prefix, 0) == 0) name = name.substr(prefix.size());
    auto it = dst.find(name);
    if (it == dst.end()) {
      report.skipped_in_file.push_back(raw_name);
      continue;
    }
    if (it->second->shape != t.shape)
      throw LoadError("checkpoint: shape conflict on '" + raw_name + "': file " + t.shape.str() +
                      " vs network " + it->second->shape.str());
    matched[name] = &t;
  }
  for (const auto& [name, ptr] : dst) {
    (void)ptr;
    if (!matched.count(name)) report.missing_in_file.push_back(name);
  }
  // All shapes verified; commit.
  for (const auto& [name, src] : matched) {
    dst[name]->data = src->data;
    report.loaded.push_back(name);
  }
  return report;
}

// Initializes a network from a weight file in the checkpoint format. Tensors
// matching by (possibly prefix-stripped) name and shape are overwritten;
// everything else keeps its current initialization and lands in the report.
template <typename Net>
LoadReport load_pretrained(Net& net, const std::string& path,
                           const std::string& prefix = "teacher/") {
  return load_tensors_into(net, load_checkpoint(path), prefix);
}

}  // namespace kd

