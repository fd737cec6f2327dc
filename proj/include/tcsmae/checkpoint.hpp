#pragma once

// Checkpoints: a flat little-endian binary of float64 arrays plus a JSON
// manifest listing each array's name, shape and byte offset.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tcsmae/error.hpp"
#include "tcsmae/params.hpp"

namespace tcsmae {

inline constexpr const char* kCheckpointFormat = "tcsmae-checkpoint-v1";

struct StoredArray {
  ad::Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::ordered_json meta;  ///< free-form (model config etc.)
  std::vector<std::pair<std::string, StoredArray>> arrays;

  const StoredArray* find(const std::string& name) const {
    for (const auto& [n, a] : arrays)
      if (n == name) return &a;
    return nullptr;
  }
};

namespace detail {

inline std::uint64_t to_le(std::uint64_t x) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((x >> (8 * i)) & 0xFF) << (8 * (7 - i));
    return r;
  }
  return x;
}

}  // namespace detail

inline Checkpoint snapshot(const ParameterSet& params, nlohmann::ordered_json meta = nlohmann::ordered_json::object()) {
  Checkpoint ck{std::move(meta), {}};
  for (const auto& p : params)
    ck.arrays.push_back({p.name, {p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}}});
  return ck;
}

/// Writes <dir>/checkpoint.bin and <dir>/manifest.json.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto bin_path = dir / "checkpoint.bin";
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + bin_path.string());

  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, arr] : ck.arrays) {
    tensors.push_back({{"name", name}, {"shape", arr.shape}, {"offset", offset}, {"count", arr.values.size()}});
    for (double v : arr.values) {
      const std::uint64_t le = detail::to_le(std::bit_cast<std::uint64_t>(v));
      bin.write(reinterpret_cast<const char*>(&le), sizeof le);
    }
    offset += arr.values.size() * sizeof(double);
  }
  if (!bin) throw IoError("write failed: " + bin_path.string());

  nlohmann::ordered_json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["dtype"] = "float64-le";
  manifest["total_bytes"] = offset;
  manifest["meta"] = ck.meta;
  manifest["tensors"] = tensors;
  const auto man_path = dir / "manifest.json";
  std::ofstream man(man_path, std::ios::trunc);
  if (!man) throw IoError("cannot write " + man_path.string());
  man << manifest.dump(2) << '\n';
  if (!man) throw IoError("write failed: " + man_path.string());
}

/// `path` may be the run directory or the checkpoint.bin inside it.
inline Checkpoint load_checkpoint(std::filesystem::path path) {
  if (path.filename() == "checkpoint.bin" || path.filename() == "manifest.json") path = path.parent_path();
  const auto man_path = path / "manifest.json";
  const auto bin_path = path / "checkpoint.bin";
  std::ifstream man(man_path);
  if (!man) throw IoError("cannot read " + man_path.string());
  nlohmann::ordered_json manifest;
  try {
    man >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + man_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kCheckpointFormat)
    throw IoError(man_path.string() + ": unsupported checkpoint format");

  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot read " + bin_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::ordered_json::object());
  for (const auto& t : manifest.at("tensors")) {
    StoredArray arr;
    arr.shape = t.at("shape").get<ad::Shape>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto count = t.at("count").get<std::uint64_t>();
    if (count != ad::numel(arr.shape) || offset + count * 8 > bytes.size())
      throw IoError(bin_path.string() + ": tensor '" + t.at("name").get<std::string>() + "' out of bounds");
    arr.values.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint64_t le = 0;
      std::memcpy(&le, bytes.data() + offset + i * 8, 8);
      arr.values[i] = std::bit_cast<double>(detail::to_le(le));
    }
    ck.arrays.push_back({t.at("name").get<std::string>(), std::move(arr)});
  }
  return ck;
}

/// Copies stored arrays into matching parameters. Parameters whose names
/// satisfy `skip` are left alone. Any other parameter that is missing from
/// the checkpoint or has a different shape is reported, all at once.
template <typename SkipFn>
void restore_parameters(ParameterSet& params, const Checkpoint& ck, SkipFn skip) {
  std::vector<std::string> bad;
  for (const auto& p : params) {
    if (skip(p.name)) continue;
    const StoredArray* a = ck.find(p.name);
    if (!a)
      bad.push_back(p.name + " (missing)");
    else if (a->shape != p.tensor.shape())
      bad.push_back(p.name + " (shape " + ad::shape_str(a->shape) + " vs " + ad::shape_str(p.tensor.shape()) + ")");
  }
  if (!bad.empty()) {
    std::string msg = "checkpoint does not match architecture:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw InvalidArgument(msg);
  }
  for (auto& p : params) {
    if (skip(p.name)) continue;
    const StoredArray* a = ck.find(p.name);
    std::copy(a->values.begin(), a->values.end(), p.tensor.mutable_values().begin());
  }
}

inline void restore_parameters(ParameterSet& params, const Checkpoint& ck) {
  restore_parameters(params, ck, [](const std::string&) { return false; });
}

}  // namespace tcsmae
