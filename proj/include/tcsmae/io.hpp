#pragma once

// On-disk formats.
//   Volume: <stem>.raw little-endian int16 HU, row-major, slices back to back;
//           <stem>.json {"height","width","slices","spacing_mm":[sx,sy,sz]}.
//   Labels: <stem>.raw uint8 class index per pixel;
//           <stem>.json {"height","width","slices","classes"}.
//   Previews: binary PGM (P5) and PPM (P6), 8-bit.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tcsmae/error.hpp"
#include "tcsmae/grid.hpp"
#include "tcsmae/imaging.hpp"

namespace tcsmae::io {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr double kHuStorageMin = -1024.0;
inline constexpr double kHuStorageMax = 3071.0;

struct VolumeInfo {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t slices = 1;
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
};

inline fs::path sidecar_path(const fs::path& raw) {
  fs::path p = raw;
  return p.replace_extension(".json");
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& path, const std::vector<char>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::int16_t hu_to_storage(double hu) {
  return static_cast<std::int16_t>(std::lround(std::clamp(hu, kHuStorageMin, kHuStorageMax)));
}

/// Writes one or more equally sized HU slices as a volume.
inline void write_volume(const fs::path& raw, const std::vector<Grid<double>>& slices, std::array<double, 3> spacing_mm = {1.0, 1.0, 1.0}) {
  require(!slices.empty(), "write_volume: no slices");
  const std::size_t h = slices[0].height(), w = slices[0].width();
  std::vector<char> bytes;
  bytes.reserve(slices.size() * h * w * 2);
  for (const auto& s : slices) {
    require(s.height() == h && s.width() == w, "write_volume: slices differ in size");
    for (double v : s) {
      const auto u = static_cast<std::uint16_t>(hu_to_storage(v));
      bytes.push_back(static_cast<char>(u & 0xFF));
      bytes.push_back(static_cast<char>(u >> 8));
    }
  }
  write_bytes(raw, bytes);
  write_json(sidecar_path(raw), json{{"height", h}, {"width", w}, {"slices", slices.size()}, {"spacing_mm", spacing_mm}});
}

inline VolumeInfo read_volume_info(const fs::path& raw) {
  const json j = read_json(sidecar_path(raw));
  VolumeInfo info;
  try {
    info.height = j.at("height").get<std::size_t>();
    info.width = j.at("width").get<std::size_t>();
    info.slices = j.at("slices").get<std::size_t>();
    if (j.contains("spacing_mm")) info.spacing_mm = j.at("spacing_mm").get<std::array<double, 3>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(sidecar_path(raw).string() + ": " + e.what());
  }
  return info;
}

inline std::vector<HuSlice> read_volume(const fs::path& raw) {
  const VolumeInfo info = read_volume_info(raw);
  const std::vector<char> bytes = read_bytes(raw);
  const std::size_t plane = info.height * info.width;
  if (bytes.size() != plane * info.slices * 2)
    throw IoError(raw.string() + ": expected " + std::to_string(plane * info.slices * 2) + " bytes, found " +
                  std::to_string(bytes.size()));
  std::vector<HuSlice> out;
  for (std::size_t s = 0; s < info.slices; ++s) {
    Grid<double> g(info.height, info.width);
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t o = 2 * (s * plane + i);
      const auto u = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[o]) |
                                                (static_cast<unsigned char>(bytes[o + 1]) << 8));
      g[i] = static_cast<std::int16_t>(u);
    }
    out.emplace_back(std::move(g));
  }
  return out;
}

inline void write_labels(const fs::path& raw, const Grid<std::uint8_t>& labels, std::size_t classes) {
  std::vector<char> bytes(labels.begin(), labels.end());
  write_bytes(raw, bytes);
  write_json(sidecar_path(raw),
             json{{"height", labels.height()}, {"width", labels.width()}, {"slices", 1}, {"classes", classes}});
}

struct LabelRaster {
  Grid<std::uint8_t> labels;
  std::size_t classes = 2;
};

inline LabelRaster read_labels(const fs::path& raw) {
  const json j = read_json(sidecar_path(raw));
  const auto h = j.at("height").get<std::size_t>();
  const auto w = j.at("width").get<std::size_t>();
  const auto classes = j.value("classes", std::size_t{2});
  const std::vector<char> bytes = read_bytes(raw);
  if (bytes.size() != h * w) throw IoError(raw.string() + ": label raster size mismatch");
  LabelRaster r{Grid<std::uint8_t>(h, w), classes};
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    r.labels[i] = static_cast<std::uint8_t>(bytes[i]);
    if (r.labels[i] >= classes) throw IoError(raw.string() + ": label outside declared class count");
  }
  return r;
}

inline std::uint8_t to_byte(double v01) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v01, 0.0, 1.0) * 255.0));
}

/// `plane` values in [0, 1].
inline void write_pgm(const fs::path& path, const Grid<double>& plane) {
  std::string data = "P5\n" + std::to_string(plane.width()) + " " + std::to_string(plane.height()) + "\n255\n";
  for (double v : plane) data.push_back(static_cast<char>(to_byte(v)));
  write_text(path, data);
}

inline void write_pgm(const fs::path& path, const Grid<std::uint8_t>& bytes) {
  std::string data = "P5\n" + std::to_string(bytes.width()) + " " + std::to_string(bytes.height()) + "\n255\n";
  for (std::uint8_t v : bytes) data.push_back(static_cast<char>(v));
  write_text(path, data);
}

inline void write_ppm(const fs::path& path, const RgbSlice& rgb) {
  std::string data = "P6\n" + std::to_string(rgb.width()) + " " + std::to_string(rgb.height()) + "\n255\n";
  for (std::size_t i = 0; i < rgb.planes[0].size(); ++i)
    for (const auto& p : rgb.planes) data.push_back(static_cast<char>(to_byte(p[i])));
  write_text(path, data);
}

}  // namespace tcsmae::io
