#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tcsmae/imaging.hpp"
#include "tcsmae/io.hpp"
#include "tcsmae/phantom.hpp"

namespace tcsmae {

/// One slice with its derived representations.
struct Sample {
  std::string name;
  NormSlice norm;  ///< full-range normalized HU, drives tissue masking
  RgbSlice rgb;
  std::optional<Grid<std::uint8_t>> labels;
  std::size_t classes = 2;
};

inline Sample make_sample(std::string name, const HuSlice& hu, std::optional<Grid<std::uint8_t>> labels = std::nullopt,
                          std::size_t classes = 2) {
  return {std::move(name), normalize_hu(hu), build_rgb(hu), std::move(labels), classes};
}

using Dataset = std::vector<Sample>;

/// Reads a directory written by generate_dataset (or laid out the same way).
inline Dataset load_dataset(const std::filesystem::path& dir, bool require_labels = false) {
  const auto manifest = io::read_json(dir / "dataset.json");
  Dataset out;
  for (const auto& e : manifest.at("entries")) {
    const std::string image = e.at("image").get<std::string>();
    const auto slices = io::read_volume(dir / image);
    std::optional<Grid<std::uint8_t>> labels;
    std::size_t classes = 2;
    if (e.contains("mask")) {
      auto raster = io::read_labels(dir / e.at("mask").get<std::string>());
      labels = std::move(raster.labels);
      classes = raster.classes;
    } else if (require_labels) {
      throw IoError((dir / "dataset.json").string() + ": entry '" + image + "' has no mask");
    }
    for (std::size_t s = 0; s < slices.size(); ++s)
      out.push_back(make_sample(slices.size() == 1 ? image : image + "#" + std::to_string(s), slices[s], labels, classes));
  }
  if (out.empty()) throw IoError((dir / "dataset.json").string() + ": dataset is empty");
  return out;
}

/// In-memory equivalent of generate_dataset + load_dataset, without the
/// int16 storage rounding.
inline Dataset phantom_dataset(const PhantomSpec& spec, std::size_t n, std::size_t first_index = 0) {
  Dataset out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    PhantomSlice s = generate_slice(spec, first_index + i);
    out.push_back(make_sample("phantom_" + std::to_string(first_index + i), s.hu, std::move(s.lesion_mask), 2));
  }
  return out;
}

}  // namespace tcsmae
