#pragma once

// Tissue masking: hide every pixel whose normalized intensity falls in one of
// a random subset of equal-width intensity intervals. Also the spatial patch
// mask used as the ablation baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tcsmae/error.hpp"
#include "tcsmae/grid.hpp"
#include "tcsmae/imaging.hpp"
#include "tcsmae/log.hpp"
#include "tcsmae/rng.hpp"

namespace tcsmae {

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
  bool closed_hi = false;  ///< true only for the last interval, so 1.0 is covered

  bool contains(double v) const { return v >= lo && (closed_hi ? v <= hi : v < hi); }
};

struct TissueMaskSpec {
  std::size_t k_intervals = 8;
  double mask_ratio = 0.75;
  std::uint64_t rng_seed = 0;

  void validate() const {
    require(k_intervals >= 1, "TissueMaskSpec: k_intervals must be >= 1");
    require(mask_ratio > 0.0 && mask_ratio < 1.0, "TissueMaskSpec: mask_ratio must lie in (0, 1)");
  }
};

struct PatchMaskSpec {
  std::size_t patch_size = 16;
  double mask_ratio = 0.75;
  std::uint64_t rng_seed = 0;

  void validate() const {
    require(patch_size >= 1, "PatchMaskSpec: patch_size must be >= 1");
    require(mask_ratio > 0.0 && mask_ratio < 1.0, "PatchMaskSpec: mask_ratio must lie in (0, 1)");
  }
};

/// 1 = keep, 0 = masked. `masked_intervals` is sorted.
struct TissueMask {
  Grid<std::uint8_t> bits;
  std::vector<std::size_t> masked_intervals;  ///< chosen intervals (patch masks: chosen patch indices, row-major)

  std::size_t height() const noexcept { return bits.height(); }
  std::size_t width() const noexcept { return bits.width(); }

  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{0}));
  }
  double masked_fraction() const {
    return bits.size() == 0 ? 0.0 : static_cast<double>(masked_count()) / static_cast<double>(bits.size());
  }
};

inline std::vector<Interval> partition_intervals(std::size_t k) {
  require(k >= 1, "partition_intervals: K must be >= 1");
  std::vector<Interval> out;
  out.reserve(k);
  const double kd = static_cast<double>(k);
  for (std::size_t i = 0; i < k; ++i)
    out.push_back({static_cast<double>(i) / kd, static_cast<double>(i + 1) / kd, i + 1 == k});
  return out;
}

/// Index of the interval holding `v` (v in [0, 1]).
inline std::size_t interval_index(double v, std::size_t k) {
  require(v >= 0.0 && v <= 1.0, "interval_index: value must lie in [0, 1]");
  const double kd = static_cast<double>(k);
  auto idx = std::min(static_cast<std::size_t>(std::floor(v * kd)), k - 1);
  // v*k can round across a boundary; settle against the same bounds
  // partition_intervals produces.
  while (idx > 0 && v < static_cast<double>(idx) / kd) --idx;
  while (idx + 1 < k && v >= static_cast<double>(idx + 1) / kd) ++idx;
  return idx;
}

/// Draws `count` distinct indices from [0, n) by partial Fisher-Yates; sorted.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count, Rng& rng) {
  require(count <= n, "sample_without_replacement: count exceeds population");
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline std::vector<std::size_t> choose_masked_intervals(const TissueMaskSpec& spec) {
  spec.validate();
  const auto count = static_cast<std::size_t>(std::floor(spec.mask_ratio * static_cast<double>(spec.k_intervals)));
  if (count == 0) {
    warn("tissue mask: floor(rho*K) = 0 for K=" + std::to_string(spec.k_intervals) +
         ", rho=" + std::to_string(spec.mask_ratio) + "; mask is the identity");
    return {};
  }
  Rng rng(spec.rng_seed);
  return sample_without_replacement(spec.k_intervals, count, rng);
}

/// Masks pixels whose value lies in one of `masked_intervals` (of K).
inline TissueMask tissue_mask_from_intervals(const NormSlice& norm, std::size_t k,
                                             std::vector<std::size_t> masked_intervals) {
  std::vector<bool> hidden(k, false);
  for (std::size_t idx : masked_intervals) {
    require(idx < k, "tissue mask: interval index out of range");
    hidden[idx] = true;
  }
  TissueMask mask{Grid<std::uint8_t>(norm.height(), norm.width(), std::uint8_t{1}), std::move(masked_intervals)};
  for (std::size_t i = 0; i < norm.size(); ++i)
    if (hidden[interval_index(norm[i], k)]) mask.bits[i] = 0;
  return mask;
}

inline TissueMask build_tissue_mask(const NormSlice& norm, const TissueMaskSpec& spec) {
  return tissue_mask_from_intervals(norm, spec.k_intervals, choose_masked_intervals(spec));
}

inline RgbSlice apply_mask(const RgbSlice& rgb, const TissueMask& mask) {
  require(rgb.height() == mask.height() && rgb.width() == mask.width(), "apply_mask: shape mismatch");
  RgbSlice out = rgb;
  for (auto& plane : out.planes)
    for (std::size_t i = 0; i < plane.size(); ++i)
      if (mask.bits[i] == 0) plane[i] = 0.0;
  return out;
}

inline TissueMask build_patch_mask(std::size_t height, std::size_t width, const PatchMaskSpec& spec) {
  spec.validate();
  require(spec.patch_size <= std::min(height, width),
          "build_patch_mask: patch_size " + std::to_string(spec.patch_size) + " exceeds image side " +
              std::to_string(std::min(height, width)));
  // Partial tiles at the right/bottom edge count as patches.
  const std::size_t rows = (height + spec.patch_size - 1) / spec.patch_size;
  const std::size_t cols = (width + spec.patch_size - 1) / spec.patch_size;
  const std::size_t total = rows * cols;
  const auto count = static_cast<std::size_t>(std::floor(spec.mask_ratio * static_cast<double>(total)));
  TissueMask mask{Grid<std::uint8_t>(height, width, std::uint8_t{1}), {}};
  if (count == 0) {
    warn("patch mask: floor(ratio*patches) = 0 for " + std::to_string(total) + " patches; mask is the identity");
    return mask;
  }
  Rng rng(spec.rng_seed);
  mask.masked_intervals = sample_without_replacement(total, count, rng);
  for (std::size_t p : mask.masked_intervals) {
    const std::size_t r0 = (p / cols) * spec.patch_size;
    const std::size_t c0 = (p % cols) * spec.patch_size;
    for (std::size_t r = r0; r < std::min(height, r0 + spec.patch_size); ++r)
      for (std::size_t c = c0; c < std::min(width, c0 + spec.patch_size); ++c) mask.bits(r, c) = 0;
  }
  return mask;
}

}  // namespace tcsmae
