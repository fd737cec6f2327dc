#pragma once

// HU slice -> three-channel (lung window, mediastinal window, edge) image.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "tcsmae/error.hpp"
#include "tcsmae/grid.hpp"

namespace tcsmae {

using NormSlice = Grid<double>;  ///< values in [0, 1]
using GraySlice = Grid<double>;  ///< values in [0, 255]

/// A CT slice in Hounsfield units. At least 8x8, every value finite.
class HuSlice {
 public:
  static constexpr std::size_t kMinSide = 8;

  HuSlice() = default;
  explicit HuSlice(Grid<double> values) : values_(std::move(values)) {
    require(values_.height() >= kMinSide && values_.width() >= kMinSide,
            "HuSlice: height and width must both be >= 8, got " + std::to_string(values_.height()) +
                "x" + std::to_string(values_.width()));
    for (std::size_t r = 0; r < values_.height(); ++r)
      for (std::size_t c = 0; c < values_.width(); ++c)
        if (!std::isfinite(values_(r, c)))
          throw InvalidArgument("HuSlice: non-finite value at (" + std::to_string(r) + ", " +
                                std::to_string(c) + ")");
  }

  std::size_t height() const noexcept { return values_.height(); }
  std::size_t width() const noexcept { return values_.width(); }
  double operator()(std::size_t r, std::size_t c) const { return values_(r, c); }
  const Grid<double>& grid() const noexcept { return values_; }

  friend bool operator==(const HuSlice&, const HuSlice&) = default;

 private:
  Grid<double> values_;
};

struct WindowSpec {
  double level = 0.0;
  double width = 1.0;

  static constexpr WindowSpec lung() { return {-500.0, 1200.0}; }
  static constexpr WindowSpec mediastinal() { return {30.0, 300.0}; }
};

enum class RgbChannel : std::size_t { Lung = 0, Mediastinal = 1, Edge = 2 };

/// Three planes of equal shape, each value in [0, 1].
struct RgbSlice {
  std::array<Grid<double>, 3> planes;

  std::size_t height() const noexcept { return planes[0].height(); }
  std::size_t width() const noexcept { return planes[0].width(); }
  const Grid<double>& operator[](RgbChannel c) const { return planes[static_cast<std::size_t>(c)]; }
  Grid<double>& operator[](RgbChannel c) { return planes[static_cast<std::size_t>(c)]; }

  friend bool operator==(const RgbSlice&, const RgbSlice&) = default;
};

inline constexpr double kDefaultHuMin = -1000.0;
inline constexpr double kDefaultHuMax = 500.0;

/// Affine map of [hu_min, hu_max] onto [0, 1], clamped.
inline NormSlice normalize_hu(const Grid<double>& hu, double hu_min = kDefaultHuMin,
                              double hu_max = kDefaultHuMax) {
  require(hu_min < hu_max, "normalize_hu: hu_min must be < hu_max");
  NormSlice out(hu.height(), hu.width());
  const double span = hu_max - hu_min;
  for (std::size_t r = 0; r < hu.height(); ++r) {
    for (std::size_t c = 0; c < hu.width(); ++c) {
      const double v = hu(r, c);
      if (!std::isfinite(v))
        throw InvalidArgument("normalize_hu: non-finite value at (" + std::to_string(r) + ", " +
                              std::to_string(c) + ")");
      out(r, c) = std::clamp((v - hu_min) / span, 0.0, 1.0);
    }
  }
  return out;
}

inline NormSlice normalize_hu(const HuSlice& slice, double hu_min = kDefaultHuMin,
                              double hu_max = kDefaultHuMax) {
  return normalize_hu(slice.grid(), hu_min, hu_max);
}

inline double window_value(double hu, const WindowSpec& win) {
  return std::clamp((hu - win.level + 0.5 * win.width) / win.width * 255.0, 0.0, 255.0);
}

/// Clinical display window, clamped to [0, 255].
inline GraySlice apply_window(const HuSlice& slice, const WindowSpec& win) {
  require(win.width > 0.0, "apply_window: window width must be > 0");
  GraySlice out(slice.height(), slice.width());
  for (std::size_t r = 0; r < slice.height(); ++r)
    for (std::size_t c = 0; c < slice.width(); ++c) out(r, c) = window_value(slice(r, c), win);
  return out;
}

namespace sobel {

inline constexpr std::array<std::array<double, 3>, 3> kX{{{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}}};
inline constexpr std::array<std::array<double, 3>, 3> kY{{{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}}};

/// Largest |G| the kernels can produce on a [0, 255] image (upper bound).
inline const double kMaxMagnitude = 4.0 * std::numbers::sqrt2 * 255.0;

/// Correlates `img` with a 3x3 kernel, replicating border pixels.
inline Grid<double> filter3x3(const Grid<double>& img,
                              const std::array<std::array<double, 3>, 3>& k) {
  const auto h = static_cast<std::ptrdiff_t>(img.height());
  const auto w = static_cast<std::ptrdiff_t>(img.width());
  Grid<double> out(img.height(), img.width());
  for (std::ptrdiff_t r = 0; r < h; ++r) {
    for (std::ptrdiff_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (std::ptrdiff_t dr = -1; dr <= 1; ++dr) {
        const auto rr = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(r + dr, 0, h - 1));
        for (std::ptrdiff_t dc = -1; dc <= 1; ++dc) {
          const auto cc = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(c + dc, 0, w - 1));
          acc += k[static_cast<std::size_t>(dr + 1)][static_cast<std::size_t>(dc + 1)] * img(rr, cc);
        }
      }
      out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc;
    }
  }
  return out;
}

/// sqrt(Gx^2 + Gy^2) without rescaling.
inline Grid<double> magnitude(const Grid<double>& img) {
  const Grid<double> gx = filter3x3(img, kX);
  const Grid<double> gy = filter3x3(img, kY);
  Grid<double> out(img.height(), img.width());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i]);
  return out;
}

}  // namespace sobel

/// Sobel gradient magnitude, rescaled so that kMaxMagnitude maps to 255.
inline GraySlice sobel_edge(const GraySlice& gray) {
  GraySlice out = sobel::magnitude(gray);
  for (double& v : out) v = std::clamp(v / sobel::kMaxMagnitude * 255.0, 0.0, 255.0);
  return out;
}

/// Pixelwise max of the two edge maps.
inline GraySlice combine_edges(const GraySlice& edge_lung, const GraySlice& edge_medi) {
  require(edge_lung.same_shape(edge_medi), "combine_edges: shape mismatch");
  GraySlice out(edge_lung.height(), edge_lung.width());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(edge_lung[i], edge_medi[i]);
  return out;
}

inline RgbSlice build_rgb(const HuSlice& slice) {
  GraySlice lung = apply_window(slice, WindowSpec::lung());
  GraySlice medi = apply_window(slice, WindowSpec::mediastinal());
  GraySlice edge = combine_edges(sobel_edge(lung), sobel_edge(medi));
  RgbSlice rgb{{std::move(lung), std::move(medi), std::move(edge)}};
  for (auto& plane : rgb.planes)
    for (double& v : plane) v /= 255.0;
  return rgb;
}

}  // namespace tcsmae
