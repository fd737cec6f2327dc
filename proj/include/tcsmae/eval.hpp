#pragma once

// Segmentation metrics (Dice, Hausdorff over boundary pixels) and their
// aggregation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tcsmae/error.hpp"
#include "tcsmae/grid.hpp"

namespace tcsmae {

/// Label per pixel, each below `classes`.
struct SegMask {
  Grid<std::uint8_t> labels;
  std::size_t classes = 2;

  SegMask() = default;
  SegMask(Grid<std::uint8_t> l, std::size_t c) : labels(std::move(l)), classes(c) {
    require(classes >= 2, "SegMask: needs at least 2 classes");
    for (auto v : labels) require(v < classes, "SegMask: label " + std::to_string(v) + " outside declared class count");
  }

  /// 1 where label == cls.
  Grid<std::uint8_t> binary(std::size_t cls) const {
    Grid<std::uint8_t> out(labels.height(), labels.width());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == cls ? 1 : 0;
    return out;
  }
};

/// 2|P ∩ G| / (|P| + |G|) on binary masks (nonzero = foreground).
/// Both empty -> 1, exactly one empty -> 0.
inline double dsc(const Grid<std::uint8_t>& pred, const Grid<std::uint8_t>& gt) {
  require(pred.same_shape(gt), "dsc: shape mismatch");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

using PixelCoord = std::pair<std::size_t, std::size_t>;

/// Foreground pixels with a 4-neighbour that is background or outside the image.
inline std::vector<PixelCoord> boundary_pixels(const Grid<std::uint8_t>& mask) {
  std::vector<PixelCoord> out;
  const std::size_t h = mask.height(), w = mask.width();
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      if (!mask(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w || !mask(r - 1, c) || !mask(r + 1, c) ||
                        !mask(r, c - 1) || !mask(r, c + 1);
      if (edge) out.emplace_back(r, c);
    }
  return out;
}

/// max over a in A of the distance from a to its nearest b in B.
inline double directed_hausdorff(const std::vector<PixelCoord>& a, const std::vector<PixelCoord>& b) {
  double worst = 0.0;
  for (const auto& [ar, ac] : a) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [br, bc] : b) {
      const double dr = static_cast<double>(ar) - static_cast<double>(br);
      const double dc = static_cast<double>(ac) - static_cast<double>(bc);
      best = std::min(best, dr * dr + dc * dc);
      if (best <= worst) break;  // cannot raise the max any more
    }
    worst = std::max(worst, best);
  }
  return std::sqrt(worst);
}

/// Symmetric Hausdorff distance in pixels between the boundary sets.
/// nullopt when either mask is empty.
inline std::optional<double> hausdorff(const Grid<std::uint8_t>& pred, const Grid<std::uint8_t>& gt) {
  require(pred.same_shape(gt), "hausdorff: shape mismatch");
  const auto a = boundary_pixels(pred), b = boundary_pixels(gt);
  if (a.empty() || b.empty()) return std::nullopt;
  return std::max(directed_hausdorff(a, b), directed_hausdorff(b, a));
}

struct Stat {
  double mean = 0.0;
  double stddev = 0.0;  ///< sample standard deviation, 0 for fewer than 2 values
  std::size_t count = 0;
};

inline Stat summarize(const std::vector<double>& v) {
  Stat s;
  s.count = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

struct SampleMetrics {
  std::string name;
  std::vector<double> dsc;                 ///< per foreground class, fraction in [0, 1]
  std::vector<std::optional<double>> hd;  ///< per foreground class, pixels
  double mean_dsc() const {
    double s = 0.0;
    for (double d : dsc) s += d;
    return dsc.empty() ? 0.0 : s / static_cast<double>(dsc.size());
  }
};

/// Per-class metrics for classes 1..classes-1.
inline SampleMetrics evaluate_sample(std::string name, const SegMask& pred, const SegMask& gt) {
  require(pred.classes == gt.classes, "evaluate_sample: class count mismatch");
  SampleMetrics m{std::move(name), {}, {}};
  for (std::size_t c = 1; c < gt.classes; ++c) {
    const auto p = pred.binary(c), g = gt.binary(c);
    m.dsc.push_back(dsc(p, g));
    m.hd.push_back(hausdorff(p, g));
  }
  return m;
}

/// DSC in percent, HD in pixels. Undefined HD values are excluded from the
/// HD statistics and counted separately.
struct MetricReport {
  std::vector<SampleMetrics> samples;
  Stat dsc_percent;
  Stat hd_pixels;
  std::size_t hd_undefined = 0;
  std::vector<Stat> per_class_dsc_percent;

  static MetricReport build(std::vector<SampleMetrics> samples) {
    MetricReport r;
    r.samples = std::move(samples);
    std::vector<double> d, h;
    std::vector<std::vector<double>> per_class;
    for (const auto& s : r.samples) {
      d.push_back(100.0 * s.mean_dsc());
      if (per_class.size() < s.dsc.size()) per_class.resize(s.dsc.size());
      for (std::size_t c = 0; c < s.dsc.size(); ++c) per_class[c].push_back(100.0 * s.dsc[c]);
      for (const auto& x : s.hd) {
        if (x)
          h.push_back(*x);
        else
          ++r.hd_undefined;
      }
    }
    r.dsc_percent = summarize(d);
    r.hd_pixels = summarize(h);
    for (const auto& pc : per_class) r.per_class_dsc_percent.push_back(summarize(pc));
    return r;
  }
};

}  // namespace tcsmae
