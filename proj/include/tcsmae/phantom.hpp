#pragma once

// Synthetic chest-like CT slices: body ellipse, two lungs, vertebra ring and
// rib arcs, vessel dots, and an optional lesion whose painted pixels are the
// ground-truth mask.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tcsmae/imaging.hpp"
#include "tcsmae/io.hpp"
#include "tcsmae/rng.hpp"

namespace tcsmae {

struct TissueHu {
  double mean = 0.0;
  double sigma = 0.0;
};

struct PhantomSpec {
  std::size_t resolution = 64;
  std::uint64_t seed = 0;

  TissueHu air{-1000.0, 10.0};
  TissueHu lung{-800.0, 40.0};
  TissueHu soft_tissue{40.0, 20.0};
  TissueHu bone{400.0, 60.0};
  TissueHu lesion{-50.0, 60.0};

  /// Geometry in normalized coordinates, image spanning [-1, 1] on each axis.
  double center_jitter = 0.03;
  double body_axis_x_min = 0.80, body_axis_x_max = 0.92;
  double body_axis_y_min = 0.60, body_axis_y_max = 0.72;
  double lung_axis_x_min = 0.22, lung_axis_x_max = 0.29;
  double lung_axis_y_min = 0.34, lung_axis_y_max = 0.44;
  std::size_t vessels_min = 2, vessels_max = 6;  ///< per lung

  double lesion_probability = 0.0;
  double lesion_radius_min = 0.07, lesion_radius_max = 0.15;

  void validate() const {
    require(resolution >= 32 && resolution % 32 == 0, "PhantomSpec: resolution must be a positive multiple of 32");
    for (const TissueHu* t : {&air, &lung, &soft_tissue, &bone, &lesion}) {
      require(t->sigma >= 0.0, "PhantomSpec: tissue sigma must be >= 0");
      require(t->mean >= -1024.0 && t->mean <= 1000.0, "PhantomSpec: tissue HU means must lie in [-1024, 1000]");
    }
    require(lesion_probability >= 0.0 && lesion_probability <= 1.0, "PhantomSpec: lesion_probability must lie in [0, 1]");
    require(lesion_radius_min > 0.0 && lesion_radius_min <= lesion_radius_max, "PhantomSpec: bad lesion radius range");
    require(vessels_min <= vessels_max, "PhantomSpec: bad vessel count range");
  }
};

enum class Tissue : std::uint8_t { Air = 0, Lung, SoftTissue, Bone, Lesion };

struct PhantomSlice {
  HuSlice hu;
  Grid<std::uint8_t> lesion_mask;  ///< 1 = lesion
  Grid<std::uint8_t> tissue;       ///< Tissue per pixel before noise
};

namespace detail {

struct Ellipse {
  double cx, cy, ax, ay, angle = 0.0;
  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dx = x - cx, dy = y - cy;
    const double u = (c * dx + s * dy) / ax, v = (-s * dx + c * dy) / ay;
    return u * u + v * v <= 1.0;
  }
};

}  // namespace detail

inline PhantomSlice generate_slice(const PhantomSpec& spec, std::uint64_t index) {
  spec.validate();
  using detail::Ellipse;
  Rng rng(derive_seed(spec.seed, {index}));
  const double j = spec.center_jitter;
  const double pi = std::numbers::pi;

  const Ellipse body{rng.uniform(-j, j), rng.uniform(-j, j), rng.uniform(spec.body_axis_x_min, spec.body_axis_x_max),
                     rng.uniform(spec.body_axis_y_min, spec.body_axis_y_max)};
  std::array<Ellipse, 2> lungs;
  for (int side = 0; side < 2; ++side) {
    const double sign = side == 0 ? -1.0 : 1.0;
    lungs[static_cast<std::size_t>(side)] =
        Ellipse{sign * 0.40 * body.ax / 0.86 + body.cx + rng.uniform(-j, j), body.cy - 0.04 + rng.uniform(-j, j),
                rng.uniform(spec.lung_axis_x_min, spec.lung_axis_x_max),
                rng.uniform(spec.lung_axis_y_min, spec.lung_axis_y_max), sign * rng.uniform(0.0, 0.2)};
  }
  // Vertebra: ring below the lungs, inside the body.
  const double vx = body.cx + rng.uniform(-j, j), vy = body.cy + 0.62 * body.ay;
  const double v_out = rng.uniform(0.11, 0.14), v_in = v_out * rng.uniform(0.45, 0.6);
  // Rib arcs: thin band just inside the body outline, restricted to angular sectors.
  const std::size_t rib_count = 4 + static_cast<std::size_t>(rng.below(3));
  std::vector<std::pair<double, double>> rib_sectors;
  for (std::size_t r = 0; r < rib_count; ++r) {
    const double start = rng.uniform(-pi, pi);
    rib_sectors.emplace_back(start, start + rng.uniform(0.12, 0.3));
  }
  std::vector<Ellipse> vessels;
  for (const Ellipse& lung : lungs) {
    const auto count = spec.vessels_min + static_cast<std::size_t>(rng.below(spec.vessels_max - spec.vessels_min + 1));
    for (std::size_t v = 0; v < count; ++v) {
      const double t = rng.uniform(0.0, 2.0 * pi), rad = 0.7 * std::sqrt(rng.uniform());
      const double r = rng.uniform(0.025, 0.045);
      vessels.push_back({lung.cx + rad * lung.ax * std::cos(t), lung.cy + rad * lung.ay * std::sin(t), r, r});
    }
  }
  const bool has_lesion = rng.uniform() < spec.lesion_probability;
  Ellipse lesion{};
  const Ellipse* lesion_lung = nullptr;
  if (has_lesion) {
    lesion_lung = &lungs[static_cast<std::size_t>(rng.below(2))];
    const double t = rng.uniform(0.0, 2.0 * pi), rad = 0.5 * std::sqrt(rng.uniform());
    const double r = rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
    lesion = {lesion_lung->cx + rad * lesion_lung->ax * std::cos(t), lesion_lung->cy + rad * lesion_lung->ay * std::sin(t),
              r * rng.uniform(0.75, 1.25), r * rng.uniform(0.75, 1.25), rng.uniform(0.0, pi)};
  }

  const std::size_t n = spec.resolution;
  Grid<std::uint8_t> tissue(n, n, static_cast<std::uint8_t>(Tissue::Air));
  Grid<std::uint8_t> mask(n, n, std::uint8_t{0});
  auto paint = [&](std::size_t r, std::size_t c, Tissue t) { tissue(r, c) = static_cast<std::uint8_t>(t); };
  for (std::size_t r = 0; r < n; ++r) {
    const double y = (static_cast<double>(r) + 0.5) / static_cast<double>(n) * 2.0 - 1.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double x = (static_cast<double>(c) + 0.5) / static_cast<double>(n) * 2.0 - 1.0;
      if (!body.contains(x, y)) continue;
      paint(r, c, Tissue::SoftTissue);
      const Ellipse inner{body.cx, body.cy, body.ax * 0.92, body.ay * 0.90};
      if (!inner.contains(x, y)) {
        const double ang = std::atan2((y - body.cy) / body.ay, (x - body.cx) / body.ax);
        const Ellipse outer_band{body.cx, body.cy, body.ax * 0.97, body.ay * 0.965};
        for (const auto& [a0, a1] : rib_sectors) {
          const bool in_sector = (ang >= a0 && ang <= a1) || (ang + 2 * pi >= a0 && ang + 2 * pi <= a1);
          if (in_sector && outer_band.contains(x, y)) paint(r, c, Tissue::Bone);
        }
      }
      const double dv = std::hypot(x - vx, y - vy);
      if (dv <= v_out && dv >= v_in) paint(r, c, Tissue::Bone);
      for (const Ellipse& lung : lungs) {
        if (!lung.contains(x, y)) continue;
        paint(r, c, Tissue::Lung);
        for (const Ellipse& v : vessels)
          if (v.contains(x, y)) paint(r, c, Tissue::SoftTissue);
      }
      if (has_lesion && lesion_lung->contains(x, y) && lesion.contains(x, y)) {
        paint(r, c, Tissue::Lesion);
        mask(r, c) = 1;
      }
    }
  }

  // Noise is drawn from a separate stream so geometry draws stay independent of resolution.
  Rng noise(derive_seed(spec.seed, {index, 0x6E6F697365ULL}));
  Grid<double> hu(n, n);
  for (std::size_t i = 0; i < hu.size(); ++i) {
    TissueHu t{};
    switch (static_cast<Tissue>(tissue[i])) {
      case Tissue::Air: t = spec.air; break;
      case Tissue::Lung: t = spec.lung; break;
      case Tissue::SoftTissue: t = spec.soft_tissue; break;
      case Tissue::Bone: t = spec.bone; break;
      case Tissue::Lesion: t = spec.lesion; break;
    }
    hu[i] = noise.normal(t.mean, t.sigma);
  }
  return {HuSlice(std::move(hu)), std::move(mask), std::move(tissue)};
}

inline nlohmann::ordered_json to_json(const PhantomSpec& s) {
  auto t = [](const TissueHu& x) { return nlohmann::ordered_json{{"mean", x.mean}, {"sigma", x.sigma}}; };
  return {{"resolution", s.resolution},
          {"seed", s.seed},
          {"palette", {{"air", t(s.air)}, {"lung", t(s.lung)}, {"soft_tissue", t(s.soft_tissue)}, {"bone", t(s.bone)}, {"lesion", t(s.lesion)}}},
          {"center_jitter", s.center_jitter},
          {"lesion_probability", s.lesion_probability},
          {"lesion_radius", {s.lesion_radius_min, s.lesion_radius_max}},
          {"vessels_per_lung", {s.vessels_min, s.vessels_max}}};
}

inline std::string indexed_name(const std::string& prefix, std::size_t i) {
  std::string num = std::to_string(i);
  return prefix + std::string(num.size() < 4 ? 4 - num.size() : 0, '0') + num + ".raw";
}

/// Writes n slices (as single-slice volumes), their lesion masks and a
/// dataset.json manifest into `dir`.
inline void generate_dataset(const PhantomSpec& spec, std::size_t n, const std::filesystem::path& dir) {
  spec.validate();
  require(n >= 1, "generate_dataset: n must be >= 1");
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const PhantomSlice s = generate_slice(spec, i);
    const std::string image = indexed_name("slice_", i), mask = indexed_name("mask_", i);
    io::write_volume(dir / image, {s.hu.grid()});
    io::write_labels(dir / mask, s.lesion_mask, 2);
    std::size_t lesion_pixels = 0;
    for (auto v : s.lesion_mask) lesion_pixels += v;
    entries.push_back({{"image", image}, {"mask", mask}, {"lesion_pixels", lesion_pixels}});
  }
  io::write_json(dir / "dataset.json", {{"format", "tcsmae-dataset-v1"}, {"count", n}, {"spec", to_json(spec)}, {"entries", entries}});
}

}  // namespace tcsmae
