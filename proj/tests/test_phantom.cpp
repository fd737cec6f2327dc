#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "tcsmae/dataset.hpp"
#include "tcsmae/io.hpp"
#include "tcsmae/masking.hpp"
#include "tcsmae/phantom.hpp"

using namespace tcsmae;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tcsmae_test_phantom_" + name);
  fs::remove_all(p);
  return p;
}

std::map<std::string, std::vector<char>> dir_bytes(const fs::path& dir) {
  std::map<std::string, std::vector<char>> out;
  for (const auto& e : fs::directory_iterator(dir)) out[e.path().filename().string()] = io::read_bytes(e.path());
  return out;
}

}  // namespace

TEST(Phantom, DeterministicInSeedAndIndex) {
  PhantomSpec s;
  s.seed = 4;
  s.lesion_probability = 0.5;
  const auto a = generate_slice(s, 17), b = generate_slice(s, 17), c = generate_slice(s, 18);
  EXPECT_EQ(a.hu.grid().vector(), b.hu.grid().vector());
  EXPECT_EQ(a.lesion_mask.vector(), b.lesion_mask.vector());
  EXPECT_NE(a.hu.grid().vector(), c.hu.grid().vector());
  s.seed = 5;
  EXPECT_NE(generate_slice(s, 17).hu.grid().vector(), a.hu.grid().vector());
}

TEST(Phantom, NoLesionsAtProbabilityZero) {
  const PhantomSpec s;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const auto p = generate_slice(s, i);
    for (auto v : p.lesion_mask) ASSERT_EQ(v, 0);
    for (auto t : p.tissue) ASSERT_NE(t, static_cast<std::uint8_t>(Tissue::Lesion));
  }
}

TEST(Phantom, GroundTruthIsExact) {
  PhantomSpec s;
  s.lesion_probability = 1.0;
  std::size_t lesion_pixels = 0;
  for (std::uint64_t i = 0; i < 40; ++i) {
    const auto p = generate_slice(s, i);
    for (std::size_t k = 0; k < p.tissue.size(); ++k) {
      const bool is_lesion = p.tissue[k] == static_cast<std::uint8_t>(Tissue::Lesion);
      ASSERT_EQ(p.lesion_mask[k] == 1, is_lesion) << "slice " << i << " pixel " << k;
      lesion_pixels += is_lesion;
    }
  }
  EXPECT_GT(lesion_pixels, 40u * 10u);
}

TEST(Phantom, HistogramModesNearPalette) {
  // 25 HU bins over [-1200, 700); for each palette mean the fullest bin in a
  // +-150 HU window must sit within 50 HU of the mean.
  const PhantomSpec s;
  const double lo = -1200.0, bin = 25.0;
  std::vector<std::size_t> hist(76, 0);
  for (std::uint64_t i = 0; i < 100; ++i)
    for (double v : generate_slice(s, i).hu.grid()) {
      const auto b = static_cast<long>(std::floor((v - lo) / bin));
      if (b >= 0 && b < static_cast<long>(hist.size())) ++hist[static_cast<std::size_t>(b)];
    }
  for (double mode : {-1000.0, -800.0, 40.0, 400.0}) {
    const auto first = static_cast<std::size_t>((mode - 150.0 - lo) / bin), last = static_cast<std::size_t>((mode + 150.0 - lo) / bin);
    std::size_t best = first;
    for (std::size_t b = first; b <= last; ++b)
      if (hist[b] > hist[best]) best = b;
    const double centre = lo + (static_cast<double>(best) + 0.5) * bin;
    EXPECT_NEAR(centre, mode, 50.0) << "mode " << mode;
    EXPECT_GT(hist[best], 100u) << "mode " << mode;
  }
}

TEST(Phantom, AirAndBoneFallInDifferentIntervals) {
  const PhantomSpec s;
  const std::size_t k = 8;
  std::vector<std::size_t> air(k, 0), bone(k, 0);
  for (std::uint64_t i = 0; i < 50; ++i) {
    const auto p = generate_slice(s, i);
    const NormSlice norm = normalize_hu(p.hu);
    for (std::size_t j = 0; j < p.tissue.size(); ++j) {
      const std::size_t iv = interval_index(norm[j], k);
      if (p.tissue[j] == static_cast<std::uint8_t>(Tissue::Air)) ++air[iv];
      if (p.tissue[j] == static_cast<std::uint8_t>(Tissue::Bone)) ++bone[iv];
    }
  }
  std::size_t air_total = 0, bone_total = 0, shared = 0;
  for (std::size_t j = 0; j < k; ++j) {
    air_total += air[j];
    bone_total += bone[j];
    if (air[j] > 0) shared += bone[j];
  }
  EXPECT_GT(bone_total, 1000u);
  EXPECT_GT(static_cast<double>(air[0]) / static_cast<double>(air_total), 0.99);
  EXPECT_LT(static_cast<double>(shared) / static_cast<double>(bone_total), 0.01);
}

TEST(Phantom, SpecValidation) {
  PhantomSpec s;
  s.resolution = 40;
  EXPECT_THROW(generate_slice(s, 0), InvalidArgument);
  s = {};
  s.bone.sigma = -1;
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = {};
  s.lung.mean = -1100;
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = {};
  s.lesion_probability = 1.5;
  EXPECT_THROW(s.validate(), InvalidArgument);
}

TEST(PhantomDataset, WritesPairsAndManifestByteIdentically) {
  PhantomSpec s;
  s.seed = 3;
  s.lesion_probability = 0.5;
  const auto a = temp_dir("a"), b = temp_dir("b");
  generate_dataset(s, 12, a);
  generate_dataset(s, 12, b);
  const auto ba = dir_bytes(a), bb = dir_bytes(b);
  EXPECT_EQ(ba, bb);
  std::size_t raws = 0;
  for (const auto& [name, _] : ba) raws += name.ends_with(".raw");
  EXPECT_EQ(raws, 24u);
  EXPECT_EQ(ba.count("dataset.json"), 1u);

  const Dataset d = load_dataset(a, true);
  ASSERT_EQ(d.size(), 12u);
  const auto ref = generate_slice(s, 5);
  EXPECT_EQ(d[5].labels->vector(), ref.lesion_mask.vector());
  // int16 storage rounds HU to the nearest integer.
  for (std::size_t i = 0; i < ref.hu.grid().size(); ++i)
    EXPECT_NEAR(normalize_hu(ref.hu)[i], d[5].norm[i], 0.5 / 1500.0 + 1e-12);
  EXPECT_THROW(generate_dataset(s, 0, temp_dir("c")), InvalidArgument);
}
