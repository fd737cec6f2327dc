#pragma once

// Five-level convolutional U-Net with a swappable output head and the
// per-level flatten+linear projections used for contrastive learning.

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tcsmae/imaging.hpp"
#include "tcsmae/params.hpp"
#include "tcsmae/rng.hpp"
#include "tcsmae/tensor.hpp"

namespace tcsmae {

inline constexpr std::size_t kPyramidLevels = 5;

struct EncoderConfig {
  std::array<std::size_t, kPyramidLevels> channels{8, 16, 32, 64, 128};
  std::size_t in_channels = 3;
};

enum class HeadKind { Reconstruction, Binary, Multiclass };

struct HeadConfig {
  HeadKind kind = HeadKind::Reconstruction;
  std::size_t classes = 2;  ///< only read for Multiclass (background included)

  static HeadConfig reconstruction() { return {HeadKind::Reconstruction, 2}; }
  static HeadConfig binary() { return {HeadKind::Binary, 2}; }
  static HeadConfig multiclass(std::size_t classes) { return {HeadKind::Multiclass, classes}; }

  std::size_t out_channels() const {
    switch (kind) {
      case HeadKind::Reconstruction: return 2;  // lung + mediastinal
      case HeadKind::Binary: return 1;
      case HeadKind::Multiclass: return classes;
    }
    return 0;
  }
  friend bool operator==(const HeadConfig&, const HeadConfig&) = default;
};

/// Contrastive scale presets: 0 none, 1 {F5}, 2 {F4,F5}, 3 {F3,F4,F5}.
struct MepConfig {
  int scales = 2;
  std::size_t embed_dim = 128;

  std::vector<std::size_t> levels() const {
    require(scales >= 0 && scales <= 3, "MepConfig: scales must be 0, 1, 2 or 3");
    std::vector<std::size_t> out;
    for (int s = scales; s >= 1; --s) out.push_back(kPyramidLevels + 1 - static_cast<std::size_t>(s));
    return out;
  }
};

struct ModelConfig {
  EncoderConfig encoder;
  HeadConfig head;
  MepConfig mep;
  std::size_t resolution = 64;  ///< fixes the projection input sizes

  void validate() const {
    require(resolution >= 32 && resolution % 32 == 0, "ModelConfig: resolution must be a positive multiple of 32");
    for (std::size_t c : encoder.channels) require(c >= 1, "ModelConfig: channel counts must be >= 1");
    require(encoder.in_channels >= 1, "ModelConfig: in_channels must be >= 1");
    if (head.kind == HeadKind::Multiclass) require(head.classes >= 2, "ModelConfig: multiclass head needs >= 2 classes");
    require(mep.embed_dim >= 1, "ModelConfig: embed_dim must be >= 1");
    (void)mep.levels();
  }
};

inline std::string to_string(HeadKind k) {
  switch (k) {
    case HeadKind::Reconstruction: return "reconstruction";
    case HeadKind::Binary: return "binary";
    case HeadKind::Multiclass: return "multiclass";
  }
  return "?";
}

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "reconstruction") return HeadKind::Reconstruction;
  if (s == "binary") return HeadKind::Binary;
  if (s == "multiclass") return HeadKind::Multiclass;
  throw InvalidArgument("unknown head kind '" + s + "'");
}

inline void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
  j = nlohmann::ordered_json{{"channels", c.encoder.channels},
                             {"in_channels", c.encoder.in_channels},
                             {"head", to_string(c.head.kind)},
                             {"classes", c.head.classes},
                             {"scales", c.mep.scales},
                             {"embed_dim", c.mep.embed_dim},
                             {"resolution", c.resolution}};
}

inline void from_json(const nlohmann::ordered_json& j, ModelConfig& c) {
  c.encoder.channels = j.at("channels").get<std::array<std::size_t, kPyramidLevels>>();
  c.encoder.in_channels = j.at("in_channels").get<std::size_t>();
  c.head.kind = head_kind_from_string(j.at("head").get<std::string>());
  c.head.classes = j.at("classes").get<std::size_t>();
  c.mep.scales = j.at("scales").get<int>();
  c.mep.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.resolution = j.at("resolution").get<std::size_t>();
}

/// F1..F5; level l (1-based) has spatial size input / 2^l.
using PyramidFeatures = std::array<ad::Tensor, kPyramidLevels>;

/// Packs slices into [N, 3, H, W].
inline ad::Tensor images_to_tensor(std::span<const RgbSlice> images) {
  require(!images.empty(), "images_to_tensor: empty batch");
  const std::size_t h = images[0].height(), w = images[0].width();
  std::vector<double> v;
  v.reserve(images.size() * 3 * h * w);
  for (const RgbSlice& img : images) {
    require(img.height() == h && img.width() == w, "images_to_tensor: images differ in size");
    for (const auto& plane : img.planes) v.insert(v.end(), plane.begin(), plane.end());
  }
  return ad::Tensor::constant({images.size(), 3, h, w}, std::move(v));
}

/// Lung and mediastinal planes as the [N, 2, H, W] reconstruction target.
inline ad::Tensor recon_target_tensor(std::span<const RgbSlice> images) {
  require(!images.empty(), "recon_target_tensor: empty batch");
  const std::size_t h = images[0].height(), w = images[0].width();
  std::vector<double> v;
  v.reserve(images.size() * 2 * h * w);
  for (const RgbSlice& img : images) {
    require(img.height() == h && img.width() == w, "recon_target_tensor: images differ in size");
    for (std::size_t c = 0; c < 2; ++c) v.insert(v.end(), img.planes[c].begin(), img.planes[c].end());
  }
  return ad::Tensor::constant({images.size(), 2, h, w}, std::move(v));
}

namespace detail {

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  return h;
}

/// He-normal weights; the draw depends only on (seed, name).
inline ad::Tensor he_normal(ad::Shape shape, std::size_t fan_in, std::uint64_t seed, const std::string& name) {
  Rng rng(derive_seed(seed, {fnv1a(name)}));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = rng.normal(0.0, sd);
  return ad::Tensor::parameter(std::move(shape), std::move(v));
}

}  // namespace detail

struct ConvLayer {
  std::string name;
  ad::Tensor weight;
  ad::Tensor bias;
  std::size_t stride = 1;
  std::size_t pad = 1;

  static ConvLayer make(std::string name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                        std::uint64_t seed) {
    ConvLayer l;
    l.weight = detail::he_normal({out, in, k, k}, in * k * k, seed, name + ".weight");
    l.bias = ad::Tensor::parameter({out}, std::vector<double>(out, 0.0));
    l.stride = stride;
    l.pad = k / 2;
    l.name = std::move(name);
    return l;
  }

  ad::Tensor operator()(const ad::Tensor& x) const { return ad::conv2d(x, weight, bias, stride, pad); }

  void register_into(ParameterSet& ps) const {
    ps.add(name + ".weight", weight);
    ps.add(name + ".bias", bias);
  }
};

struct LinearLayer {
  std::string name;
  ad::Tensor weight;
  ad::Tensor bias;

  static LinearLayer make(std::string name, std::size_t in, std::size_t out, std::uint64_t seed) {
    LinearLayer l;
    // Xavier-style scale: the projection has no nonlinearity after it.
    Rng rng(derive_seed(seed, {detail::fnv1a(name + ".weight")}));
    const double sd = std::sqrt(1.0 / static_cast<double>(in));
    std::vector<double> w(in * out);
    for (double& x : w) x = rng.normal(0.0, sd);
    l.weight = ad::Tensor::parameter({out, in}, std::move(w));
    // Small random bias: an all-zero feature map (e.g. a fully masked input)
    // must still project to a nonzero embedding.
    Rng brng(derive_seed(seed, {detail::fnv1a(name + ".bias")}));
    std::vector<double> b(out);
    for (double& x : b) x = brng.normal(0.0, 0.01);
    l.bias = ad::Tensor::parameter({out}, std::move(b));
    l.name = std::move(name);
    return l;
  }

  ad::Tensor operator()(const ad::Tensor& x) const { return ad::fully_connected(x, weight, bias); }

  void register_into(ParameterSet& ps) const {
    ps.add(name + ".weight", weight);
    ps.add(name + ".bias", bias);
  }
};

/// Encoder level l: stride-2 conv + ReLU, conv + ReLU.
/// Decoder level l (4..1): upsample, concat skip F^l, conv + ReLU, conv + ReLU.
/// Output: upsample to input size, conv + ReLU, 1x1 head.
class UNet {
 public:
  explicit UNet(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    const auto& ch = cfg_.encoder.channels;
    std::size_t prev = cfg_.encoder.in_channels;
    for (std::size_t l = 0; l < kPyramidLevels; ++l) {
      const std::string p = "enc" + std::to_string(l + 1);
      enc_down_[l] = ConvLayer::make(p + ".down", prev, ch[l], 3, 2, seed);
      enc_conv_[l] = ConvLayer::make(p + ".conv", ch[l], ch[l], 3, 1, seed);
      prev = ch[l];
    }
    for (std::size_t l = 0; l + 1 < kPyramidLevels; ++l) {
      const std::string p = "dec" + std::to_string(l + 1);
      dec_fuse_[l] = ConvLayer::make(p + ".fuse", ch[l + 1] + ch[l], ch[l], 3, 1, seed);
      dec_conv_[l] = ConvLayer::make(p + ".conv", ch[l], ch[l], 3, 1, seed);
    }
    out_conv_ = ConvLayer::make("out.conv", ch[0], ch[0], 3, 1, seed);
    head_ = make_head(cfg_.head, seed);
    for (std::size_t level : cfg_.mep.levels()) mep_.push_back(make_projection(level, seed));
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  std::uint64_t seed() const noexcept { return seed_; }

  PyramidFeatures encode(const ad::Tensor& x) const {
    require(x.rank() == 4, "encode: input must be [N,C,H,W]");
    require(x.dim(1) == cfg_.encoder.in_channels, "encode: expected " + std::to_string(cfg_.encoder.in_channels) +
                                                      " input channels, got " + std::to_string(x.dim(1)));
    require(x.dim(2) % 32 == 0 && x.dim(3) % 32 == 0 && x.dim(2) > 0 && x.dim(3) > 0,
            "encode: height and width must be divisible by 32, got " + std::to_string(x.dim(2)) + "x" +
                std::to_string(x.dim(3)));
    PyramidFeatures f;
    ad::Tensor h = x;
    for (std::size_t l = 0; l < kPyramidLevels; ++l) {
      h = ad::relu(enc_conv_[l](ad::relu(enc_down_[l](h))));
      f[l] = h;
    }
    return f;
  }

  /// Pre-activation head output at input resolution.
  ad::Tensor decode_logits(const PyramidFeatures& f) const {
    ad::Tensor d = f[kPyramidLevels - 1];
    for (std::size_t l = kPyramidLevels - 1; l-- > 0;) {
      ad::Tensor up = ad::upsample_nearest2x(d);
      d = ad::relu(dec_conv_[l](ad::relu(dec_fuse_[l](ad::concat({up, f[l]}, 1)))));
    }
    d = ad::relu(out_conv_(ad::upsample_nearest2x(d)));
    return head_(d);
  }

  /// Head output after its activation: sigmoid (reconstruction, binary) or
  /// channel softmax (multiclass).
  ad::Tensor decode(const PyramidFeatures& f) const {
    ad::Tensor logits = decode_logits(f);
    return cfg_.head.kind == HeadKind::Multiclass ? ad::softmax_channel(logits) : ad::sigmoid(logits);
  }

  /// One [N, embed_dim] embedding per selected pyramid level, in level order.
  std::vector<ad::Tensor> project(const PyramidFeatures& f) const {
    std::vector<ad::Tensor> out;
    const auto levels = cfg_.mep.levels();
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const ad::Tensor& fl = f[levels[i] - 1];
      const std::size_t expect = mep_[i].weight.dim(1);
      const ad::Tensor flat = ad::flatten(fl);
      require(flat.dim(1) == expect, "project: level " + std::to_string(levels[i]) + " flattens to " +
                                         std::to_string(flat.dim(1)) + " values, projection expects " +
                                         std::to_string(expect) + " (resolution-specific)");
      out.push_back(mep_[i](flat));
    }
    return out;
  }

  /// Replaces the output head with a freshly initialized one. Trunk and
  /// projection parameters are untouched.
  void swap_head(const HeadConfig& head, std::uint64_t seed) {
    cfg_.head = head;
    cfg_.validate();
    head_ = make_head(head, seed);
  }

  ParameterSet trunk_parameters() const {
    ParameterSet ps;
    for (std::size_t l = 0; l < kPyramidLevels; ++l) {
      enc_down_[l].register_into(ps);
      enc_conv_[l].register_into(ps);
    }
    for (std::size_t l = 0; l + 1 < kPyramidLevels; ++l) {
      dec_fuse_[l].register_into(ps);
      dec_conv_[l].register_into(ps);
    }
    out_conv_.register_into(ps);
    return ps;
  }

  ParameterSet head_parameters() const {
    ParameterSet ps;
    head_.register_into(ps);
    return ps;
  }

  ParameterSet projection_parameters() const {
    ParameterSet ps;
    for (const auto& p : mep_) p.register_into(ps);
    return ps;
  }

  /// trunk, then head, then projections.
  ParameterSet parameters() const {
    ParameterSet ps = trunk_parameters();
    ps.append(head_parameters());
    ps.append(projection_parameters());
    return ps;
  }

  static bool is_head_name(const std::string& name) { return name.rfind("head.", 0) == 0; }
  static bool is_projection_name(const std::string& name) { return name.rfind("mep", 0) == 0; }

  /// Layer table at the configured resolution.
  std::string describe() const {
    std::ostringstream os;
    const auto& ch = cfg_.encoder.channels;
    const std::size_t r = cfg_.resolution;
    auto row = [&](const std::string& name, const std::string& kind, const ad::Tensor& w, const std::string& out) {
      os << std::left << std::setw(14) << name << std::setw(16) << kind << std::setw(20) << ad::shape_str(w.shape())
         << out << '\n';
    };
    auto map = [](std::size_t c, std::size_t s) {
      return "[" + std::to_string(c) + "," + std::to_string(s) + "," + std::to_string(s) + "]";
    };
    os << std::left << std::setw(14) << "layer" << std::setw(16) << "kind" << std::setw(20) << "weight"
       << "output\n";
    for (std::size_t l = 0; l < kPyramidLevels; ++l) {
      const std::size_t s = r >> (l + 1);
      row(enc_down_[l].name, "conv3x3/s2+relu", enc_down_[l].weight, map(ch[l], s));
      row(enc_conv_[l].name, "conv3x3+relu", enc_conv_[l].weight, map(ch[l], s) + "  F" + std::to_string(l + 1));
    }
    for (std::size_t l = kPyramidLevels - 1; l-- > 0;) {
      const std::size_t s = r >> (l + 1);
      row(dec_fuse_[l].name, "up2+cat+conv", dec_fuse_[l].weight, map(ch[l], s));
      row(dec_conv_[l].name, "conv3x3+relu", dec_conv_[l].weight, map(ch[l], s));
    }
    row(out_conv_.name, "up2+conv+relu", out_conv_.weight, map(ch[0], r));
    const std::string act = cfg_.head.kind == HeadKind::Multiclass ? "conv1x1+softmax" : "conv1x1+sigmoid";
    row(head_.name, act, head_.weight, map(cfg_.head.out_channels(), r) + "  " + to_string(cfg_.head.kind));
    const auto levels = cfg_.mep.levels();
    for (std::size_t i = 0; i < mep_.size(); ++i)
      row(mep_[i].name, "flatten+fc", mep_[i].weight, "[" + std::to_string(cfg_.mep.embed_dim) + "]  P" +
                                                        std::to_string(levels[i]));
    os << "parameters: " << parameters().scalar_count() << '\n';
    return os.str();
  }

 private:
  ConvLayer make_head(const HeadConfig& head, std::uint64_t seed) const {
    return ConvLayer::make("head", cfg_.encoder.channels[0], head.out_channels(), 1, 1,
                           derive_seed(seed, {detail::fnv1a(to_string(head.kind)), head.out_channels()}));
  }

  LinearLayer make_projection(std::size_t level, std::uint64_t seed) const {
    const std::size_t side = cfg_.resolution >> level;
    const std::size_t in = cfg_.encoder.channels[level - 1] * side * side;
    return LinearLayer::make("mep" + std::to_string(level), in, cfg_.mep.embed_dim, seed);
  }

  ModelConfig cfg_;
  std::uint64_t seed_;
  std::array<ConvLayer, kPyramidLevels> enc_down_, enc_conv_;
  std::array<ConvLayer, kPyramidLevels - 1> dec_fuse_, dec_conv_;
  ConvLayer out_conv_;
  ConvLayer head_;
  std::vector<LinearLayer> mep_;
};

}  // namespace tcsmae
