#pragma once

// Semi-masked dual-branch pretraining and downstream finetuning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tcsmae/adam.hpp"
#include "tcsmae/checkpoint.hpp"
#include "tcsmae/dataset.hpp"
#include "tcsmae/eval.hpp"
#include "tcsmae/io.hpp"
#include "tcsmae/losses.hpp"
#include "tcsmae/masking.hpp"
#include "tcsmae/model.hpp"
#include "tcsmae/rng.hpp"

namespace tcsmae {

using ojson = nlohmann::ordered_json;

enum class MaskKind { Tissue, Patch };
/// How often the masked interval set is redrawn.
enum class MaskResample { PerImage, PerBatch };

inline std::string to_string(MaskKind k) { return k == MaskKind::Tissue ? "tissue" : "patch"; }
inline std::string to_string(MaskResample r) { return r == MaskResample::PerImage ? "per_image" : "per_batch"; }
inline std::string to_string(ReconCombine c) { return c == ReconCombine::Sum ? "sum" : "ratio"; }

struct MaskOptions {
  MaskKind kind = MaskKind::Tissue;
  std::size_t k_intervals = 8;
  double mask_ratio = 0.75;
  std::size_t patch_size = 16;
};

inline TissueMask make_mask(const Sample& s, const MaskOptions& m, std::uint64_t seed) {
  if (m.kind == MaskKind::Patch)
    return build_patch_mask(s.rgb.height(), s.rgb.width(), PatchMaskSpec{m.patch_size, m.mask_ratio, seed});
  return build_tissue_mask(s.norm, TissueMaskSpec{m.k_intervals, m.mask_ratio, seed});
}

/// Published full-scale initial learning rate.
inline constexpr double kPaperPretrainLr = 1e-4;

/// Desk-scale defaults; the full-scale regime is 60 epochs, batch 30, 256x256,
/// lr kPaperPretrainLr.
struct PretrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double lr_decay = 0.96;  ///< per epoch
  std::size_t resolution = 64;
  MaskOptions mask;
  MaskResample resample = MaskResample::PerImage;
  int scales = 2;
  double lambda = 1.0;
  double gamma_init = 0.07;
  std::size_t embed_dim = 128;
  std::array<std::size_t, kPyramidLevels> channels{8, 16, 32, 64, 128};
  ReconCombine recon_combine = ReconCombine::Sum;
  bool hflip = false;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, "epochs: must be >= 1");
    require(batch_size >= 1, "batch_size: must be >= 1");
    require(lr > 0.0, "lr: must be > 0");
    require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay: must lie in (0, 1]");
    require(resolution >= 32 && resolution % 32 == 0, "resolution: must be a positive multiple of 32");
    require(mask.k_intervals >= 1, "k: must be >= 1");
    require(mask.mask_ratio > 0.0 && mask.mask_ratio < 1.0, "rho: must lie in (0, 1)");
    require(mask.patch_size >= 1 && mask.patch_size <= resolution, "patch_size: must lie in [1, resolution]");
    require(scales >= 0 && scales <= 3, "scales: must be 0, 1, 2 or 3");
    require(lambda >= 0.0, "lambda: must be >= 0");
    require(gamma_init > 0.0, "gamma_init: must be > 0");
    require(embed_dim >= 1, "embed_dim: must be >= 1");
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.encoder.channels = channels;
    m.head = HeadConfig::reconstruction();
    m.mep = MepConfig{scales, embed_dim};
    m.resolution = resolution;
    return m;
  }

  double lr_at(std::size_t epoch) const { return lr * std::pow(lr_decay, static_cast<double>(epoch)); }
};

/// Learning rate applied when --paper-lr is requested.
inline constexpr double kPaperFinetuneLr = 1e-6;

struct FinetuneConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double lr = 1e-4;  ///< desk default; the published value is kPaperFinetuneLr
  bool paper_lr = false;
  double lr_decay = 1.0;
  HeadKind head = HeadKind::Binary;
  std::size_t classes = 2;
  std::string from = "scratch";  ///< "scratch" or a checkpoint path
  std::size_t resolution = 64;   ///< scratch models only; checkpoints carry their own
  std::array<std::size_t, kPyramidLevels> channels{8, 16, 32, 64, 128};
  double val_fraction = 0.2;
  std::size_t folds = 0;  ///< 0: seeded holdout split; k >= 2: k-fold, validating on `fold`
  std::size_t fold = 0;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, "epochs: must be >= 1");
    require(batch_size >= 1, "batch_size: must be >= 1");
    require(lr > 0.0, "lr: must be > 0");
    require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay: must lie in (0, 1]");
    require(head != HeadKind::Reconstruction, "head: finetuning needs a segmentation head (binary or multiclass)");
    if (head == HeadKind::Multiclass) require(classes >= 2, "classes: multiclass head needs >= 2 classes");
    require(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction: must lie in (0, 1)");
    require(folds == 0 || folds >= 2, "folds: must be 0 or >= 2");
    require(folds == 0 || fold < folds, "fold: must be < folds");
    require(resolution >= 32 && resolution % 32 == 0, "resolution: must be a positive multiple of 32");
  }

  double effective_lr() const { return paper_lr ? kPaperFinetuneLr : lr; }
  HeadConfig head_config() const { return head == HeadKind::Binary ? HeadConfig::binary() : HeadConfig::multiclass(classes); }
  std::size_t label_classes() const { return head == HeadKind::Binary ? 2 : classes; }
};

// ---------------------------------------------------------------------------
// Config (de)serialization. Every field is written; reading rejects unknown
// keys and names the offending field.

namespace detail {

template <typename T>
void read_field(const ojson& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidArgument(std::string(key) + ": wrong type in config");
  }
}

inline void reject_unknown(const ojson& j, std::initializer_list<const char*> known) {
  require(j.is_object(), "config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw InvalidArgument(key + ": unknown config field");
  }
}

}  // namespace detail

inline ojson to_json(const PretrainConfig& c) {
  return {{"kind", "pretrain"},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"lr_decay", c.lr_decay},
          {"resolution", c.resolution},
          {"mask", to_string(c.mask.kind)},
          {"k", c.mask.k_intervals},
          {"rho", c.mask.mask_ratio},
          {"patch_size", c.mask.patch_size},
          {"mask_resample", to_string(c.resample)},
          {"scales", c.scales},
          {"lambda", c.lambda},
          {"gamma_init", c.gamma_init},
          {"embed_dim", c.embed_dim},
          {"channels", c.channels},
          {"recon_combine", to_string(c.recon_combine)},
          {"hflip", c.hflip},
          {"seed", c.seed}};
}

inline PretrainConfig pretrain_config_from_json(const ojson& j, PretrainConfig c = {}) {
  detail::reject_unknown(j, {"kind", "epochs", "batch_size", "lr", "lr_decay", "resolution", "mask", "k", "rho",
                             "patch_size", "mask_resample", "scales", "lambda", "gamma_init", "embed_dim", "channels",
                             "recon_combine", "hflip", "seed"});
  if (j.contains("kind")) require(j.at("kind") == "pretrain", "kind: expected \"pretrain\"");
  detail::read_field(j, "epochs", c.epochs);
  detail::read_field(j, "batch_size", c.batch_size);
  detail::read_field(j, "lr", c.lr);
  detail::read_field(j, "lr_decay", c.lr_decay);
  detail::read_field(j, "resolution", c.resolution);
  std::string s;
  if (j.contains("mask")) {
    detail::read_field(j, "mask", s);
    require(s == "tissue" || s == "patch", "mask: expected \"tissue\" or \"patch\"");
    c.mask.kind = s == "tissue" ? MaskKind::Tissue : MaskKind::Patch;
  }
  detail::read_field(j, "k", c.mask.k_intervals);
  detail::read_field(j, "rho", c.mask.mask_ratio);
  detail::read_field(j, "patch_size", c.mask.patch_size);
  if (j.contains("mask_resample")) {
    detail::read_field(j, "mask_resample", s);
    require(s == "per_image" || s == "per_batch", "mask_resample: expected \"per_image\" or \"per_batch\"");
    c.resample = s == "per_image" ? MaskResample::PerImage : MaskResample::PerBatch;
  }
  detail::read_field(j, "scales", c.scales);
  detail::read_field(j, "lambda", c.lambda);
  detail::read_field(j, "gamma_init", c.gamma_init);
  detail::read_field(j, "embed_dim", c.embed_dim);
  detail::read_field(j, "channels", c.channels);
  if (j.contains("recon_combine")) {
    detail::read_field(j, "recon_combine", s);
    require(s == "sum" || s == "ratio", "recon_combine: expected \"sum\" or \"ratio\"");
    c.recon_combine = s == "sum" ? ReconCombine::Sum : ReconCombine::Ratio;
  }
  detail::read_field(j, "hflip", c.hflip);
  detail::read_field(j, "seed", c.seed);
  c.validate();
  return c;
}

inline ojson to_json(const FinetuneConfig& c) {
  return {{"kind", "finetune"},     {"epochs", c.epochs},       {"batch_size", c.batch_size},
          {"lr", c.lr},             {"paper_lr", c.paper_lr},   {"lr_decay", c.lr_decay},
          {"head", to_string(c.head)}, {"classes", c.classes}, {"from", c.from},
          {"resolution", c.resolution}, {"channels", c.channels}, {"val_fraction", c.val_fraction},
          {"folds", c.folds},       {"fold", c.fold},           {"seed", c.seed}};
}

inline FinetuneConfig finetune_config_from_json(const ojson& j, FinetuneConfig c = {}) {
  detail::reject_unknown(j, {"kind", "epochs", "batch_size", "lr", "paper_lr", "lr_decay", "head", "classes", "from",
                             "resolution", "channels", "val_fraction", "folds", "fold", "seed"});
  if (j.contains("kind")) require(j.at("kind") == "finetune", "kind: expected \"finetune\"");
  detail::read_field(j, "epochs", c.epochs);
  detail::read_field(j, "batch_size", c.batch_size);
  detail::read_field(j, "lr", c.lr);
  detail::read_field(j, "paper_lr", c.paper_lr);
  detail::read_field(j, "lr_decay", c.lr_decay);
  if (j.contains("head")) {
    std::string s;
    detail::read_field(j, "head", s);
    c.head = head_kind_from_string(s);
  }
  detail::read_field(j, "classes", c.classes);
  detail::read_field(j, "from", c.from);
  detail::read_field(j, "resolution", c.resolution);
  detail::read_field(j, "channels", c.channels);
  detail::read_field(j, "val_fraction", c.val_fraction);
  detail::read_field(j, "folds", c.folds);
  detail::read_field(j, "fold", c.fold);
  detail::read_field(j, "seed", c.seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

/// Round-trippable text for a double; used by every CSV writer.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline RgbSlice hflip(const RgbSlice& s) {
  RgbSlice out = s;
  for (auto& p : out.planes)
    for (std::size_t r = 0; r < p.height(); ++r) std::reverse(p.begin() + static_cast<std::ptrdiff_t>(r * p.width()),
                                                              p.begin() + static_cast<std::ptrdiff_t>((r + 1) * p.width()));
  return out;
}

inline Sample hflip(const Sample& s) {
  Sample out = s;
  out.rgb = hflip(s.rgb);
  for (std::size_t r = 0; r < s.norm.height(); ++r)
    std::reverse(out.norm.begin() + static_cast<std::ptrdiff_t>(r * s.norm.width()),
                 out.norm.begin() + static_cast<std::ptrdiff_t>((r + 1) * s.norm.width()));
  if (out.labels)
    for (std::size_t r = 0; r < out.labels->height(); ++r)
      std::reverse(out.labels->begin() + static_cast<std::ptrdiff_t>(r * out.labels->width()),
                   out.labels->begin() + static_cast<std::ptrdiff_t>((r + 1) * out.labels->width()));
  return out;
}

/// Seeded permutation of [0, n).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[static_cast<std::size_t>(rng.below(i))]);
  return idx;
}

struct LossTerms {
  ad::Tensor ssim;
  ad::Tensor contrastive;  ///< undefined when no scales are selected
  ad::Tensor total;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double l_ssim = 0.0;
  std::optional<double> l_con;
  double l_total = 0.0;
  double gamma = 0.0;
};

struct PretrainResult {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_mean_ssim;
  std::vector<double> epoch_mean_total;
};

/// Owns the shared-weight autoencoder, the temperature, and the optimizer.
/// Both branches run through the same UNet instance, so they always see the
/// same parameter storage.
class Pretrainer {
 public:
  explicit Pretrainer(PretrainConfig cfg)
      : cfg_((cfg.validate(), cfg)),
        model_(cfg_.model_config(), cfg_.seed),
        contrast_(ContrastParams::make(cfg_.gamma_init, cfg_.lambda)),
        optimizer_(trainable(), AdamOptions{cfg_.lr}) {}

  const PretrainConfig& config() const noexcept { return cfg_; }
  UNet& model() noexcept { return model_; }
  const UNet& model() const noexcept { return model_; }
  const ContrastParams& contrast() const noexcept { return contrast_; }
  Adam& optimizer() noexcept { return optimizer_; }

  /// Model parameters plus the log-temperature (when contrastive learning is on).
  ParameterSet trainable() const {
    ParameterSet ps = model_.parameters();
    if (cfg_.scales > 0) ps.add("contrast.log_gamma", contrast_.log_gamma);
    return ps;
  }

  /// Forward pass of both branches on `batch` with the given per-image masks.
  LossTerms losses(std::span<const Sample> batch, std::span<const TissueMask> masks) const {
    require(batch.size() == masks.size(), "pretrain: one mask per image required");
    require(!batch.empty(), "pretrain: empty batch");
    std::vector<RgbSlice> original, masked;
    original.reserve(batch.size());
    masked.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      original.push_back(batch[i].rgb);
      masked.push_back(apply_mask(batch[i].rgb, masks[i]));
    }
    const ad::Tensor x_o = images_to_tensor(original);
    const ad::Tensor x_m = images_to_tensor(masked);
    const ad::Tensor target = recon_target_tensor(original);

    const PyramidFeatures f_m = model_.encode(x_m);
    const PyramidFeatures f_o = model_.encode(x_o);
    const ad::Tensor r_m = model_.decode(f_m);
    const ad::Tensor r_o = model_.decode(f_o);
    LossTerms t;
    t.ssim = ssim_loss(r_m, r_o, target, SsimParams{}, cfg_.recon_combine);
    if (cfg_.scales > 0) {
      const auto p_m = model_.project(f_m);
      const auto p_o = model_.project(f_o);
      t.contrastive = contrastive_loss(p_m, p_o, contrast_.log_gamma);
    }
    t.total = total_loss(t.ssim, t.contrastive, cfg_.lambda);
    return t;
  }

  /// Masks for a batch of dataset indices at `epoch`.
  std::vector<TissueMask> masks_for(std::span<const Sample> batch, std::span<const std::size_t> indices,
                                    std::size_t epoch, std::size_t batch_index) const {
    std::vector<TissueMask> out;
    out.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const std::uint64_t seed =
          cfg_.resample == MaskResample::PerImage
              ? derive_seed(cfg_.seed, {0x6D61736BULL, indices[i], epoch})
              : derive_seed(cfg_.seed, {0x62617463ULL, batch_index, epoch});
      out.push_back(make_mask(batch[i], cfg_.mask, seed));
    }
    return out;
  }

  /// One optimizer step: forward both branches, single backward on the
  /// combined loss, one Adam update.
  StepRecord step(std::span<const Sample> batch, std::span<const TissueMask> masks) {
    optimizer_.zero_grad();
    LossTerms t;
    try {
      t = losses(batch, masks);
      if (!std::isfinite(t.total.item())) throw NonFiniteError("non-finite loss");
      ad::backward(t.total);
      optimizer_.step();
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("pretrain: step " + std::to_string(step_) + ": " + e.what());
    }
    StepRecord rec;
    rec.step = step_++;
    rec.lr = optimizer_.lr();
    rec.l_ssim = t.ssim.item();
    if (t.contrastive.defined()) rec.l_con = t.contrastive.item();
    rec.l_total = t.total.item();
    rec.gamma = contrast_.gamma();
    return rec;
  }

  PretrainResult run(const Dataset& data) {
    require(!data.empty(), "pretrain: dataset is empty");
    for (const auto& s : data)
      require(s.rgb.height() == cfg_.resolution && s.rgb.width() == cfg_.resolution,
              "pretrain: sample '" + s.name + "' is " + std::to_string(s.rgb.height()) + "x" +
                  std::to_string(s.rgb.width()) + ", expected resolution " + std::to_string(cfg_.resolution));
    PretrainResult result;
    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      optimizer_.set_lr(cfg_.lr_at(epoch));
      const auto order = shuffled_indices(data.size(), derive_seed(cfg_.seed, {0x73687566ULL, epoch}));
      Rng flip_rng(derive_seed(cfg_.seed, {0x666C6970ULL, epoch}));
      double sum_ssim = 0.0, sum_total = 0.0;
      std::size_t steps = 0;
      for (std::size_t b = 0; b * cfg_.batch_size < data.size(); ++b) {
        const std::size_t lo = b * cfg_.batch_size, hi = std::min(data.size(), lo + cfg_.batch_size);
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                     order.begin() + static_cast<std::ptrdiff_t>(hi));
        std::vector<Sample> batch;
        for (std::size_t i : idx)
          batch.push_back(cfg_.hflip && flip_rng.uniform() < 0.5 ? tcsmae::hflip(data[i]) : data[i]);
        const auto masks = masks_for(batch, idx, epoch, b);
        StepRecord rec = step(batch, masks);
        rec.epoch = epoch;
        sum_ssim += rec.l_ssim;
        sum_total += rec.l_total;
        ++steps;
        result.steps.push_back(rec);
      }
      result.epoch_mean_ssim.push_back(sum_ssim / static_cast<double>(steps));
      result.epoch_mean_total.push_back(sum_total / static_cast<double>(steps));
    }
    return result;
  }

  Checkpoint checkpoint() const {
    ojson meta;
    meta["kind"] = "pretrain";
    meta["model"] = model_.config();
    meta["config"] = to_json(cfg_);
    meta["gamma"] = contrast_.gamma();
    meta["steps"] = step_;
    Checkpoint ck = snapshot(model_.parameters(), meta);
    ck.arrays.push_back({"contrast.log_gamma", {{}, {contrast_.log_gamma.item()}}});
    return ck;
  }

 private:
  PretrainConfig cfg_;
  UNet model_;
  ContrastParams contrast_;
  Adam optimizer_;
  std::size_t step_ = 0;
};

inline std::string losses_csv(const std::vector<StepRecord>& steps) {
  std::ostringstream os;
  os << "step,epoch,lr,l_ssim,l_con,l_total,gamma\n";
  for (const auto& r : steps)
    os << r.step << ',' << r.epoch << ',' << fmt_double(r.lr) << ',' << fmt_double(r.l_ssim) << ','
       << (r.l_con ? fmt_double(*r.l_con) : "") << ',' << fmt_double(r.l_total) << ',' << fmt_double(r.gamma) << '\n';
  return os.str();
}

/// Trains on `data` and writes checkpoint.bin, manifest.json, losses.csv and
/// config.resolved.json into `out_dir`.
inline PretrainResult pretrain(const Dataset& data, const PretrainConfig& cfg, const std::filesystem::path& out_dir) {
  Pretrainer trainer(cfg);
  PretrainResult result = trainer.run(data);
  std::filesystem::create_directories(out_dir);
  save_checkpoint(trainer.checkpoint(), out_dir);
  io::write_text(out_dir / "losses.csv", losses_csv(result.steps));
  io::write_json(out_dir / "config.resolved.json", to_json(cfg));
  return result;
}

// ---------------------------------------------------------------------------
// Finetuning.

/// Builds a segmentation model: from scratch, or trunk weights inherited from
/// a pretraining checkpoint with a freshly initialized head.
inline UNet build_finetune_model(const FinetuneConfig& cfg) {
  cfg.validate();
  if (cfg.from == "scratch") {
    ModelConfig m;
    m.encoder.channels = cfg.channels;
    m.head = cfg.head_config();
    m.mep = MepConfig{0, 128};
    m.resolution = cfg.resolution;
    return UNet(m, cfg.seed);
  }
  const Checkpoint ck = load_checkpoint(cfg.from);
  if (!ck.meta.contains("model")) throw InvalidArgument(cfg.from + ": checkpoint manifest has no model config");
  ModelConfig m = ck.meta.at("model").get<ModelConfig>();
  m.mep.scales = 0;
  UNet model(m, cfg.seed);
  ParameterSet trunk = model.trunk_parameters();
  restore_parameters(trunk, ck);
  model.swap_head(cfg.head_config(), cfg.seed);
  return model;
}

struct Split {
  std::vector<std::size_t> train, val;
};

inline Split make_split(std::size_t n, const FinetuneConfig& cfg) {
  require(n >= 2, "finetune: need at least 2 samples to split");
  const auto perm = shuffled_indices(n, derive_seed(cfg.seed, {0x73706C74ULL}));
  Split s;
  if (cfg.folds == 0) {
    const auto n_val = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(cfg.val_fraction * static_cast<double>(n))), 1, n - 1);
    s.val.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
  } else {
    for (std::size_t i = 0; i < n; ++i) (i % cfg.folds == cfg.fold ? s.val : s.train).push_back(perm[i]);
    require(!s.val.empty() && !s.train.empty(), "finetune: fold leaves an empty split");
  }
  std::sort(s.val.begin(), s.val.end());
  return s;
}

inline std::vector<std::uint8_t> gather_labels(std::span<const Sample> batch) {
  std::vector<std::uint8_t> out;
  for (const auto& s : batch) {
    require(s.labels.has_value(), "finetune: sample '" + s.name + "' has no labels");
    out.insert(out.end(), s.labels->begin(), s.labels->end());
  }
  return out;
}

/// Hard label maps: threshold 0.5 (binary) or channel argmax (multiclass).
inline std::vector<SegMask> predict(const UNet& model, std::span<const Sample> samples, std::size_t chunk = 8) {
  std::vector<SegMask> out;
  const bool binary = model.config().head.kind == HeadKind::Binary;
  const std::size_t classes = binary ? 2 : model.config().head.classes;
  for (std::size_t lo = 0; lo < samples.size(); lo += chunk) {
    const std::size_t hi = std::min(samples.size(), lo + chunk);
    std::vector<RgbSlice> imgs;
    for (std::size_t i = lo; i < hi; ++i) imgs.push_back(samples[i].rgb);
    const ad::Tensor logits = model.decode_logits(model.encode(images_to_tensor(imgs)));
    const std::size_t c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    for (std::size_t s = 0; s < hi - lo; ++s) {
      Grid<std::uint8_t> labels(h, w);
      for (std::size_t i = 0; i < h * w; ++i) {
        if (binary) {
          labels[i] = logits[s * h * w + i] > 0.0 ? 1 : 0;  // sigmoid > 0.5
        } else {
          std::size_t best = 0;
          for (std::size_t k = 1; k < c; ++k)
            if (logits[(s * c + k) * h * w + i] > logits[(s * c + best) * h * w + i]) best = k;
          labels[i] = static_cast<std::uint8_t>(best);
        }
      }
      out.emplace_back(std::move(labels), classes);
    }
  }
  return out;
}

inline MetricReport evaluate(const UNet& model, std::span<const Sample> samples) {
  const auto preds = predict(model, samples);
  const std::size_t classes = preds.empty() ? 2 : preds.front().classes;
  std::vector<SampleMetrics> m;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    require(samples[i].labels.has_value(), "evaluate: sample '" + samples[i].name + "' has no labels");
    m.push_back(evaluate_sample(samples[i].name, preds[i], SegMask(*samples[i].labels, classes)));
  }
  return MetricReport::build(std::move(m));
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  MetricReport val;
};

struct FinetuneResult {
  std::vector<EpochMetrics> epochs;
  double final_val_dsc_percent() const { return epochs.empty() ? 0.0 : epochs.back().val.dsc_percent.mean; }
};

inline std::string metrics_csv(const std::vector<EpochMetrics>& epochs) {
  std::ostringstream os;
  const std::size_t classes = epochs.empty() ? 0 : epochs.front().val.per_class_dsc_percent.size();
  os << "epoch,lr,train_loss,val_dsc_mean,val_dsc_std,val_hd_mean,val_hd_std,val_hd_undefined";
  for (std::size_t c = 0; c < classes; ++c) os << ",val_dsc_class" << c + 1;
  os << '\n';
  for (const auto& e : epochs) {
    os << e.epoch << ',' << fmt_double(e.lr) << ',' << fmt_double(e.train_loss) << ','
       << fmt_double(e.val.dsc_percent.mean) << ',' << fmt_double(e.val.dsc_percent.stddev) << ','
       << fmt_double(e.val.hd_pixels.mean) << ',' << fmt_double(e.val.hd_pixels.stddev) << ',' << e.val.hd_undefined;
    for (const auto& s : e.val.per_class_dsc_percent) os << ',' << fmt_double(s.mean);
    os << '\n';
  }
  return os.str();
}

class Finetuner {
 public:
  explicit Finetuner(FinetuneConfig cfg)
      : cfg_((cfg.validate(), cfg)), model_(build_finetune_model(cfg_)),
        optimizer_(model_.parameters(), AdamOptions{cfg_.effective_lr()}) {}

  const UNet& model() const noexcept { return model_; }
  const FinetuneConfig& config() const noexcept { return cfg_; }

  double train_step(std::span<const Sample> batch) {
    std::vector<RgbSlice> imgs;
    for (const auto& s : batch) imgs.push_back(s.rgb);
    optimizer_.zero_grad();
    const ad::Tensor loss = ce_dice_loss(model_.decode_logits(model_.encode(images_to_tensor(imgs))), gather_labels(batch));
    ad::backward(loss);
    optimizer_.step();
    return loss.item();
  }

  FinetuneResult run(const Dataset& data) {
    const Split split = make_split(data.size(), cfg_);
    std::vector<Sample> val;
    for (std::size_t i : split.val) val.push_back(data[i]);
    FinetuneResult result;
    for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const double lr = cfg_.effective_lr() * std::pow(cfg_.lr_decay, static_cast<double>(epoch));
      optimizer_.set_lr(lr);
      const auto order = shuffled_indices(split.train.size(), derive_seed(cfg_.seed, {0x66747368ULL, epoch}));
      double loss_sum = 0.0;
      std::size_t steps = 0;
      for (std::size_t lo = 0; lo < order.size(); lo += cfg_.batch_size) {
        std::vector<Sample> batch;
        for (std::size_t k = lo; k < std::min(order.size(), lo + cfg_.batch_size); ++k)
          batch.push_back(data[split.train[order[k]]]);
        loss_sum += train_step(batch);
        ++steps;
      }
      result.epochs.push_back({epoch, lr, loss_sum / static_cast<double>(steps), evaluate(model_, val)});
    }
    return result;
  }

  Checkpoint checkpoint() const {
    ojson meta;
    meta["kind"] = "finetune";
    meta["model"] = model_.config();
    meta["config"] = to_json(cfg_);
    return snapshot(model_.parameters(), meta);
  }

 private:
  FinetuneConfig cfg_;
  UNet model_;
  Adam optimizer_;
};

/// Trains and writes checkpoint.bin, manifest.json, metrics.csv and
/// config.resolved.json into `out_dir`.
inline FinetuneResult finetune(const Dataset& data, const FinetuneConfig& cfg, const std::filesystem::path& out_dir) {
  Finetuner tuner(cfg);
  FinetuneResult result = tuner.run(data);
  std::filesystem::create_directories(out_dir);
  save_checkpoint(tuner.checkpoint(), out_dir);
  io::write_text(out_dir / "metrics.csv", metrics_csv(result.epochs));
  io::write_json(out_dir / "config.resolved.json", to_json(cfg));
  return result;
}

/// Rebuilds a model from any checkpoint written by pretrain or finetune.
inline UNet load_model(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (!ck.meta.contains("model")) throw InvalidArgument(path.string() + ": checkpoint manifest has no model config");
  UNet model(ck.meta.at("model").get<ModelConfig>(), 0);
  ParameterSet ps = model.parameters();
  restore_parameters(ps, ck);
  return model;
}

// ---------------------------------------------------------------------------
// Reconstruction SSIM of masked vs unmasked inputs.

struct ReconRow {
  std::string name;
  std::string condition;  ///< "masked" or "unmasked"
  double ssim = 0.0;
};

inline std::vector<ReconRow> recon_ssim_report(const UNet& model, std::span<const Sample> data, const MaskOptions& mask,
                                               std::uint64_t seed) {
  require(model.config().head.kind == HeadKind::Reconstruction, "recon_ssim_report: model needs a reconstruction head");
  std::vector<ReconRow> rows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const TissueMask m = make_mask(data[i], mask, derive_seed(seed, {0x7265706FULL, i}));
    const std::array<RgbSlice, 1> orig{data[i].rgb};
    const std::array<RgbSlice, 1> masked{apply_mask(data[i].rgb, m)};
    const ad::Tensor target = recon_target_tensor(orig);
    const ad::Tensor r_m = model.decode(model.encode(images_to_tensor(masked)));
    const ad::Tensor r_o = model.decode(model.encode(images_to_tensor(orig)));
    rows.push_back({data[i].name, "masked", sample_ssim(r_m, target, 0).item()});
    rows.push_back({data[i].name, "unmasked", sample_ssim(r_o, target, 0).item()});
  }
  return rows;
}

inline std::string recon_report_csv(const std::vector<ReconRow>& rows) {
  std::ostringstream os;
  os << "sample,condition,ssim\n";
  for (const auto& r : rows) os << r.name << ',' << r.condition << ',' << fmt_double(r.ssim) << '\n';
  return os.str();
}

inline double mean_ssim(const std::vector<ReconRow>& rows, const std::string& condition) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (r.condition == condition) {
      s += r.ssim;
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace tcsmae
