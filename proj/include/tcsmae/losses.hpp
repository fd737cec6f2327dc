#pragma once

// Pretraining objective (global-statistics SSIM reconstruction + multi-scale
// InfoNCE) and the finetuning cross-entropy + soft-Dice loss.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tcsmae/tensor.hpp"

namespace tcsmae {

/// Stabilizers for the [0, 1] dynamic range.
struct SsimParams {
  double tau1 = 0.01 * 0.01;
  double tau2 = 0.03 * 0.03;

  void validate() const { require(tau1 > 0.0 && tau2 > 0.0, "SsimParams: tau1 and tau2 must be > 0"); }
};

/// How the two (1 - SSIM) terms of one sample are combined.
enum class ReconCombine {
  Sum,    ///< (1 - SSIM_m) + (1 - SSIM_o); the default
  Ratio,  ///< (1 - SSIM_m) / (1 - SSIM_o); the literally typeset form, for comparison only
};

/// SSIM from image-wide statistics: one mean, one (population) variance per
/// input and one covariance. Any shape; both inputs must match.
inline ad::Tensor ssim(const ad::Tensor& a, const ad::Tensor& b, const SsimParams& p = {}) {
  p.validate();
  require(a.shape() == b.shape(), "ssim: shape mismatch " + ad::shape_str(a.shape()) + " vs " + ad::shape_str(b.shape()));
  using ad::mean;
  const ad::Tensor mu_a = mean(a);
  const ad::Tensor mu_b = mean(b);
  const ad::Tensor da = a - mu_a;
  const ad::Tensor db = b - mu_b;
  const ad::Tensor var_a = mean(da * da);
  const ad::Tensor var_b = mean(db * db);
  const ad::Tensor cov = mean(da * db);
  const ad::Tensor num = (2.0 * mu_a * mu_b + p.tau1) * (2.0 * cov + p.tau2);
  const ad::Tensor den = (mu_a * mu_a + mu_b * mu_b + p.tau1) * (var_a + var_b + p.tau2);
  return num / den;
}

/// Mean over channels of the per-channel SSIM of sample n. x, y: [N, C, H, W].
inline ad::Tensor sample_ssim(const ad::Tensor& x, const ad::Tensor& y, std::size_t n, const SsimParams& p = {}) {
  const ad::Tensor xs = ad::slice(x, 0, n, 1);
  const ad::Tensor ys = ad::slice(y, 0, n, 1);
  const std::size_t channels = x.dim(1);
  ad::Tensor acc;
  for (std::size_t c = 0; c < channels; ++c) {
    ad::Tensor s = ssim(ad::slice(xs, 1, c, 1), ad::slice(ys, 1, c, 1), p);
    acc = acc.defined() ? acc + s : s;
  }
  return acc / static_cast<double>(channels);
}

/// Reconstruction loss over a batch. recon_masked, recon_original and target
/// are [N, 2, H, W] (lung, mediastinal). SSIM is averaged over the two
/// channels per sample, then the sample terms are averaged over N.
inline ad::Tensor ssim_loss(const ad::Tensor& recon_masked, const ad::Tensor& recon_original, const ad::Tensor& target,
                            const SsimParams& p = {}, ReconCombine combine = ReconCombine::Sum) {
  require(target.rank() == 4, "ssim_loss: tensors must be [N, C, H, W]");
  require(recon_masked.shape() == target.shape() && recon_original.shape() == target.shape(),
          "ssim_loss: shape mismatch between reconstructions " + ad::shape_str(recon_masked.shape()) + ", " +
              ad::shape_str(recon_original.shape()) + " and target " + ad::shape_str(target.shape()));
  const std::size_t n = target.dim(0);
  ad::Tensor total;
  for (std::size_t i = 0; i < n; ++i) {
    const ad::Tensor term_m = 1.0 - sample_ssim(recon_masked, target, i, p);
    const ad::Tensor term_o = 1.0 - sample_ssim(recon_original, target, i, p);
    ad::Tensor term = combine == ReconCombine::Sum ? term_m + term_o : term_m / term_o;
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(n);
}

/// Temperature is learned as log(gamma) so gamma stays positive.
struct ContrastParams {
  ad::Tensor log_gamma;
  double lambda = 1.0;

  static ContrastParams make(double gamma = 0.07, double lambda = 1.0) {
    require(gamma > 0.0, "ContrastParams: gamma must be > 0");
    require(lambda >= 0.0, "ContrastParams: lambda must be >= 0");
    return {ad::Tensor::parameter({}, {std::log(gamma)}), lambda};
  }
  double gamma() const { return std::exp(log_gamma.item()); }
};

namespace detail {

/// InfoNCE for one pyramid level, averaged over the N anchors.
inline ad::Tensor info_nce_level(const ad::Tensor& p_masked, const ad::Tensor& p_original, const ad::Tensor& log_gamma) {
  require(p_masked.rank() == 2 && p_masked.shape() == p_original.shape(),
          "contrastive_loss: embeddings must be matching [N, D], got " + ad::shape_str(p_masked.shape()) + " and " +
              ad::shape_str(p_original.shape()));
  const std::size_t n = p_masked.dim(0);
  require(n >= 1, "contrastive_loss: empty batch");
  const ad::Tensor zm = ad::l2_normalize_rows(p_masked);
  const ad::Tensor zo = ad::l2_normalize_rows(p_original);
  // Row n: similarities of masked anchor n to [masked_0..N-1, original_0..N-1].
  const ad::Tensor sim = ad::matmul_nt(zm, ad::concat({zm, zo}, 0));
  const ad::Tensor logits = sim * ad::exp(-log_gamma);

  // Candidates: every column except the anchor itself; positive: column N+n.
  std::vector<double> keep(n * 2 * n, 1.0), exclude(n * 2 * n, 0.0), positive(n * 2 * n, 0.0), shift(n * 2 * n);
  for (std::size_t r = 0; r < n; ++r) {
    keep[r * 2 * n + r] = 0.0;
    exclude[r * 2 * n + r] = -1000.0;  // exp underflows to exactly 0
    positive[r * 2 * n + n + r] = 1.0;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < 2 * n; ++c)
      if (c != r) mx = std::max(mx, logits[r * 2 * n + c]);
    for (std::size_t c = 0; c < 2 * n; ++c) shift[r * 2 * n + c] = mx;
  }
  const ad::Shape shape{n, 2 * n};
  const ad::Tensor keep_t = ad::Tensor::constant(shape, std::move(keep));
  const ad::Tensor shifted = (logits - ad::Tensor::constant(shape, shift)) * keep_t +
                             ad::Tensor::constant(shape, std::move(exclude));
  const ad::Tensor log_den = ad::log(ad::sum_last(ad::exp(shifted)));  // shifted logsumexp, >= 0
  // lse - positive = log_den + (max - positive); the bracket is exactly 0
  // when the positive is the maximum.
  const ad::Tensor pos_gap = ad::sum_last((ad::Tensor::constant(shape, shift) - logits) *
                                          ad::Tensor::constant(shape, std::move(positive)));
  return ad::mean(log_den + pos_gap);
}

}  // namespace detail

/// Multi-scale InfoNCE. `masked[l]` and `original[l]` are the [N, D]
/// embeddings of pyramid level l for the two branches. Anchors come from the
/// masked branch; each is contrasted against the 2N - 1 other embeddings of
/// its level. Level terms are summed. An empty level list yields 0.
inline ad::Tensor contrastive_loss(std::span<const ad::Tensor> masked, std::span<const ad::Tensor> original,
                                   const ad::Tensor& log_gamma) {
  require(masked.size() == original.size(), "contrastive_loss: branches provide different numbers of levels");
  if (masked.empty()) return ad::Tensor::scalar(0.0);
  ad::Tensor total;
  for (std::size_t l = 0; l < masked.size(); ++l) {
    ad::Tensor t = detail::info_nce_level(masked[l], original[l], log_gamma);
    total = total.defined() ? total + t : t;
  }
  return total;
}

/// L_ssim + lambda * L_con. An undefined contrastive term counts as absent.
inline ad::Tensor total_loss(const ad::Tensor& recon, const ad::Tensor& contrastive, double lambda) {
  require(lambda >= 0.0, "total_loss: lambda must be >= 0");
  require(std::isfinite(recon.item()), "total_loss: reconstruction term is not finite");
  if (!contrastive.defined()) return recon;
  require(std::isfinite(contrastive.item()), "total_loss: contrastive term is not finite");
  return recon + lambda * contrastive;
}

inline constexpr double kDiceEpsilon = 1e-6;

/// 1 - 2 sum(p g) / (sum(p) + sum(g) + eps), over every element.
inline ad::Tensor soft_dice_loss(const ad::Tensor& probs, const ad::Tensor& target, double eps = kDiceEpsilon) {
  require(probs.shape() == target.shape(), "soft_dice_loss: shape mismatch");
  return 1.0 - 2.0 * ad::sum(probs * target) / (ad::sum(probs) + ad::sum(target) + eps);
}

/// Cross-entropy plus soft-Dice, equal weights.
/// logits: [N, C, H, W]; C = 1 means binary (sigmoid), C >= 2 multiclass
/// (softmax, Dice averaged over foreground classes 1..C-1).
/// labels: N*H*W class indices in [0, max(C, 2)).
inline ad::Tensor ce_dice_loss(const ad::Tensor& logits, std::span<const std::uint8_t> labels) {
  require(logits.rank() == 4, "ce_dice_loss: logits must be [N, C, H, W]");
  const std::size_t n = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t pixels = n * h * w;
  require(labels.size() == pixels, "ce_dice_loss: expected " + std::to_string(pixels) + " labels, got " +
                                       std::to_string(labels.size()));
  const std::size_t classes = c == 1 ? 2 : c;
  for (std::size_t i = 0; i < pixels; ++i)
    if (labels[i] >= classes)
      throw InvalidArgument("ce_dice_loss: label " + std::to_string(labels[i]) + " at flat index " + std::to_string(i) +
                            " outside [0, " + std::to_string(classes) + ")");

  if (c == 1) {
    std::vector<double> g(pixels);
    for (std::size_t i = 0; i < pixels; ++i) g[i] = labels[i];
    const ad::Tensor target = ad::Tensor::constant(logits.shape(), std::move(g));
    // -g log(s(z)) - (1-g) log(1-s(z)) = softplus(z) - g z
    const ad::Tensor ce = ad::mean(ad::softplus(logits) - target * logits);
    return ce + soft_dice_loss(ad::sigmoid(logits), target);
  }

  std::vector<double> onehot(n * c * h * w, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < h * w; ++i) onehot[(s * c + labels[s * h * w + i]) * h * w + i] = 1.0;
  const ad::Tensor target = ad::Tensor::constant(logits.shape(), std::move(onehot));
  const ad::Tensor logp = ad::log_softmax_channel(logits);
  const ad::Tensor ce = -ad::sum(target * logp) / static_cast<double>(pixels);
  const ad::Tensor probs = ad::exp(logp);
  ad::Tensor dice;
  for (std::size_t k = 1; k < c; ++k) {
    ad::Tensor d = soft_dice_loss(ad::slice(probs, 1, k, 1), ad::slice(target, 1, k, 1));
    dice = dice.defined() ? dice + d : d;
  }
  return ce + dice / static_cast<double>(c - 1);
}

}  // namespace tcsmae
