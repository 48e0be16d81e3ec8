#pragma once

// Semantic consistency regularization: temperature-scaled similarities
// between pooled visual features and the two text prototypes, an entropy
// penalty pushing for confident matches, and a hinge margin keeping the
// normal/abnormal similarities separated.

#include "fbclip/autodiff.hpp"
#include "fbclip/text_prompts.hpp"

#include <cmath>
#include <vector>

namespace fbclip::scr {

using text::TextFeatureSet;

struct SCRConfig {
  double tau = 0.07;
  double gamma = 1.0;
  double lambda = 0.15;
  double w_entropy = 1.0;
  double w_margin = 0.5;

  void validate() const {
    require(tau > 0.0, "scr.tau must be positive");
    require(gamma >= 0.0, "scr.gamma must be nonnegative");
  }
};

// Similarities s (B x 2, normal then abnormal) and row-softmax probabilities.
struct AlignmentLogits {
  ad::Var s;
  ad::Var p;

  static AlignmentLogits from_scores(const ad::Var& scores) {
    require(scores.cols() == 2, "AlignmentLogits: B x 2 scores expected");
    AlignmentLogits out;
    out.s = scores;
    out.p = ad::softmax_rows(scores);
    return out;
  }
};

// L2-normalize both sides and score against the two prototypes.
inline AlignmentLogits align(const ad::Var& pooled /* B x D */, const TextFeatureSet& text,
                             const SCRConfig& cfg) {
  cfg.validate();
  for (Eigen::Index b = 0; b < pooled.rows(); ++b)
    if (pooled.value().row(b).norm() == 0.0) {
      log_warn("align: zero-norm pooled feature, eps-normalized");
      break;
    }
  ad::Var v = ad::l2_normalize_rows(pooled);
  ad::Var t = ad::l2_normalize_rows(ad::concat_rows({text.normal, text.abnormal}));
  ad::Var scores = ad::mul_scalar(ad::matmul(v, ad::transpose(t)), 1.0 / cfg.tau);
  return AlignmentLogits::from_scores(scores);
}

// Mean-pool each image's tokens, then align. Token width must already be the
// shared width D (the visual projection is applied upstream).
inline AlignmentLogits pool_and_align(const std::vector<ad::Var>& tokens_per_image,
                                      const TextFeatureSet& text, const SCRConfig& cfg) {
  require(!tokens_per_image.empty(), "pool_and_align: empty batch");
  std::vector<ad::Var> pooled;
  pooled.reserve(tokens_per_image.size());
  for (const auto& t : tokens_per_image) pooled.push_back(ad::colwise_mean(t));
  return align(ad::concat_rows(pooled), text, cfg);
}

// Batch mean of -sum_c p log p (natural log, p clamped at 1e-8).
inline ad::Var entropy_loss(const AlignmentLogits& logits) {
  ad::Var logp = ad::log_(ad::clamp_min(logits.p, 1e-8));
  ad::Var per_row = ad::neg(ad::rowwise_sum(ad::mul(logits.p, logp)));  // B x 1
  return ad::mean_all(per_row);
}

// Batch mean of max(0, gamma - |s[1] - s[0]|); zero subgradient at the kink.
inline ad::Var margin_loss(const AlignmentLogits& logits, double gamma) {
  require(gamma >= 0.0, "margin_loss: gamma must be nonnegative");
  ad::Var diff = ad::sub(ad::slice_cols(logits.s, 1, 1), ad::slice_cols(logits.s, 0, 1));
  ad::Var hinge = ad::relu(ad::add_scalar(ad::neg(ad::abs_(diff)), gamma));
  return ad::mean_all(hinge);
}

inline ad::Var consistency_loss(const AlignmentLogits& logits, const SCRConfig& cfg) {
  cfg.validate();
  ad::Var combined = ad::add(ad::mul_scalar(entropy_loss(logits), cfg.w_entropy),
                             ad::mul_scalar(margin_loss(logits, cfg.gamma), cfg.w_margin));
  return ad::mul_scalar(combined, cfg.lambda);
}

}  // namespace fbclip::scr
