#pragma once

// Soft foreground mask: four complementary anomaly indicators per patch token
// (local saliency, center distance, cls inconsistency, cross-layer variation),
// min-max normalized, linearly combined and binarized to {0.5, 1.0}. The mask
// is built from frozen-backbone statistics and carries no gradients.

#include "fbclip/backbone.hpp"
#include "fbclip/linalg.hpp"

namespace fbclip::mask {

using backbone::TokenStack;

struct IndicatorWeights {
  double local = 0.3;
  double center = 0.3;
  double cls = 0.3;
  double temp = 0.1;
};

// Per-patch values in {0.5, 1.0}: 1.0 marks confident foreground, 0.5 marks
// uncertain/background tokens.
struct SoftForegroundMask {
  Vec values;
};

// L2 distance of each token from its kernel-3 moving average along the raster
// token sequence. Ends use replicate padding (two real neighbors plus one
// replicated), so a homogeneous sequence scores exactly zero everywhere.
inline Vec local_saliency(const TokenStack& stack) {
  const auto L = stack.patches.rows();
  require(L >= 1, "local_saliency: empty stack");
  Vec out(L);
  for (Eigen::Index i = 0; i < L; ++i) {
    const Eigen::Index lo = i > 0 ? i - 1 : 0;
    const Eigen::Index hi = i < L - 1 ? i + 1 : L - 1;
    RowVec avg = (stack.patches.row(lo) + stack.patches.row(i) + stack.patches.row(hi)) / 3.0;
    out(i) = (stack.patches.row(i) - avg).norm();
  }
  return out;
}

inline Vec center_distance(const TokenStack& stack, const Vec& center) {
  require(center.allFinite(), "center_distance: center must be finite");
  require(center.size() == stack.patches.cols(), "center_distance: width mismatch");
  Vec out(stack.patches.rows());
  for (Eigen::Index i = 0; i < stack.patches.rows(); ++i)
    out(i) = (stack.patches.row(i).transpose() - center).norm();
  return out;
}

// Default center: empirical mean over the image's own patch tokens.
inline Vec center_distance(const TokenStack& stack) {
  return center_distance(stack, Vec(stack.patches.colwise().mean().transpose()));
}

// 1 - cos(token, cls), in [0, 2]. Zero-norm vectors use the cosine-0
// convention (dissimilarity 1) and are logged.
inline Vec cls_inconsistency(const TokenStack& stack) {
  Vec out(stack.patches.rows());
  bool degenerate = stack.cls.norm() == 0.0;
  for (Eigen::Index i = 0; i < stack.patches.rows(); ++i) {
    const Vec token = stack.patches.row(i).transpose();
    degenerate = degenerate || token.norm() == 0.0;
    out(i) = 1.0 - cosine(token, stack.cls);
  }
  if (degenerate) log_warn("cls_inconsistency: zero-norm vector, cosine treated as 0");
  return out;
}

// Per-token L2 distance between consecutive tapped layers. With no previous
// layer the indicator is zero and build_mask redistributes its weight.
inline Vec temporal_variation(const TokenStack& curr, const TokenStack* prev) {
  if (prev == nullptr) return Vec::Zero(curr.patches.rows());
  require(prev->patches.rows() == curr.patches.rows() &&
              prev->patches.cols() == curr.patches.cols(),
          "temporal_variation: shape mismatch");
  Vec out(curr.patches.rows());
  for (Eigen::Index i = 0; i < curr.patches.rows(); ++i)
    out(i) = (curr.patches.row(i) - prev->patches.row(i)).norm();
  return out;
}

// Per-sample min-max normalization into [0, 1); constant input maps to zero.
inline Vec minmax_normalize(const Vec& v, double eps = kEps) {
  require(v.size() >= 1, "minmax_normalize: empty vector");
  const double lo = v.minCoeff();
  const double hi = v.maxCoeff();
  return (v.array() - lo) / (hi - lo + eps);
}

// Combined anomaly score A = sum_i alpha_i * normalized indicator_i. When the
// previous layer is absent the temporal weight is redistributed
// proportionally over the remaining three indicators.
inline Vec combined_score(const TokenStack& stack, const TokenStack* prev,
                          const IndicatorWeights& w) {
  IndicatorWeights eff = w;
  if (prev == nullptr) {
    const double base = w.local + w.center + w.cls;
    if (base > 0.0) {
      const double scale = (base + w.temp) / base;
      eff.local *= scale;
      eff.center *= scale;
      eff.cls *= scale;
    }
    eff.temp = 0.0;
  }
  Vec a = eff.local * minmax_normalize(local_saliency(stack)) +
          eff.center * minmax_normalize(center_distance(stack)) +
          eff.cls * minmax_normalize(cls_inconsistency(stack));
  if (prev != nullptr) a += eff.temp * minmax_normalize(temporal_variation(stack, prev));
  return a;
}

inline SoftForegroundMask build_mask(const TokenStack& stack, const TokenStack* prev,
                                     const IndicatorWeights& w, double threshold = 0.5) {
  const Vec a = combined_score(stack, prev, w);
  SoftForegroundMask m;
  m.values = a.unaryExpr([threshold](double s) { return s > threshold ? 1.0 : 0.5; });
  return m;
}

}  // namespace fbclip::mask
