#pragma once

// Background suppression: a bank of candidate background tokens gathered from
// every enhanced group, pooled into one prototype (half mean + half max), and
// a similarity-weighted subtraction applied to each group's patch rows. The
// per-token reconstruction error is surfaced as a diagnostic only.

#include "fbclip/autodiff.hpp"
#include "fbclip/mvfbe.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

namespace fbclip::bs {

using mvfbe::EnhancedFeatureGroup;

enum class CandidateFraction { Half, Full };

inline CandidateFraction parse_fraction(const std::string& s) {
  if (s == "half") return CandidateFraction::Half;
  if (s == "full") return CandidateFraction::Full;
  throw std::invalid_argument("bs.candidate_fraction must be 'half' or 'full': " + s);
}

// Concatenated candidate tokens from all groups, in (group, token) order.
struct BackgroundBank {
  ad::Var tokens;  // M x C
  Eigen::Index count() const { return tokens.rows(); }
};

struct BackgroundPrototype {
  ad::Var vec;  // 1 x C
};

// Takes the first L/2 (or L) patch tokens of each group in raster order.
// When `mask_per_group` is given (bs.sort_by_mask), rows are instead drawn in
// ascending foreground-probability order, most background-like first.
inline BackgroundBank collect_candidates(const std::vector<EnhancedFeatureGroup>& groups,
                                         CandidateFraction fraction,
                                         const std::vector<Vec>* mask_per_group = nullptr) {
  require(!groups.empty(), "collect_candidates: empty group list");
  if (mask_per_group != nullptr)
    require(mask_per_group->size() == groups.size(),
            "collect_candidates: one mask per group expected");
  std::vector<ad::Var> parts;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto L = groups[g].patch_count();
    const auto take = fraction == CandidateFraction::Half ? L / 2 : L;
    require(take >= 1, "collect_candidates: group too small for the requested fraction");
    ad::Var patches = groups[g].patch_rows();
    if (mask_per_group == nullptr) {
      parts.push_back(ad::slice_rows(patches, 0, take));
    } else {
      const Vec& m = (*mask_per_group)[g];
      require(m.size() == L, "collect_candidates: mask length mismatch");
      std::vector<Eigen::Index> order(static_cast<std::size_t>(L));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](Eigen::Index a, Eigen::Index b) { return m(a) < m(b); });
      for (Eigen::Index i = 0; i < take; ++i)
        parts.push_back(ad::slice_rows(patches, order[static_cast<std::size_t>(i)], 1));
    }
  }
  BackgroundBank bank;
  bank.tokens = parts.size() == 1 ? parts.front() : ad::concat_rows(parts);
  return bank;
}

// Elementwise half mean plus half max over the bank rows.
inline BackgroundPrototype prototype(const BackgroundBank& bank) {
  require(bank.count() >= 1, "prototype: empty bank");
  BackgroundPrototype p;
  p.vec = ad::add(ad::mul_scalar(ad::colwise_mean(bank.tokens), 0.5),
                  ad::mul_scalar(ad::colwise_max(bank.tokens), 0.5));
  return p;
}

struct SuppressResult {
  EnhancedFeatureGroup group;
  ad::Var reconstruction_error;  // L x 1 diagnostic, feeds nothing downstream
};

// The suppression chain per patch token: s_bg = cos(f, proto); a = f - proto;
// a_enh = a (1 - s_bg); F = alpha f + (1 - alpha) a_enh. The cls row bypasses
// suppression and is reattached unchanged.
inline SuppressResult suppress(const EnhancedFeatureGroup& group,
                               const BackgroundPrototype& proto, double alpha = 0.5) {
  require(proto.vec.cols() == group.tokens.cols(), "suppress: width mismatch");
  if (proto.vec.value().norm() == 0.0)
    log_warn("suppress: zero-norm prototype, cosine treated as 0");
  ad::Var patches = group.patch_rows();
  ad::Var s_bg = ad::cosine_rows_vs_vec(patches, proto.vec);        // L x 1
  ad::Var a = ad::add_row_broadcast(patches, ad::neg(proto.vec));   // f - proto
  ad::Var a_enh = ad::scale_rows(a, ad::add_scalar(ad::neg(s_bg), 1.0));
  ad::Var f_final = ad::add(ad::mul_scalar(patches, alpha), ad::mul_scalar(a_enh, 1.0 - alpha));
  SuppressResult out;
  out.group.tokens = ad::concat_rows({group.cls_row(), f_final});
  out.group.view = group.view;
  out.group.source_layer = group.source_layer;
  out.reconstruction_error = ad::rowwise_norm(a);
  return out;
}

inline std::vector<SuppressResult> suppress_all(const std::vector<EnhancedFeatureGroup>& groups,
                                                const BackgroundPrototype& proto,
                                                double alpha = 0.5) {
  std::vector<SuppressResult> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(suppress(g, proto, alpha));
  return out;
}

}  // namespace fbclip::bs
