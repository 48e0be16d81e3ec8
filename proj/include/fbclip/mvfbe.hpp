#pragma once

// Multi-view foreground-background enhancement. Each tapped token stack is
// expanded into Identity / Semantic / Spatial views (pure functions of the
// frozen tokens and the detached soft mask) and every resulting group is
// refined by gated dual-stream multi-head self-attention with LayerNorm.

#include "fbclip/autodiff.hpp"
#include "fbclip/backbone.hpp"
#include "fbclip/fg_mask.hpp"
#include "fbclip/params.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace fbclip::mvfbe {

using backbone::TokenStack;
using mask::SoftForegroundMask;

enum class View { ID, SEM, SPA };

inline const char* view_name(View v) {
  switch (v) {
    case View::ID: return "id";
    case View::SEM: return "sem";
    case View::SPA: return "spa";
  }
  return "?";
}

inline std::vector<View> parse_views(const std::string& spec) {
  std::vector<View> out;
  std::string tok;
  auto flush = [&] {
    if (tok.empty()) return;
    if (tok == "id") out.push_back(View::ID);
    else if (tok == "sem") out.push_back(View::SEM);
    else if (tok == "spa") out.push_back(View::SPA);
    else throw std::invalid_argument("mvfbe.views: unknown view: " + tok);
    tok.clear();
  };
  for (char c : spec) {
    if (c == ',' || c == ' ') flush();
    else tok += c;
  }
  flush();
  require(!out.empty(), "mvfbe.views: empty view list");
  return out;
}

// One of the 3N view-enhanced token stacks; cls is preserved at row 0.
struct EnhancedFeatureGroup {
  ad::Var tokens;  // (L+1) x C
  View view = View::ID;
  int source_layer = 0;

  Eigen::Index patch_count() const { return tokens.rows() - 1; }
  ad::Var cls_row() const { return ad::slice_rows(tokens, 0, 1); }
  ad::Var patch_rows() const { return ad::slice_rows(tokens, 1, patch_count()); }
};

namespace detail {

inline Mat with_cls(const Vec& cls, const Mat& patches) {
  Mat out(patches.rows() + 1, patches.cols());
  out.row(0) = cls.transpose();
  out.bottomRows(patches.rows()) = patches;
  return out;
}

inline Vec row_softmax(const Vec& scores) {
  const double m = scores.maxCoeff();
  Eigen::ArrayXd e = (scores.array() - m).exp();
  return (e / e.sum()).matrix();
}

}  // namespace detail

// Identity view: the group is a bit-identical copy of the stack.
inline EnhancedFeatureGroup view_identity(const TokenStack& stack) {
  EnhancedFeatureGroup g;
  g.tokens = ad::constant(detail::with_cls(stack.cls, stack.patches));
  g.view = View::ID;
  g.source_layer = stack.layer_index;
  return g;
}

// Semantic view. Interaction weights come from the mask outer products,
// information richness and stability from the cosine to the class token.
// The softmax over the scaled interaction matrix is row-wise, with the
// richness/stability term broadcast along keys, so each token aggregates
// preferentially from informative (foreground) or stable (background) tokens.
inline Mat sem_enhance(const Mat& patches, const Vec& cls, const Vec& p, double alpha) {
  const auto L = patches.rows();
  require(p.size() == L, "view_semantic: mask/token length mismatch");
  Vec cos_cls(L);
  for (Eigen::Index i = 0; i < L; ++i)
    cos_cls(i) = cosine(patches.row(i).transpose(), cls);
  const Vec richness = Vec::Ones(L) - cos_cls;
  const Vec stability = cos_cls;
  const Vec q = Vec::Ones(L) - p;

  Mat a_fg(L, L), a_bg(L, L);
  for (Eigen::Index i = 0; i < L; ++i) {
    Vec row_fg(L), row_bg(L);
    for (Eigen::Index j = 0; j < L; ++j) {
      row_fg(j) = richness(j) * (p(i) * p(j));
      row_bg(j) = stability(j) * (q(i) * q(j));
    }
    a_fg.row(i) = detail::row_softmax(row_fg).transpose();
    a_bg.row(i) = detail::row_softmax(row_bg).transpose();
  }
  const Mat fg_agg = a_fg * patches;
  const Mat bg_agg = a_bg * patches;
  Mat combined = p.asDiagonal() * fg_agg + q.asDiagonal() * bg_agg;
  return alpha * combined + (1.0 - alpha) * patches;
}

inline EnhancedFeatureGroup view_semantic(const TokenStack& stack,
                                          const SoftForegroundMask& mask,
                                          double alpha = 0.6) {
  EnhancedFeatureGroup g;
  g.tokens = ad::constant(
      detail::with_cls(stack.cls, sem_enhance(stack.patches, stack.cls, mask.values, alpha)));
  g.view = View::SEM;
  g.source_layer = stack.layer_index;
  return g;
}

// Spatial view. Tokens are laid out on the H x W grid and unfolded into
// kernel x kernel neighborhoods with zero padding. The unfolded mask is 0 at
// padded slots for both streams, numerators aggregate mask-weighted patches
// under a softmax over the neighborhood, and each stream divides by its
// real-token mask sum (eps-guarded).
inline Mat spa_enhance(const Mat& patches, const Vec& cls, const Vec& p, int kernel = 5) {
  const auto L = patches.rows();
  const auto C = patches.cols();
  require(p.size() == L, "view_spatial: mask/token length mismatch");
  require(kernel >= 1 && kernel % 2 == 1, "view_spatial: kernel must be odd");
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(L))));
  require(static_cast<Eigen::Index>(side) * side == L, "view_spatial: L must be a perfect square");
  const int pad = kernel / 2;
  const int slots = kernel * kernel;

  Mat out(L, C);
  Mat fg_slot(slots, C), bg_slot(slots, C);
  Vec w_fg(slots), w_bg(slots);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      double fg_mass = 0.0, bg_mass = 0.0;
      for (int k = 0; k < slots; ++k) {
        const int ny = y + k / kernel - pad;
        const int nx = x + k % kernel - pad;
        if (ny < 0 || ny >= side || nx < 0 || nx >= side) {
          fg_slot.row(k).setZero();
          bg_slot.row(k).setZero();
          continue;
        }
        const Eigen::Index t = ny * side + nx;
        fg_slot.row(k) = p(t) * patches.row(t);
        bg_slot.row(k) = (1.0 - p(t)) * patches.row(t);
        fg_mass += p(t);
        bg_mass += 1.0 - p(t);
      }
      const RowVec mu_fg = fg_slot.colwise().mean();
      for (int k = 0; k < slots; ++k) {
        const Vec f = fg_slot.row(k).transpose();
        const Vec b = bg_slot.row(k).transpose();
        w_fg(k) = (1.0 - cosine(f, cls)) * (fg_slot.row(k) - mu_fg).norm();
        w_bg(k) = cosine(b, cls) * b.norm();
      }
      const Vec sm_fg = detail::row_softmax(w_fg);
      const Vec sm_bg = detail::row_softmax(w_bg);
      RowVec fg_agg = RowVec::Zero(C), bg_agg = RowVec::Zero(C);
      for (int k = 0; k < slots; ++k) {
        fg_agg += sm_fg(k) * fg_slot.row(k);
        bg_agg += sm_bg(k) * bg_slot.row(k);
      }
      out.row(y * side + x) =
          fg_agg / (fg_mass + kEps) + bg_agg / (bg_mass + kEps);
    }
  }
  return out;
}

inline EnhancedFeatureGroup view_spatial(const TokenStack& stack,
                                         const SoftForegroundMask& mask, int kernel = 5) {
  EnhancedFeatureGroup g;
  g.tokens = ad::constant(
      detail::with_cls(stack.cls, spa_enhance(stack.patches, stack.cls, mask.values, kernel)));
  g.view = View::SPA;
  g.source_layer = stack.layer_index;
  return g;
}

// Learnable gate mapping each token to a scalar in (0,1).
struct FBGate {
  ad::Var w;  // C x 1
  ad::Var b;  // 1 x 1

  ad::Var values(const ad::Var& tokens) const {
    return ad::sigmoid(ad::add_scalar_var(ad::matmul(tokens, w), b));
  }
};

// Standard multi-head self-attention written out head by head.
struct Mhsa {
  int heads = 1;
  ad::Var wq, bq, wk, bk, wv, bv, wo, bo;

  // When attn_out is non-null the per-head row-stochastic attention matrices
  // are appended (used by tests and diagnostics).
  ad::Var forward(const ad::Var& x, std::vector<ad::Var>* attn_out = nullptr) const {
    const auto C = x.cols();
    require(C % heads == 0, "mhsa: width not divisible by head count");
    const auto dh = C / heads;
    ad::Var q = ad::add_row_broadcast(ad::matmul(x, wq), bq);
    ad::Var k = ad::add_row_broadcast(ad::matmul(x, wk), bk);
    ad::Var v = ad::add_row_broadcast(ad::matmul(x, wv), bv);
    std::vector<ad::Var> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(heads));
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
      ad::Var qh = ad::slice_cols(q, h * dh, dh);
      ad::Var kh = ad::slice_cols(k, h * dh, dh);
      ad::Var vh = ad::slice_cols(v, h * dh, dh);
      ad::Var attn = ad::softmax_rows(ad::mul_scalar(ad::matmul(qh, ad::transpose(kh)), inv_sqrt));
      if (attn_out != nullptr) attn_out->push_back(attn);
      head_outputs.push_back(ad::matmul(attn, vh));
    }
    ad::Var merged = heads == 1 ? head_outputs.front() : ad::concat_cols(head_outputs);
    return ad::add_row_broadcast(ad::matmul(merged, wo), bo);
  }
};

// Gate + the two attention streams + the shared LayerNorm: the trainable
// refinement applied to every enhanced group.
struct FbAttention {
  FBGate gate;
  Mhsa fg_stream;
  Mhsa bg_stream;
  ad::Var ln_gamma, ln_beta;
};

inline Mhsa make_mhsa(ParamStore& store, const std::string& prefix, int width, int heads,
                      std::mt19937_64& rng) {
  require(width % heads == 0, "mhsa: width not divisible by head count");
  const double s = 1.0 / std::sqrt(static_cast<double>(width));
  Mhsa m;
  m.heads = heads;
  m.wq = store.add(prefix + ".wq", gaussian_matrix(width, width, rng, s));
  m.bq = store.add(prefix + ".bq", Mat::Zero(1, width));
  m.wk = store.add(prefix + ".wk", gaussian_matrix(width, width, rng, s));
  m.bk = store.add(prefix + ".bk", Mat::Zero(1, width));
  m.wv = store.add(prefix + ".wv", gaussian_matrix(width, width, rng, s));
  m.bv = store.add(prefix + ".bv", Mat::Zero(1, width));
  m.wo = store.add(prefix + ".wo", gaussian_matrix(width, width, rng, s));
  m.bo = store.add(prefix + ".bo", Mat::Zero(1, width));
  return m;
}

inline FbAttention make_fb_attention(ParamStore& store, int width, int heads,
                                     std::mt19937_64& rng) {
  FbAttention fb;
  fb.gate.w = store.add("attn.gate.w", Mat::Zero(width, 1));  // starts balanced at 0.5
  fb.gate.b = store.add("attn.gate.b", Mat::Zero(1, 1));
  fb.fg_stream = make_mhsa(store, "attn.fg", width, heads, rng);
  fb.bg_stream = make_mhsa(store, "attn.bg", width, heads, rng);
  fb.ln_gamma = store.add("attn.ln.gamma", Mat::Ones(1, width));
  fb.ln_beta = store.add("attn.ln.beta", Mat::Zero(1, width));
  return fb;
}

inline EnhancedFeatureGroup fb_attention(const EnhancedFeatureGroup& group,
                                         const FbAttention& fb,
                                         std::vector<ad::Var>* attn_out = nullptr) {
  ad::Var g = fb.gate.values(group.tokens);
  ad::Var x_fg = ad::scale_rows(group.tokens, g);
  ad::Var x_bg = ad::scale_rows(group.tokens, ad::add_scalar(ad::neg(g), 1.0));
  ad::Var summed = ad::add(fb.fg_stream.forward(x_fg, attn_out),
                           fb.bg_stream.forward(x_bg, attn_out));
  EnhancedFeatureGroup out;
  out.tokens = ad::layer_norm_rows(summed, fb.ln_gamma, fb.ln_beta);
  out.view = group.view;
  out.source_layer = group.source_layer;
  return out;
}

// Applies the enabled views to every tapped layer and refines each group with
// FB-attention. Output order is layer-major with views in (ID, SEM, SPA)
// order, giving |views| * N groups.
inline std::vector<EnhancedFeatureGroup> enhance_all(
    const std::vector<TokenStack>& stacks, const std::vector<SoftForegroundMask>& masks,
    const std::vector<View>& views, const FbAttention& fb, double sem_alpha = 0.6,
    int spa_kernel = 5) {
  require(stacks.size() == masks.size(), "enhance_all: one mask per tapped layer expected");
  std::vector<EnhancedFeatureGroup> out;
  out.reserve(stacks.size() * views.size());
  for (std::size_t l = 0; l < stacks.size(); ++l) {
    for (View v : views) {
      EnhancedFeatureGroup g;
      switch (v) {
        case View::ID: g = view_identity(stacks[l]); break;
        case View::SEM: g = view_semantic(stacks[l], masks[l], sem_alpha); break;
        case View::SPA: g = view_spatial(stacks[l], masks[l], spa_kernel); break;
      }
      out.push_back(fb_attention(g, fb));
    }
  }
  return out;
}

}  // namespace fbclip::mvfbe
