#pragma once

// Object-agnostic learnable prompts and Multi-Strategy Text Feature Fusion:
// the EOT row, the mean-pooled row and a selector-weighted row of the encoded
// prompt are projected into the shared space and combined with fixed fusion
// weights. The prompt contexts and the selector are the only trainable
// text-side parameters.

#include "fbclip/autodiff.hpp"
#include "fbclip/backbone.hpp"
#include "fbclip/params.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace fbclip::text {

using backbone::SyntheticTextEncoder;
using backbone::TextTokenSequence;

struct FusionWeights {
  double lambda_global = 1.0;
  double lambda_attn = 0.5;
  double lambda_eot = 0.5;
};

// The two fused prompt embeddings in the shared D-dimensional space.
struct TextFeatureSet {
  ad::Var normal;    // 1 x D
  ad::Var abnormal;  // 1 x D
};

// Two-layer token selector: width -> hidden -> 1 with a ReLU in between.
struct TokenSelector {
  ad::Var w1, b1, w2, b2;

  ad::Var logits(const ad::Var& tokens) const {
    ad::Var h = ad::relu(ad::add_row_broadcast(ad::matmul(tokens, w1), b1));
    return ad::add_row_broadcast(ad::matmul(h, w2), b2);  // L x 1
  }
};

inline TokenSelector make_selector(ParamStore& store, int width, int hidden,
                                   std::mt19937_64& rng) {
  if (hidden <= 0) hidden = std::max(width / 4, 1);
  const double s1 = std::sqrt(2.0 / static_cast<double>(width));
  const double s2 = std::sqrt(2.0 / static_cast<double>(hidden));
  TokenSelector sel;
  sel.w1 = store.add("text.selector.w1", gaussian_matrix(width, hidden, rng, s1));
  sel.b1 = store.add("text.selector.b1", Mat::Zero(1, hidden));
  sel.w2 = store.add("text.selector.w2", gaussian_matrix(hidden, 1, rng, s2));
  sel.b2 = store.add("text.selector.b2", Mat::Zero(1, 1));
  return sel;
}

// Learnable normal/abnormal contexts plus the fixed suffix and EOT rows.
struct PromptPair {
  ad::Var normal_context;    // E x D, trainable
  ad::Var abnormal_context;  // E x D, trainable
  Mat suffix_normal;         // "object"
  Mat suffix_abnormal;       // "damaged object"
  Mat eot_embedding;         // end-of-text marker row
  int context_length = 0;

  std::vector<int> ids_normal() const {
    return make_ids(static_cast<int>(suffix_normal.rows()));
  }
  std::vector<int> ids_abnormal() const {
    return make_ids(static_cast<int>(suffix_abnormal.rows()));
  }

 private:
  std::vector<int> make_ids(int suffix_len) const {
    std::vector<int> ids;
    for (int i = 0; i < context_length; ++i) ids.push_back(300 + i);
    for (int i = 0; i < suffix_len; ++i) ids.push_back(1000 + i);
    ids.push_back(backbone::kEotTokenId);
    return ids;
  }
};

inline PromptPair make_prompt_pair(ParamStore& store, const SyntheticTextEncoder& enc,
                                   int context_length, std::mt19937_64& rng) {
  require(context_length > 0, "prompt context length must be positive");
  const int d = enc.width();
  PromptPair pair;
  pair.context_length = context_length;
  pair.normal_context =
      store.add("prompt.normal_ctx", gaussian_matrix(context_length, d, rng, 0.05));
  pair.abnormal_context =
      store.add("prompt.abnormal_ctx", gaussian_matrix(context_length, d, rng, 0.05));
  pair.suffix_normal = enc.token_embedding(1000).transpose();
  pair.suffix_abnormal = Mat(2, d);
  pair.suffix_abnormal.row(0) = enc.token_embedding(1001).transpose();  // "damaged"
  pair.suffix_abnormal.row(1) = enc.token_embedding(1000).transpose();  // "object"
  pair.eot_embedding = enc.token_embedding(backbone::kEotTokenId).transpose();
  return pair;
}

// Projected row at the end-of-text position (argmax of the token ids).
inline ad::Var eot_feature(const TextTokenSequence& seq, const ad::Var& proj) {
  require(!seq.token_ids.empty(), "eot_feature: empty sequence");
  const auto arg = std::max_element(seq.token_ids.begin(), seq.token_ids.end()) -
                   seq.token_ids.begin();
  return ad::matmul(ad::slice_rows(seq.tokens, static_cast<Eigen::Index>(arg), 1), proj);
}

// Mean pooling over the full sequence, then projection.
inline ad::Var global_feature(const TextTokenSequence& seq, const ad::Var& proj) {
  require(seq.tokens.rows() > 0, "global_feature: empty sequence");
  return ad::matmul(ad::colwise_mean(seq.tokens), proj);
}

// Softmax-weighted pooling given per-token logits (L x 1); encoder width.
inline ad::Var attention_pool(const ad::Var& tokens, const ad::Var& logits) {
  require(logits.rows() == tokens.rows() && logits.cols() == 1,
          "attention_pool: one logit per token expected");
  ad::Var weights = ad::softmax_rows(ad::transpose(logits));  // 1 x L
  return ad::matmul(weights, tokens);                         // 1 x D
}

inline ad::Var attention_feature(const TextTokenSequence& seq, const TokenSelector& sel) {
  return attention_pool(seq.tokens, sel.logits(seq.tokens));
}

inline ad::Var fuse(const ad::Var& eot, const ad::Var& global_, const ad::Var& attn_proj,
                    const FusionWeights& w) {
  return ad::add(ad::add(ad::mul_scalar(global_, w.lambda_global),
                         ad::mul_scalar(attn_proj, w.lambda_attn)),
                 ad::mul_scalar(eot, w.lambda_eot));
}

// Runs one prompt through the encoder and the three poolings. The attention
// feature is computed in encoder width and projected by the same matrix as
// the EOT path before fusion.
inline ad::Var fused_prompt_feature(const ad::Var& context, const Mat& suffix,
                                    const Mat& eot_row, const std::vector<int>& ids,
                                    const SyntheticTextEncoder& enc,
                                    const TokenSelector& sel, const ad::Var& proj,
                                    const FusionWeights& w) {
  ad::Var embeddings =
      ad::concat_rows({context, ad::constant(suffix), ad::constant(eot_row)});
  TextTokenSequence seq = enc.encode_text(embeddings, ids);
  ad::Var attn_proj = ad::matmul(attention_feature(seq, sel), proj);
  return fuse(eot_feature(seq, proj), global_feature(seq, proj), attn_proj, w);
}

inline TextFeatureSet build_text_features(const PromptPair& pair,
                                          const SyntheticTextEncoder& enc,
                                          const TokenSelector& sel, const ad::Var& proj,
                                          const FusionWeights& w) {
  TextFeatureSet out;
  out.normal = fused_prompt_feature(pair.normal_context, pair.suffix_normal,
                                    pair.eot_embedding, pair.ids_normal(), enc, sel, proj, w);
  out.abnormal =
      fused_prompt_feature(pair.abnormal_context, pair.suffix_abnormal, pair.eot_embedding,
                           pair.ids_abnormal(), enc, sel, proj, w);
  return out;
}

}  // namespace fbclip::text
