#pragma once

// The assembled model: frozen encoders, trainable parameters, and the
// per-image forward pass from pixels to anomaly map. One master seed fans out
// to the backbone and every parameter initialization.

#include "fbclip/backbone.hpp"
#include "fbclip/bg_suppress.hpp"
#include "fbclip/config.hpp"
#include "fbclip/dataset.hpp"
#include "fbclip/fg_mask.hpp"
#include "fbclip/mvfbe.hpp"
#include "fbclip/params.hpp"
#include "fbclip/scoring.hpp"
#include "fbclip/scr.hpp"
#include "fbclip/text_prompts.hpp"

#include <memory>
#include <string>
#include <vector>

namespace fbclip::pipeline {

using backbone::EncoderConfig;
using backbone::TokenStack;
using mask::SoftForegroundMask;
using mvfbe::EnhancedFeatureGroup;
using mvfbe::View;
using text::TextFeatureSet;

// Everything one image's forward pass produces. Tape-backed members carry
// gradients into the trainable parameters; `anomaly` holds plain values.
struct ForwardResult {
  std::vector<ad::Var> group_probs;  // per group: L x 1 abnormal probabilities
  ad::Var grid_probs;                // mean over groups, L x 1
  ad::Var global_abnormal;           // 1 x 1, cls-path probability
  ad::Var scr_tokens;                // L x D projected tokens feeding SCR
  score::AnomalyMap anomaly;         // fused image-resolution map + image score
};

class Model {
 public:
  explicit Model(const RunConfig& cfg)
      : cfg_(cfg),
        enc_cfg_(EncoderConfig::from_run_config(cfg)),
        vision_(backbone::make_vision_encoder(cfg)),
        text_encoder_(cfg.backbone.text_width,
                      cfg.text.context_length + 8,  // suffix + EOT headroom
                      mix_seed(cfg.seed, 0x7E)),
        views_(mvfbe::parse_views(cfg.mvfbe.views)) {
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x9A12A));
    prompts_ = text::make_prompt_pair(store_, text_encoder_, cfg.text.context_length, rng);
    selector_ = text::make_selector(store_, cfg.backbone.text_width,
                                    cfg.text.selector_hidden, rng);
    fb_ = mvfbe::make_fb_attention(store_, cfg.backbone.channel_width, cfg.mvfbe.heads, rng);
    const int C = cfg.backbone.channel_width;
    const int D = cfg.backbone.text_width;
    visual_proj_ = store_.add(
        "proj.visual", gaussian_matrix(C, D, rng, 1.0 / std::sqrt(static_cast<double>(C))));
    // frozen projections: text W_proj and the cls-path visual projection
    std::mt19937_64 frozen(mix_seed(cfg.seed, 0xF8));
    text_proj_ = gaussian_matrix(D, D, frozen, 1.0 / std::sqrt(static_cast<double>(D)));
    cls_proj_ = gaussian_matrix(C, D, frozen, 1.0 / std::sqrt(static_cast<double>(C)));

    mask_weights_.local = cfg.mask.alpha_local;
    mask_weights_.center = cfg.mask.alpha_center;
    mask_weights_.cls = cfg.mask.alpha_cls;
    mask_weights_.temp = cfg.mask.alpha_temp;
  }

  const RunConfig& config() const { return cfg_; }
  const EncoderConfig& encoder_config() const { return enc_cfg_; }
  ParamStore& params() { return store_; }
  const backbone::VisionEncoder& vision() const { return *vision_; }
  const backbone::SyntheticTextEncoder& text_encoder() const { return text_encoder_; }
  const text::PromptPair& prompts() const { return prompts_; }
  ad::Var visual_projection() const { return visual_proj_; }

  // Rebuilt from the current prompt/selector parameters; frozen inside one
  // optimizer step and across a full evaluation.
  TextFeatureSet text_features() const {
    text::FusionWeights w;
    w.lambda_global = cfg_.text.lambda_global;
    w.lambda_attn = cfg_.text.lambda_attn;
    w.lambda_eot = cfg_.text.lambda_eot;
    return text::build_text_features(prompts_, text_encoder_, selector_,
                                     ad::constant(text_proj_), w);
  }

  std::vector<SoftForegroundMask> build_masks(const std::vector<TokenStack>& stacks) const {
    std::vector<SoftForegroundMask> masks;
    masks.reserve(stacks.size());
    for (std::size_t i = 0; i < stacks.size(); ++i)
      masks.push_back(mask::build_mask(stacks[i], i > 0 ? &stacks[i - 1] : nullptr,
                                       mask_weights_, cfg_.mask.threshold));
    return masks;
  }

  ForwardResult forward(const Mat& image, const TextFeatureSet& text) const {
    const auto stacks = vision_->encode_image(image);
    const auto masks = build_masks(stacks);
    auto groups = mvfbe::enhance_all(stacks, masks, views_, fb_, cfg_.mvfbe.sem_alpha,
                                     cfg_.mvfbe.spa_kernel);

    // background prototype over all groups, then per-group suppression
    const auto fraction = bs::parse_fraction(cfg_.bs.candidate_fraction);
    bs::BackgroundBank bank;
    if (cfg_.bs.sort_by_mask) {
      std::vector<Vec> mask_per_group;
      mask_per_group.reserve(groups.size());
      for (std::size_t l = 0; l < stacks.size(); ++l)
        for (std::size_t v = 0; v < views_.size(); ++v)
          mask_per_group.push_back(masks[l].values);
      bank = bs::collect_candidates(groups, fraction, &mask_per_group);
    } else {
      bank = bs::collect_candidates(groups, fraction);
    }
    const auto proto = bs::prototype(bank);
    auto suppressed = bs::suppress_all(groups, proto, cfg_.bs.alpha);

    ForwardResult res;
    std::vector<Mat> grid_maps;
    grid_maps.reserve(suppressed.size());
    ad::Var sum_probs;
    for (const auto& sr : suppressed) {
      ad::Var probs =
          score::patch_abnormal_probs(sr.group, text, visual_proj_, cfg_.scr.tau);
      sum_probs = res.group_probs.empty() ? probs : ad::add(sum_probs, probs);
      res.group_probs.push_back(probs);
      grid_maps.push_back(reshape_grid(probs.value().col(0)));
    }
    res.grid_probs = ad::mul_scalar(sum_probs, 1.0 / static_cast<double>(suppressed.size()));

    const auto& source = scr_source_group(suppressed);
    res.scr_tokens = ad::matmul(source.group.patch_rows(), visual_proj_);
    res.global_abnormal =
        score::cls_abnormal_prob(source.group.cls_row(), cls_proj_, text, cfg_.scr.tau);

    res.anomaly = score::fuse_maps(grid_maps, enc_cfg_.image_resolution,
                                   res.global_abnormal.scalar(), cfg_.score.sigma,
                                   cfg_.score.image_blend);
    return res;
  }

 private:
  Mat reshape_grid(const Vec& probs) const {
    const int side = enc_cfg_.patch_grid_side;
    Mat m(side, side);
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) m(y, x) = probs(y * side + x);
    return m;
  }

  // Deepest tapped layer, configured view (ID unless overridden).
  const bs::SuppressResult& scr_source_group(
      const std::vector<bs::SuppressResult>& suppressed) const {
    View want = View::ID;
    if (cfg_.scr.source_group == "sem") want = View::SEM;
    else if (cfg_.scr.source_group == "spa") want = View::SPA;
    else require(cfg_.scr.source_group == "id", "scr.source_group must be id|sem|spa");
    const bs::SuppressResult* best = nullptr;
    for (const auto& sr : suppressed)
      if (sr.group.view == want &&
          (best == nullptr || sr.group.source_layer > best->group.source_layer))
        best = &sr;
    require(best != nullptr, "scr.source_group view is not enabled in mvfbe.views");
    return *best;
  }

  RunConfig cfg_;
  EncoderConfig enc_cfg_;
  std::unique_ptr<backbone::VisionEncoder> vision_;
  backbone::SyntheticTextEncoder text_encoder_;
  std::vector<View> views_;
  ParamStore store_;
  text::PromptPair prompts_;
  text::TokenSelector selector_;
  mvfbe::FbAttention fb_;
  ad::Var visual_proj_;  // trainable C -> D for patch tokens
  Mat text_proj_;        // frozen W_proj
  Mat cls_proj_;         // frozen cls-path projection
  mask::IndicatorWeights mask_weights_;
};

}  // namespace fbclip::pipeline
