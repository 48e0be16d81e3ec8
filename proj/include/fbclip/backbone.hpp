#pragma once

// Frozen-encoder abstraction. The synthetic implementation is a pure function
// of (seed, input): weights are drawn once at construction from a seeded
// generator and never mutated, so every downstream module is testable without
// pretrained weights. A real-CLIP adapter can be slotted in behind the same
// interface; this build ships the synthetic one and reports missing weights
// through the documented error path.

#include "fbclip/autodiff.hpp"
#include "fbclip/config.hpp"
#include "fbclip/linalg.hpp"

#include <cstdlib>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace fbclip::backbone {

struct BackboneError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EncoderConfig {
  int patch_grid_side = 6;  // H = W; L = side^2
  int channel_width = 16;   // C
  int text_width = 16;      // D, shared embedding width
  std::vector<int> tap_layers = {2, 4, 6, 8};
  int image_resolution = 48;
  int depth = 8;

  int num_patches() const { return patch_grid_side * patch_grid_side; }

  void validate() const {
    require(patch_grid_side > 0, "EncoderConfig: patch_grid_side must be positive");
    require(channel_width > 0, "EncoderConfig: channel_width must be positive");
    require(text_width > 0, "EncoderConfig: text_width must be positive");
    require(image_resolution > 0, "EncoderConfig: image_resolution must be positive");
    require(image_resolution % patch_grid_side == 0,
            "EncoderConfig: image_resolution must be divisible by patch_grid_side");
    require(!tap_layers.empty(), "EncoderConfig: tap_layers must be nonempty");
    for (std::size_t i = 0; i < tap_layers.size(); ++i) {
      require(tap_layers[i] >= 1 && tap_layers[i] <= depth,
              "EncoderConfig: tap layer outside encoder depth");
      if (i > 0)
        require(tap_layers[i] > tap_layers[i - 1],
                "EncoderConfig: tap_layers must be strictly increasing");
    }
  }

  static EncoderConfig from_run_config(const RunConfig& rc) {
    EncoderConfig c;
    c.patch_grid_side = rc.backbone.patch_grid_side;
    c.channel_width = rc.backbone.channel_width;
    c.text_width = rc.backbone.text_width;
    c.tap_layers = rc.backbone.tap_layers;
    c.image_resolution = rc.backbone.image_resolution;
    c.depth = rc.backbone.depth;
    c.validate();
    return c;
  }
};

// One tapped layer's output for one image: a class token plus L patch tokens
// in raster order.
struct TokenStack {
  Vec cls;      // C
  Mat patches;  // L x C
  int layer_index = 0;
};

// Full encoded prompt: every token row (not only EOT) plus the ids that
// locate the end-of-text marker. `tokens` stays on the autodiff tape so the
// prompt contexts remain trainable through the frozen encoder.
struct TextTokenSequence {
  ad::Var tokens;  // L_text x D
  std::vector<int> token_ids;
  int length = 0;
};

inline constexpr int kEotTokenId = 49407;  // CLIP vocabulary convention

class VisionEncoder {
 public:
  virtual ~VisionEncoder() = default;
  virtual std::vector<TokenStack> encode_image(const Mat& image) const = 0;
  virtual const EncoderConfig& config() const = 0;
  virtual std::uint64_t weights_checksum() const = 0;
};

namespace detail {

// Per-patch descriptor: mean, stddev, min, max and the two mean absolute
// gradients. Six numbers summarize intensity and texture of the patch.
inline RowVec patch_stats(const Eigen::Ref<const Mat>& patch) {
  RowVec s(6);
  const double mean = patch.mean();
  s(0) = mean;
  s(1) = std::sqrt((patch.array() - mean).square().mean());
  s(2) = patch.minCoeff();
  s(3) = patch.maxCoeff();
  double gx = 0.0, gy = 0.0;
  if (patch.cols() > 1)
    gx = (patch.rightCols(patch.cols() - 1) - patch.leftCols(patch.cols() - 1))
             .cwiseAbs()
             .mean();
  if (patch.rows() > 1)
    gy = (patch.bottomRows(patch.rows() - 1) - patch.topRows(patch.rows() - 1))
             .cwiseAbs()
             .mean();
  s(4) = gx;
  s(5) = gy;
  return s;
}

}  // namespace detail

class SyntheticVisionEncoder final : public VisionEncoder {
 public:
  SyntheticVisionEncoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(mix_seed(seed, 0xB1));
    const int C = cfg_.channel_width;
    embed_ = gaussian_matrix(6, C, rng, 1.2);
    embed_bias_ = gaussian_matrix(1, C, rng, 0.2);
    layer_mix_.reserve(static_cast<std::size_t>(cfg_.depth));
    cls_mix_.reserve(static_cast<std::size_t>(cfg_.depth));
    const double scale = 1.0 / std::sqrt(static_cast<double>(C));
    for (int l = 0; l < cfg_.depth; ++l) {
      layer_mix_.push_back(gaussian_matrix(C, C, rng, scale));
      cls_mix_.push_back(gaussian_matrix(C, C, rng, scale));
    }
  }

  const EncoderConfig& config() const override { return cfg_; }

  std::vector<TokenStack> encode_image(const Mat& image) const override {
    if (image.rows() != cfg_.image_resolution || image.cols() != cfg_.image_resolution)
      throw BackboneError("encode_image: resolution mismatch");
    const int side = cfg_.patch_grid_side;
    const int px = cfg_.image_resolution / side;
    const int L = cfg_.num_patches();
    Mat stats(L, 6);
    for (int gy = 0; gy < side; ++gy)
      for (int gx = 0; gx < side; ++gx)
        stats.row(gy * side + gx) =
            detail::patch_stats(image.block(gy * px, gx * px, px, px));

    Mat x = ((stats * embed_).rowwise() + embed_bias_.row(0)).array().tanh().matrix();
    const Mat x0 = x;
    std::vector<TokenStack> out;
    out.reserve(cfg_.tap_layers.size());
    std::size_t next_tap = 0;
    for (int l = 1; l <= cfg_.depth && next_tap < cfg_.tap_layers.size(); ++l) {
      x = x + 0.5 * (x * layer_mix_[static_cast<std::size_t>(l - 1)]).array().tanh().matrix();
      x += 0.1 * x0;  // keeps the patch identity visible at depth
      if (cfg_.tap_layers[next_tap] == l) {
        TokenStack stack;
        stack.patches = x;
        stack.cls =
            (x.colwise().mean() * cls_mix_[static_cast<std::size_t>(l - 1)])
                .array()
                .tanh()
                .matrix()
                .transpose();
        stack.layer_index = l;
        out.push_back(std::move(stack));
        ++next_tap;
      }
    }
    return out;
  }

  std::uint64_t weights_checksum() const override {
    std::uint64_t h = bytes_checksum(embed_);
    h = bytes_checksum(embed_bias_, h);
    for (const auto& m : layer_mix_) h = bytes_checksum(m, h);
    for (const auto& m : cls_mix_) h = bytes_checksum(m, h);
    return h;
  }

 private:
  EncoderConfig cfg_;
  Mat embed_, embed_bias_;
  std::vector<Mat> layer_mix_, cls_mix_;
};

// Frozen text transformer stand-in: a positional shift plus a seeded mixing
// matrix and tanh. Differentiable in the input embeddings so the prompt
// contexts can train through it.
class SyntheticTextEncoder {
 public:
  SyntheticTextEncoder(int width, int max_len, std::uint64_t seed)
      : width_(width), max_len_(max_len) {
    std::mt19937_64 rng(mix_seed(seed, 0x7E));
    mix_ = gaussian_matrix(width, width, rng, 1.0 / std::sqrt(static_cast<double>(width)));
    positional_ = gaussian_matrix(max_len, width, rng, 0.3);
  }

  int width() const { return width_; }
  int max_len() const { return max_len_; }

  // Deterministic embedding for any fixed vocabulary id.
  Vec token_embedding(int id) const {
    std::mt19937_64 rng(mix_seed(0xF00D, static_cast<std::uint64_t>(id)));
    return gaussian_matrix(width_, 1, rng, 0.5).col(0);
  }

  TextTokenSequence encode_text(const ad::Var& embeddings, std::vector<int> token_ids) const {
    const auto len = embeddings.rows();
    if (len > max_len_) throw BackboneError("encode_text: sequence too long");
    require(static_cast<std::size_t>(len) == token_ids.size(),
            "encode_text: ids/embeddings length mismatch");
    ad::Var shifted =
        ad::add(embeddings, ad::constant(positional_.topRows(len)));
    TextTokenSequence seq;
    seq.tokens = ad::tanh_(ad::matmul(shifted, ad::constant(mix_)));
    seq.token_ids = std::move(token_ids);
    seq.length = static_cast<int>(len);
    return seq;
  }

  std::uint64_t weights_checksum() const {
    return bytes_checksum(positional_, bytes_checksum(mix_));
  }

 private:
  int width_, max_len_;
  Mat mix_, positional_;
};

// Seeded token stack with a known background cluster and an optional
// displaced "anomaly" cluster, for tests that need patch-level ground truth.
inline TokenStack make_synthetic_stack(std::uint64_t seed, int L, int C,
                                       const std::vector<int>& anomaly_indices = {},
                                       double displacement = 0.0) {
  std::mt19937_64 rng(mix_seed(seed, 0x5AC));
  Vec center = gaussian_matrix(C, 1, rng, 1.0).col(0);
  Mat patches = gaussian_matrix(L, C, rng, 0.25);
  patches.rowwise() += center.transpose();
  if (!anomaly_indices.empty() && displacement != 0.0) {
    Vec dir = gaussian_matrix(C, 1, rng, 1.0).col(0);
    dir.normalize();
    for (int idx : anomaly_indices) {
      require(idx >= 0 && idx < L, "make_synthetic_stack: anomaly index out of range");
      patches.row(idx) += displacement * dir.transpose();
    }
  }
  TokenStack stack;
  stack.patches = patches;
  stack.cls = patches.colwise().mean().transpose();
  stack.layer_index = 0;
  return stack;
}

inline std::string resolve_weights_path(const std::string& path) {
  if (path.empty() || path.front() == '/') return path;
  const char* cache = std::getenv("FBCLIP_CACHE");
  if (cache != nullptr && *cache != '\0') return std::string(cache) + "/" + path;
  return path;
}

// Factory honoring `backbone.kind`. The real-CLIP adapter is an optional
// build component; requesting it without usable weights raises the
// weights-unavailable error (this build ships the synthetic encoder only).
inline std::unique_ptr<VisionEncoder> make_vision_encoder(const RunConfig& rc) {
  EncoderConfig cfg = EncoderConfig::from_run_config(rc);
  if (rc.backbone.kind == "synthetic")
    return std::make_unique<SyntheticVisionEncoder>(cfg, mix_seed(rc.seed, 0xBB));
  if (rc.backbone.kind == "clip") {
    const std::string path = resolve_weights_path(rc.backbone.weights_path);
    throw BackboneError("backbone weights unavailable: '" + path +
                        "' (real-CLIP adapter is not part of this build; set "
                        "backbone.kind = synthetic)");
  }
  throw BackboneError("unknown backbone.kind: " + rc.backbone.kind);
}

}  // namespace fbclip::backbone
