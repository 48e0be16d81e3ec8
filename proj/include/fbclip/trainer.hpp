#pragma once

// Training loop: image-level cross-entropy on the cls-path probability,
// focal + Dice pixel losses on the grid map, and the SCR term, optimized with
// Adam over the named parameter store. Deterministic under a fixed seed on
// the synthetic backbone.

#include "fbclip/pipeline.hpp"

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

namespace fbclip::train {

using data::Sample;
using pipeline::Model;

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainStats {
  std::vector<double> losses;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int steps = 0;
};

// Binary focal loss over per-patch probabilities; alpha weights the positive
// class. Probabilities come from a softmax so they are strictly inside (0,1).
inline ad::Var focal_loss(const ad::Var& probs, const Vec& targets, double gamma,
                          double alpha) {
  require(probs.rows() == targets.size(), "focal_loss: size mismatch");
  ad::Var y = ad::constant(targets);
  ad::Var one_minus_y = ad::constant(Vec(Vec::Ones(targets.size()) - targets));
  ad::Var p_t = ad::add(ad::mul(y, probs),
                        ad::mul(one_minus_y, ad::add_scalar(ad::neg(probs), 1.0)));
  Vec alpha_t = alpha * targets + (1.0 - alpha) * (Vec::Ones(targets.size()) - targets);
  ad::Var focus = ad::add_scalar(ad::neg(p_t), 1.0);  // (1 - p_t)
  if (gamma == 2.0) {
    focus = ad::mul(focus, focus);
  } else if (gamma == 1.0) {
    // keep as is
  } else {
    focus = ad::exp_(ad::mul_scalar(ad::log_(ad::clamp_min(focus, 1e-12)), gamma));
  }
  ad::Var ce = ad::neg(ad::log_(ad::clamp_min(p_t, 1e-8)));
  return ad::mean_all(ad::mul(ad::constant(alpha_t), ad::mul(focus, ce)));
}

inline ad::Var dice_loss(const ad::Var& probs, const Vec& targets, double eps = 1.0) {
  require(probs.rows() == targets.size(), "dice_loss: size mismatch");
  ad::Var inter = ad::sum_all(ad::mul(probs, ad::constant(targets)));
  ad::Var denom = ad::add_scalar(
      ad::add(ad::sum_all(probs), ad::constant(Mat::Constant(1, 1, targets.sum()))), eps);
  ad::Var dice = ad::div(ad::add_scalar(ad::mul_scalar(inter, 2.0), eps), denom);
  return ad::add_scalar(ad::neg(dice), 1.0);
}

// -log p(label) on the cls-path (normal, abnormal) probability.
inline ad::Var image_ce_loss(const ad::Var& p_abnormal, int label) {
  ad::Var p = label == 1 ? p_abnormal : ad::add_scalar(ad::neg(p_abnormal), 1.0);
  return ad::neg(ad::log_(ad::clamp_min(p, 1e-8)));
}

// Patch-level binary targets from the mask coverage on the encoder grid.
inline Vec grid_targets(const Mat& mask, int grid_side, double threshold = 0.5) {
  const Mat cov = data::grid_coverage(mask, grid_side);
  Vec t(static_cast<Eigen::Index>(grid_side) * grid_side);
  for (int y = 0; y < grid_side; ++y)
    for (int x = 0; x < grid_side; ++x)
      t(y * grid_side + x) = cov(y, x) > threshold ? 1.0 : 0.0;
  return t;
}

struct StepLoss {
  ad::Var total;
  double image = 0.0, pixel = 0.0, scr = 0.0;
};

// One batch forward: builds the combined loss on the tape.
inline StepLoss batch_loss(Model& model, const std::vector<const Sample*>& batch,
                           const pipeline::TextFeatureSet& text) {
  const auto& cfg = model.config();
  const int side = model.encoder_config().patch_grid_side;
  std::vector<ad::Var> image_losses, pixel_losses, scr_tokens;
  for (const Sample* s : batch) {
    auto fwd = model.forward(s->image, text);
    image_losses.push_back(image_ce_loss(fwd.global_abnormal, s->label));
    if (s->mask_valid) {
      const Vec targets = grid_targets(s->mask, side);
      ad::Var px = ad::add(
          focal_loss(fwd.grid_probs, targets, cfg.train.focal_gamma, cfg.train.focal_alpha),
          dice_loss(fwd.grid_probs, targets));
      pixel_losses.push_back(px);
    }
    scr_tokens.push_back(fwd.scr_tokens);
  }
  auto mean_of = [](const std::vector<ad::Var>& v) {
    ad::Var acc = v.front();
    for (std::size_t i = 1; i < v.size(); ++i) acc = ad::add(acc, v[i]);
    return ad::mul_scalar(acc, 1.0 / static_cast<double>(v.size()));
  };

  scr::SCRConfig scfg;
  scfg.tau = cfg.scr.tau;
  scfg.gamma = cfg.scr.gamma;
  scfg.lambda = cfg.scr.lambda;
  scfg.w_entropy = cfg.scr.w_entropy;
  scfg.w_margin = cfg.scr.w_margin;
  ad::Var consistency = scr::consistency_loss(scr::pool_and_align(scr_tokens, text, scfg), scfg);

  StepLoss out;
  ad::Var total = ad::mul_scalar(mean_of(image_losses), cfg.train.w_image);
  out.image = mean_of(image_losses).scalar();
  if (!pixel_losses.empty()) {
    ad::Var px = mean_of(pixel_losses);
    out.pixel = px.scalar();
    total = ad::add(total, ad::mul_scalar(px, cfg.train.w_pixel));
  }
  out.scr = consistency.scalar();
  out.total = ad::add(total, consistency);
  return out;
}

inline Checkpoint make_checkpoint(Model& model, std::uint64_t step) {
  Checkpoint ckpt;
  ckpt.params = model.params().values();
  ckpt.config_snapshot = model.config().snapshot();
  ckpt.step = step;
  return ckpt;
}

// Runs the optimizer over the training samples. Batches cycle through a
// seeded shuffle, reshuffled every epoch. Non-finite loss aborts with a
// diagnostic dump of the recent loss history.
inline TrainStats train(Model& model, const std::vector<Sample>& samples,
                        const std::string& ckpt_dir = "", TrainStats* stats_out = nullptr) {
  require(!samples.empty(), "train: empty training set");
  const auto& cfg = model.config();
  require(cfg.train.optimizer == "adam", "train: only the adam optimizer is provided");
  const int batch_size = std::max(1, cfg.train.batch_size);
  const int steps_per_epoch =
      static_cast<int>((samples.size() + static_cast<std::size_t>(batch_size) - 1) /
                       static_cast<std::size_t>(batch_size));
  const int total_steps = cfg.train.max_steps > 0 ? cfg.train.max_steps
                                                  : cfg.train.epochs * steps_per_epoch;

  Adam adam(cfg.train.lr);
  std::mt19937_64 order_rng(mix_seed(cfg.seed, 0xDA7A));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), order_rng);

  TrainStats stats;
  std::size_t cursor = 0;
  for (int step = 0; step < total_steps; ++step) {
    std::vector<const Sample*> batch;
    for (int b = 0; b < batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      batch.push_back(&samples[order[cursor++]]);
    }
    auto text = model.text_features();
    auto loss = batch_loss(model, batch, text);
    const double value = loss.total.scalar();
    if (!std::isfinite(value)) {
      std::ostringstream dump;
      dump << "train: non-finite loss at step " << step << " (image " << loss.image
           << ", pixel " << loss.pixel << ", scr " << loss.scr << "); recent:";
      const std::size_t tail = std::min<std::size_t>(stats.losses.size(), 8);
      for (std::size_t i = stats.losses.size() - tail; i < stats.losses.size(); ++i)
        dump << " " << stats.losses[i];
      throw DivergenceError(dump.str());
    }
    stats.losses.push_back(value);
    model.params().zero_grads();
    ad::backward(loss.total);
    adam.step(model.params());
    ++stats.steps;
    if (!ckpt_dir.empty() && cfg.train.ckpt_every > 0 &&
        (step + 1) % cfg.train.ckpt_every == 0) {
      std::filesystem::create_directories(ckpt_dir);
      save_checkpoint(ckpt_dir + "/step_" + std::to_string(step + 1) + ".fbck",
                      make_checkpoint(model, static_cast<std::uint64_t>(step + 1)));
    }
  }
  stats.initial_loss = stats.losses.empty() ? 0.0 : stats.losses.front();
  stats.final_loss = stats.losses.empty() ? 0.0 : stats.losses.back();
  if (!ckpt_dir.empty()) {
    std::filesystem::create_directories(ckpt_dir);
    save_checkpoint(ckpt_dir + "/final.fbck",
                    make_checkpoint(model, static_cast<std::uint64_t>(total_steps)));
  }
  if (stats_out != nullptr) *stats_out = stats;
  return stats;
}

}  // namespace fbclip::train
