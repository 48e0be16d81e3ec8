#pragma once

// From suppressed feature groups to anomaly maps and scores, plus the three
// evaluation metrics (AUROC, AP, AUPRO) and the JSON metric report.

#include "fbclip/bg_suppress.hpp"
#include "fbclip/scr.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace fbclip::score {

using mvfbe::EnhancedFeatureGroup;
using text::TextFeatureSet;

inline double absent() { return std::numeric_limits<double>::quiet_NaN(); }
inline bool is_absent(double v) { return std::isnan(v); }

// ---- per-group similarity maps ----

// Abnormal probability per patch token: project C -> D with the shared
// trainable projection, L2-normalize, temperature-scale against the two text
// prototypes, softmax. Returned on the tape as an L x 1 column.
inline ad::Var patch_abnormal_probs(const EnhancedFeatureGroup& group,
                                    const TextFeatureSet& text, const ad::Var& proj,
                                    double tau) {
  require(proj.rows() == group.tokens.cols(), "patch map: projection maps C -> D");
  scr::SCRConfig cfg;
  cfg.tau = tau;
  ad::Var projected = ad::matmul(group.patch_rows(), proj);
  auto logits = scr::align(projected, text, cfg);
  return ad::slice_cols(logits.p, 1, 1);
}

// Same quantity reshaped to the H x W patch grid (values only).
inline Mat patch_similarity_map(const EnhancedFeatureGroup& group, const TextFeatureSet& text,
                                const ad::Var& proj, double tau) {
  const Vec probs = patch_abnormal_probs(group, text, proj, tau).value().col(0);
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(probs.size()))));
  require(static_cast<Eigen::Index>(side) * side == probs.size(),
          "patch map: L must be a perfect square");
  Mat m(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) m(y, x) = probs(y * side + x);
  return m;
}

// Abnormal probability of a cls feature through the frozen cls projection.
inline ad::Var cls_abnormal_prob(const ad::Var& cls_row, const Mat& cls_proj,
                                 const TextFeatureSet& text, double tau) {
  scr::SCRConfig cfg;
  cfg.tau = tau;
  ad::Var projected = ad::matmul(cls_row, ad::constant(cls_proj));
  auto logits = scr::align(projected, text, cfg);
  return ad::slice_cols(logits.p, 1, 1);  // 1 x 1
}

// ---- map fusion ----

// Bilinear resize with half-pixel centers.
inline Mat bilinear_upsample(const Mat& src, Eigen::Index out_h, Eigen::Index out_w) {
  require(src.rows() >= 1 && src.cols() >= 1, "bilinear_upsample: empty input");
  Mat out(out_h, out_w);
  const double sy = static_cast<double>(src.rows()) / static_cast<double>(out_h);
  const double sx = static_cast<double>(src.cols()) / static_cast<double>(out_w);
  for (Eigen::Index i = 0; i < out_h; ++i) {
    double fy = (static_cast<double>(i) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(src.rows() - 1));
    const auto y0 = static_cast<Eigen::Index>(std::floor(fy));
    const auto y1 = std::min(y0 + 1, src.rows() - 1);
    const double wy = fy - static_cast<double>(y0);
    for (Eigen::Index j = 0; j < out_w; ++j) {
      double fx = (static_cast<double>(j) + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(src.cols() - 1));
      const auto x0 = static_cast<Eigen::Index>(std::floor(fx));
      const auto x1 = std::min(x0 + 1, src.cols() - 1);
      const double wx = fx - static_cast<double>(x0);
      out(i, j) = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                  wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
    }
  }
  return out;
}

// Separable Gaussian with radius ceil(3 sigma); the kernel is renormalized
// over the in-bounds support so borders are not darkened.
inline Mat gaussian_smooth(const Mat& src, double sigma) {
  if (sigma <= 0.0) return src;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  Vec kernel(2 * radius + 1);
  for (int k = -radius; k <= radius; ++k)
    kernel(k + radius) = std::exp(-0.5 * (static_cast<double>(k) * k) / (sigma * sigma));
  auto pass = [&](const Mat& in, bool horizontal) {
    Mat out(in.rows(), in.cols());
    for (Eigen::Index i = 0; i < in.rows(); ++i) {
      for (Eigen::Index j = 0; j < in.cols(); ++j) {
        double acc = 0.0, norm = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          const Eigen::Index ii = horizontal ? i : i + k;
          const Eigen::Index jj = horizontal ? j + k : j;
          if (ii < 0 || ii >= in.rows() || jj < 0 || jj >= in.cols()) continue;
          acc += kernel(k + radius) * in(ii, jj);
          norm += kernel(k + radius);
        }
        out(i, j) = acc / norm;
      }
    }
    return out;
  };
  return pass(pass(src, true), false);
}

// Per-pixel abnormality probability at image resolution plus the scalar
// image-level score.
struct AnomalyMap {
  Mat map;                  // in [0, 1]
  double image_score = 0.0; // in [0, 1]
};

// Mean over the per-group maps, upsampled, smoothed and clamped; the image
// score blends the map peak with the global (cls-path) abnormal probability.
inline AnomalyMap fuse_maps(const std::vector<Mat>& maps, int image_resolution,
                            double global_abnormal_prob, double sigma = 4.0,
                            double blend = 0.5) {
  require(!maps.empty(), "fuse_maps: at least one map required");
  Mat mean = maps.front();
  for (std::size_t i = 1; i < maps.size(); ++i) {
    require(maps[i].rows() == mean.rows() && maps[i].cols() == mean.cols(),
            "fuse_maps: mixed map sizes");
    mean += maps[i];
  }
  mean /= static_cast<double>(maps.size());
  AnomalyMap out;
  out.map = gaussian_smooth(bilinear_upsample(mean, image_resolution, image_resolution), sigma)
                .cwiseMax(0.0)
                .cwiseMin(1.0);
  out.image_score =
      std::clamp(blend * out.map.maxCoeff() + (1.0 - blend) * global_abnormal_prob, 0.0, 1.0);
  return out;
}

// ---- metrics ----

// Rank-based AUROC with tie handling (average ranks); single-class input is
// reported as absent.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "auroc: size mismatch");
  long npos = 0, nneg = 0;
  for (int l : labels) (l == 1 ? npos : nneg) += 1;
  if (npos == 0 || nneg == 0) return absent();
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos - static_cast<double>(npos) * (static_cast<double>(npos) + 1.0) / 2.0;
  return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

// Area under the precision-recall curve, step interpolation, tied scores
// processed as one block. No positives: absent.
inline double average_precision(const std::vector<double>& scores,
                                const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "average_precision: size mismatch");
  long npos = 0;
  for (int l : labels) npos += l == 1 ? 1 : 0;
  if (npos == 0) return absent();
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0, prev_recall = 0.0;
  long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? tp : fp) += 1;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(npos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

namespace detail {

// 8-connected components of a binary mask; returns a label map with -1 for
// background and labels 0..n-1, plus the component count.
inline int connected_components(const Mat& mask, Eigen::MatrixXi& labels) {
  labels = Eigen::MatrixXi::Constant(mask.rows(), mask.cols(), -1);
  int next = 0;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> stack;
  for (Eigen::Index sy = 0; sy < mask.rows(); ++sy) {
    for (Eigen::Index sx = 0; sx < mask.cols(); ++sx) {
      if (mask(sy, sx) <= 0.5 || labels(sy, sx) != -1) continue;
      stack.emplace_back(sy, sx);
      labels(sy, sx) = next;
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            const Eigen::Index ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= mask.rows() || nx < 0 || nx >= mask.cols()) continue;
            if (mask(ny, nx) > 0.5 && labels(ny, nx) == -1) {
              labels(ny, nx) = next;
              stack.emplace_back(ny, nx);
            }
          }
        }
      }
      ++next;
    }
  }
  return next;
}

}  // namespace detail

// Area under the per-region-overlap curve for FPR in [0, fpr_limit],
// normalized by the limit. Regions are 8-connected components of the ground
// truth; no anomalous regions anywhere is reported as absent.
inline double aupro(const std::vector<Mat>& maps, const std::vector<Mat>& gt_masks,
                    double fpr_limit = 0.3) {
  require(maps.size() == gt_masks.size(), "aupro: map/mask count mismatch");
  require(fpr_limit > 0.0 && fpr_limit <= 1.0, "aupro: fpr_limit in (0, 1] expected");
  std::vector<std::vector<double>> region_values;  // per region, sorted descending
  std::vector<double> negative_values;
  std::vector<double> thresholds;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const Mat& map = maps[i];
    const Mat& gt = gt_masks[i];
    require(map.rows() == gt.rows() && map.cols() == gt.cols(),
            "aupro: map/mask shape mismatch");
    Eigen::MatrixXi labels;
    const int n = detail::connected_components(gt, labels);
    const std::size_t base = region_values.size();
    region_values.resize(base + static_cast<std::size_t>(n));
    for (Eigen::Index y = 0; y < map.rows(); ++y) {
      for (Eigen::Index x = 0; x < map.cols(); ++x) {
        thresholds.push_back(map(y, x));
        if (labels(y, x) >= 0)
          region_values[base + static_cast<std::size_t>(labels(y, x))].push_back(map(y, x));
        else
          negative_values.push_back(map(y, x));
      }
    }
  }
  if (region_values.empty()) return absent();
  if (negative_values.empty()) return absent();  // FPR undefined without negatives

  for (auto& rv : region_values) std::sort(rv.begin(), rv.end(), std::greater<>());
  std::sort(negative_values.begin(), negative_values.end(), std::greater<>());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::vector<std::size_t> region_ptr(region_values.size(), 0);
  std::size_t neg_ptr = 0;
  std::vector<std::pair<double, double>> curve;  // (fpr, pro), fpr nondecreasing
  curve.emplace_back(0.0, 0.0);
  for (double t : thresholds) {
    double pro = 0.0;
    for (std::size_t r = 0; r < region_values.size(); ++r) {
      auto& ptr = region_ptr[r];
      const auto& vals = region_values[r];
      while (ptr < vals.size() && vals[ptr] >= t) ++ptr;
      pro += static_cast<double>(ptr) / static_cast<double>(vals.size());
    }
    pro /= static_cast<double>(region_values.size());
    while (neg_ptr < negative_values.size() && negative_values[neg_ptr] >= t) ++neg_ptr;
    const double fpr = static_cast<double>(neg_ptr) / static_cast<double>(negative_values.size());
    curve.emplace_back(fpr, pro);
  }

  // Trapezoidal area over FPR in [0, fpr_limit], interpolating at the limit.
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    auto [x0, y0] = curve[i - 1];
    auto [x1, y1] = curve[i];
    if (x0 >= fpr_limit) break;
    if (x1 > fpr_limit) {
      const double w = (fpr_limit - x0) / (x1 - x0);
      x1 = fpr_limit;
      y1 = y0 + w * (y1 - y0);
    }
    area += 0.5 * (y0 + y1) * (x1 - x0);
  }
  return area / fpr_limit;
}

// ---- metric report ----

struct CategoryMetrics {
  double image_auroc = absent();
  double image_ap = absent();
  double pixel_auroc = absent();
  double pixel_aupro = absent();
};

struct MetricReport {
  std::string dataset;
  std::map<std::string, CategoryMetrics> categories;
  CategoryMetrics mean;
};

// Mean over categories, skipping absent entries per metric.
inline CategoryMetrics mean_of(const std::map<std::string, CategoryMetrics>& categories) {
  CategoryMetrics out;
  auto fold = [&](auto member) {
    double sum = 0.0;
    int n = 0;
    for (const auto& [_, m] : categories) {
      const double v = m.*member;
      if (!is_absent(v)) {
        sum += v;
        ++n;
      }
    }
    return n == 0 ? absent() : sum / n;
  };
  out.image_auroc = fold(&CategoryMetrics::image_auroc);
  out.image_ap = fold(&CategoryMetrics::image_ap);
  out.pixel_auroc = fold(&CategoryMetrics::pixel_auroc);
  out.pixel_aupro = fold(&CategoryMetrics::pixel_aupro);
  return out;
}

namespace detail {

inline nlohmann::json metrics_to_json(const CategoryMetrics& m) {
  nlohmann::json j = nlohmann::json::object();
  if (!is_absent(m.image_auroc)) j["image_auroc"] = m.image_auroc;
  if (!is_absent(m.image_ap)) j["image_ap"] = m.image_ap;
  if (!is_absent(m.pixel_auroc)) j["pixel_auroc"] = m.pixel_auroc;
  if (!is_absent(m.pixel_aupro)) j["pixel_aupro"] = m.pixel_aupro;
  return j;
}

inline CategoryMetrics metrics_from_json(const nlohmann::json& j) {
  CategoryMetrics m;
  m.image_auroc = j.value("image_auroc", absent());
  m.image_ap = j.value("image_ap", absent());
  m.pixel_auroc = j.value("pixel_auroc", absent());
  m.pixel_aupro = j.value("pixel_aupro", absent());
  return m;
}

}  // namespace detail

inline std::string report_to_json(const MetricReport& report) {
  nlohmann::json j;
  j["dataset"] = report.dataset;
  j["categories"] = nlohmann::json::object();
  for (const auto& [name, m] : report.categories)
    j["categories"][name] = detail::metrics_to_json(m);
  j["mean"] = detail::metrics_to_json(report.mean);
  return j.dump(2) + "\n";
}

inline MetricReport report_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  MetricReport report;
  report.dataset = j.at("dataset").get<std::string>();
  for (const auto& [name, jm] : j.at("categories").items())
    report.categories[name] = detail::metrics_from_json(jm);
  report.mean = detail::metrics_from_json(j.at("mean"));
  return report;
}

}  // namespace fbclip::score
