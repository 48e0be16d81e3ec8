#pragma once

// Evaluation driver: runs the forward pass per image, aggregates AUROC / AP /
// AUPRO per category and overall, and emits the JSON report plus optional
// map / overlay PNGs.

#include "fbclip/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace fbclip::eval {

using data::Sample;
using pipeline::Model;
using score::MetricReport;

struct EvalOptions {
  std::string report_path;  // empty = do not write
  std::string maps_dir;     // empty = do not emit PNGs
};

inline MetricReport evaluate(Model& model, const std::vector<Sample>& samples,
                             const EvalOptions& opts = {}, const std::string& dataset_name = "") {
  require(!samples.empty(), "evaluate: empty sample list");
  const auto text = model.text_features();

  struct PerCategory {
    std::vector<double> image_scores;
    std::vector<int> image_labels;
    std::vector<double> pixel_scores;
    std::vector<int> pixel_labels;
    std::vector<Mat> maps_for_pro;
    std::vector<Mat> masks_for_pro;
  };
  std::map<std::string, PerCategory> per_cat;

  if (!opts.maps_dir.empty()) std::filesystem::create_directories(opts.maps_dir);
  for (const auto& s : samples) {
    auto fwd = model.forward(s.image, text);
    auto& pc = per_cat[s.category];
    pc.image_scores.push_back(fwd.anomaly.image_score);
    pc.image_labels.push_back(s.label);
    if (s.mask_valid) {
      for (Eigen::Index y = 0; y < s.mask.rows(); ++y)
        for (Eigen::Index x = 0; x < s.mask.cols(); ++x) {
          pc.pixel_scores.push_back(fwd.anomaly.map(y, x));
          pc.pixel_labels.push_back(s.mask(y, x) > 0.5 ? 1 : 0);
        }
      pc.maps_for_pro.push_back(fwd.anomaly.map);
      pc.masks_for_pro.push_back(s.mask);
    }
    if (!opts.maps_dir.empty()) {
      const std::string base = opts.maps_dir + "/" + s.category + "_" + s.stem;
      io::write_png_gray(base + "_map.png", fwd.anomaly.map);
      io::write_png_overlay(base + "_overlay.png", s.image, fwd.anomaly.map);
    }
  }

  MetricReport report;
  report.dataset = dataset_name.empty() ? model.config().data.name : dataset_name;
  for (auto& [name, pc] : per_cat) {
    score::CategoryMetrics m;
    m.image_auroc = score::auroc(pc.image_scores, pc.image_labels);
    m.image_ap = score::average_precision(pc.image_scores, pc.image_labels);
    if (!pc.pixel_scores.empty()) {
      m.pixel_auroc = score::auroc(pc.pixel_scores, pc.pixel_labels);
      m.pixel_aupro = score::aupro(pc.maps_for_pro, pc.masks_for_pro,
                                   model.config().score.aupro_fpr_limit);
    }
    report.categories[name] = m;
  }
  report.mean = score::mean_of(report.categories);

  if (!opts.report_path.empty()) {
    std::ofstream out(opts.report_path);
    require(static_cast<bool>(out), "evaluate: cannot write report");
    out << score::report_to_json(report);
  }
  return report;
}

}  // namespace fbclip::eval
