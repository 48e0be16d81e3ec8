#pragma once

// Dataset ingestion (mvtec-style and flat directory layouts), the seeded
// synthetic dataset generator, and the resizing helpers that bring images and
// masks to encoder resolution.

#include "fbclip/io/png.hpp"
#include "fbclip/linalg.hpp"
#include "fbclip/scoring.hpp"

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace fbclip::data {

namespace fs = std::filesystem;

struct Record {
  std::string image_path;
  std::string category;
  int label = 0;  // 0 normal, 1 abnormal
  std::string mask_path;  // empty when absent
  std::string split;      // "train" | "test"
  bool mask_absent = false;  // abnormal record lacking its ground-truth mask
};

struct DatasetIndex {
  std::string name;
  std::vector<Record> records;
};

enum class Layout { MvtecStyle, Flat };

inline Layout parse_layout(const std::string& s) {
  if (s == "mvtec") return Layout::MvtecStyle;
  if (s == "flat") return Layout::Flat;
  throw std::invalid_argument("unknown dataset layout: " + s);
}

namespace detail {

inline std::vector<fs::path> sorted_pngs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<fs::path> sorted_dirs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

// mvtec-style: <root>/<category>/test/<defect|good>/*.png with masks at
// <root>/<category>/ground_truth/<defect>/<stem>_mask.png, plus an optional
// <category>/train/good split. Deterministic path-sorted order. Abnormal
// images without a mask are flagged (excluded from pixel metrics); an empty
// category is an error.
inline DatasetIndex ingest_mvtec(const std::string& root) {
  require(fs::exists(root), "ingest: root does not exist");
  DatasetIndex index;
  index.name = fs::path(root).filename().string();
  for (const auto& cat_dir : detail::sorted_dirs(root)) {
    const std::string category = cat_dir.filename().string();
    std::size_t before = index.records.size();
    for (const auto& defect_dir : detail::sorted_dirs(cat_dir / "test")) {
      const std::string defect = defect_dir.filename().string();
      const bool good = defect == "good";
      for (const auto& img : detail::sorted_pngs(defect_dir)) {
        Record r;
        r.image_path = img.string();
        r.category = category;
        r.label = good ? 0 : 1;
        r.split = "test";
        if (!good) {
          fs::path mask = cat_dir / "ground_truth" / defect /
                          (img.stem().string() + "_mask.png");
          if (fs::exists(mask)) {
            r.mask_path = mask.string();
          } else {
            r.mask_absent = true;
            log_warn("ingest: missing mask for " + img.string() +
                     " (excluded from pixel metrics)");
          }
        }
        index.records.push_back(std::move(r));
      }
    }
    for (const auto& img : detail::sorted_pngs(cat_dir / "train" / "good")) {
      Record r;
      r.image_path = img.string();
      r.category = category;
      r.label = 0;
      r.split = "train";
      index.records.push_back(std::move(r));
    }
    if (index.records.size() == before)
      throw std::runtime_error("ingest: empty category: " + category);
  }
  require(!index.records.empty(), "ingest: no records under root");
  return index;
}

// flat: <root>/good/*.png and <root>/bad/*.png with masks at
// <root>/mask/<stem>_mask.png; one category named after the root.
inline DatasetIndex ingest_flat(const std::string& root) {
  require(fs::exists(root), "ingest: root does not exist");
  DatasetIndex index;
  index.name = fs::path(root).filename().string();
  const std::string category = index.name;
  for (const char* sub : {"good", "bad"}) {
    const bool good = std::string(sub) == "good";
    for (const auto& img : detail::sorted_pngs(fs::path(root) / sub)) {
      Record r;
      r.image_path = img.string();
      r.category = category;
      r.label = good ? 0 : 1;
      r.split = "test";
      if (!good) {
        fs::path mask = fs::path(root) / "mask" / (img.stem().string() + "_mask.png");
        if (fs::exists(mask)) {
          r.mask_path = mask.string();
        } else {
          r.mask_absent = true;
          log_warn("ingest: missing mask for " + img.string() +
                   " (excluded from pixel metrics)");
        }
      }
      index.records.push_back(std::move(r));
    }
  }
  require(!index.records.empty(), "ingest: no records under root");
  return index;
}

inline DatasetIndex ingest(const std::string& root, Layout layout) {
  return layout == Layout::MvtecStyle ? ingest_mvtec(root) : ingest_flat(root);
}

// ---- loaded samples ----

struct Sample {
  Mat image;  // resolution x resolution, [0,1]
  int label = 0;
  Mat mask;            // image-resolution binary mask; empty when not usable
  bool mask_valid = false;
  std::string category = "synthetic";
  std::string stem;    // basename for emitted artifacts
};

// Area-average downsampling for masks (fractional coverage per cell), also
// usable as a generic resize for already-smooth content.
inline Mat area_resize(const Mat& src, Eigen::Index out_h, Eigen::Index out_w) {
  Mat out(out_h, out_w);
  const double sy = static_cast<double>(src.rows()) / static_cast<double>(out_h);
  const double sx = static_cast<double>(src.cols()) / static_cast<double>(out_w);
  for (Eigen::Index i = 0; i < out_h; ++i) {
    const auto y0 = static_cast<Eigen::Index>(std::floor(i * sy));
    const auto y1 = std::min(static_cast<Eigen::Index>(std::ceil((i + 1) * sy)), src.rows());
    for (Eigen::Index j = 0; j < out_w; ++j) {
      const auto x0 = static_cast<Eigen::Index>(std::floor(j * sx));
      const auto x1 = std::min(static_cast<Eigen::Index>(std::ceil((j + 1) * sx)), src.cols());
      out(i, j) = src.block(y0, x0, std::max<Eigen::Index>(y1 - y0, 1),
                            std::max<Eigen::Index>(x1 - x0, 1))
                      .mean();
    }
  }
  return out;
}

inline Sample load_sample(const Record& r, int resolution) {
  Sample s;
  Mat img = io::read_png_gray(r.image_path);
  s.image = (img.rows() == resolution && img.cols() == resolution)
                ? img
                : score::bilinear_upsample(img, resolution, resolution);
  s.label = r.label;
  s.category = r.category;
  s.stem = fs::path(r.image_path).stem().string();
  if (r.label == 1 && !r.mask_path.empty()) {
    Mat m = io::read_png_gray(r.mask_path);
    if (m.rows() != resolution || m.cols() != resolution)
      m = area_resize(m, resolution, resolution);
    s.mask = m.unaryExpr([](double v) { return v > 0.5 ? 1.0 : 0.0; });
    s.mask_valid = true;
  } else if (r.label == 0) {
    s.mask = Mat::Zero(resolution, resolution);
    s.mask_valid = true;  // normal images carry the implicit empty mask
  }
  return s;
}

inline std::vector<Sample> load_samples(const DatasetIndex& index, int resolution,
                                        const std::string& split) {
  std::vector<Sample> out;
  for (const auto& r : index.records)
    if (split.empty() || r.split == split) out.push_back(load_sample(r, resolution));
  return out;
}

// ---- synthetic data ----

struct SyntheticSpec {
  int count = 32;
  int resolution = 48;
  double anomaly_fraction = 0.5;
  double blob_contrast = 0.4;
  std::uint64_t seed = 7;
};

// Smooth low-frequency background plus an optional elliptical anomaly blob
// with an intensity shift and high-frequency texture; the blob support is the
// ground-truth mask.
inline std::vector<Sample> make_synthetic_dataset(const SyntheticSpec& spec) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.count));
  const int R = spec.resolution;
  for (int idx = 0; idx < spec.count; ++idx) {
    std::mt19937_64 rng(mix_seed(spec.seed, 0x1000 + static_cast<std::uint64_t>(idx)));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.02);
    const double f1 = 1.0 + 2.0 * uni(rng), f2 = 1.0 + 2.0 * uni(rng);
    const double ph1 = 6.28 * uni(rng), ph2 = 6.28 * uni(rng);
    Sample s;
    s.image = Mat(R, R);
    s.mask = Mat::Zero(R, R);
    s.mask_valid = true;
    s.stem = "synthetic_" + std::to_string(idx);
    for (int y = 0; y < R; ++y)
      for (int x = 0; x < R; ++x)
        s.image(y, x) = 0.45 +
                        0.10 * std::sin(6.28 * f1 * x / R + ph1) *
                            std::sin(6.28 * f2 * y / R + ph2) +
                        noise(rng);

    const bool abnormal =
        static_cast<double>(idx) < spec.anomaly_fraction * static_cast<double>(spec.count);
    s.label = abnormal ? 1 : 0;
    if (abnormal) {
      const double cy = R * (0.25 + 0.5 * uni(rng)), cx = R * (0.25 + 0.5 * uni(rng));
      const double ry = R * (0.08 + 0.08 * uni(rng)), rx = R * (0.08 + 0.08 * uni(rng));
      const double theta = 3.14159 * uni(rng);
      const double ct = std::cos(theta), st = std::sin(theta);
      const double sign = uni(rng) < 0.8 ? 1.0 : -1.0;
      const double tex_f = 6.0 + 6.0 * uni(rng);
      for (int y = 0; y < R; ++y) {
        for (int x = 0; x < R; ++x) {
          const double dy = y - cy, dx = x - cx;
          const double u = (ct * dx + st * dy) / rx;
          const double v = (-st * dx + ct * dy) / ry;
          if (u * u + v * v <= 1.0) {
            s.mask(y, x) = 1.0;
            s.image(y, x) += sign * spec.blob_contrast +
                             0.08 * std::sin(6.28 * tex_f * (x + y) / R);
          }
        }
      }
    }
    s.image = s.image.cwiseMax(0.0).cwiseMin(1.0);
    out.push_back(std::move(s));
  }
  return out;
}

// Per-patch anomaly coverage on the encoder grid, in [0,1].
inline Mat grid_coverage(const Mat& mask, int grid_side) {
  return area_resize(mask, grid_side, grid_side);
}

}  // namespace fbclip::data
