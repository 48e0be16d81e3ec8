#pragma once

// Dense-matrix aliases, seeded RNG fan-out and the small numeric helpers
// shared by every fbclip module.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <iostream>
#include <random>
#include <stdexcept>
#include <string>

namespace fbclip {

// Redirectable warning sink for the rare degenerate-input conventions
// (zero-norm cosine and friends). Default: stderr.
inline std::function<void(const std::string&)>& log_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& msg) {
    std::cerr << "[fbclip] " << msg << "\n";
  };
  return sink;
}

inline void log_warn(const std::string& msg) {
  if (log_sink()) log_sink()(msg);
}

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

inline constexpr double kEps = 1e-8;

// Cosine similarity with the zero-norm convention used throughout the
// pipeline: if either side has zero norm the similarity is defined as 0.
inline double cosine(const Eigen::Ref<const Vec>& a, const Eigen::Ref<const Vec>& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

// splitmix64-style stream derivation: one master seed fans out to data order,
// parameter init and the synthetic backbone without correlated streams.
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Mat gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                           double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

inline Mat uniform_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                          double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  return m;
}

inline void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

// FNV-1a over the raw matrix bytes; used for frozen-weight checksums.
inline std::uint64_t bytes_checksum(const Mat& m, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = reinterpret_cast<const unsigned char*>(m.data());
  const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(double);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace fbclip
