#pragma once

// Shared helpers for the unit and acceptance suites: seeded random inputs and
// a central finite-difference gradient checker. Test-only; nothing here is
// used by the library.

#include "fbclip/autodiff.hpp"
#include "fbclip/linalg.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace fbtest {

using fbclip::Mat;
using fbclip::Vec;
namespace ad = fbclip::ad;

inline Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0,
                      double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = d(rng);
  return m;
}

struct GradCheckResult {
  double max_rel_err = 0.0;  // over points where either gradient is significant
  double max_abs_err = 0.0;
  int points = 0;            // significant points compared
};

// Central finite differences against the analytic gradients of `build`,
// which must construct a fresh scalar graph from the current leaf values
// (and must be deterministic given those values). Samples up to `per_leaf`
// entries of each leaf (all when per_leaf <= 0). Relative error is reported
// over points where either side exceeds `sig`; elsewhere only the absolute
// gap is tracked (a pure ratio at a true-zero gradient is noise).
inline GradCheckResult check_gradients(std::vector<ad::Var>& leaves,
                                       const std::function<ad::Var()>& build,
                                       std::mt19937_64& rng, double h = 1e-6,
                                       int per_leaf = -1, double sig = 1e-6) {
  for (auto& leaf : leaves) leaf.zero_grad();
  ad::Var loss = build();
  ad::backward(loss);
  GradCheckResult res;
  for (auto& leaf : leaves) {
    Mat& v = leaf.mutable_value();
    std::vector<std::pair<Eigen::Index, Eigen::Index>> coords;
    for (Eigen::Index i = 0; i < v.rows(); ++i)
      for (Eigen::Index j = 0; j < v.cols(); ++j) coords.emplace_back(i, j);
    if (per_leaf > 0 && static_cast<int>(coords.size()) > per_leaf) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(per_leaf));
    }
    for (auto [i, j] : coords) {
      const double keep = v(i, j);
      v(i, j) = keep + h;
      const double fp = build().scalar();
      v(i, j) = keep - h;
      const double fm = build().scalar();
      v(i, j) = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = leaf.grad().size() ? leaf.grad()(i, j) : 0.0;
      res.max_abs_err = std::max(res.max_abs_err, std::abs(fd - an));
      if (std::max(std::abs(fd), std::abs(an)) > sig) {
        const double rel = std::abs(fd - an) / std::max(std::abs(fd), std::abs(an));
        res.max_rel_err = std::max(res.max_rel_err, rel);
        ++res.points;
      }
    }
  }
  return res;
}

}  // namespace fbtest
