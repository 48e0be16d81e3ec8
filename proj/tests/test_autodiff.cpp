#include "fbclip/autodiff.hpp"

#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using fbclip::Mat;
namespace ad = fbclip::ad;
using fbtest::check_gradients;
using fbtest::random_mat;

namespace {

// Keeps |entries| away from the kinks of relu/abs/clamp so central
// differences stay valid.
Mat kink_free(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  Mat m = random_mat(rng, r, c, 0.2, 1.0);
  std::bernoulli_distribution flip(0.5);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j)
      if (flip(rng)) m(i, j) = -m(i, j);
  return m;
}

}  // namespace

TEST_CASE("forward values of basic ops") {
  Mat a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8;
  ad::Var va(a), vb(b);
  REQUIRE(ad::add(va, vb).value()(1, 1) == 12.0);
  REQUIRE(ad::matmul(va, vb).value()(0, 0) == 19.0);
  REQUIRE(ad::sum_all(va).scalar() == 10.0);
  REQUIRE(ad::mean_all(va).scalar() == 2.5);
  REQUIRE(ad::colwise_max(va).value()(0, 1) == 4.0);
  REQUIRE(ad::transpose(va).value()(0, 1) == 3.0);
}

TEST_CASE("softmax rows are stochastic and shift-invariant") {
  std::mt19937_64 rng(11);
  Mat x = random_mat(rng, 5, 7, -3.0, 3.0);
  Mat p = ad::softmax_rows(ad::Var(x)).value();
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    REQUIRE(p.row(i).sum() == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(p.row(i).minCoeff() > 0.0);
  }
  Mat shifted = x;
  shifted.array() += 123.0;  // also exercises the max-subtraction stabilizer
  Mat p2 = ad::softmax_rows(ad::Var(shifted)).value();
  REQUIRE((p - p2).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradients of every primitive match central differences") {
  std::mt19937_64 rng(42);
  auto check = [&](std::vector<ad::Var> leaves, const std::function<ad::Var()>& f) {
    auto res = check_gradients(leaves, f, rng);
    CAPTURE(res.max_rel_err);
    REQUIRE(res.max_rel_err < 1e-5);
  };

  ad::Var A(random_mat(rng, 3, 4), true);
  ad::Var B(random_mat(rng, 3, 4), true);
  ad::Var M(random_mat(rng, 4, 2), true);
  ad::Var v(random_mat(rng, 3, 1), true);
  ad::Var row(random_mat(rng, 1, 4), true);
  ad::Var s(random_mat(rng, 1, 1, 0.5, 1.5), true);
  ad::Var P(random_mat(rng, 3, 4, 0.5, 2.0), true);  // strictly positive

  check({A, B}, [&] { return ad::sum_all(ad::mul(ad::add(A, B), ad::sub(A, B))); });
  check({A, P}, [&] { return ad::sum_all(ad::div(A, P)); });
  check({A}, [&] { return ad::mean_all(ad::neg(ad::add_scalar(ad::mul_scalar(A, 1.7), 0.3))); });
  check({A, M}, [&] { return ad::sum_all(ad::matmul(A, M)); });
  check({A}, [&] { return ad::sum_all(ad::transpose(A)); });
  check({A}, [&] { return ad::sum_all(ad::sigmoid(A)); });
  check({A}, [&] { return ad::sum_all(ad::tanh_(A)); });
  check({A}, [&] { return ad::sum_all(ad::exp_(A)); });
  check({P}, [&] { return ad::sum_all(ad::log_(P)); });
  check({P}, [&] { return ad::sum_all(ad::sqrt_(P)); });
  check({A, s}, [&] { return ad::sum_all(ad::scale_by_scalar(A, s)); });
  check({A, v}, [&] { return ad::sum_all(ad::scale_rows(A, v)); });
  check({A, row}, [&] { return ad::sum_all(ad::add_row_broadcast(A, row)); });
  check({A, B}, [&] { return ad::sum_all(ad::rows_dot(A, B)); });
  check({A}, [&] { return ad::sum_all(ad::rowwise_sum(A)); });
  check({A}, [&] { return ad::sum_all(ad::colwise_mean(A)); });
  check({A}, [&] { return ad::sum_all(ad::slice_rows(A, 1, 2)); });
  check({A}, [&] { return ad::sum_all(ad::slice_cols(A, 1, 3)); });
  check({A, B}, [&] { return ad::sum_all(ad::concat_rows({A, B})); });
  check({A, B}, [&] { return ad::sum_all(ad::concat_cols({A, B})); });
  check({A}, [&] { return ad::sum_all(ad::softmax_rows(A)); });
  const Mat W = random_mat(rng, 3, 4);  // fixed probe; rebuilds must be deterministic
  check({A}, [&] {
    // weighted softmax so the gradient is not annihilated by row sums
    return ad::sum_all(ad::mul(ad::softmax_rows(A), ad::constant(W)));
  });

  ad::Var K(kink_free(rng, 3, 4), true);
  check({K}, [&] { return ad::sum_all(ad::relu(K)); });
  check({K}, [&] { return ad::sum_all(ad::abs_(K)); });
  check({K}, [&] { return ad::sum_all(ad::clamp_min(K, 0.05)); });
  check({A}, [&] { return ad::sum_all(ad::colwise_max(A)); });
}

TEST_CASE("gradients of composites and layer norm") {
  std::mt19937_64 rng(7);
  ad::Var X(random_mat(rng, 4, 6), true);
  ad::Var gamma(random_mat(rng, 1, 6, 0.5, 1.5), true);
  ad::Var beta(random_mat(rng, 1, 6), true);
  ad::Var p(random_mat(rng, 1, 6), true);
  auto check = [&](std::vector<ad::Var> leaves, const std::function<ad::Var()>& f, double tol) {
    auto res = check_gradients(leaves, f, rng);
    CAPTURE(res.max_rel_err);
    REQUIRE(res.max_rel_err < tol);
  };
  const Mat W = random_mat(rng, 4, 6);  // fixed probe; rebuilds must be deterministic
  check({X, gamma, beta},
        [&] { return ad::mean_all(ad::mul(ad::layer_norm_rows(X, gamma, beta),
                                          ad::constant(W))); },
        1e-4);
  check({X}, [&] { return ad::sum_all(ad::rowwise_norm(X)); }, 1e-5);
  check({X}, [&] {
    return ad::sum_all(ad::mul(ad::l2_normalize_rows(X), ad::constant(W)));
  }, 1e-4);
  check({X, p}, [&] { return ad::sum_all(ad::cosine_rows_vs_vec(X, p)); }, 1e-4);
}

TEST_CASE("fan-out graphs accumulate gradients once per path") {
  ad::Var x(Mat::Constant(1, 1, 3.0), true);
  ad::Var y = ad::mul(x, x);          // x^2
  ad::Var z = ad::add(y, ad::mul_scalar(x, 4.0));  // x^2 + 4x
  x.zero_grad();
  ad::backward(z);
  REQUIRE(x.grad()(0, 0) == Catch::Approx(2.0 * 3.0 + 4.0));
}

TEST_CASE("constants never allocate gradient state") {
  ad::Var c = ad::constant(Mat::Ones(2, 2));
  ad::Var s = ad::sum_all(c);
  REQUIRE_FALSE(s.requires_grad());
  ad::backward(s);  // no-op on an all-constant graph
  REQUIRE(c.grad().size() == 0);
}
