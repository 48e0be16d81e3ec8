#include "fbclip/scr.hpp"

#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace fbclip;
using namespace fbclip::scr;
namespace ad = fbclip::ad;

namespace {

text::TextFeatureSet text_pair(Mat normal, Mat abnormal) {
  text::TextFeatureSet t;
  t.normal = ad::constant(std::move(normal));
  t.abnormal = ad::constant(std::move(abnormal));
  return t;
}

AlignmentLogits logits_from(Mat s) { return AlignmentLogits::from_scores(ad::Var(std::move(s))); }

}  // namespace

TEST_CASE("alignment geometry fixtures") {
  SCRConfig cfg;  // tau = 0.07

  SECTION("pooled feature equal to T_normal, orthogonal prototypes") {
    Mat tn(1, 2), ta(1, 2);
    tn << 1, 0;
    ta << 0, 1;
    Mat pooled(1, 2);
    pooled << 1, 0;
    auto logits = align(ad::Var(pooled), text_pair(tn, ta), cfg);
    REQUIRE(logits.s.value()(0, 0) == Catch::Approx(1.0 / 0.07).epsilon(1e-6));
    REQUIRE(logits.s.value()(0, 1) == Catch::Approx(0.0).margin(1e-6));
    REQUIRE(logits.p.value()(0, 0) == Catch::Approx(1.0).margin(1e-5));
    REQUIRE(logits.p.value()(0, 1) == Catch::Approx(6e-7).margin(1e-6));
  }

  SECTION("equidistant feature gives (0.5, 0.5)") {
    Mat tn(1, 2), ta(1, 2);
    tn << 1, 0;
    ta << 0, 1;
    Mat pooled(1, 2);
    pooled << 1, 1;
    auto logits = align(ad::Var(pooled), text_pair(tn, ta), cfg);
    REQUIRE(logits.p.value()(0, 0) == Catch::Approx(0.5).margin(1e-9));
    REQUIRE(logits.p.value()(0, 1) == Catch::Approx(0.5).margin(1e-9));
  }

  SECTION("matches a normalize+dot+softmax loop oracle on random inputs") {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 30; ++trial) {
      Mat pooled = fbtest::random_mat(rng, 5, 6);
      Mat tn = fbtest::random_mat(rng, 1, 6), ta = fbtest::random_mat(rng, 1, 6);
      auto logits = align(ad::Var(pooled), text_pair(tn, ta), cfg);
      for (int b = 0; b < 5; ++b) {
        Vec v = pooled.row(b).transpose();
        v /= (v.norm() + 1e-8);
        Vec n = tn.row(0).transpose(), a = ta.row(0).transpose();
        n /= (n.norm() + 1e-8);
        a /= (a.norm() + 1e-8);
        const double sn = v.dot(n) / 0.07, sa = v.dot(a) / 0.07;
        REQUIRE(logits.s.value()(b, 0) == Catch::Approx(sn).margin(1e-6));
        REQUIRE(logits.s.value()(b, 1) == Catch::Approx(sa).margin(1e-6));
        const double pn = std::exp(sn) / (std::exp(sn) + std::exp(sa));
        REQUIRE(logits.p.value()(b, 0) == Catch::Approx(pn).margin(1e-6));
      }
    }
  }

  SECTION("probabilities are a valid distribution in (0,1)") {
    std::mt19937_64 rng(42);
    Mat pooled = fbtest::random_mat(rng, 8, 5);
    auto logits = align(ad::Var(pooled),
                        text_pair(fbtest::random_mat(rng, 1, 5), fbtest::random_mat(rng, 1, 5)),
                        cfg);
    for (int b = 0; b < 8; ++b) {
      REQUIRE(logits.p.value().row(b).sum() == Catch::Approx(1.0).margin(1e-6));
      REQUIRE(logits.p.value().row(b).minCoeff() > 0.0);
      REQUIRE(logits.p.value().row(b).maxCoeff() < 1.0);
    }
  }

  SECTION("scaling both prototypes leaves logits unchanged") {
    std::mt19937_64 rng(43);
    Mat pooled = fbtest::random_mat(rng, 4, 6);
    Mat tn = fbtest::random_mat(rng, 1, 6), ta = fbtest::random_mat(rng, 1, 6);
    auto base = align(ad::Var(pooled), text_pair(tn, ta), cfg);
    auto scaled = align(ad::Var(pooled), text_pair(Mat(7.3 * tn), Mat(7.3 * ta)), cfg);
    // invariance holds up to the eps guard in the row normalization
    REQUIRE((base.s.value() - scaled.s.value()).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("entropy loss fixtures and bounds") {
  SECTION("uniform rows score ln 2") {
    Mat s = Mat::Constant(3, 2, 1.7);
    REQUIRE(entropy_loss(logits_from(s)).scalar() ==
            Catch::Approx(std::log(2.0)).margin(1e-6));
  }
  SECTION("saturated rows score ~0") {
    Mat s(1, 2);
    s << 40.0, 0.0;
    REQUIRE(entropy_loss(logits_from(s)).scalar() == Catch::Approx(0.0).margin(2e-7));
  }
  SECTION("mixed batch averages the two") {
    Mat s(2, 2);
    s << 1.0, 1.0, 40.0, 0.0;
    REQUIRE(entropy_loss(logits_from(s)).scalar() ==
            Catch::Approx(0.5 * std::log(2.0)).margin(1e-4));
  }
  SECTION("bounded by ln 2 on random batches") {
    std::mt19937_64 rng(44);
    for (int trial = 0; trial < 50; ++trial) {
      Mat s = fbtest::random_mat(rng, 6, 2, -30.0, 30.0);
      const double e = entropy_loss(logits_from(s)).scalar();
      REQUIRE(e >= 0.0);
      REQUIRE(e <= std::log(2.0) + 1e-12);
    }
  }
}

TEST_CASE("margin loss fixtures and bounds") {
  SECTION("satisfied margin scores zero") {
    Mat s(1, 2);
    s << 0.0, 2.0;
    REQUIRE(margin_loss(logits_from(s), 1.0).scalar() == 0.0);
  }
  SECTION("narrow gap is penalized") {
    Mat s(1, 2);
    s << 0.4, 0.6;
    REQUIRE(margin_loss(logits_from(s), 1.0).scalar() == Catch::Approx(0.8));
  }
  SECTION("mode collapse is maximally penalized at gamma exactly") {
    Mat s = Mat::Constant(4, 2, -3.2);
    REQUIRE(margin_loss(logits_from(s), 1.0).scalar() == 1.0);
  }
  SECTION("bounded by gamma") {
    std::mt19937_64 rng(45);
    for (int trial = 0; trial < 50; ++trial) {
      Mat s = fbtest::random_mat(rng, 5, 2, -3.0, 3.0);
      const double m = margin_loss(logits_from(s), 1.0).scalar();
      REQUIRE(m >= 0.0);
      REQUIRE(m <= 1.0);
    }
  }
}

TEST_CASE("combined consistency loss") {
  SCRConfig cfg;  // lambda 0.15, w_e 1.0, w_m 0.5

  SECTION("mode-collapse fixture reproduces the closed-form value") {
    // s = (c, c): entropy ln 2, margin = gamma = 1
    Mat s = Mat::Constant(4, 2, 0.9);
    const double got = consistency_loss(logits_from(s), cfg).scalar();
    REQUIRE(got == Catch::Approx(0.15 * (std::log(2.0) + 0.5)).margin(1e-4));
  }
  SECTION("lambda = 0 disables SCR") {
    SCRConfig off = cfg;
    off.lambda = 0.0;
    std::mt19937_64 rng(46);
    Mat s = fbtest::random_mat(rng, 4, 2);
    REQUIRE(consistency_loss(logits_from(s), off).scalar() == 0.0);
  }
  SECTION("nonnegative for all inputs") {
    std::mt19937_64 rng(47);
    for (int trial = 0; trial < 50; ++trial) {
      Mat s = fbtest::random_mat(rng, 3, 2, -20.0, 20.0);
      REQUIRE(consistency_loss(logits_from(s), cfg).scalar() >= 0.0);
    }
  }
  SECTION("invalid temperature is rejected") {
    SCRConfig bad = cfg;
    bad.tau = 0.0;
    Mat pooled = Mat::Ones(1, 3);
    REQUIRE_THROWS(align(ad::Var(pooled), text_pair(Mat::Ones(1, 3), Mat::Ones(1, 3)), bad));
  }
}

TEST_CASE("consistency gradients w.r.t. pooled features match finite differences") {
  std::mt19937_64 rng(48);
  SCRConfig cfg;
  Mat tn = fbtest::random_mat(rng, 1, 6), ta = fbtest::random_mat(rng, 1, 6);
  auto text = text_pair(tn, ta);

  int checked_points = 0;
  double worst = 0.0;
  int attempts = 0;
  while (checked_points < 24 && attempts < 200) {
    ++attempts;
    ad::Var pooled(fbtest::random_mat(rng, 3, 6), true);
    auto logits = align(pooled, text, cfg);
    // keep clear of the margin hinge and the |.| kink
    bool near_kink = false;
    for (int b = 0; b < 3; ++b) {
      const double d = logits.s.value()(b, 1) - logits.s.value()(b, 0);
      near_kink = near_kink || std::abs(std::abs(d) - cfg.gamma) < 0.1 || std::abs(d) < 0.1;
    }
    if (near_kink) continue;
    std::vector<ad::Var> leaves = {pooled};
    auto res = fbtest::check_gradients(
        leaves, [&] { return consistency_loss(align(pooled, text, cfg), cfg); }, rng, 1e-6);
    worst = std::max(worst, res.max_rel_err);
    checked_points += res.points;
  }
  CAPTURE(worst, checked_points);
  REQUIRE(checked_points >= 20);
  REQUIRE(worst < 1e-3);
}

TEST_CASE("pool_and_align pools per image before scoring") {
  std::mt19937_64 rng(49);
  SCRConfig cfg;
  Mat tn = fbtest::random_mat(rng, 1, 4), ta = fbtest::random_mat(rng, 1, 4);
  std::vector<ad::Var> images;
  Mat pooled(2, 4);
  for (int b = 0; b < 2; ++b) {
    Mat tokens = fbtest::random_mat(rng, 7, 4);
    images.emplace_back(tokens);
    pooled.row(b) = tokens.colwise().mean();
  }
  auto via_tokens = pool_and_align(images, text_pair(tn, ta), cfg);
  auto via_pooled = align(ad::Var(pooled), text_pair(tn, ta), cfg);
  REQUIRE((via_tokens.s.value() - via_pooled.s.value()).cwiseAbs().maxCoeff() < 1e-12);
}
