#include "fbclip/text_prompts.hpp"

#include "test_util.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace fbclip;
using namespace fbclip::text;
namespace ad = fbclip::ad;

namespace {

TextTokenSequence raw_sequence(Mat tokens, std::vector<int> ids) {
  TextTokenSequence seq;
  seq.tokens = ad::Var(std::move(tokens));
  seq.token_ids = std::move(ids);
  seq.length = static_cast<int>(seq.token_ids.size());
  return seq;
}

ad::Var identity_proj(int d) { return ad::constant(Mat::Identity(d, d)); }

}  // namespace

TEST_CASE("eot_feature picks the argmax-id row") {
  std::mt19937_64 rng(1);
  Mat rows = fbtest::random_mat(rng, 4, 3);
  auto seq = raw_sequence(rows, {5, 9, 42, 9});
  Mat got = eot_feature(seq, identity_proj(3)).value();
  REQUIRE(got == rows.row(2));

  SECTION("constant sequence returns proj(v) regardless of ids") {
    Mat v = fbtest::random_mat(rng, 1, 3);
    auto cseq = raw_sequence(v.replicate(5, 1), {1, 2, 99, 2, 1});
    Mat proj = fbtest::random_mat(rng, 3, 3);
    Mat expect = v * proj;
    REQUIRE((eot_feature(cseq, ad::constant(proj)).value() - expect).cwiseAbs().maxCoeff() <
            1e-12);
  }

  SECTION("matches a naive scan-for-max oracle on random sequences") {
    for (int trial = 0; trial < 20; ++trial) {
      const int n = 3 + static_cast<int>(rng() % 10);
      Mat tokens = fbtest::random_mat(rng, n, 4);
      std::vector<int> ids(static_cast<std::size_t>(n));
      for (auto& id : ids) id = static_cast<int>(rng() % 1000);
      // naive scan
      int best = 0;
      for (int i = 1; i < n; ++i)
        if (ids[static_cast<std::size_t>(i)] > ids[static_cast<std::size_t>(best)]) best = i;
      auto seq2 = raw_sequence(tokens, ids);
      REQUIRE(eot_feature(seq2, identity_proj(4)).value() == tokens.row(best));
    }
  }
}

TEST_CASE("global_feature is the projected row mean") {
  Mat rows(2, 2);
  rows << 1, 0, 0, 1;
  auto seq = raw_sequence(rows, {1, 99});
  Mat got = global_feature(seq, identity_proj(2)).value();
  REQUIRE(got(0, 0) == Catch::Approx(0.5));
  REQUIRE(got(0, 1) == Catch::Approx(0.5));

  std::mt19937_64 rng(2);
  Mat tokens = fbtest::random_mat(rng, 16, 5);
  Mat proj = fbtest::random_mat(rng, 5, 5);
  auto rseq = raw_sequence(tokens, std::vector<int>(16, 1));
  // explicit loop-sum oracle
  RowVec acc = RowVec::Zero(5);
  for (int i = 0; i < 16; ++i) acc += tokens.row(i);
  Mat expect = (acc / 16.0) * proj;
  REQUIRE((global_feature(rseq, ad::constant(proj)).value() - expect).cwiseAbs().maxCoeff() <
          1e-6);
}

TEST_CASE("attention pooling: uniform, saturated and oracle cases") {
  std::mt19937_64 rng(3);
  Mat tokens = fbtest::random_mat(rng, 6, 4);

  SECTION("equal logits reduce to the plain mean") {
    ad::Var logits(Mat::Constant(6, 1, 0.37));
    Mat got = attention_pool(ad::Var(tokens), logits).value();
    Mat mean = tokens.colwise().mean();
    REQUIRE((got - mean).cwiseAbs().maxCoeff() < 1e-9);
  }

  SECTION("a dominant logit selects its row") {
    Mat l = Mat::Zero(6, 1);
    l(2, 0) = 50.0;
    Mat got = attention_pool(ad::Var(tokens), ad::Var(l)).value();
    REQUIRE((got - tokens.row(2)).cwiseAbs().maxCoeff() < 1e-6);
  }

  SECTION("matches an explicit softmax + weighted-sum oracle") {
    Mat l = fbtest::random_mat(rng, 6, 1, -2.0, 2.0);
    double z = 0.0;
    for (int i = 0; i < 6; ++i) z += std::exp(l(i, 0));
    RowVec expect = RowVec::Zero(4);
    for (int i = 0; i < 6; ++i) expect += (std::exp(l(i, 0)) / z) * tokens.row(i);
    Mat got = attention_pool(ad::Var(tokens), ad::Var(l)).value();
    REQUIRE((got - expect).cwiseAbs().maxCoeff() < 1e-6);
  }

  SECTION("softmax weights sum to one through the selector") {
    ParamStore store;
    auto sel = make_selector(store, 4, 0, rng);
    auto seq = raw_sequence(tokens, {1, 2, 3, 4, 5, 99});
    ad::Var w = ad::softmax_rows(ad::transpose(sel.logits(seq.tokens)));
    REQUIRE(w.value().sum() == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("fuse applies the published weights") {
  FusionWeights w;  // paper defaults 1.0 / 0.5 / 0.5
  ad::Var g(Mat::Zero(1, 2)), a(Mat::Zero(1, 2)), e(Mat::Zero(1, 2));
  g.mutable_value() << 1, 0;
  a.mutable_value() << 0, 1;
  e.mutable_value() << 1, 1;
  Mat got = fuse(e, g, a, w).value();
  REQUIRE(got(0, 0) == Catch::Approx(1.5));
  REQUIRE(got(0, 1) == Catch::Approx(1.0));

  SECTION("all-zero inputs give zero") {
    ad::Var z(Mat::Zero(1, 2));
    REQUIRE(fuse(z, z, z, w).value().cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("weights (1,0,0) pass the global feature through") {
    FusionWeights only_global{1.0, 0.0, 0.0};
    REQUIRE(fuse(e, g, a, only_global).value() == g.value());
  }
  SECTION("fuse is linear in each slot") {
    std::mt19937_64 rng(4);
    Mat x = fbtest::random_mat(rng, 1, 2), y = fbtest::random_mat(rng, 1, 2);
    Mat lhs = fuse(e, ad::Var(Mat(x + y)), a, w).value();
    Mat rhs = fuse(e, ad::Var(x), a, w).value() + fuse(ad::Var(Mat::Zero(1, 2)), ad::Var(y),
                                                       ad::Var(Mat::Zero(1, 2)), w)
                                                      .value();
    REQUIRE((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("build_text_features modes and determinism") {
  std::mt19937_64 rng(5);
  backbone::SyntheticTextEncoder enc(8, 32, 17);
  ParamStore store;
  auto pair = make_prompt_pair(store, enc, 6, rng);
  auto sel = make_selector(store, 8, 0, rng);
  ad::Var proj = ad::constant(fbtest::random_mat(rng, 8, 8));

  FusionWeights defaults;  // EOT+GP+Attn
  auto feats = build_text_features(pair, enc, sel, proj, defaults);
  REQUIRE(feats.normal.cols() == 8);
  REQUIRE(feats.abnormal.value().allFinite());

  SECTION("deterministic under frozen encoder and fixed parameters") {
    auto again = build_text_features(pair, enc, sel, proj, defaults);
    REQUIRE(again.normal.value() == feats.normal.value());
    REQUIRE(again.abnormal.value() == feats.abnormal.value());
  }

  SECTION("EOT-only weights reproduce the plain sentence-embedding path") {
    FusionWeights eot_only{0.0, 0.0, 1.0};
    auto f = build_text_features(pair, enc, sel, proj, eot_only);
    ad::Var embeddings = ad::concat_rows({pair.normal_context,
                                          ad::constant(pair.suffix_normal),
                                          ad::constant(pair.eot_embedding)});
    auto seq = enc.encode_text(embeddings, pair.ids_normal());
    Mat expect = eot_feature(seq, proj).value();
    REQUIRE((f.normal.value() - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("fused feature gradients match finite differences on a 4-token encoder") {
  std::mt19937_64 rng(6);
  backbone::SyntheticTextEncoder enc(6, 8, 23);
  ParamStore store;
  auto pair = make_prompt_pair(store, enc, 2, rng);  // 2 ctx + 1 suffix + 1 eot = 4 tokens
  auto sel = make_selector(store, 6, 0, rng);
  ad::Var proj = ad::constant(fbtest::random_mat(rng, 6, 6));
  const Mat probe = fbtest::random_mat(rng, 6, 1);
  FusionWeights w;

  std::vector<ad::Var> leaves = {pair.normal_context, pair.abnormal_context};
  auto build = [&]() -> ad::Var {
    auto feats = build_text_features(pair, enc, sel, proj, w);
    return ad::add(ad::matmul(feats.normal, ad::constant(probe)),
                   ad::matmul(feats.abnormal, ad::constant(probe)));
  };
  auto res = fbtest::check_gradients(leaves, build, rng, 1e-6);
  CAPTURE(res.max_rel_err, res.points);
  REQUIRE(res.points >= 20);
  REQUIRE(res.max_rel_err < 1e-3);
}
