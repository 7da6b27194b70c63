#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "oracle.hpp"
#include "smmcl/contrast.hpp"

using namespace smmcl;

namespace {

EmbeddingSet<double> make_set(std::vector<std::vector<double>> rows,
                              std::vector<int> labels, Modality m) {
  oracle::Set s{std::move(rows), std::move(labels)};
  return oracle::to_embedding_set(s, m);
}

}  // namespace

TEST_SUITE("contrast") {

TEST_CASE("info_nce closed forms") {
  Tensor<double> anchor({2}, {1, 0});
  Tensor<double> positive({2}, {1, 0});
  Tensor<double> none;
  CHECK(info_nce(anchor, positive, none, 1.0) == 0.0);  // exact
  CHECK(info_nce(anchor, positive, none, 0.1) == 0.0);

  Tensor<double> neg({1, 2}, {0, 1});
  CHECK(std::abs(info_nce(anchor, positive, neg, 1.0) -
                 std::log(1 + std::exp(-1.0))) < 1e-12);
  CHECK(std::abs(info_nce(anchor, positive, neg, 0.1) -
                 std::log(1 + std::exp(-10.0))) < 1e-12);

  CHECK_THROWS_AS(info_nce(anchor, positive, neg, 0.0), ArgumentError);
  CHECK_THROWS_AS(info_nce(anchor, Tensor<double>({3}), none, 1.0), ShapeError);
}

TEST_CASE("info_nce decreases as a negative moves away") {
  Tensor<double> anchor({2}, {1, 0});
  Tensor<double> positive({2}, {1, 0});
  double prev = std::numeric_limits<double>::infinity();
  for (double s : {1.0, 0.5, 0.0, -0.5, -1.0}) {
    Tensor<double> neg({1, 2}, {s, std::sqrt(std::max(0.0, 1 - s * s))});
    double v = info_nce(anchor, positive, neg, 0.5);
    CHECK(v < prev);
    CHECK(v >= 0.0);
    prev = v;
  }
}

TEST_CASE("cross_modal_loss small closed forms") {
  ContrastConfig cfg;
  cfg.tau = 0.1;

  EmbeddingSet<double> v1 = make_set({{1, 0}}, {0}, Modality::visible);
  EmbeddingSet<double> a1 = make_set({{1, 0}}, {0}, Modality::auxiliary);
  CHECK(cross_modal_loss(v1, a1, cfg) == 0.0);  // single positive, no negatives

  EmbeddingSet<double> a2 =
      make_set({{1, 0}, {0, 1}}, {0, 1}, Modality::auxiliary);
  CHECK(std::abs(cross_modal_loss(v1, a2, cfg) -
                 std::log(1 + std::exp(-10.0))) < 1e-12);

  CHECK_THROWS_AS(cross_modal_loss(a2, a2, cfg), ArgumentError);
}

TEST_CASE("intra_modal_loss small closed forms") {
  ContrastConfig cfg;
  cfg.tau = 1.0;
  EmbeddingSet<double> two =
      make_set({{1, 0}, {1, 0}}, {0, 0}, Modality::visible);
  CHECK(intra_modal_loss(two, cfg) == 0.0);  // positives only

  EmbeddingSet<double> s =
      make_set({{1, 0}, {1, 0}, {0, 1}}, {0, 0, 1}, Modality::visible);
  // each class-0 anchor: one positive at sim 1, one negative at sim 0
  CHECK(std::abs(intra_modal_loss(s, cfg) - std::log(1 + std::exp(-1.0))) <
        1e-12);

  EmbeddingSet<double> one = make_set({{1, 0}}, {0}, Modality::visible);
  CHECK_THROWS_AS(intra_modal_loss(one, cfg), ArgumentError);
}

TEST_CASE("all-skipped anchors give zero with flag set") {
  ContrastConfig cfg;
  EmbeddingSet<double> v = make_set({{1, 0}}, {0}, Modality::visible);
  EmbeddingSet<double> a = make_set({{0, 1}}, {1}, Modality::auxiliary);
  bool skipped = false;
  CHECK(cross_modal_loss(v, a, cfg, &skipped) == 0.0);
  CHECK(skipped);

  EmbeddingSet<double> s =
      make_set({{1, 0}, {0, 1}}, {0, 1}, Modality::visible);
  skipped = false;
  CHECK(intra_modal_loss(s, cfg, &skipped) == 0.0);
  CHECK(skipped);
}

TEST_CASE("full_objective weighting") {
  ContrastConfig cfg;
  cfg.lambda_cm = cfg.lambda_vis = cfg.lambda_aux = 0.0;
  double ce = 0.12345678901234567;
  CHECK(full_objective(ce, 9.0, 9.0, 9.0, cfg) == ce);  // bitwise

  cfg.lambda_cm = cfg.lambda_vis = cfg.lambda_aux = 0.2;
  CHECK(full_objective(1.0, 1.0, 1.0, 1.0, cfg) ==
        doctest::Approx(1.6).epsilon(1e-14));

  cfg.lambda_cm = cfg.lambda_vis = cfg.lambda_aux = 0.05;
  CHECK(full_objective(2.0, 0.4, 0.2, 0.2, cfg) ==
        doctest::Approx(2.04).epsilon(1e-14));
}

TEST_CASE("cross_entropy_seg closed forms and oracle") {
  {  // one pixel with +20 logit margin
    Tensor<double> logits({1, 1, 1, 2}, {20.0, 0.0});
    LabelMap lm(1, 1, 0);
    CHECK(cross_entropy_seg(logits, {lm}) < 1e-8);
  }
  {  // uniform logits over C=4
    Tensor<double> logits({1, 2, 2, 4});
    LabelMap lm(2, 2, 1);
    CHECK(cross_entropy_seg(logits, {lm}) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  {  // random 3x3 vs per-pixel oracle
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-2, 2);
    Tensor<double> logits({2, 3, 3, 5});
    for (long long i = 0; i < logits.size(); ++i) logits[i] = u(rng);
    LabelMap a(3, 3), b(3, 3);
    std::uniform_int_distribution<int> cls(0, 4);
    for (auto& x : a.v) x = cls(rng);
    for (auto& x : b.v) x = cls(rng);
    a.at(1, 1) = kIgnoreLabel;
    double got = cross_entropy_seg(logits, {a, b});
    CHECK(std::abs(got - oracle::cross_entropy(logits, {a, b})) < 1e-10);
  }
  {  // all ignored
    Tensor<double> logits({1, 1, 1, 2});
    LabelMap lm(1, 1, kIgnoreLabel);
    CHECK_THROWS_AS(cross_entropy_seg(logits, {lm}), EmptyBatchError);
  }
}

TEST_CASE("losses match brute-force oracles on random instances") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> nd(2, 32), dd(2, 8), cd(2, 4);
  const double taus[] = {0.1, 0.5, 1.0};
  for (int it = 0; it < 40; ++it) {
    double tau = taus[it % 3];
    oracle::Set ov = oracle::random_set(nd(rng), dd(rng), cd(rng), rng);
    oracle::Set oa = oracle::random_set(nd(rng),
                                        static_cast<int>(ov.emb[0].size()),
                                        cd(rng), rng);
    ContrastConfig cfg;
    cfg.tau = tau;
    EmbeddingSet<double> v = oracle::to_embedding_set(ov, Modality::visible);
    EmbeddingSet<double> a = oracle::to_embedding_set(oa, Modality::auxiliary);
    CHECK(std::abs(cross_modal_loss(v, a, cfg) -
                   oracle::cross_modal(ov, oa, tau)) < 1e-10);
    CHECK(std::abs(intra_modal_loss(v, cfg) - oracle::intra_modal(ov, tau)) <
          1e-10);
    CHECK(std::abs(intra_modal_loss(a, cfg) - oracle::intra_modal(oa, tau)) <
          1e-10);
    CHECK(cross_modal_loss(v, a, cfg) >= 0.0);
    CHECK(intra_modal_loss(v, cfg) >= 0.0);
  }
}

TEST_CASE("permutation invariance of the set losses") {
  std::mt19937_64 rng(8);
  oracle::Set ov = oracle::random_set(12, 4, 3, rng);
  oracle::Set oa = oracle::random_set(15, 4, 3, rng);
  ContrastConfig cfg;
  cfg.tau = 0.1;
  EmbeddingSet<double> v = oracle::to_embedding_set(ov, Modality::visible);
  EmbeddingSet<double> a = oracle::to_embedding_set(oa, Modality::auxiliary);
  double base_cm = cross_modal_loss(v, a, cfg);
  double base_in = intra_modal_loss(v, cfg);

  std::vector<size_t> perm(ov.emb.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  oracle::Set shuffled;
  for (size_t i : perm) {
    shuffled.emb.push_back(ov.emb[i]);
    shuffled.labels.push_back(ov.labels[i]);
  }
  EmbeddingSet<double> vs = oracle::to_embedding_set(shuffled, Modality::visible);
  CHECK(std::abs(cross_modal_loss(vs, a, cfg) - base_cm) < 1e-12);
  CHECK(std::abs(intra_modal_loss(vs, cfg) - base_in) < 1e-12);
}

TEST_CASE("tape losses agree with plain losses") {
  std::mt19937_64 rng(14);
  oracle::Set ov = oracle::random_set(10, 5, 3, rng);
  oracle::Set oa = oracle::random_set(9, 5, 3, rng);
  ContrastConfig cfg;
  cfg.tau = 0.1;
  EmbeddingSet<double> v = oracle::to_embedding_set(ov, Modality::visible);
  EmbeddingSet<double> a = oracle::to_embedding_set(oa, Modality::auxiliary);

  Tape<double> tape;
  TapeEmbeddingSet<double> tv{tape.leaf(v.embeddings), v.labels, {}};
  TapeEmbeddingSet<double> ta{tape.leaf(a.embeddings), a.labels, {}};
  CHECK(std::abs(tape.val(cross_modal_loss_on_tape(tape, tv, ta, cfg))[0] -
                 cross_modal_loss(v, a, cfg)) < 1e-12);
  CHECK(std::abs(tape.val(intra_modal_loss_on_tape(tape, tv, cfg))[0] -
                 intra_modal_loss(v, cfg)) < 1e-12);

  cfg.symmetrize_cm = true;
  Tape<double> tape2;
  TapeEmbeddingSet<double> tv2{tape2.leaf(v.embeddings), v.labels, {}};
  TapeEmbeddingSet<double> ta2{tape2.leaf(a.embeddings), a.labels, {}};
  CHECK(std::abs(tape2.val(cross_modal_loss_on_tape(tape2, tv2, ta2, cfg))[0] -
                 cross_modal_loss(v, a, cfg)) < 1e-12);
}

}  // TEST_SUITE
