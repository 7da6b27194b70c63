#include <cmath>
#include <random>

#include "doctest.h"
#include "smmcl/gradcheck.hpp"
#include "smmcl/tape.hpp"

using namespace smmcl;

namespace {

using Builder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Finite-difference check of a scalar-producing graph builder.
GradCheckResult fd_check(const std::string& name,
                         std::vector<Tensor<double>> inputs,
                         const Builder& build, double tol = 1e-4) {
  auto eval = [&](const std::vector<Tensor<double>>& in) {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& t : in) vars.push_back(tape.leaf(t));
    return static_cast<double>(tape.val(build(tape, vars))[0]);
  };
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  tape.backward(build(tape, vars));
  std::vector<Tensor<double>> grads;
  for (Var v : vars) {
    const Tensor<double>& g = tape.grad(v);
    grads.push_back(g.size() ? g
                             : Tensor<double>::zeros(tape.val(v).dims()));
  }
  return check_gradients(name, inputs, eval, grads, 1e-5, tol);
}

Tensor<double> randt(std::vector<int> dims, std::mt19937_64& rng,
                     double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(dims));
  for (long long i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

}  // namespace

TEST_SUITE("tape") {

TEST_CASE("pointwise closed forms") {
  Tape<double> tape;
  Var z = tape.leaf(Tensor<double>::scalar(0.0));
  CHECK(tape.val(tape.sigmoid(z))[0] == doctest::Approx(0.5).epsilon(1e-12));
  Var two = tape.leaf(Tensor<double>::scalar(2.0));
  CHECK(tape.val(tape.sigmoid(two))[0] ==
        doctest::Approx(0.8807970779778823).epsilon(1e-12));
  CHECK_THROWS_AS(tape.log_(tape.leaf(Tensor<double>::scalar(-1.0))),
                  DomainError);
}

TEST_CASE("backward on simple analytic cases") {
  {  // f(x) = x^2 at x = 3 -> 6
    Tape<double> tape;
    Var x = tape.leaf(Tensor<double>::scalar(3.0));
    tape.backward(tape.sum(tape.mul(x, x)));
    CHECK(tape.grad(x)[0] == doctest::Approx(6.0).epsilon(1e-14));
  }
  {  // f(x) = sum(sigmoid(x)), x = 0 vector of length 4 -> 0.25 each
    Tape<double> tape;
    Var x = tape.leaf(Tensor<double>::zeros({4}));
    tape.backward(tape.sum(tape.sigmoid(x)));
    for (int i = 0; i < 4; ++i)
      CHECK(tape.grad(x)[i] == doctest::Approx(0.25).epsilon(1e-14));
  }
  {  // non-scalar output rejected
    Tape<double> tape;
    Var x = tape.leaf(Tensor<double>::zeros({4}));
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
  }
}

TEST_CASE("every primitive matches central finite differences") {
  std::mt19937_64 rng(42);
  std::vector<GradCheckResult> results;

  for (int rep = 0; rep < 5; ++rep) {
    std::uniform_int_distribution<int> dim(2, 5);
    int m = dim(rng), k = dim(rng), n = dim(rng);

    results.push_back(fd_check(
        "matmul", {randt({m, k}, rng), randt({k, n}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.sum(t.mul(t.matmul(v[0], v[1]), t.matmul(v[0], v[1])));
        }));
    results.push_back(fd_check(
        "matmul_nt", {randt({m, k}, rng), randt({n, k}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.sum(t.mul(t.matmul_nt(v[0], v[1]), t.matmul_nt(v[0], v[1])));
        }));
    results.push_back(fd_check(
        "add_broadcast", {randt({m, n}, rng), randt({n}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.sum(t.mul(t.add(v[0], v[1]), t.add(v[0], v[1])));
        }));
    results.push_back(fd_check(
        "mul_broadcast", {randt({m, n}, rng), randt({n}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.sum(t.mul(v[0], v[1]));
        }));
    results.push_back(fd_check(
        "scale_sigmoid_relu", {randt({m, n}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.sum(t.relu(t.sigmoid(t.scale(v[0], 1.7))));
        }));
    results.push_back(fd_check(
        "exp_log", {randt({m, n}, rng, 0.5, 2.0)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.sum(t.log_(t.exp_(t.log_(v[0]))));
        }));
    results.push_back(fd_check(
        "reshape_concat", {randt({m, n}, rng), randt({m, n}, rng)},
        [m, n](Tape<double>& t, const std::vector<Var>& v) {
          Var c = t.concat_last(v[0], v[1]);
          return t.sum(t.mul(t.reshape(c, {m * 2 * n}), t.reshape(c, {m * 2 * n})));
        }));
    results.push_back(fd_check(
        "concat_rows", {randt({m, k}, rng), randt({n, k}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          Var c = t.concat_rows({v[0], v[1]});
          return t.sum(t.mul(c, c));
        }));
    results.push_back(fd_check(
        "conv2d_s1",
        {randt({4, 4, 2}, rng), randt({3, 3, 2, 3}, rng), randt({3}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.sum(t.mul(t.conv2d(v[0], v[1], v[2], 1),
                             t.conv2d(v[0], v[1], v[2], 1)));
        }));
    results.push_back(fd_check(
        "conv2d_s2",
        {randt({4, 4, 2}, rng), randt({3, 3, 2, 3}, rng), randt({3}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.sum(t.mul(t.conv2d(v[0], v[1], v[2], 2),
                             t.conv2d(v[0], v[1], v[2], 2)));
        }));
    results.push_back(fd_check(
        "conv2d_s1_fused_relu",
        {randt({4, 4, 2}, rng), randt({3, 3, 2, 3}, rng), randt({3}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          Var y = t.conv2d(v[0], v[1], v[2], 1, true);
          return t.sum(t.mul(y, y));
        }));
    results.push_back(fd_check(
        "conv2d_s2_fused_relu",
        {randt({4, 4, 2}, rng), randt({3, 3, 2, 3}, rng), randt({3}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          Var y = t.conv2d(v[0], v[1], v[2], 2, true);
          return t.sum(t.mul(y, y));
        }));
    results.push_back(fd_check(
        "conv2d_batched",
        {randt({2, 4, 4, 2}, rng), randt({3, 3, 2, 3}, rng), randt({3}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          Var y = t.conv2d(v[0], v[1], v[2], 2, true);
          return t.sum(t.mul(y, y));
        }));
    results.push_back(fd_check(
        "conv2d_pointwise_fused_relu",
        {randt({2, 3, 3, 2}, rng), randt({1, 1, 2, 3}, rng), randt({3}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          Var y = t.conv2d(v[0], v[1], v[2], 1, true);
          return t.sum(t.mul(y, y));
        }));
    results.push_back(fd_check(
        "linear", {randt({m, k, n}, rng), randt({n, k}, rng), randt({k}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          Var y = t.linear(v[0], v[1], v[2]);
          return t.sum(t.mul(y, y));
        }));
    results.push_back(fd_check(
        "linear_fused_relu",
        {randt({m, k, n}, rng), randt({n, k}, rng), randt({k}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          Var y = t.linear(v[0], v[1], v[2], true);
          return t.sum(t.mul(y, y));
        }));
    results.push_back(fd_check(
        "cross_update",
        {randt({2, 3, 4, 3}, rng), randt({2, 3, 4, 3}, rng),
         randt({2, 3, 4}, rng), randt({2, 3}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          Var y = t.cross_update(v[0], v[1], v[2], v[3]);
          return t.sum(t.mul(y, y));
        }));
    results.push_back(fd_check(
        "pooling", {randt({3, 4, 3}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.add(t.sum(t.global_avg_pool(v[0])),
                       t.sum(t.mul(t.global_max_pool(v[0]),
                                   t.global_max_pool(v[0]))));
        }));
    results.push_back(fd_check(
        "pooling_batched", {randt({2, 3, 4, 3}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.add(t.sum(t.global_avg_pool(v[0])),
                       t.sum(t.mul(t.global_max_pool(v[0]),
                                   t.global_max_pool(v[0]))));
        }));
    results.push_back(fd_check(
        "upsample", {randt({2, 3, 2}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          Var u = t.upsample_bilinear(v[0], 5, 7);
          return t.sum(t.mul(u, u));
        }));
    results.push_back(fd_check(
        "upsample_batched", {randt({2, 2, 3, 2}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          Var u = t.upsample_bilinear(v[0], 5, 7);
          return t.sum(t.mul(u, u));
        }));
    results.push_back(fd_check(
        "gather_l2norm", {randt({5, 3}, rng), randt({4, 3}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          Var g = t.l2_normalize_rows(t.gather_rows(v[0], {0, 2, 2, 4}));
          return t.sum(t.mul(g, v[1]));
        }));
    results.push_back(fd_check(
        "softmax_ce", {randt({4, 3}, rng, -2, 2)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          int valid = 0;
          return t.scale(
              t.softmax_ce_sum(v[0], {0, 2, kIgnoreLabel, 1}, kIgnoreLabel, &valid),
              1.0 / 3);
        }));
    results.push_back(fd_check(
        "grouped_nce", {randt({4, 5}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.grouped_nce(v[0], {0, 1, 0, 1}, {0, 0, 1, 1, 0}, false, 0.3);
        }));
    results.push_back(fd_check(
        "grouped_nce_diag", {randt({4, 4}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.grouped_nce(v[0], {0, 1, 0, 1}, {0, 1, 0, 1}, true, 0.5);
        }));
    results.push_back(fd_check(
        "add_weighted",
        {randt({1}, rng), randt({1}, rng), randt({1}, rng)},
        [](Tape<double>& t, const std::vector<Var>& v) {
          return t.add_weighted(v[0], {{0.2, v[1]}, {0.0, v[2]}, {0.7, v[1]}});
        }));
  }
  for (const GradCheckResult& r : results) {
    INFO(r.component, " worst rel err ", r.worst_rel_err, " at ", r.worst_at);
    CHECK(r.pass);
  }
}

TEST_CASE("negative control: corrupted gradient is caught and named") {
  std::mt19937_64 rng(9);
  Tensor<double> x = randt({3, 3}, rng);
  auto eval = [](const std::vector<Tensor<double>>& in) {
    Tape<double> tape;
    Var v = tape.leaf(in[0]);
    return static_cast<double>(tape.val(tape.sum(tape.mul(v, v)))[0]);
  };
  Tape<double> tape;
  Var v = tape.leaf(x);
  tape.backward(tape.sum(tape.mul(v, v)));
  Tensor<double> bad = tape.grad(v);
  bad[4] += 0.5;  // deliberate corruption
  std::vector<Tensor<double>> inputs{x};
  GradCheckResult res =
      check_gradients("corrupted_mul", inputs, eval, {bad}, 1e-5, 1e-4);
  CHECK_FALSE(res.pass);
  CHECK(res.worst_at.find("corrupted_mul") != std::string::npos);
  CHECK(res.worst_at.find("elem 4") != std::string::npos);
}

TEST_CASE("constants receive no gradient and cost no backward work") {
  Tape<double> tape;
  Var c = tape.constant(Tensor<double>::full({3}, 2.0));
  Var x = tape.leaf(Tensor<double>::full({3}, 5.0));
  tape.backward(tape.sum(tape.mul(c, x)));
  CHECK(tape.grad(c).size() == 0);
  for (int i = 0; i < 3; ++i) CHECK(tape.grad(x)[i] == 2.0);
}

TEST_CASE("determinism: identical graph evaluates bit-identically") {
  std::mt19937_64 rng(7);
  Tensor<double> a = randt({4, 4}, rng), b = randt({4, 4}, rng);
  auto run = [&]() {
    Tape<double> tape;
    Var va = tape.leaf(a), vb = tape.leaf(b);
    Var out = tape.sum(tape.sigmoid(tape.matmul(va, vb)));
    tape.backward(out);
    return std::make_pair(tape.val(out)[0], tape.grad(va));
  };
  auto [v1, g1] = run();
  auto [v2, g2] = run();
  CHECK(v1 == v2);
  for (long long i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

}  // TEST_SUITE
