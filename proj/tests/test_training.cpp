#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "smmcl/training.hpp"

using namespace smmcl;
namespace fs = std::filesystem;

namespace {

GenConfig tiny_gen() {
  GenConfig g;
  g.height = g.width = 32;
  g.num_classes = 4;
  g.min_shapes = 2;
  g.max_shapes = 4;
  g.seed = 21;
  return g;
}

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.height = mc.width = 32;
  mc.stage_channels = {4, 6, 8, 10};
  mc.proj_dim = 8;
  mc.num_classes = 4;
  mc.dec_width = 6;
  return mc;
}

std::vector<SceneSample> scenes(const GenConfig& g, int from, int count) {
  std::vector<SceneSample> out;
  for (int i = 0; i < count; ++i) out.push_back(generate_scene(g, from + i));
  return out;
}

TrainConfig tiny_train(int epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 4;
  tc.base_lr = 1e-3;
  tc.seed = 3;
  return tc;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("poly_lr endpoints and monotonicity") {
  CHECK(poly_lr(0.01, 0, 100, 0.9) == 0.01);
  CHECK(poly_lr(0.01, 100, 100, 0.9) == 0.0);
  double prev = poly_lr(0.01, 0, 100, 0.9);
  for (int i = 1; i <= 100; ++i) {
    double lr = poly_lr(0.01, i, 100, 0.9);
    CHECK(lr < prev);
    prev = lr;
  }
  CHECK(poly_lr(0.01, 50, 100, 1.0) == doctest::Approx(0.005).epsilon(1e-14));
}

TEST_CASE("optimizer single-step hand check") {
  ParamRegistry<double> reg;
  reg.add("p", Tensor<double>({1}, {1.0}));
  TrainConfig tc;
  tc.weight_decay = 0.01;
  AdamW<double> opt(reg, tc);
  std::vector<Tensor<double>> grads{Tensor<double>({1}, {0.5})};
  opt.step(reg, grads, 0.1);

  double m = 0.1 * 0.5;              // (1-beta1)*g
  double v = 0.001 * 0.25;           // (1-beta2)*g^2
  double update = (m / 0.1) / (std::sqrt(v / 0.001) + 1e-8);
  double expect = 1.0 - 0.1 * 0.01 * 1.0 - 0.1 * update;
  CHECK(reg.tensor(0)[0] == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("flip_horizontal mirrors all planes") {
  PreparedSample<double> s;
  s.visible = Tensor<double>({2, 3, 3});
  s.auxiliary = Tensor<double>({2, 3, 1});
  for (long long i = 0; i < s.visible.size(); ++i) s.visible[i] = static_cast<double>(i);
  for (long long i = 0; i < s.auxiliary.size(); ++i) s.auxiliary[i] = static_cast<double>(i);
  s.label = LabelMap(2, 3);
  for (int i = 0; i < 6; ++i) s.label.v[static_cast<size_t>(i)] = i;
  s.label_small = s.label;
  PreparedSample<double> f = flip_horizontal(s);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 3; ++x) {
      for (int c = 0; c < 3; ++c)
        CHECK(f.visible.at(y, x, c) == s.visible.at(y, 2 - x, c));
      CHECK(f.auxiliary.at(y, x, 0) == s.auxiliary.at(y, 2 - x, 0));
      CHECK(f.label.at(y, x) == s.label.at(y, 2 - x));
      CHECK(f.label_small.at(y, x) == s.label_small.at(y, 2 - x));
    }
  PreparedSample<double> ff = flip_horizontal(f);
  for (long long i = 0; i < s.visible.size(); ++i)
    CHECK(ff.visible[i] == s.visible[i]);
}

TEST_CASE("one epoch moves the parameters and records history") {
  GenConfig g = tiny_gen();
  std::vector<SceneSample> tr = scenes(g, 0, 6), ev = scenes(g, 6, 2);
  ModelConfig mc = tiny_model();
  TrainConfig tc = tiny_train(1);
  ParamRegistry<double> init = init_model_params<double>(mc, tc.seed);
  TrainResult<double> res = train<double>(tr, ev, mc, tc);
  REQUIRE(res.history.size() == 1);
  CHECK(res.history[0].loss_ce > 0);
  CHECK(res.history[0].lr > 0);
  CHECK(res.history[0].miou >= 0);
  bool moved = false;
  for (int i = 0; i < init.count() && !moved; ++i)
    for (long long j = 0; j < init.tensor(i).size() && !moved; ++j)
      if (res.params.tensor(i)[j] != init.tensor(i)[j]) moved = true;
  CHECK(moved);
  CHECK(res.params.all_finite());
}

TEST_CASE("disabled contrastive terms are exactly zero in the history") {
  GenConfig g = tiny_gen();
  std::vector<SceneSample> tr = scenes(g, 0, 4);
  ModelConfig mc = tiny_model();
  TrainConfig tc = tiny_train(2);
  tc.use_cm = false;
  tc.use_intra = false;
  TrainResult<double> res = train<double>(tr, {}, mc, tc);
  for (const EpochRecord& r : res.history) {
    CHECK(r.loss_cm == 0.0);
    CHECK(r.loss_vis == 0.0);
    CHECK(r.loss_aux == 0.0);
    CHECK(r.loss_ce > 0.0);
  }
}

TEST_CASE("flag-disabled run matches zero-weight run bitwise") {
  GenConfig g = tiny_gen();
  std::vector<SceneSample> tr = scenes(g, 0, 4);
  ModelConfig mc = tiny_model();

  TrainConfig flags_off = tiny_train(2);
  flags_off.use_cm = false;
  flags_off.use_intra = false;

  TrainConfig zero_lambda = tiny_train(2);
  zero_lambda.contrast.lambda_cm = 0;
  zero_lambda.contrast.lambda_vis = 0;
  zero_lambda.contrast.lambda_aux = 0;

  TrainResult<double> a = train<double>(tr, {}, mc, flags_off);
  TrainResult<double> b = train<double>(tr, {}, mc, zero_lambda);
  REQUIRE(a.params.count() == b.params.count());
  for (int i = 0; i < a.params.count(); ++i)
    for (long long j = 0; j < a.params.tensor(i).size(); ++j)
      CHECK(a.params.tensor(i)[j] == b.params.tensor(i)[j]);
  for (size_t e = 0; e < a.history.size(); ++e)
    CHECK(a.history[e].loss_ce == b.history[e].loss_ce);
}

TEST_CASE("training loss trends downward") {
  GenConfig g = tiny_gen();
  std::vector<SceneSample> tr = scenes(g, 0, 8);
  ModelConfig mc = tiny_model();
  TrainConfig tc = tiny_train(6);
  TrainResult<double> res = train<double>(tr, {}, mc, tc);
  int down = 0;
  for (size_t e = 1; e < res.history.size(); ++e)
    if (res.history[e].loss_ce <= res.history[e - 1].loss_ce) ++down;
  CHECK(down >= 4);  // allow one noisy transition
  CHECK(res.history.back().loss_ce < res.history.front().loss_ce);
}

TEST_CASE("training is bitwise deterministic") {
  GenConfig g = tiny_gen();
  std::vector<SceneSample> tr = scenes(g, 0, 5), ev = scenes(g, 5, 2);
  ModelConfig mc = tiny_model();
  TrainConfig tc = tiny_train(2);
  TrainResult<double> a = train<double>(tr, ev, mc, tc);
  TrainResult<double> b = train<double>(tr, ev, mc, tc);
  for (int i = 0; i < a.params.count(); ++i)
    for (long long j = 0; j < a.params.tensor(i).size(); ++j)
      CHECK(a.params.tensor(i)[j] == b.params.tensor(i)[j]);
  REQUIRE(a.history.size() == b.history.size());
  for (size_t e = 0; e < a.history.size(); ++e) {
    CHECK(a.history[e].loss_ce == b.history[e].loss_ce);
    CHECK(a.history[e].loss_cm == b.history[e].loss_cm);
    CHECK(a.history[e].miou == b.history[e].miou);
    CHECK(a.history[e].separability == b.history[e].separability);
  }
}

TEST_CASE("history csv round trips through the expected layout") {
  std::vector<EpochRecord> hist(2);
  hist[0].epoch = 0;
  hist[0].loss_ce = 1.5;
  hist[1].epoch = 1;
  hist[1].loss_ce = 1.25;
  fs::path p = fs::temp_directory_path() / "smmcl_hist_test.csv";
  write_history_csv(p, hist);
  std::ifstream f(p);
  std::string line;
  REQUIRE(std::getline(f, line));
  CHECK(line == "epoch,loss_ce,loss_cm,loss_vis,loss_aux,miou,separability,lr");
  int rows = 0;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);
  fs::remove(p);
}

TEST_CASE("ablation matrix covers the four variants") {
  GenConfig g = tiny_gen();
  std::vector<SceneSample> tr = scenes(g, 0, 4), ev = scenes(g, 4, 2);
  ModelConfig mc = tiny_model();
  TrainConfig tc = tiny_train(1);
  std::vector<AblationRow> rows = ablation_matrix<double>(tr, ev, mc, tc, {7});
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].variant == "model1");
  CHECK(rows[1].variant == "model2");
  CHECK(rows[2].variant == "model3");
  CHECK(rows[3].variant == "model4");
  for (const AblationRow& r : rows) {
    CHECK(r.seed == 7);
    CHECK(r.miou >= 0.0);
    CHECK(r.miou <= 1.0);
    CHECK(std::abs(r.separability) <= 1.0);
  }
  CHECK_THROWS_AS(ablation_matrix<double>(tr, ev, mc, tc, {}), ArgumentError);
}

TEST_CASE("invalid configurations are rejected before training") {
  GenConfig g = tiny_gen();
  std::vector<SceneSample> tr = scenes(g, 0, 2);
  ModelConfig mc = tiny_model();
  TrainConfig tc = tiny_train(0);
  CHECK_THROWS_AS(train<double>(tr, {}, mc, tc), ArgumentError);
  tc = tiny_train(1);
  tc.base_lr = 0;
  CHECK_THROWS_AS(train<double>(tr, {}, mc, tc), ArgumentError);
  tc = tiny_train(1);
  CHECK_THROWS_AS(train<double>({}, {}, mc, tc), ArgumentError);
}

}  // TEST_SUITE
