#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "smmcl/config.hpp"

using namespace smmcl;
namespace fs = std::filesystem;

TEST_SUITE("config") {

TEST_CASE("defaults are valid and geometry syncs into sub-configs") {
  RunConfig c;
  c.sync();
  CHECK_NOTHROW(c.validate());
  c.height = 32;
  c.width = 32;
  c.num_classes = 4;
  c.sync();
  CHECK(c.gen.height == 32);
  CHECK(c.model.width == 32);
  CHECK(c.model.num_classes == 4);
  CHECK(c.gen.num_classes == 4);
}

TEST_CASE("round trip preserves every field") {
  RunConfig c;
  c.height = c.width = 32;
  c.num_classes = 4;
  c.n_train = 12;
  c.n_eval = 3;
  c.precision = "f64";
  c.gen.min_shapes = 2;
  c.gen.max_shapes = 5;
  c.gen.darkness_fraction = 0.33;
  c.gen.darkness_floor = 0.07;
  c.gen.noise_std = 0.021;
  c.gen.seed = 991;
  c.model.stage_channels = {4, 6, 8, 10};
  c.model.proj_dim = 16;
  c.model.dec_width = 12;
  c.model.project_updated = true;
  c.train.epochs = 9;
  c.train.batch_size = 3;
  c.train.base_lr = 0.00175;
  c.train.poly_power = 0.8;
  c.train.weight_decay = 0.02;
  c.train.beta1 = 0.85;
  c.train.beta2 = 0.995;
  c.train.adam_eps = 1e-7;
  c.train.use_cm = false;
  c.train.use_intra = true;
  c.train.seed = 1234567890123ull;
  c.train.n_max = 99;
  c.train.augment_flip = true;
  c.train.eval_every = 4;
  c.train.contrast.tau = 0.5;
  c.train.contrast.lambda_cm = 0.11;
  c.train.contrast.lambda_vis = 0.12;
  c.train.contrast.lambda_aux = 0.13;
  c.train.contrast.normalize_embeddings = false;
  c.train.contrast.symmetrize_cm = true;
  c.sync();

  fs::path p = fs::temp_directory_path() / "smmcl_config_test.ini";
  write_run_config(p, c);
  RunConfig b = read_run_config(p);
  fs::remove(p);

  CHECK(b.height == c.height);
  CHECK(b.width == c.width);
  CHECK(b.num_classes == c.num_classes);
  CHECK(b.n_train == c.n_train);
  CHECK(b.n_eval == c.n_eval);
  CHECK(b.precision == c.precision);
  CHECK(b.gen.min_shapes == c.gen.min_shapes);
  CHECK(b.gen.max_shapes == c.gen.max_shapes);
  CHECK(b.gen.darkness_fraction == c.gen.darkness_fraction);
  CHECK(b.gen.darkness_floor == c.gen.darkness_floor);
  CHECK(b.gen.noise_std == c.gen.noise_std);
  CHECK(b.gen.seed == c.gen.seed);
  CHECK(b.gen.height == c.height);  // geometry resynced on load
  CHECK(b.model.stage_channels == c.model.stage_channels);
  CHECK(b.model.proj_dim == c.model.proj_dim);
  CHECK(b.model.dec_width == c.model.dec_width);
  CHECK(b.model.project_updated == c.model.project_updated);
  CHECK(b.train.epochs == c.train.epochs);
  CHECK(b.train.batch_size == c.train.batch_size);
  CHECK(b.train.base_lr == c.train.base_lr);
  CHECK(b.train.poly_power == c.train.poly_power);
  CHECK(b.train.weight_decay == c.train.weight_decay);
  CHECK(b.train.beta1 == c.train.beta1);
  CHECK(b.train.beta2 == c.train.beta2);
  CHECK(b.train.adam_eps == c.train.adam_eps);
  CHECK(b.train.use_cm == c.train.use_cm);
  CHECK(b.train.use_intra == c.train.use_intra);
  CHECK(b.train.seed == c.train.seed);
  CHECK(b.train.n_max == c.train.n_max);
  CHECK(b.train.augment_flip == c.train.augment_flip);
  CHECK(b.train.eval_every == c.train.eval_every);
  CHECK(b.train.contrast.tau == c.train.contrast.tau);
  CHECK(b.train.contrast.lambda_cm == c.train.contrast.lambda_cm);
  CHECK(b.train.contrast.lambda_vis == c.train.contrast.lambda_vis);
  CHECK(b.train.contrast.lambda_aux == c.train.contrast.lambda_aux);
  CHECK(b.train.contrast.normalize_embeddings ==
        c.train.contrast.normalize_embeddings);
  CHECK(b.train.contrast.symmetrize_cm == c.train.contrast.symmetrize_cm);
}

TEST_CASE("comments and missing keys fall back to defaults") {
  fs::path p = fs::temp_directory_path() / "smmcl_config_partial.ini";
  {
    std::ofstream f(p);
    f << "# comment line\n";
    f << "height = 32  # trailing comment\n";
    f << "width = 32\n";
    f << "\n";
    f << "train.epochs = 5\n";
  }
  RunConfig c = read_run_config(p);
  fs::remove(p);
  CHECK(c.height == 32);
  CHECK(c.width == 32);
  CHECK(c.train.epochs == 5);
  RunConfig d;
  CHECK(c.num_classes == d.num_classes);
  CHECK(c.train.base_lr == d.train.base_lr);
  CHECK(c.train.contrast.tau == d.train.contrast.tau);
}

TEST_CASE("validation failures") {
  RunConfig c;
  c.sync();
  c.precision = "f16";
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = RunConfig{};
  c.sync();
  c.n_train = 0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c = RunConfig{};
  c.height = 30;  // not divisible by 16
  c.sync();
  CHECK_THROWS_AS(c.validate(), ShapeError);
  CHECK_THROWS_AS(read_run_config("/nonexistent/smmcl.ini"), IoError);
}

}  // TEST_SUITE
