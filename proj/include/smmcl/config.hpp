#ifndef SMMCL_CONFIG_HPP
#define SMMCL_CONFIG_HPP

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "smmcl/data.hpp"
#include "smmcl/model.hpp"
#include "smmcl/training.hpp"

namespace smmcl {

/// Everything needed to re-create a run: generation, model, and training
/// settings plus shared geometry. Serialized as editable key=value lines;
/// every field has a default and command-line flags override file values.
struct RunConfig {
  int height = 64;
  int width = 64;
  int num_classes = 6;
  int n_train = 1000;
  int n_eval = 200;
  std::string precision = "f32";  // training precision; verification is f64
  GenConfig gen;
  ModelConfig model;
  TrainConfig train;

  /// Push the shared geometry into the sub-configs.
  void sync() {
    gen.height = height;
    gen.width = width;
    gen.num_classes = num_classes;
    model.height = height;
    model.width = width;
    model.num_classes = num_classes;
  }

  void validate() const {
    if (n_train < 1 || n_eval < 0) throw ArgumentError("bad sample counts");
    if (precision != "f32" && precision != "f64")
      throw ArgumentError("precision must be f32 or f64");
    gen.validate();
    model.validate();
    train.validate();
  }
};

inline void write_run_config(const std::filesystem::path& path,
                             const RunConfig& c) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f.precision(17);
  f << "height = " << c.height << "\n";
  f << "width = " << c.width << "\n";
  f << "num_classes = " << c.num_classes << "\n";
  f << "n_train = " << c.n_train << "\n";
  f << "n_eval = " << c.n_eval << "\n";
  f << "precision = " << c.precision << "\n";
  f << "gen.min_shapes = " << c.gen.min_shapes << "\n";
  f << "gen.max_shapes = " << c.gen.max_shapes << "\n";
  f << "gen.darkness_fraction = " << c.gen.darkness_fraction << "\n";
  f << "gen.darkness_floor = " << c.gen.darkness_floor << "\n";
  f << "gen.noise_std = " << c.gen.noise_std << "\n";
  f << "gen.seed = " << c.gen.seed << "\n";
  f << "model.stage_channels = " << c.model.stage_channels[0] << ","
    << c.model.stage_channels[1] << "," << c.model.stage_channels[2] << ","
    << c.model.stage_channels[3] << "\n";
  f << "model.proj_dim = " << c.model.proj_dim << "\n";
  f << "model.dec_width = " << c.model.dec_width << "\n";
  f << "model.project_updated = " << (c.model.project_updated ? 1 : 0) << "\n";
  f << "train.epochs = " << c.train.epochs << "\n";
  f << "train.batch_size = " << c.train.batch_size << "\n";
  f << "train.base_lr = " << c.train.base_lr << "\n";
  f << "train.poly_power = " << c.train.poly_power << "\n";
  f << "train.weight_decay = " << c.train.weight_decay << "\n";
  f << "train.beta1 = " << c.train.beta1 << "\n";
  f << "train.beta2 = " << c.train.beta2 << "\n";
  f << "train.adam_eps = " << c.train.adam_eps << "\n";
  f << "train.use_cm = " << (c.train.use_cm ? 1 : 0) << "\n";
  f << "train.use_intra = " << (c.train.use_intra ? 1 : 0) << "\n";
  f << "train.seed = " << c.train.seed << "\n";
  f << "train.n_max = " << c.train.n_max << "\n";
  f << "train.augment_flip = " << (c.train.augment_flip ? 1 : 0) << "\n";
  f << "train.eval_every = " << c.train.eval_every << "\n";
  f << "contrast.tau = " << c.train.contrast.tau << "\n";
  f << "contrast.lambda_cm = " << c.train.contrast.lambda_cm << "\n";
  f << "contrast.lambda_vis = " << c.train.contrast.lambda_vis << "\n";
  f << "contrast.lambda_aux = " << c.train.contrast.lambda_aux << "\n";
  f << "contrast.normalize_embeddings = "
    << (c.train.contrast.normalize_embeddings ? 1 : 0) << "\n";
  f << "contrast.symmetrize_cm = " << (c.train.contrast.symmetrize_cm ? 1 : 0)
    << "\n";
  if (!f) throw IoError("write failed: " + path.string());
}

inline RunConfig read_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(f, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
      return s;
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  RunConfig c;
  auto geti = [&](const std::string& k, int& dst) {
    if (kv.count(k)) dst = std::stoi(kv[k]);
  };
  auto getu = [&](const std::string& k, uint64_t& dst) {
    if (kv.count(k)) dst = std::stoull(kv[k]);
  };
  auto getd = [&](const std::string& k, double& dst) {
    if (kv.count(k)) dst = std::stod(kv[k]);
  };
  auto getb = [&](const std::string& k, bool& dst) {
    if (kv.count(k)) dst = std::stoi(kv[k]) != 0;
  };
  geti("height", c.height);
  geti("width", c.width);
  geti("num_classes", c.num_classes);
  geti("n_train", c.n_train);
  geti("n_eval", c.n_eval);
  if (kv.count("precision")) c.precision = kv["precision"];
  geti("gen.min_shapes", c.gen.min_shapes);
  geti("gen.max_shapes", c.gen.max_shapes);
  getd("gen.darkness_fraction", c.gen.darkness_fraction);
  getd("gen.darkness_floor", c.gen.darkness_floor);
  getd("gen.noise_std", c.gen.noise_std);
  getu("gen.seed", c.gen.seed);
  if (kv.count("model.stage_channels")) {
    std::istringstream is(kv["model.stage_channels"]);
    std::string tok;
    for (int i = 0; i < 4 && std::getline(is, tok, ','); ++i)
      c.model.stage_channels[static_cast<size_t>(i)] = std::stoi(tok);
  }
  geti("model.proj_dim", c.model.proj_dim);
  geti("model.dec_width", c.model.dec_width);
  getb("model.project_updated", c.model.project_updated);
  geti("train.epochs", c.train.epochs);
  geti("train.batch_size", c.train.batch_size);
  getd("train.base_lr", c.train.base_lr);
  getd("train.poly_power", c.train.poly_power);
  getd("train.weight_decay", c.train.weight_decay);
  getd("train.beta1", c.train.beta1);
  getd("train.beta2", c.train.beta2);
  getd("train.adam_eps", c.train.adam_eps);
  getb("train.use_cm", c.train.use_cm);
  getb("train.use_intra", c.train.use_intra);
  getu("train.seed", c.train.seed);
  geti("train.n_max", c.train.n_max);
  getb("train.augment_flip", c.train.augment_flip);
  geti("train.eval_every", c.train.eval_every);
  getd("contrast.tau", c.train.contrast.tau);
  getd("contrast.lambda_cm", c.train.contrast.lambda_cm);
  getd("contrast.lambda_vis", c.train.contrast.lambda_vis);
  getd("contrast.lambda_aux", c.train.contrast.lambda_aux);
  getb("contrast.normalize_embeddings", c.train.contrast.normalize_embeddings);
  getb("contrast.symmetrize_cm", c.train.contrast.symmetrize_cm);
  c.sync();
  return c;
}

}  // namespace smmcl

#endif  // SMMCL_CONFIG_HPP
