#ifndef SMMCL_MODEL_HPP
#define SMMCL_MODEL_HPP

#include <array>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "smmcl/fusion.hpp"
#include "smmcl/tape.hpp"
#include "smmcl/tensor.hpp"

namespace smmcl {

struct ModelConfig {
  std::array<int, 4> stage_channels{8, 16, 32, 64};
  int proj_dim = 32;
  int num_classes = 6;
  int height = 64;
  int width = 64;
  int dec_width = 16;
  bool project_updated = false;  // projectors read F4 (default) or F4'

  void validate() const {
    if (num_classes < 2) throw ArgumentError("num_classes must be >= 2");
    if (height % 16 || width % 16)
      throw ShapeError("input dims must be divisible by 16");
    for (int i = 1; i < 4; ++i)
      if (stage_channels[static_cast<size_t>(i)] <= stage_channels[static_cast<size_t>(i - 1)])
        throw ArgumentError("stage_channels must be strictly increasing");
    if (proj_dim <= 0 || dec_width <= 0)
      throw ArgumentError("proj_dim and dec_width must be positive");
  }
};

/// Flat named registry of every learnable tensor, in a fixed insertion order.
template <typename T>
class ParamRegistry {
 public:
  int add(std::string name, Tensor<T> t) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter " + name);
    index_[name] = static_cast<int>(items_.size());
    items_.push_back({std::move(name), std::move(t)});
    return static_cast<int>(items_.size()) - 1;
  }

  int count() const { return static_cast<int>(items_.size()); }
  const std::string& name(int i) const { return items_[static_cast<size_t>(i)].first; }
  Tensor<T>& tensor(int i) { return items_[static_cast<size_t>(i)].second; }
  const Tensor<T>& tensor(int i) const { return items_[static_cast<size_t>(i)].second; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter " + name);
    return items_[static_cast<size_t>(it->second)].second;
  }

  long long count_params() const {
    long long n = 0;
    for (auto& [k, t] : items_) n += t.size();
    return n;
  }

  bool all_finite() const {
    for (auto& [k, t] : items_)
      if (!t.all_finite()) return false;
    return true;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, int> index_;
};

namespace detail {

template <typename T>
Tensor<T> kaiming_uniform(std::vector<int> dims, int fan_in, std::mt19937_64& rng) {
  double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> d(-bound, bound);
  Tensor<T> t(std::move(dims));
  for (long long i = 0; i < t.size(); ++i) t[i] = static_cast<T>(d(rng));
  return t;
}

template <typename T>
void add_linear(ParamRegistry<T>& reg, std::mt19937_64& rng,
                const std::string& prefix, int in, int out) {
  reg.add(prefix + ".w", kaiming_uniform<T>({in, out}, in, rng));
  reg.add(prefix + ".b", Tensor<T>::zeros({out}));
}

template <typename T>
void add_conv(ParamRegistry<T>& reg, std::mt19937_64& rng,
              const std::string& prefix, int k, int ci, int co) {
  reg.add(prefix + ".w", kaiming_uniform<T>({k, k, ci, co}, k * k * ci, rng));
  reg.add(prefix + ".b", Tensor<T>::zeros({co}));
}

}  // namespace detail

template <typename T>
ParamRegistry<T> init_model_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamRegistry<T> reg;
  std::mt19937_64 rng(seed);
  auto sc = cfg.stage_channels;
  for (const char* mod : {"vis", "aux"}) {
    int cin = mod[0] == 'v' ? 3 : 1;
    for (int s = 0; s < 4; ++s) {
      std::string p = std::string("enc.") + mod + ".s" + std::to_string(s + 1);
      detail::add_conv(reg, rng, p + ".conv1", 3, cin, sc[static_cast<size_t>(s)]);
      detail::add_conv(reg, rng, p + ".conv2", 3, sc[static_cast<size_t>(s)], sc[static_cast<size_t>(s)]);
      cin = sc[static_cast<size_t>(s)];
    }
  }
  for (int s = 0; s < 4; ++s) {
    int c = sc[static_cast<size_t>(s)];
    std::string p = "fus.s" + std::to_string(s + 1);
    detail::add_linear(reg, rng, p + ".spatial.l1", 2 * c, 2 * c);
    detail::add_linear(reg, rng, p + ".spatial.l2", 2 * c, 2 * c);
    detail::add_linear(reg, rng, p + ".spatial.l3", 2 * c, 1);
    detail::add_linear(reg, rng, p + ".channel.l1", 4 * c, 4 * c);
    detail::add_linear(reg, rng, p + ".channel.l2", 4 * c, 4 * c);
    detail::add_linear(reg, rng, p + ".channel.l3", 4 * c, c);
    detail::add_linear(reg, rng, p + ".fuse", 2 * c, c);
  }
  int c4 = sc[3];
  for (const char* mod : {"vis", "aux"}) {
    std::string p = std::string("proj.") + mod;
    detail::add_linear(reg, rng, p + ".l1", c4, c4);
    detail::add_linear(reg, rng, p + ".l2", c4, c4);
    detail::add_linear(reg, rng, p + ".l3", c4, cfg.proj_dim);
  }
  for (int s = 0; s < 4; ++s)
    detail::add_linear(reg, rng, "dec.lat" + std::to_string(s + 1),
                       sc[static_cast<size_t>(s)], cfg.dec_width);
  detail::add_conv(reg, rng, "dec.mid", 3, cfg.dec_width, cfg.dec_width);
  detail::add_linear(reg, rng, "dec.out", cfg.dec_width, cfg.num_classes);
  return reg;
}

/// Registry bound onto one tape as leaves, in registry order.
template <typename T>
struct BoundParams {
  std::vector<Var> vars;
  std::unordered_map<std::string, Var> by_name;

  Var operator[](const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ArgumentError("unbound parameter " + name);
    return it->second;
  }
};

template <typename T>
BoundParams<T> bind_params(Tape<T>& tape, const ParamRegistry<T>& reg,
                           bool requires_grad = true) {
  BoundParams<T> b;
  b.vars.reserve(static_cast<size_t>(reg.count()));
  for (int i = 0; i < reg.count(); ++i) {
    Var v = tape.leaf(reg.tensor(i), requires_grad, reg.name(i));
    b.vars.push_back(v);
    b.by_name[reg.name(i)] = v;
  }
  return b;
}

template <typename T>
FusionVars fusion_vars(const BoundParams<T>& p, int stage) {
  std::string pre = "fus.s" + std::to_string(stage);
  FusionVars f;
  f.sw1 = p[pre + ".spatial.l1.w"];
  f.sb1 = p[pre + ".spatial.l1.b"];
  f.sw2 = p[pre + ".spatial.l2.w"];
  f.sb2 = p[pre + ".spatial.l2.b"];
  f.sw3 = p[pre + ".spatial.l3.w"];
  f.sb3 = p[pre + ".spatial.l3.b"];
  f.cw1 = p[pre + ".channel.l1.w"];
  f.cb1 = p[pre + ".channel.l1.b"];
  f.cw2 = p[pre + ".channel.l2.w"];
  f.cb2 = p[pre + ".channel.l2.b"];
  f.cw3 = p[pre + ".channel.l3.w"];
  f.cb3 = p[pre + ".channel.l3.b"];
  f.fw = p[pre + ".fuse.w"];
  f.fb = p[pre + ".fuse.b"];
  return f;
}

/// One encoder stage: stride-2 3x3 conv + ReLU, stride-1 3x3 conv + ReLU.
template <typename T>
Var encode_stage(Tape<T>& tape, Var x, const BoundParams<T>& p,
                 const std::string& prefix) {
  Var h = tape.conv2d(x, p[prefix + ".conv1.w"], p[prefix + ".conv1.b"], 2,
                      /*relu_after=*/true);
  return tape.conv2d(h, p[prefix + ".conv2.w"], p[prefix + ".conv2.b"], 1,
                     /*relu_after=*/true);
}

template <typename T>
struct ForwardOut {
  Var logits;  // [H,W,C] (batched: [B,H,W,C])
  Var r_vis;   // [h,w,d], h=H/16 (batched: [B,h,w,d])
  Var r_aux;   // [h,w,d]
};

/// Full model forward over a stacked minibatch: vis [B,H,W,3], aux [B,H,W,1].
template <typename T>
ForwardOut<T> model_forward_batched(Tape<T>& tape, const Tensor<T>& vis,
                                    const Tensor<T>& aux,
                                    const BoundParams<T>& p,
                                    const ModelConfig& cfg) {
  cfg.validate();
  if (vis.rank() != 4 || vis.dim(3) != 3)
    throw ShapeError("visible input must be [B,H,W,3]");
  if (aux.rank() != 4 || aux.dim(3) != 1)
    throw ShapeError("auxiliary input must be [B,H,W,1]");
  if (vis.dim(0) != aux.dim(0)) throw ShapeError("batch size mismatch");
  if (vis.dim(1) != cfg.height || vis.dim(2) != cfg.width ||
      aux.dim(1) != cfg.height || aux.dim(2) != cfg.width)
    throw ShapeError("input dims do not match model config");

  Var fv = tape.constant(vis, "input.vis");
  Var fa = tape.constant(aux, "input.aux");
  std::array<Var, 4> fused{};
  Var pre_vis4, pre_aux4, upd_vis4, upd_aux4;
  for (int s = 1; s <= 4; ++s) {
    fv = encode_stage(tape, fv, p, "enc.vis.s" + std::to_string(s));
    fa = encode_stage(tape, fa, p, "enc.aux.s" + std::to_string(s));
    if (s == 4) {
      pre_vis4 = fv;
      pre_aux4 = fa;
    }
    FusionOut<T> fo = fusion_forward(tape, fv, fa, fusion_vars(p, s));
    fused[static_cast<size_t>(s - 1)] = fo.fused;
    fv = fo.upd_vis;
    fa = fo.upd_aux;
    if (s == 4) {
      upd_vis4 = fv;
      upd_aux4 = fa;
    }
  }

  // decoder: project each fusion feature to a common width, upsample to H/4,
  // sum, 3x3 conv, upsample to full resolution, classify per pixel
  int qh = cfg.height / 4, qw = cfg.width / 4;
  Var acc;
  for (int s = 1; s <= 4; ++s) {
    Var f = fused[static_cast<size_t>(s - 1)];
    const Tensor<T>& fvv = tape.val(f);
    int h = fvv.dim(1), w = fvv.dim(2);
    std::string lat = "dec.lat" + std::to_string(s);
    Var proj = tape.linear(f, p[lat + ".w"], p[lat + ".b"]);
    Var up = (h == qh && w == qw) ? proj : tape.upsample_bilinear(proj, qh, qw);
    acc = (s == 1) ? up : tape.add(acc, up);
  }
  Var mid = tape.conv2d(acc, p["dec.mid.w"], p["dec.mid.b"], 1,
                        /*relu_after=*/true);
  Var full = tape.upsample_bilinear(mid, cfg.height, cfg.width);
  Var logits = tape.linear(full, p["dec.out.w"], p["dec.out.b"]);

  // projectors: two-layer MLP + linear map, per pixel on stage-4 features
  auto project = [&](Var f, const std::string& pre) {
    Var h1 = tape.linear(f, p[pre + ".l1.w"], p[pre + ".l1.b"], true);
    Var h2 = tape.linear(h1, p[pre + ".l2.w"], p[pre + ".l2.b"], true);
    return tape.linear(h2, p[pre + ".l3.w"], p[pre + ".l3.b"]);
  };
  ForwardOut<T> out;
  out.logits = logits;
  out.r_vis = project(cfg.project_updated ? upd_vis4 : pre_vis4, "proj.vis");
  out.r_aux = project(cfg.project_updated ? upd_aux4 : pre_aux4, "proj.aux");
  return out;
}

/// Full model forward for one sample pair. Arithmetic is identical to a
/// single-row batched call, so per-sample and batched results agree bitwise.
template <typename T>
ForwardOut<T> model_forward(Tape<T>& tape, const Tensor<T>& vis,
                            const Tensor<T>& aux, const BoundParams<T>& p,
                            const ModelConfig& cfg) {
  if (vis.rank() != 3 || vis.dim(2) != 3)
    throw ShapeError("visible input must be [H,W,3]");
  if (aux.rank() != 3 || aux.dim(2) != 1)
    throw ShapeError("auxiliary input must be [H,W,1]");
  ForwardOut<T> b = model_forward_batched(
      tape, vis.reshaped({1, vis.dim(0), vis.dim(1), 3}),
      aux.reshaped({1, aux.dim(0), aux.dim(1), 1}), p, cfg);
  int hs = cfg.height / 16, ws = cfg.width / 16;
  ForwardOut<T> out;
  out.logits = tape.reshape(b.logits, {cfg.height, cfg.width, cfg.num_classes});
  out.r_vis = tape.reshape(b.r_vis, {hs, ws, cfg.proj_dim});
  out.r_aux = tape.reshape(b.r_aux, {hs, ws, cfg.proj_dim});
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: one tensor file per parameter plus a manifest and the config.

inline void write_model_config(const std::filesystem::path& path,
                               const ModelConfig& cfg) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << "stage_channels = " << cfg.stage_channels[0] << ","
    << cfg.stage_channels[1] << "," << cfg.stage_channels[2] << ","
    << cfg.stage_channels[3] << "\n";
  f << "proj_dim = " << cfg.proj_dim << "\n";
  f << "num_classes = " << cfg.num_classes << "\n";
  f << "height = " << cfg.height << "\n";
  f << "width = " << cfg.width << "\n";
  f << "dec_width = " << cfg.dec_width << "\n";
  f << "project_updated = " << (cfg.project_updated ? 1 : 0) << "\n";
}

inline ModelConfig read_model_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  ModelConfig cfg;
  std::string line;
  while (std::getline(f, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    std::string val = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
    };
    trim(key);
    trim(val);
    if (key == "stage_channels") {
      std::istringstream is(val);
      std::string tok;
      for (int i = 0; i < 4 && std::getline(is, tok, ','); ++i)
        cfg.stage_channels[static_cast<size_t>(i)] = std::stoi(tok);
    } else if (key == "proj_dim")
      cfg.proj_dim = std::stoi(val);
    else if (key == "num_classes")
      cfg.num_classes = std::stoi(val);
    else if (key == "height")
      cfg.height = std::stoi(val);
    else if (key == "width")
      cfg.width = std::stoi(val);
    else if (key == "dec_width")
      cfg.dec_width = std::stoi(val);
    else if (key == "project_updated")
      cfg.project_updated = std::stoi(val) != 0;
  }
  return cfg;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir,
                     const ParamRegistry<T>& reg, const ModelConfig& cfg) {
  namespace fs = std::filesystem;
  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  std::ofstream manifest(tmp / "manifest.txt");
  if (!manifest) throw IoError("cannot write checkpoint manifest");
  for (int i = 0; i < reg.count(); ++i) {
    std::string file = reg.name(i) + ".smt";
    write_tensor(tmp / file, reg.tensor(i));
    manifest << reg.name(i) << " " << file << "\n";
  }
  manifest.close();
  write_model_config(tmp / "model.ini", cfg);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

template <typename T>
std::pair<ParamRegistry<T>, ModelConfig> load_checkpoint(
    const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "manifest.txt"))
    throw IoError("no checkpoint manifest in " + dir.string());
  ModelConfig cfg = read_model_config(dir / "model.ini");
  ParamRegistry<T> reg;
  std::ifstream manifest(dir / "manifest.txt");
  std::string name, file;
  while (manifest >> name >> file) reg.add(name, read_tensor<T>(dir / file));
  if (reg.count() == 0) throw FormatError("empty checkpoint " + dir.string());
  return {std::move(reg), cfg};
}

}  // namespace smmcl

#endif  // SMMCL_MODEL_HPP
