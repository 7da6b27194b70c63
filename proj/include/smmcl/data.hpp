#ifndef SMMCL_DATA_HPP
#define SMMCL_DATA_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "smmcl/sampling.hpp"
#include "smmcl/tensor.hpp"

namespace smmcl {

struct GenConfig {
  int height = 64;
  int width = 64;
  int num_classes = 6;
  int min_shapes = 4;
  int max_shapes = 9;
  double darkness_fraction = 0.5;
  double darkness_floor = 0.05;
  double noise_std = 0.05;
  uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw ArgumentError("num_classes must be >= 2");
    if (darkness_fraction < 0 || darkness_fraction > 1)
      throw ArgumentError("darkness_fraction must be in [0,1]");
    if (min_shapes < 1 || max_shapes < min_shapes)
      throw ArgumentError("bad shapes_per_scene range");
    if (height < 8 || width < 8) throw ArgumentError("scene too small");
  }
};

struct SceneSample {
  Tensor<double> visible;    // [H,W,3] in [0,1]
  Tensor<double> auxiliary;  // [H,W,1] in [0,1]
  LabelMap label;            // [H,W]
};

/// Distinct base color per class, from an HSV wheel.
inline void class_color(int cls, int num_classes, double rgb[3]) {
  double h = 6.0 * cls / num_classes;  // hue sector in [0,6)
  double s = 0.8, v = 0.9;
  int i = static_cast<int>(h) % 6;
  double f = h - static_cast<int>(h);
  double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

/// One deterministic synthetic scene. Class identity lives only in the
/// visible colors; the auxiliary channel is a class-independent pseudo-depth
/// that exposes shape boundaries. A dark rectangle wipes the color signal on
/// `darkness_fraction` of the area.
inline SceneSample generate_scene(const GenConfig& cfg, int index) {
  cfg.validate();
  std::seed_seq seq{cfg.seed, static_cast<uint64_t>(
                                  static_cast<uint64_t>(index) +
                                  0x9E3779B97F4A7C15ull)};
  std::mt19937_64 rng(seq);
  int h = cfg.height, w = cfg.width, c = cfg.num_classes;

  SceneSample s;
  s.visible = Tensor<double>({h, w, 3});
  s.auxiliary = Tensor<double>({h, w, 1});
  s.label = LabelMap(h, w, 0);

  // background: class 0, depth gradient top to bottom
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      s.auxiliary.at(y, x, 0) = 0.05 + 0.15 * y / std::max(1, h - 1);

  // shapes: rectangles and circles, class in [1,C), depth independent of class
  std::uniform_int_distribution<int> n_shapes(cfg.min_shapes, cfg.max_shapes);
  int k = n_shapes(rng);
  std::uniform_int_distribution<int> cls_d(1, c - 1);
  std::uniform_real_distribution<double> depth_d(0.3, 1.0);
  std::uniform_int_distribution<int> kind_d(0, 1);
  for (int i = 0; i < k; ++i) {
    int cls = cls_d(rng);
    double depth = depth_d(rng);
    int kind = kind_d(rng);
    bool placed = false;
    for (int attempt = 0; attempt < 16 && !placed; ++attempt) {
      if (kind == 0) {
        std::uniform_int_distribution<int> sw(w / 8, w / 3), sh(h / 8, h / 3);
        int rw = sw(rng), rh = sh(rng);
        if (rw >= w || rh >= h) continue;
        std::uniform_int_distribution<int> px(0, w - rw), py(0, h - rh);
        int x0 = px(rng), y0 = py(rng);
        for (int y = y0; y < y0 + rh; ++y)
          for (int x = x0; x < x0 + rw; ++x) {
            s.label.at(y, x) = cls;
            s.auxiliary.at(y, x, 0) = depth;
          }
        placed = true;
      } else {
        std::uniform_int_distribution<int> rr(std::min(h, w) / 10, std::min(h, w) / 5);
        int r = rr(rng);
        if (2 * r >= std::min(h, w)) continue;
        std::uniform_int_distribution<int> px(r, w - 1 - r), py(r, h - 1 - r);
        int cx = px(rng), cy = py(rng);
        for (int y = cy - r; y <= cy + r; ++y)
          for (int x = cx - r; x <= cx + r; ++x)
            if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) {
              s.label.at(y, x) = cls;
              s.auxiliary.at(y, x, 0) = depth;
            }
        placed = true;
      }
    }
    if (!placed) throw GenerationError("shape placement failed");
  }

  // visible: class palette + noise
  std::normal_distribution<double> noise(0.0, cfg.noise_std);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double rgb[3];
      class_color(s.label.at(y, x), c, rgb);
      for (int ch = 0; ch < 3; ++ch)
        s.visible.at(y, x, ch) =
            std::clamp(rgb[ch] + noise(rng), 0.0, 1.0);
    }

  // dark mask: rectangle of the requested area fraction
  if (cfg.darkness_fraction > 0) {
    double frac = cfg.darkness_fraction;
    int dw = std::clamp(static_cast<int>(std::lround(w * std::sqrt(frac))), 1, w);
    int dh = std::clamp(static_cast<int>(std::lround(frac * h * w / dw)), 1, h);
    if (frac >= 1.0) {
      dw = w;
      dh = h;
    }
    std::uniform_int_distribution<int> px(0, w - dw), py(0, h - dh);
    int x0 = px(rng), y0 = py(rng);
    // sensor noise dominates the attenuated color, then clamp to the floor
    for (int y = y0; y < y0 + dh; ++y)
      for (int x = x0; x < x0 + dw; ++x)
        for (int ch = 0; ch < 3; ++ch)
          s.visible.at(y, x, ch) =
              std::clamp(s.visible.at(y, x, ch) * cfg.darkness_floor + noise(rng),
                         0.0, cfg.darkness_floor);
  }
  return s;
}

// ---------------------------------------------------------------------------
// On-disk dataset layout: manifest.txt with one id per line, then
// <id>.vis.smt / <id>.aux.smt / <id>.lbl.smt per sample.

inline std::string sample_id(int index) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << index;
  return os.str();
}

inline Tensor<double> label_to_tensor(const LabelMap& lm) {
  Tensor<double> t({lm.h, lm.w});
  for (long long i = 0; i < lm.size(); ++i) t[i] = lm.v[static_cast<size_t>(i)];
  return t;
}

inline LabelMap tensor_to_label(const Tensor<double>& t) {
  if (t.rank() != 2) throw FormatError("label tensor must be rank 2");
  LabelMap lm(t.dim(0), t.dim(1));
  for (long long i = 0; i < t.size(); ++i)
    lm.v[static_cast<size_t>(i)] = static_cast<int>(t[i]);
  return lm;
}

inline void write_dataset(const std::vector<SceneSample>& samples,
                          const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot write manifest in " + dir.string());
  for (size_t i = 0; i < samples.size(); ++i) {
    std::string id = sample_id(static_cast<int>(i));
    write_tensor(dir / (id + ".vis.smt"), samples[i].visible, Dtype::f64);
    write_tensor(dir / (id + ".aux.smt"), samples[i].auxiliary, Dtype::f64);
    write_tensor(dir / (id + ".lbl.smt"), label_to_tensor(samples[i].label),
                 Dtype::f64);
    manifest << id << "\n";
  }
}

inline std::vector<SceneSample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot read manifest in " + dir.string());
  std::vector<SceneSample> out;
  std::string id;
  while (std::getline(manifest, id)) {
    if (id.empty()) continue;
    SceneSample s;
    s.visible = read_tensor<double>(dir / (id + ".vis.smt"));
    s.auxiliary = read_tensor<double>(dir / (id + ".aux.smt"));
    s.label = tensor_to_label(read_tensor<double>(dir / (id + ".lbl.smt")));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace smmcl

#endif  // SMMCL_DATA_HPP
