#ifndef SMMCL_SAMPLING_HPP
#define SMMCL_SAMPLING_HPP

#include <algorithm>
#include <map>
#include <random>
#include <vector>

#include "smmcl/tape.hpp"
#include "smmcl/tensor.hpp"

namespace smmcl {

constexpr int kIgnoreLabel = 255;

/// Per-pixel integer class map. Values in [0,C) plus the ignore sentinel.
struct LabelMap {
  int h = 0;
  int w = 0;
  std::vector<int> v;

  LabelMap() = default;
  LabelMap(int h_, int w_, int fill = 0)
      : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

  int& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  int at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
  long long size() const { return static_cast<long long>(v.size()); }

  bool operator==(const LabelMap& o) const {
    return h == o.h && w == o.w && v == o.v;
  }
};

enum class Modality { visible, auxiliary };

inline const char* modality_name(Modality m) {
  return m == Modality::visible ? "visible" : "auxiliary";
}

/// Where an embedding came from: batch instance and flattened spatial index.
struct SourcePos {
  int batch = 0;
  int pos = 0;
  int label = 0;
};

template <typename T>
struct EmbeddingSet {
  Tensor<T> embeddings;  // [N, d]
  std::vector<int> labels;
  Modality modality = Modality::visible;
  std::vector<SourcePos> sources;

  int count() const { return static_cast<int>(labels.size()); }
};

/// Nearest-neighbor label subsampling; source index floor((i+0.5)*H/h).
inline LabelMap downscale_labels(const LabelMap& in, int th, int tw) {
  if (th > in.h || tw > in.w || th <= 0 || tw <= 0)
    throw ShapeError("downscale target larger than source");
  LabelMap out(th, tw);
  for (int y = 0; y < th; ++y) {
    int sy = static_cast<int>((y + 0.5) * in.h / th);
    for (int x = 0; x < tw; ++x) {
      int sx = static_cast<int>((x + 0.5) * in.w / tw);
      out.at(y, x) = in.at(sy, sx);
    }
  }
  return out;
}

/// Per-batch embedding budget: the pixel count of the scarcest present class,
/// clamped to n_max.
inline int compute_n(const std::vector<LabelMap>& labels, int n_max = 256) {
  std::map<int, long long> counts;
  for (const LabelMap& lm : labels)
    for (int c : lm.v)
      if (c != kIgnoreLabel) ++counts[c];
  if (counts.empty()) throw EmptyBatchError("batch is entirely ignore-labeled");
  long long n = counts.begin()->second;
  for (auto& [c, k] : counts) n = std::min(n, k);
  return static_cast<int>(std::min<long long>(n, n_max));
}

/// Uniform without-replacement position draw: for each instance and each
/// class present in that instance, min(n, available) positions.
inline std::vector<SourcePos> sample_positions(const std::vector<LabelMap>& labels,
                                               int n, std::mt19937_64& rng) {
  if (n <= 0) throw ArgumentError("sample count n must be positive");
  std::vector<SourcePos> out;
  for (size_t b = 0; b < labels.size(); ++b) {
    const LabelMap& lm = labels[b];
    std::map<int, std::vector<int>> by_class;
    for (int i = 0; i < lm.size(); ++i) {
      int c = lm.v[static_cast<size_t>(i)];
      if (c != kIgnoreLabel) by_class[c].push_back(i);
    }
    for (auto& [c, positions] : by_class) {
      int take = std::min<int>(n, static_cast<int>(positions.size()));
      // partial Fisher-Yates, then sorted for a stable output order
      for (int i = 0; i < take; ++i) {
        std::uniform_int_distribution<int> d(i, static_cast<int>(positions.size()) - 1);
        std::swap(positions[static_cast<size_t>(i)], positions[static_cast<size_t>(d(rng))]);
      }
      positions.resize(static_cast<size_t>(take));
      std::sort(positions.begin(), positions.end());
      for (int p : positions)
        out.push_back(SourcePos{static_cast<int>(b), p, c});
    }
  }
  return out;
}

/// Balanced embedding sampling from representations [B,h,w,d].
template <typename T>
EmbeddingSet<T> sample_embeddings(const Tensor<T>& reps,
                                  const std::vector<LabelMap>& labels, int n,
                                  Modality modality, uint64_t seed,
                                  bool normalize = true) {
  if (reps.rank() != 4) throw ShapeError("sample_embeddings expects [B,h,w,d]");
  int bsz = reps.dim(0), h = reps.dim(1), w = reps.dim(2), d = reps.dim(3);
  if (static_cast<int>(labels.size()) != bsz)
    throw ShapeError("label batch size mismatch");
  for (const LabelMap& lm : labels)
    if (lm.h != h || lm.w != w)
      throw ShapeError("labels not aligned with representations");
  std::mt19937_64 rng(seed);
  std::vector<SourcePos> srcs = sample_positions(labels, n, rng);

  if (srcs.empty()) throw EmptyBatchError("no sampleable positions in batch");
  EmbeddingSet<T> set;
  set.modality = modality;
  set.sources = srcs;
  set.embeddings = Tensor<T>({static_cast<int>(srcs.size()), d});
  for (size_t r = 0; r < srcs.size(); ++r) {
    const T* src = reps.data() +
                   ((static_cast<long long>(srcs[r].batch) * h * w) + srcs[r].pos) * d;
    std::copy_n(src, d, set.embeddings.data() + static_cast<long long>(r) * d);
    set.labels.push_back(srcs[r].label);
  }
  if (normalize) {
    for (size_t r = 0; r < srcs.size(); ++r) {
      T* row = set.embeddings.data() + static_cast<long long>(r) * d;
      T s = 0;
      for (int j = 0; j < d; ++j) s += row[j] * row[j];
      T nrm = std::sqrt(s);
      if (nrm > T(0))
        for (int j = 0; j < d; ++j) row[j] /= nrm;
    }
  }
  return set;
}

/// Tape-side embedding gathering for training: `reps` holds one [h*w, d]
/// variable per batch instance. Position selection is shared with the plain
/// sampler above.
template <typename T>
struct TapeEmbeddingSet {
  Var embeddings;  // [N, d]
  std::vector<int> labels;
  std::vector<SourcePos> sources;
};

template <typename T>
TapeEmbeddingSet<T> sample_embeddings_on_tape(Tape<T>& tape,
                                              const std::vector<Var>& reps,
                                              const std::vector<LabelMap>& labels,
                                              int n, std::mt19937_64& rng,
                                              bool normalize) {
  std::vector<SourcePos> srcs = sample_positions(labels, n, rng);
  if (srcs.empty()) throw EmptyBatchError("no sampleable positions in batch");
  TapeEmbeddingSet<T> set;
  set.sources = srcs;
  std::vector<Var> parts;
  size_t i = 0;
  while (i < srcs.size()) {
    int b = srcs[i].batch;
    std::vector<int> rows;
    while (i < srcs.size() && srcs[i].batch == b) {
      rows.push_back(srcs[i].pos);
      set.labels.push_back(srcs[i].label);
      ++i;
    }
    parts.push_back(tape.gather_rows(reps[static_cast<size_t>(b)], rows));
  }
  Var emb = parts.size() == 1 ? parts[0] : tape.concat_rows(parts);
  set.embeddings = normalize ? tape.l2_normalize_rows(emb) : emb;
  return set;
}

/// Batched variant: `reps` is one [B*h*w, d] variable holding all instances'
/// representations stacked in batch order. Draws the same positions (and in
/// the same order) as the per-instance overload above.
template <typename T>
TapeEmbeddingSet<T> sample_embeddings_on_tape(Tape<T>& tape, Var reps, int hw,
                                              const std::vector<LabelMap>& labels,
                                              int n, std::mt19937_64& rng,
                                              bool normalize) {
  std::vector<SourcePos> srcs = sample_positions(labels, n, rng);
  if (srcs.empty()) throw EmptyBatchError("no sampleable positions in batch");
  TapeEmbeddingSet<T> set;
  set.sources = srcs;
  std::vector<int> rows;
  rows.reserve(srcs.size());
  for (const SourcePos& s : srcs) {
    rows.push_back(s.batch * hw + s.pos);
    set.labels.push_back(s.label);
  }
  Var emb = tape.gather_rows(reps, rows);
  set.embeddings = normalize ? tape.l2_normalize_rows(emb) : emb;
  return set;
}

}  // namespace smmcl

#endif  // SMMCL_SAMPLING_HPP
