#ifndef SMMCL_CONTRAST_HPP
#define SMMCL_CONTRAST_HPP

#include <cmath>
#include <vector>

#include "smmcl/sampling.hpp"
#include "smmcl/tape.hpp"
#include "smmcl/tensor.hpp"

namespace smmcl {

struct ContrastConfig {
  double tau = 0.1;
  double lambda_cm = 0.2;
  double lambda_vis = 0.2;
  double lambda_aux = 0.2;
  bool normalize_embeddings = true;
  bool symmetrize_cm = false;

  void validate() const {
    if (tau <= 0) throw ArgumentError("tau must be positive");
    if (lambda_cm < 0 || lambda_vis < 0 || lambda_aux < 0)
      throw ArgumentError("loss weights must be non-negative");
  }
};

/// Single-anchor InfoNCE with max-logit stabilization. Zero negatives give
/// exactly 0.
template <typename T>
double info_nce(const Tensor<T>& anchor, const Tensor<T>& positive,
                const Tensor<T>& negatives, double tau) {
  if (tau <= 0) throw ArgumentError("tau must be positive");
  if (anchor.rank() != 1 || positive.rank() != 1 ||
      anchor.dim(0) != positive.dim(0))
    throw ShapeError("info_nce anchor/positive must be vectors of equal d");
  int d = anchor.dim(0);
  int k = 0;
  if (negatives.size() > 0) {
    if (negatives.rank() != 2 || negatives.dim(1) != d)
      throw ShapeError("info_nce negatives must be [K,d]");
    k = negatives.dim(0);
  }
  auto dot = [d](const T* a, const T* b) {
    double s = 0;
    for (int j = 0; j < d; ++j) s += static_cast<double>(a[j]) * b[j];
    return s;
  };
  double sp = dot(anchor.data(), positive.data()) / tau;
  double mx = sp;
  std::vector<double> sn(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    sn[static_cast<size_t>(i)] =
        dot(anchor.data(), negatives.data() + static_cast<long long>(i) * d) / tau;
    mx = std::max(mx, sn[static_cast<size_t>(i)]);
  }
  double z = std::exp(sp - mx);
  double ep = z;
  for (int i = 0; i < k; ++i) z += std::exp(sn[static_cast<size_t>(i)] - mx);
  return -std::log(ep / z);
}

template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("similarity_matrix expects [N,d] and [M,d]");
  Tensor<T> s({a.dim(0), b.dim(0)});
  gemm_nt_acc(a.data(), b.data(), s.data(), a.dim(0), a.dim(1), b.dim(0));
  return s;
}

/// Cross-modal contrastive loss, visible-anchored. Anchors without a
/// same-class auxiliary partner are dropped from the outer mean; all dropped
/// gives 0 (caller may log via `all_skipped`).
template <typename T>
double cross_modal_loss(const EmbeddingSet<T>& v, const EmbeddingSet<T>& a,
                        const ContrastConfig& cfg, bool* all_skipped = nullptr) {
  cfg.validate();
  if (v.modality != Modality::visible || a.modality != Modality::auxiliary)
    throw ArgumentError("cross_modal_loss expects (visible, auxiliary)");
  Tensor<T> sim = similarity_matrix(v.embeddings, a.embeddings);
  int valid = 0;
  double loss = grouped_nce_value(sim, v.labels, a.labels, false, cfg.tau, &valid);
  if (cfg.symmetrize_cm) {
    Tensor<T> sim2 = similarity_matrix(a.embeddings, v.embeddings);
    int valid2 = 0;
    double loss2 =
        grouped_nce_value(sim2, a.labels, v.labels, false, cfg.tau, &valid2);
    loss = 0.5 * (loss + loss2);
    valid += valid2;
  }
  if (all_skipped) *all_skipped = (valid == 0);
  return loss;
}

/// Intra-modal contrastive loss over one embedding set; the anchor is
/// excluded from its own positive/negative pools.
template <typename T>
double intra_modal_loss(const EmbeddingSet<T>& s, const ContrastConfig& cfg,
                        bool* all_skipped = nullptr) {
  cfg.validate();
  if (s.count() < 2)
    throw ArgumentError("intra_modal_loss needs at least 2 embeddings");
  Tensor<T> sim = similarity_matrix(s.embeddings, s.embeddings);
  int valid = 0;
  double loss = grouped_nce_value(sim, s.labels, s.labels, true, cfg.tau, &valid);
  if (all_skipped) *all_skipped = (valid == 0);
  return loss;
}

/// Mean per-pixel softmax cross-entropy over non-ignore pixels.
/// logits: [B,h,w,C], labels spatially aligned.
template <typename T>
double cross_entropy_seg(const Tensor<T>& logits,
                         const std::vector<LabelMap>& labels) {
  if (logits.rank() != 4) throw ShapeError("cross_entropy_seg expects [B,h,w,C]");
  int bsz = logits.dim(0), h = logits.dim(1), w = logits.dim(2), c = logits.dim(3);
  if (static_cast<int>(labels.size()) != bsz)
    throw ShapeError("label batch size mismatch");
  double total = 0;
  long long valid = 0;
  for (int b = 0; b < bsz; ++b) {
    if (labels[static_cast<size_t>(b)].h != h || labels[static_cast<size_t>(b)].w != w)
      throw ShapeError("labels not aligned with logits");
    for (int i = 0; i < h * w; ++i) {
      int y = labels[static_cast<size_t>(b)].v[static_cast<size_t>(i)];
      if (y == kIgnoreLabel) continue;
      if (y < 0 || y >= c) throw ArgumentError("label out of range");
      const T* row = logits.data() + ((static_cast<long long>(b) * h * w) + i) * c;
      double mx = row[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      double z = 0;
      for (int j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      total += mx + std::log(z) - static_cast<double>(row[y]);
      ++valid;
    }
  }
  if (valid == 0) throw EmptyBatchError("all pixels ignored");
  return total / static_cast<double>(valid);
}

/// Combined objective: ce + lambda_cm*l_cm + lambda_vis*l_vis +
/// lambda_aux*l_aux. Zero-weight terms are never added, so all-zero weights
/// return `ce` bitwise.
inline double full_objective(double ce, double l_cm, double l_vis, double l_aux,
                             const ContrastConfig& cfg) {
  cfg.validate();
  double r = ce;
  if (cfg.lambda_cm != 0) r += cfg.lambda_cm * l_cm;
  if (cfg.lambda_vis != 0) r += cfg.lambda_vis * l_vis;
  if (cfg.lambda_aux != 0) r += cfg.lambda_aux * l_aux;
  return r;
}

// -- tape-side losses (training path) ---------------------------------------

template <typename T>
Var cross_modal_loss_on_tape(Tape<T>& tape, const TapeEmbeddingSet<T>& v,
                             const TapeEmbeddingSet<T>& a,
                             const ContrastConfig& cfg) {
  cfg.validate();
  Var sim = tape.matmul_nt(v.embeddings, a.embeddings);
  Var loss = tape.grouped_nce(sim, v.labels, a.labels, false, cfg.tau);
  if (cfg.symmetrize_cm) {
    Var sim2 = tape.matmul_nt(a.embeddings, v.embeddings);
    Var loss2 = tape.grouped_nce(sim2, a.labels, v.labels, false, cfg.tau);
    loss = tape.scale(tape.add(loss, loss2), T(0.5));
  }
  return loss;
}

template <typename T>
Var intra_modal_loss_on_tape(Tape<T>& tape, const TapeEmbeddingSet<T>& s,
                             const ContrastConfig& cfg) {
  cfg.validate();
  Var sim = tape.matmul_nt(s.embeddings, s.embeddings);
  return tape.grouped_nce(sim, s.labels, s.labels, true, cfg.tau);
}

}  // namespace smmcl

#endif  // SMMCL_CONTRAST_HPP
