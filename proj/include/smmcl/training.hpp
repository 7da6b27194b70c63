#ifndef SMMCL_TRAINING_HPP
#define SMMCL_TRAINING_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <vector>

#include "smmcl/contrast.hpp"
#include "smmcl/data.hpp"
#include "smmcl/metrics.hpp"
#include "smmcl/model.hpp"
#include "smmcl/sampling.hpp"

namespace smmcl {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 16;
  double base_lr = 1e-3;  // paper-scale value 6e-5 remains selectable
  double poly_power = 0.9;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool use_cm = true;
  bool use_intra = true;
  uint64_t seed = 0;
  int n_max = 256;
  bool augment_flip = false;
  int eval_every = 1;  // evaluate every k-th epoch (the last always runs)
  ContrastConfig contrast;

  void validate() const {
    if (epochs < 1) throw ArgumentError("epochs must be >= 1");
    if (base_lr <= 0) throw ArgumentError("base_lr must be positive");
    if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
    if (eval_every < 1) throw ArgumentError("eval_every must be >= 1");
    contrast.validate();
  }

  bool cm_enabled() const { return use_cm && contrast.lambda_cm > 0; }
  bool intra_enabled() const {
    return use_intra && (contrast.lambda_vis > 0 || contrast.lambda_aux > 0);
  }
};

/// lr * (1 - iter/total)^power; base at iter 0, zero at iter == total.
inline double poly_lr(double base, long long iter, long long total, double power) {
  double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(total);
  return base * std::pow(std::max(0.0, frac), power);
}

struct EpochRecord {
  int epoch = 0;
  double loss_ce = 0, loss_cm = 0, loss_vis = 0, loss_aux = 0;
  double miou = 0, separability = 0;
  double lr = 0;
};

inline void write_history_csv(const std::filesystem::path& path,
                              const std::vector<EpochRecord>& hist) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << "epoch,loss_ce,loss_cm,loss_vis,loss_aux,miou,separability,lr\n";
  f.precision(12);
  for (const EpochRecord& r : hist)
    f << r.epoch << "," << r.loss_ce << "," << r.loss_cm << "," << r.loss_vis
      << "," << r.loss_aux << "," << r.miou << "," << r.separability << ","
      << r.lr << "\n";
}

/// Decoupled-weight-decay adaptive-moment optimizer over a registry.
template <typename T>
class AdamW {
 public:
  AdamW(const ParamRegistry<T>& reg, const TrainConfig& cfg) : cfg_(cfg) {
    for (int i = 0; i < reg.count(); ++i) {
      m_.push_back(Tensor<T>::zeros(reg.tensor(i).dims()));
      v_.push_back(Tensor<T>::zeros(reg.tensor(i).dims()));
    }
  }

  void step(ParamRegistry<T>& reg, const std::vector<Tensor<T>>& grads, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (int i = 0; i < reg.count(); ++i) {
      Tensor<T>& p = reg.tensor(i);
      const Tensor<T>& g = grads[static_cast<size_t>(i)];
      Tensor<T>& m = m_[static_cast<size_t>(i)];
      Tensor<T>& v = v_[static_cast<size_t>(i)];
      for (long long j = 0; j < p.size(); ++j) {
        double gj = static_cast<double>(g[j]);
        double mj = cfg_.beta1 * static_cast<double>(m[j]) + (1 - cfg_.beta1) * gj;
        double vj = cfg_.beta2 * static_cast<double>(v[j]) + (1 - cfg_.beta2) * gj * gj;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.adam_eps);
        double pj = static_cast<double>(p[j]);
        pj -= lr * cfg_.weight_decay * pj;  // decoupled decay
        pj -= lr * update;
        p[j] = static_cast<T>(pj);
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  long long t_ = 0;
};

template <typename T>
struct PreparedSample {
  Tensor<T> visible;
  Tensor<T> auxiliary;
  LabelMap label;
  LabelMap label_small;  // downscaled to the representation grid
};

template <typename T>
std::vector<PreparedSample<T>> prepare_samples(const std::vector<SceneSample>& in,
                                               const ModelConfig& mc) {
  std::vector<PreparedSample<T>> out;
  out.reserve(in.size());
  for (const SceneSample& s : in) {
    PreparedSample<T> p;
    p.visible = s.visible.template cast<T>();
    p.auxiliary = s.auxiliary.template cast<T>();
    p.label = s.label;
    p.label_small = downscale_labels(s.label, mc.height / 16, mc.width / 16);
    out.push_back(std::move(p));
  }
  return out;
}

template <typename T>
struct TrainResult {
  ParamRegistry<T> params;
  std::vector<EpochRecord> history;
};

struct EvalReport {
  std::vector<double> per_class_iou;
  double miou = 0;
  double sep_pooled = 0;
  double sep_vis = 0;
  double sep_aux = 0;
};

namespace detail {

/// Evaluation forward pass over a sample set: confusion matrix plus pooled
/// projector embeddings for the separability score.
template <typename T>
EvalReport evaluate(const std::vector<PreparedSample<T>>& samples,
                    const ParamRegistry<T>& reg, const ModelConfig& mc,
                    const TrainConfig& tc, int sep_cap = 800) {
  ConfusionMatrix cm(mc.num_classes);
  int h = mc.height / 16, w = mc.width / 16, d = mc.proj_dim;
  Tensor<T> rv({static_cast<int>(samples.size()), h, w, d});
  Tensor<T> ra({static_cast<int>(samples.size()), h, w, d});
  std::vector<LabelMap> small;
  for (size_t i = 0; i < samples.size(); ++i) {
    Tape<T> tape;
    BoundParams<T> bp = bind_params(tape, reg, /*requires_grad=*/false);
    ForwardOut<T> fo = model_forward(tape, samples[i].visible,
                                     samples[i].auxiliary, bp, mc);
    const Tensor<T>& logits = tape.val(fo.logits);
    LabelMap pred(mc.height, mc.width);
    for (int pix = 0; pix < mc.height * mc.width; ++pix) {
      const T* row = logits.data() + static_cast<long long>(pix) * mc.num_classes;
      int best = 0;
      for (int c = 1; c < mc.num_classes; ++c)
        if (row[c] > row[best]) best = c;
      pred.v[static_cast<size_t>(pix)] = best;
    }
    cm.accumulate(samples[i].label, pred);
    std::copy_n(tape.val(fo.r_vis).data(), static_cast<long long>(h) * w * d,
                rv.data() + static_cast<long long>(i) * h * w * d);
    std::copy_n(tape.val(fo.r_aux).data(), static_cast<long long>(h) * w * d,
                ra.data() + static_cast<long long>(i) * h * w * d);
    small.push_back(samples[i].label_small);
  }
  EvalReport rep;
  rep.per_class_iou = per_class_iou(cm);
  rep.miou = miou(cm);

  int n = compute_n(small, tc.n_max);
  EmbeddingSet<T> ev = sample_embeddings(rv, small, n, Modality::visible,
                                         tc.seed ^ 0xE5A1u,
                                         tc.contrast.normalize_embeddings);
  EmbeddingSet<T> ea = sample_embeddings(ra, small, n, Modality::auxiliary,
                                         tc.seed ^ 0xE5A2u,
                                         tc.contrast.normalize_embeddings);
  auto subsample = [&](const Tensor<T>& e, const std::vector<int>& lab,
                       uint64_t salt, Tensor<T>& out_e, std::vector<int>& out_l) {
    int total = e.dim(0);
    if (total <= sep_cap) {
      out_e = e;
      out_l = lab;
      return;
    }
    std::mt19937_64 rng(tc.seed ^ salt);
    std::vector<int> idx(static_cast<size_t>(total));
    for (int i = 0; i < total; ++i) idx[static_cast<size_t>(i)] = i;
    for (int i = 0; i < sep_cap; ++i) {
      std::uniform_int_distribution<int> dd(i, total - 1);
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(dd(rng))]);
    }
    out_e = Tensor<T>({sep_cap, e.dim(1)});
    out_l.clear();
    for (int i = 0; i < sep_cap; ++i) {
      std::copy_n(e.data() + static_cast<long long>(idx[static_cast<size_t>(i)]) * e.dim(1),
                  e.dim(1), out_e.data() + static_cast<long long>(i) * e.dim(1));
      out_l.push_back(lab[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
    }
  };
  auto safe_silhouette = [](const Tensor<T>& e, const std::vector<int>& lab) {
    try {
      return silhouette_cosine(e, lab);
    } catch (const MetricError&) {
      return 0.0;
    }
  };
  Tensor<T> se;
  std::vector<int> sl;
  subsample(ev.embeddings, ev.labels, 0x51u, se, sl);
  rep.sep_vis = safe_silhouette(se, sl);
  subsample(ea.embeddings, ea.labels, 0x52u, se, sl);
  rep.sep_aux = safe_silhouette(se, sl);
  // pooled: concatenate both modalities, then cap
  Tensor<T> pooled({ev.embeddings.dim(0) + ea.embeddings.dim(0), d});
  std::copy_n(ev.embeddings.data(), ev.embeddings.size(), pooled.data());
  std::copy_n(ea.embeddings.data(), ea.embeddings.size(),
              pooled.data() + ev.embeddings.size());
  std::vector<int> plab = ev.labels;
  plab.insert(plab.end(), ea.labels.begin(), ea.labels.end());
  subsample(pooled, plab, 0x53u, se, sl);
  rep.sep_pooled = safe_silhouette(se, sl);
  return rep;
}

}  // namespace detail

/// One full training run. Per epoch: seeded shuffle, batched forward,
/// combined objective honoring the ablation flags (disabled terms are not
/// computed), backward, AdamW update with poly LR decay, then evaluation.
template <typename T>
TrainResult<T> train(const std::vector<SceneSample>& train_set,
                     const std::vector<SceneSample>& eval_set,
                     const ModelConfig& mc, const TrainConfig& tc,
                     const std::function<void(const EpochRecord&,
                                              const ParamRegistry<T>&)>&
                         epoch_callback = nullptr) {
  mc.validate();
  tc.validate();
  if (train_set.empty()) throw ArgumentError("training set is empty");

  std::vector<PreparedSample<T>> tr = prepare_samples<T>(train_set, mc);
  std::vector<PreparedSample<T>> ev = prepare_samples<T>(eval_set, mc);

  ParamRegistry<T> params = init_model_params<T>(mc, tc.seed);
  AdamW<T> opt(params, tc);

  long long steps_per_epoch =
      (static_cast<long long>(tr.size()) + tc.batch_size - 1) / tc.batch_size;
  long long total_iters = steps_per_epoch * tc.epochs;
  long long iter = 0;

  std::mt19937_64 shuffle_rng(tc.seed ^ 0x5u);
  std::mt19937_64 sample_rng(tc.seed ^ 0x6u);
  std::mt19937_64 aug_rng(tc.seed ^ 0x7u);

  std::vector<int> order(tr.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  std::vector<EpochRecord> history;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum_ce = 0, sum_cm = 0, sum_vis = 0, sum_aux = 0;
    double last_lr = 0;
    long long nsteps = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tc.batch_size)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(tc.batch_size));
      int bs = static_cast<int>(end - start);
      Tape<T> tape;
      BoundParams<T> bp = bind_params(tape, params, true);

      // stack the minibatch; per-row arithmetic of the batched forward is
      // identical to per-sample forwards
      Tensor<T> vis_b = Tensor<T>::uninit({bs, mc.height, mc.width, 3});
      Tensor<T> aux_b = Tensor<T>::uninit({bs, mc.height, mc.width, 1});
      std::vector<int> flat_labels;
      flat_labels.reserve(static_cast<size_t>(bs) * mc.height * mc.width);
      std::vector<LabelMap> small;
      for (size_t k = start; k < end; ++k) {
        PreparedSample<T>& s = tr[static_cast<size_t>(order[k])];
        bool flip = tc.augment_flip &&
                    std::uniform_int_distribution<int>(0, 1)(aug_rng) == 1;
        PreparedSample<T> flipped;
        const PreparedSample<T>* use = &s;
        if (flip) {
          flipped = flip_horizontal(s);
          use = &flipped;
        }
        long long i = static_cast<long long>(k - start);
        std::copy_n(use->visible.data(), use->visible.size(),
                    vis_b.data() + i * use->visible.size());
        std::copy_n(use->auxiliary.data(), use->auxiliary.size(),
                    aux_b.data() + i * use->auxiliary.size());
        flat_labels.insert(flat_labels.end(), use->label.v.begin(),
                           use->label.v.end());
        small.push_back(use->label_small);
      }
      ForwardOut<T> fo = model_forward_batched(tape, vis_b, aux_b, bp, mc);
      int ce_count = 0;
      Var ce_sum =
          tape.softmax_ce_sum(fo.logits, flat_labels, kIgnoreLabel, &ce_count);
      if (ce_count == 0) throw EmptyBatchError("batch has no labeled pixels");
      Var ce_mean = tape.scale(ce_sum, static_cast<T>(1.0 / ce_count));

      bool want_cm = tc.cm_enabled();
      bool want_intra = tc.intra_enabled();
      Var l_cm, l_vis, l_aux;
      if (want_cm || want_intra) {
        int hs = mc.height / 16, ws = mc.width / 16;
        Var rv_flat = tape.reshape(fo.r_vis, {bs * hs * ws, mc.proj_dim});
        Var ra_flat = tape.reshape(fo.r_aux, {bs * hs * ws, mc.proj_dim});
        int n = compute_n(small, tc.n_max);
        TapeEmbeddingSet<T> sv = sample_embeddings_on_tape(
            tape, rv_flat, hs * ws, small, n, sample_rng,
            tc.contrast.normalize_embeddings);
        TapeEmbeddingSet<T> sa = sample_embeddings_on_tape(
            tape, ra_flat, hs * ws, small, n, sample_rng,
            tc.contrast.normalize_embeddings);
        if (want_cm) l_cm = cross_modal_loss_on_tape(tape, sv, sa, tc.contrast);
        if (want_intra) {
          l_vis = intra_modal_loss_on_tape(tape, sv, tc.contrast);
          l_aux = intra_modal_loss_on_tape(tape, sa, tc.contrast);
        }
      }
      std::vector<std::pair<T, Var>> terms;
      if (want_cm)
        terms.push_back({static_cast<T>(tc.contrast.lambda_cm), l_cm});
      if (want_intra) {
        terms.push_back({static_cast<T>(tc.contrast.lambda_vis), l_vis});
        terms.push_back({static_cast<T>(tc.contrast.lambda_aux), l_aux});
      }
      Var total = terms.empty() ? ce_mean : tape.add_weighted(ce_mean, terms);

      double total_val = static_cast<double>(tape.val(total)[0]);
      if (!std::isfinite(total_val)) {
        std::string bad = tape.first_non_finite();
        throw NumericError("non-finite loss at iter " + std::to_string(iter) +
                           "; first non-finite tensor: " +
                           (bad.empty() ? "(loss only)" : bad));
      }
      tape.backward(total);

      std::vector<Tensor<T>> grads;
      grads.reserve(bp.vars.size());
      for (size_t i = 0; i < bp.vars.size(); ++i) {
        const Tensor<T>& g = tape.grad(bp.vars[i]);
        grads.push_back(g.size() ? g : Tensor<T>::zeros(params.tensor(static_cast<int>(i)).dims()));
      }
      double lr = poly_lr(tc.base_lr, iter, total_iters, tc.poly_power);
      last_lr = lr;
      opt.step(params, grads, lr);
      ++iter;
      ++nsteps;

      sum_ce += static_cast<double>(tape.val(ce_mean)[0]);
      if (want_cm) sum_cm += static_cast<double>(tape.val(l_cm)[0]);
      if (want_intra) {
        sum_vis += static_cast<double>(tape.val(l_vis)[0]);
        sum_aux += static_cast<double>(tape.val(l_aux)[0]);
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss_ce = sum_ce / nsteps;
    rec.loss_cm = sum_cm / nsteps;
    rec.loss_vis = sum_vis / nsteps;
    rec.loss_aux = sum_aux / nsteps;
    rec.lr = last_lr;
    bool eval_now = !ev.empty() && ((epoch + 1) % tc.eval_every == 0 ||
                                    epoch + 1 == tc.epochs);
    if (eval_now) {
      EvalReport rep = detail::evaluate(ev, params, mc, tc);
      rec.miou = rep.miou;
      rec.separability = rep.sep_pooled;
    }
    history.push_back(rec);
    if (epoch_callback) epoch_callback(rec, params);
  }
  return {std::move(params), std::move(history)};
}

template <typename T>
PreparedSample<T> flip_horizontal(const PreparedSample<T>& s) {
  PreparedSample<T> out = s;
  int h = s.visible.dim(0), w = s.visible.dim(1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c)
        out.visible.at(y, x, c) = s.visible.at(y, w - 1 - x, c);
      out.auxiliary.at(y, x, 0) = s.auxiliary.at(y, w - 1 - x, 0);
      out.label.at(y, x) = s.label.at(y, w - 1 - x);
    }
  int hs = s.label_small.h, ws = s.label_small.w;
  for (int y = 0; y < hs; ++y)
    for (int x = 0; x < ws; ++x)
      out.label_small.at(y, x) = s.label_small.at(y, ws - 1 - x);
  return out;
}

// ---------------------------------------------------------------------------
// Table-style ablation matrix: four variants x seeds.

struct AblationRow {
  std::string variant;
  uint64_t seed = 0;
  double miou = 0;
  double separability = 0;
};

inline const std::array<std::pair<const char*, std::pair<bool, bool>>, 4>&
ablation_variants() {
  // {name, {use_cm, use_intra}}
  static const std::array<std::pair<const char*, std::pair<bool, bool>>, 4> v{
      {{"model1", {false, false}},
       {"model2", {true, false}},
       {"model3", {false, true}},
       {"model4", {true, true}}}};
  return v;
}

template <typename T>
std::vector<AblationRow> ablation_matrix(
    const std::vector<SceneSample>& train_set,
    const std::vector<SceneSample>& eval_set, const ModelConfig& mc,
    const TrainConfig& base, const std::vector<uint64_t>& seeds,
    const std::function<void(const AblationRow&)>& row_callback = nullptr) {
  if (seeds.empty()) throw ArgumentError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  for (auto& [name, flags] : ablation_variants()) {
    for (uint64_t seed : seeds) {
      TrainConfig tc = base;
      tc.use_cm = flags.first;
      tc.use_intra = flags.second;
      tc.seed = seed;
      TrainResult<T> res = train<T>(train_set, eval_set, mc, tc);
      AblationRow row;
      row.variant = name;
      row.seed = seed;
      row.miou = res.history.back().miou;
      row.separability = res.history.back().separability;
      if (row_callback) row_callback(row);
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace smmcl

#endif  // SMMCL_TRAINING_HPP
