#ifndef SMMCL_GRADCHECK_HPP
#define SMMCL_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "smmcl/contrast.hpp"
#include "smmcl/fusion.hpp"
#include "smmcl/model.hpp"
#include "smmcl/sampling.hpp"
#include "smmcl/tape.hpp"

namespace smmcl {

struct GradCheckResult {
  std::string component;
  double worst_rel_err = 0;
  std::string worst_at;
  bool pass = true;
  double tolerance = 0;
};

/// Relative error with an absolute-scale guard for near-zero pairs.
inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

/// Central finite differences of a scalar function against analytic
/// gradients. `entries` limits how many elements per tensor are probed
/// (0 = all); probed entries are drawn with `rng`.
inline GradCheckResult check_gradients(
    const std::string& component,
    std::vector<Tensor<double>>& inputs,
    const std::function<double(const std::vector<Tensor<double>>&)>& eval,
    const std::vector<Tensor<double>>& analytic, double step, double tol,
    int entries = 0, std::mt19937_64* rng = nullptr) {
  GradCheckResult res;
  res.component = component;
  res.tolerance = tol;
  for (size_t t = 0; t < inputs.size(); ++t) {
    long long n = inputs[t].size();
    std::vector<long long> probe;
    if (entries <= 0 || n <= entries) {
      for (long long i = 0; i < n; ++i) probe.push_back(i);
    } else {
      std::uniform_int_distribution<long long> d(0, n - 1);
      for (int i = 0; i < entries; ++i) probe.push_back(d(*rng));
    }
    for (long long i : probe) {
      double orig = inputs[t][i];
      inputs[t][i] = orig + step;
      double fp = eval(inputs);
      inputs[t][i] = orig - step;
      double fm = eval(inputs);
      inputs[t][i] = orig;
      double numeric = (fp - fm) / (2 * step);
      double err = rel_err(analytic[t][i], numeric);
      if (err > res.worst_rel_err) {
        res.worst_rel_err = err;
        res.worst_at = component + "[tensor " + std::to_string(t) + ", elem " +
                       std::to_string(i) + "]";
      }
    }
  }
  res.pass = res.worst_rel_err <= tol;
  return res;
}

namespace gradcheck {

inline Tensor<double> random_tensor(std::vector<int> dims, std::mt19937_64& rng,
                                    double scale = 1.0) {
  std::uniform_real_distribution<double> d(-scale, scale);
  Tensor<double> t(std::move(dims));
  for (long long i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

/// Loss-scope checks: gradients of the cross/intra contrastive losses and the
/// segmentation cross-entropy with respect to raw embeddings/logits.
inline std::vector<GradCheckResult> check_losses(uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> results;
  ContrastConfig cfg;
  cfg.tau = 0.1;

  auto labels_for = [&](int n, int classes) {
    std::vector<int> l(static_cast<size_t>(n));
    std::uniform_int_distribution<int> d(0, classes - 1);
    for (int i = 0; i < n; ++i) l[static_cast<size_t>(i)] = d(rng);
    return l;
  };

  {  // cross-modal loss wrt both embedding sets (through normalization)
    int nv = 7, na = 9, d = 5;
    std::vector<int> lv = labels_for(nv, 3), la = labels_for(na, 3);
    lv[0] = la[0] = 0;  // guarantee at least one positive pair
    std::vector<Tensor<double>> inputs{random_tensor({nv, d}, rng),
                                       random_tensor({na, d}, rng)};
    auto eval = [&](const std::vector<Tensor<double>>& in) {
      Tape<double> tape;
      TapeEmbeddingSet<double> v{tape.l2_normalize_rows(tape.leaf(in[0])), lv, {}};
      TapeEmbeddingSet<double> a{tape.l2_normalize_rows(tape.leaf(in[1])), la, {}};
      return static_cast<double>(
          tape.val(cross_modal_loss_on_tape(tape, v, a, cfg))[0]);
    };
    Tape<double> tape;
    Var ev = tape.leaf(inputs[0]);
    Var ea = tape.leaf(inputs[1]);
    TapeEmbeddingSet<double> v{tape.l2_normalize_rows(ev), lv, {}};
    TapeEmbeddingSet<double> a{tape.l2_normalize_rows(ea), la, {}};
    tape.backward(cross_modal_loss_on_tape(tape, v, a, cfg));
    std::vector<Tensor<double>> grads{tape.grad(ev), tape.grad(ea)};
    results.push_back(
        check_gradients("cross_modal_loss", inputs, eval, grads, 1e-5, 1e-4));
  }

  {  // intra-modal loss
    int n = 8, d = 4;
    std::vector<int> ls = labels_for(n, 3);
    ls[1] = ls[0];
    std::vector<Tensor<double>> inputs{random_tensor({n, d}, rng)};
    auto eval = [&](const std::vector<Tensor<double>>& in) {
      Tape<double> tape;
      TapeEmbeddingSet<double> s{tape.l2_normalize_rows(tape.leaf(in[0])), ls, {}};
      return static_cast<double>(
          tape.val(intra_modal_loss_on_tape(tape, s, cfg))[0]);
    };
    Tape<double> tape;
    Var e = tape.leaf(inputs[0]);
    TapeEmbeddingSet<double> s{tape.l2_normalize_rows(e), ls, {}};
    tape.backward(intra_modal_loss_on_tape(tape, s, cfg));
    std::vector<Tensor<double>> grads{tape.grad(e)};
    results.push_back(
        check_gradients("intra_modal_loss", inputs, eval, grads, 1e-5, 1e-4));
  }

  {  // segmentation cross-entropy
    int n = 12, c = 4;
    std::vector<int> lab = labels_for(n, c);
    lab[3] = kIgnoreLabel;
    std::vector<Tensor<double>> inputs{random_tensor({n, c}, rng, 2.0)};
    auto eval = [&](const std::vector<Tensor<double>>& in) {
      Tape<double> tape;
      int valid = 0;
      Var s = tape.softmax_ce_sum(tape.leaf(in[0]), lab, kIgnoreLabel, &valid);
      return static_cast<double>(tape.val(s)[0]) / valid;
    };
    Tape<double> tape;
    Var l = tape.leaf(inputs[0]);
    int valid = 0;
    Var s = tape.softmax_ce_sum(l, lab, kIgnoreLabel, &valid);
    tape.backward(tape.scale(s, 1.0 / valid));
    std::vector<Tensor<double>> grads{tape.grad(l)};
    results.push_back(
        check_gradients("cross_entropy_seg", inputs, eval, grads, 1e-5, 1e-4));
  }

  {  // combined objective through all three contrastive branches
    int nv = 6, na = 6, d = 4, c = 3;
    std::vector<int> lv = labels_for(nv, 2), la = labels_for(na, 2);
    lv[0] = la[0] = 0;
    std::vector<int> lab = labels_for(5, c);
    std::vector<Tensor<double>> inputs{random_tensor({nv, d}, rng),
                                       random_tensor({na, d}, rng),
                                       random_tensor({5, c}, rng, 2.0)};
    auto build = [&](Tape<double>& tape, Var evv, Var eav, Var lg) {
      TapeEmbeddingSet<double> v{tape.l2_normalize_rows(evv), lv, {}};
      TapeEmbeddingSet<double> a{tape.l2_normalize_rows(eav), la, {}};
      int valid = 0;
      Var ce = tape.scale(tape.softmax_ce_sum(lg, lab, kIgnoreLabel, &valid),
                          1.0 / 5);
      Var cm = cross_modal_loss_on_tape(tape, v, a, cfg);
      Var lvv = intra_modal_loss_on_tape(tape, v, cfg);
      Var lva = intra_modal_loss_on_tape(tape, a, cfg);
      return tape.add_weighted(ce, {{cfg.lambda_cm, cm},
                                    {cfg.lambda_vis, lvv},
                                    {cfg.lambda_aux, lva}});
    };
    auto eval = [&](const std::vector<Tensor<double>>& in) {
      Tape<double> tape;
      return static_cast<double>(tape.val(build(tape, tape.leaf(in[0]),
                                                tape.leaf(in[1]),
                                                tape.leaf(in[2])))[0]);
    };
    Tape<double> tape;
    Var a = tape.leaf(inputs[0]), b = tape.leaf(inputs[1]), l = tape.leaf(inputs[2]);
    tape.backward(build(tape, a, b, l));
    std::vector<Tensor<double>> grads{tape.grad(a), tape.grad(b), tape.grad(l)};
    results.push_back(
        check_gradients("full_objective", inputs, eval, grads, 1e-5, 1e-4));
  }
  return results;
}

/// Fusion-scope checks: whole intermediate module (coefficient MLPs, update,
/// 1x1 fusion) with respect to every parameter and both input features.
inline std::vector<GradCheckResult> check_fusion(uint64_t seed = 11) {
  std::mt19937_64 rng(seed);
  int h = 3, w = 3, c = 4;
  std::vector<Tensor<double>> inputs;
  inputs.push_back(random_tensor({h, w, c}, rng));        // F_vis
  inputs.push_back(random_tensor({h, w, c}, rng));        // F_aux
  inputs.push_back(random_tensor({2 * c, 2 * c}, rng, 0.5));
  inputs.push_back(random_tensor({2 * c}, rng, 0.1));
  inputs.push_back(random_tensor({2 * c, 2 * c}, rng, 0.5));
  inputs.push_back(random_tensor({2 * c}, rng, 0.1));
  inputs.push_back(random_tensor({2 * c, 1}, rng, 0.5));
  inputs.push_back(random_tensor({1}, rng, 0.1));
  inputs.push_back(random_tensor({4 * c, 4 * c}, rng, 0.5));
  inputs.push_back(random_tensor({4 * c}, rng, 0.1));
  inputs.push_back(random_tensor({4 * c, 4 * c}, rng, 0.5));
  inputs.push_back(random_tensor({4 * c}, rng, 0.1));
  inputs.push_back(random_tensor({4 * c, c}, rng, 0.5));
  inputs.push_back(random_tensor({c}, rng, 0.1));
  inputs.push_back(random_tensor({2 * c, c}, rng, 0.5));
  inputs.push_back(random_tensor({c}, rng, 0.1));

  auto build = [&](Tape<double>& tape, const std::vector<Var>& v) {
    FusionVars fv{v[2], v[3], v[4], v[5], v[6], v[7],
                  v[8], v[9], v[10], v[11], v[12], v[13], v[14], v[15]};
    FusionOut<double> fo = fusion_forward(tape, v[0], v[1], fv);
    // scalar probe: sum of all outputs, so every path carries gradient
    return tape.add(tape.add(tape.sum(fo.fused), tape.sum(fo.upd_vis)),
                    tape.sum(fo.upd_aux));
  };
  auto eval = [&](const std::vector<Tensor<double>>& in) {
    Tape<double> tape;
    std::vector<Var> v;
    for (const auto& t : in) v.push_back(tape.leaf(t));
    return static_cast<double>(tape.val(build(tape, v))[0]);
  };
  Tape<double> tape;
  std::vector<Var> v;
  for (const auto& t : inputs) v.push_back(tape.leaf(t));
  tape.backward(build(tape, v));
  std::vector<Tensor<double>> grads;
  for (Var x : v) grads.push_back(tape.grad(x));
  return {check_gradients("fusion_module", inputs, eval, grads, 1e-5, 1e-4)};
}

/// Model-scope check: end-to-end objective on an 8x8 input, probing a
/// random subset of entries in every parameter tensor.
inline std::vector<GradCheckResult> check_model(uint64_t seed = 13,
                                                int entries_per_tensor = 3) {
  std::mt19937_64 rng(seed);
  ModelConfig mc;
  mc.height = mc.width = 32;
  mc.stage_channels = {2, 3, 4, 5};
  mc.proj_dim = 4;
  mc.num_classes = 3;
  mc.dec_width = 4;
  ContrastConfig cc;
  cc.tau = 0.1;

  Tensor<double> vis = random_tensor({mc.height, mc.width, 3}, rng, 0.5);
  Tensor<double> aux = random_tensor({mc.height, mc.width, 1}, rng, 0.5);
  LabelMap lab(mc.height, mc.width);
  std::uniform_int_distribution<int> cd(0, mc.num_classes - 1);
  for (auto& x : lab.v) x = cd(rng);
  LabelMap small = downscale_labels(lab, mc.height / 16, mc.width / 16);

  ParamRegistry<double> reg = init_model_params<double>(mc, seed);
  std::vector<Tensor<double>> inputs;
  for (int i = 0; i < reg.count(); ++i) inputs.push_back(reg.tensor(i));

  uint64_t emb_seed = seed ^ 0xABCDu;
  auto build = [&](Tape<double>& tape, BoundParams<double>& bp) {
    ForwardOut<double> fo = model_forward(tape, vis, aux, bp, mc);
    int valid = 0;
    std::vector<int> flat(lab.v.begin(), lab.v.end());
    Var ce = tape.scale(
        tape.softmax_ce_sum(
            tape.reshape(fo.logits, {mc.height * mc.width, mc.num_classes}),
            flat, kIgnoreLabel, &valid),
        1.0 / (mc.height * mc.width));
    int hs = mc.height / 16, ws = mc.width / 16;
    std::vector<Var> rv{tape.reshape(fo.r_vis, {hs * ws, mc.proj_dim})};
    std::vector<Var> ra{tape.reshape(fo.r_aux, {hs * ws, mc.proj_dim})};
    std::mt19937_64 srng(emb_seed);
    TapeEmbeddingSet<double> sv =
        sample_embeddings_on_tape(tape, rv, {small}, 2, srng, true);
    TapeEmbeddingSet<double> sa =
        sample_embeddings_on_tape(tape, ra, {small}, 2, srng, true);
    Var cm = cross_modal_loss_on_tape(tape, sv, sa, cc);
    Var lv = intra_modal_loss_on_tape(tape, sv, cc);
    Var la = intra_modal_loss_on_tape(tape, sa, cc);
    return tape.add_weighted(
        ce, {{cc.lambda_cm, cm}, {cc.lambda_vis, lv}, {cc.lambda_aux, la}});
  };
  auto eval = [&](const std::vector<Tensor<double>>& in) {
    Tape<double> tape;
    ParamRegistry<double> r2;
    for (int i = 0; i < reg.count(); ++i) r2.add(reg.name(i), in[static_cast<size_t>(i)]);
    BoundParams<double> bp = bind_params(tape, r2, false);
    return static_cast<double>(tape.val(build(tape, bp))[0]);
  };
  Tape<double> tape;
  BoundParams<double> bp = bind_params(tape, reg, true);
  tape.backward(build(tape, bp));
  std::vector<Tensor<double>> grads;
  for (size_t i = 0; i < bp.vars.size(); ++i) {
    const Tensor<double>& g = tape.grad(bp.vars[i]);
    grads.push_back(g.size() ? g : Tensor<double>::zeros(inputs[i].dims()));
  }
  std::mt19937_64 probe_rng(seed ^ 0x77u);
  return {check_gradients("model_end_to_end", inputs, eval, grads, 1e-5, 1e-3,
                          entries_per_tensor, &probe_rng)};
}

}  // namespace gradcheck
}  // namespace smmcl

#endif  // SMMCL_GRADCHECK_HPP
