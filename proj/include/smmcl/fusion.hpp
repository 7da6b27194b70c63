#ifndef SMMCL_FUSION_HPP
#define SMMCL_FUSION_HPP

#include <utility>

#include "smmcl/tape.hpp"
#include "smmcl/tensor.hpp"

namespace smmcl {

/// Tape handles for one intermediate fusion module.
/// Spatial MLP plan [2c->2c], [2c->2c], [2c->1]; channel MLP plan
/// [4c->4c], [4c->4c], [4c->c]; fusion conv [2c->c].
struct FusionVars {
  Var sw1, sb1, sw2, sb2, sw3, sb3;
  Var cw1, cb1, cw2, cb2, cw3, cb3;
  Var fw, fb;
};

namespace detail {

template <typename T>
Var mlp3(Tape<T>& tape, Var x, Var w1, Var b1, Var w2, Var b2, Var w3, Var b3) {
  Var h1 = tape.linear(x, w1, b1, /*relu_after=*/true);
  Var h2 = tape.linear(h1, w2, b2, /*relu_after=*/true);
  return tape.linear(h2, w3, b3);
}

}  // namespace detail

namespace detail {

// Features are [h,w,c] or [B,h,w,c]; report B=1 for the unbatched form.
template <typename T>
inline void feature_dims(const Tensor<T>& x, int& nb, int& h, int& w, int& c,
                         bool& batched) {
  if (x.rank() != 3 && x.rank() != 4)
    throw ShapeError("fusion expects [h,w,c] or [B,h,w,c] features");
  batched = x.rank() == 4;
  nb = batched ? x.dim(0) : 1;
  h = x.dim(batched ? 1 : 0);
  w = x.dim(batched ? 2 : 1);
  c = x.dim(batched ? 3 : 2);
}

}  // namespace detail

/// Shared spatial coefficient: channel concat, per-pixel three-layer MLP,
/// sigmoid. Output in (0,1), shape [h,w] (or [B,h,w]).
template <typename T>
Var spatial_coefficient(Tape<T>& tape, Var f_vis, Var f_aux,
                        const FusionVars& p) {
  const Tensor<T>& xv = tape.val(f_vis);
  if (!xv.same_shape(tape.val(f_aux)))
    throw ShapeError("spatial_coefficient feature shapes differ");
  int nb, h, w, c;
  bool batched;
  detail::feature_dims(xv, nb, h, w, c, batched);
  Var cat = tape.concat_last(f_vis, f_aux);  // [..., 2c]
  Var out = detail::mlp3(tape, cat, p.sw1, p.sb1, p.sw2, p.sb2, p.sw3, p.sb3);
  return tape.reshape(tape.sigmoid(out), batched ? std::vector<int>{nb, h, w}
                                                 : std::vector<int>{h, w});
}

/// Shared channel coefficient: channel concat, global max + average pooling,
/// three-layer MLP, sigmoid. Output in (0,1)^c, shape [c] (or [B,c]).
template <typename T>
Var channel_coefficient(Tape<T>& tape, Var f_vis, Var f_aux,
                        const FusionVars& p) {
  const Tensor<T>& xv = tape.val(f_vis);
  if (!xv.same_shape(tape.val(f_aux)))
    throw ShapeError("channel_coefficient feature shapes differ");
  int nb, h, w, c;
  bool batched;
  detail::feature_dims(xv, nb, h, w, c, batched);
  Var cat = tape.concat_last(f_vis, f_aux);
  Var mx = tape.reshape(tape.global_max_pool(cat), {nb, 2 * c});
  Var av = tape.reshape(tape.global_avg_pool(cat), {nb, 2 * c});
  Var pooled = tape.concat_last(mx, av);  // [nb, 4c]
  Var out = detail::mlp3(tape, pooled, p.cw1, p.cb1, p.cw2, p.cb2, p.cw3, p.cb3);
  return tape.reshape(tape.sigmoid(out), batched ? std::vector<int>{nb, c}
                                                 : std::vector<int>{c});
}

/// Cross-modal additive update with the shared coefficients:
///   F'_vis = F_vis + S * F_aux + cvec (x) F_aux
///   F'_aux = F_aux + S * F_vis + cvec (x) F_vis
template <typename T>
std::pair<Var, Var> update_features(Tape<T>& tape, Var f_vis, Var f_aux, Var s,
                                    Var cvec) {
  const Tensor<T>& xv = tape.val(f_vis);
  if (!xv.same_shape(tape.val(f_aux)))
    throw ShapeError("update_features feature shapes differ");
  int nb, h, w, c;
  bool batched;
  detail::feature_dims(xv, nb, h, w, c, batched);
  if (tape.val(s).size() != static_cast<long long>(nb) * h * w)
    throw ShapeError("spatial coefficient shape mismatch");
  if (tape.val(cvec).size() != static_cast<long long>(nb) * c)
    throw ShapeError("channel coefficient shape mismatch");
  (void)batched;
  Var upd_vis = tape.cross_update(f_vis, f_aux, s, cvec);
  Var upd_aux = tape.cross_update(f_aux, f_vis, s, cvec);
  return {upd_vis, upd_aux};
}

/// 1x1-convolution fusion of the updated pair: concat to 2c, project to c.
template <typename T>
Var fuse(Tape<T>& tape, Var upd_vis, Var upd_aux, const FusionVars& p) {
  const Tensor<T>& xv = tape.val(upd_vis);
  if (!xv.same_shape(tape.val(upd_aux)))
    throw ShapeError("fuse feature shapes differ");
  int nb, h, w, c;
  bool batched;
  detail::feature_dims(xv, nb, h, w, c, batched);  // rank validation
  (void)nb, (void)h, (void)w, (void)c, (void)batched;
  Var cat = tape.concat_last(upd_vis, upd_aux);  // [..., 2c]
  return tape.linear(cat, p.fw, p.fb);           // [..., c]
}

/// Whole-module forward: coefficients, update, fusion feature.
template <typename T>
struct FusionOut {
  Var upd_vis, upd_aux, fused;
  Var s, cvec;
};

template <typename T>
FusionOut<T> fusion_forward(Tape<T>& tape, Var f_vis, Var f_aux,
                            const FusionVars& p) {
  FusionOut<T> o;
  o.s = spatial_coefficient(tape, f_vis, f_aux, p);
  o.cvec = channel_coefficient(tape, f_vis, f_aux, p);
  auto [uv, ua] = update_features(tape, f_vis, f_aux, o.s, o.cvec);
  o.upd_vis = uv;
  o.upd_aux = ua;
  o.fused = fuse(tape, uv, ua, p);
  return o;
}

}  // namespace smmcl

#endif  // SMMCL_FUSION_HPP
