// Vision Inference Former: a side block that refines visual embeddings with
// one self-attention layer, retrieves visual evidence conditioned on the
// decoder hidden state with one cross-attention layer, and fuses the result
// back into the hidden state additively under a layer norm. The refined
// visual keys/values depend only on the image, so they are computed once per
// image and cached for the whole decode.
#pragma once

#include "vif/attention.hpp"
#include "vif/tensor.hpp"

namespace vif {

struct VifParams {
  AttentionParams self_attn;   // intra-visual, d_model == d_l
  AttentionParams cross_attn;  // queried by the hidden state, d_model == d_l
  Tensor fusion_gamma, fusion_beta;  // [d_l]
  bool enable_self_attn = true;      // ablation switch; false bypasses the
                                     // first sub-layer exactly

  int d_l() const { return self_attn.d_model(); }
};

inline VifParams init_vif(int d_l, int n_heads, Rng& rng, bool enable_self_attn = true,
                          Precision prec = Precision::F64) {
  VifParams p;
  p.self_attn = init_attention(d_l, n_heads, rng, prec);
  p.cross_attn = init_attention(d_l, n_heads, rng, prec);
  p.fusion_gamma = Tensor::full({d_l}, 1.0, prec);
  p.fusion_beta = Tensor({d_l}, prec);
  p.enable_self_attn = enable_self_attn;
  return p;
}

inline VifParams zeros_like(const VifParams& p) {
  VifParams g;
  g.self_attn = zeros_like(p.self_attn);
  g.cross_attn = zeros_like(p.cross_attn);
  g.fusion_gamma = Tensor(p.fusion_gamma.shape(), p.fusion_gamma.precision());
  g.fusion_beta = Tensor(p.fusion_beta.shape(), p.fusion_beta.precision());
  g.enable_self_attn = p.enable_self_attn;
  return g;
}

inline void check_vif_params(const VifParams& p, const std::string& where) {
  check_attention_params(p.self_attn, where + ": self_attn");
  check_attention_params(p.cross_attn, where + ": cross_attn");
  const int d = p.self_attn.d_model();
  require(p.cross_attn.d_model() == d, where + ": sub-layer widths differ");
  require(p.fusion_gamma.numel() == d && p.fusion_beta.numel() == d,
          where + ": fusion norm width mismatch");
}

// The refine sub-layer norm carries no learnable parameters (the only
// learnable norm in the block is the fusion norm).
inline Tensor unit_gamma(int d, Precision prec) { return Tensor::full({d}, 1.0, prec); }
inline Tensor zero_beta(int d, Precision prec) { return Tensor({d}, prec); }

struct RefineActs {
  bool used = false;       // false when self-attention is disabled
  AttentionActs attn;
  LayerNormActs norm;
};

// Self-attention refinement of the visual embeddings:
//   refined = Norm(z_v + SelfAttn(z_v))
// With enable_self_attn=false the input is returned unchanged, bitwise.
inline Tensor refine_visual(const Tensor& z_v, const VifParams& params,
                            RefineActs* acts = nullptr) {
  check_vif_params(params, "refine_visual");
  require_matrix(z_v, "refine_visual");
  require(z_v.cols() == params.d_l(), "refine_visual: width != d_l");
  if (!params.enable_self_attn) {
    if (acts) acts->used = false;
    return z_v;
  }
  RefineActs local;
  RefineActs* a = acts ? acts : &local;
  a->used = true;
  Tensor attn_out = attend(z_v, z_v, params.self_attn, /*causal=*/false, &a->attn);
  Tensor summed = add(z_v, attn_out);
  return layer_norm(summed, unit_gamma(z_v.cols(), z_v.precision()),
                    zero_beta(z_v.cols(), z_v.precision()), kLayerNormEps, &a->norm);
}

// Per-image precomputed state: refined visual embeddings plus their
// cross-attention key/value projections. Immutable after build.
struct VisualCache {
  Tensor refined;         // [N_v x d_l]
  Tensor proj_k, proj_v;  // [N_v x d_l], columns grouped by head

  int n_v() const { return refined.rows(); }
};

inline VisualCache build_cache(const Tensor& z_v, const VifParams& params) {
  VisualCache c;
  c.refined = refine_visual(z_v, params);
  c.proj_k = matmul(c.refined, params.cross_attn.w_k);
  c.proj_v = matmul(c.refined, params.cross_attn.w_v);
  return c;
}

// Cross-attention retrieval: the query is projected from the current hidden
// state, keys/values come from the refined visual embeddings.
inline Tensor retrieve(const Tensor& h, const VisualCache& cache, const VifParams& params,
                       Tensor* head_weights = nullptr) {
  require(cache.proj_k.cols() == params.d_l() && cache.proj_v.cols() == params.d_l(),
          "retrieve: cache does not match params");
  return attend_incremental(h, cache.proj_k, cache.proj_v, params.cross_attn, head_weights);
}

// Additive fusion under layer norm: h' = Norm(z_h + h).
inline Tensor fuse(const Tensor& z_h, const Tensor& h, const VifParams& params) {
  require(z_h.same_shape(h), "fuse: shape mismatch");
  require(h.cols() == params.d_l(), "fuse: width != d_l");
  return layer_norm(add(z_h, h), params.fusion_gamma, params.fusion_beta);
}

struct StepState {
  Tensor h;              // decoder hidden state at this step
  Tensor z_h;            // retrieved visual evidence (the block output)
  Tensor h_fused;        // Norm(z_h + h)
  Tensor cross_weights;  // per-head retrieval weights, [n_heads x N_v]
};

inline StepState vif_step(const Tensor& h, const VisualCache& cache,
                          const VifParams& params) {
  StepState s;
  s.h = h;
  s.z_h = retrieve(h, cache, params, &s.cross_weights);
  s.h_fused = fuse(s.z_h, h, params);
  return s;
}

// ---------------------------------------------------------------------------
// Whole-sequence form used in training: every row of H is fused in one pass.
// ---------------------------------------------------------------------------

struct VifSeqActs {
  Tensor refined;
  RefineActs refine;
  AttentionActs cross;
  Tensor z_h;          // [L x d_l]
  LayerNormActs fuse_norm;
};

inline Tensor vif_forward_seq(const Tensor& h_seq, const Tensor& z_v,
                              const VifParams& params, VifSeqActs* acts) {
  check_vif_params(params, "vif_forward_seq");
  VifSeqActs local;
  VifSeqActs* a = acts ? acts : &local;
  a->refined = refine_visual(z_v, params, &a->refine);
  a->z_h = attend(h_seq, a->refined, params.cross_attn, /*causal=*/false, &a->cross);
  Tensor summed = add(a->z_h, h_seq);
  return layer_norm(summed, params.fusion_gamma, params.fusion_beta, kLayerNormEps,
                    &a->fuse_norm);
}

// Accumulates gradients w.r.t. the hidden states, the visual embeddings and
// all VifParams tensors.
inline void vif_backward_seq(const Tensor& h_seq, const Tensor& z_v,
                             const VifParams& params, const VifSeqActs& acts,
                             const Tensor& upstream, Tensor* dh_seq, Tensor* dz_v,
                             VifParams* grads) {
  const int L = h_seq.rows(), d = params.d_l();
  Tensor d_sum({L, d}, h_seq.precision());
  layer_norm_backward(acts.fuse_norm, params.fusion_gamma, upstream, &d_sum,
                      grads ? &grads->fusion_gamma : nullptr,
                      grads ? &grads->fusion_beta : nullptr);
  d_sum.round_to_precision();
  if (dh_seq) *dh_seq = add(*dh_seq, d_sum);  // residual side of the fusion

  Tensor d_refined(acts.refined.shape(), acts.refined.precision());
  attend_backward(h_seq, acts.refined, params.cross_attn, /*causal=*/false, acts.cross,
                  d_sum, dh_seq, &d_refined, grads ? &grads->cross_attn : nullptr);

  if (!params.enable_self_attn) {
    if (dz_v) *dz_v = add(*dz_v, d_refined);
    return;
  }
  Tensor d_pre_norm(z_v.shape(), z_v.precision());
  layer_norm_backward(acts.refine.norm,
                      unit_gamma(d, z_v.precision()), d_refined, &d_pre_norm,
                      nullptr, nullptr);
  d_pre_norm.round_to_precision();
  if (dz_v) *dz_v = add(*dz_v, d_pre_norm);
  attend_backward(z_v, z_v, params.self_attn, /*causal=*/false, acts.refine.attn,
                  d_pre_norm, dz_v, dz_v, grads ? &grads->self_attn : nullptr);
}

}  // namespace vif
