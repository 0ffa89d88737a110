// Multi-head attention used by the decoder blocks (causal self-attention)
// and by the VIF block (visual self-attention and hidden-state-queried
// cross-attention). Heads are column slices of fused [d_model x d_model]
// projections; logits are scaled by 1/sqrt(d_head).
#pragma once

#include "vif/tensor.hpp"

namespace vif {

struct AttentionParams {
  Tensor w_q, w_k, w_v, w_o;  // each [d_model x d_model]
  int n_heads = 1;

  int d_model() const { return w_q.rows(); }
  int d_head() const { return d_model() / n_heads; }
};

inline AttentionParams init_attention(int d_model, int n_heads, Rng& rng,
                                      Precision prec = Precision::F64) {
  require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0,
          "init_attention: d_model must be divisible by n_heads");
  AttentionParams p;
  p.n_heads = n_heads;
  p.w_q = init_weight({d_model, d_model}, d_model, rng, prec);
  p.w_k = init_weight({d_model, d_model}, d_model, rng, prec);
  p.w_v = init_weight({d_model, d_model}, d_model, rng, prec);
  p.w_o = init_weight({d_model, d_model}, d_model, rng, prec);
  return p;
}

inline AttentionParams zeros_like(const AttentionParams& p) {
  AttentionParams g;
  g.n_heads = p.n_heads;
  g.w_q = Tensor(p.w_q.shape(), p.w_q.precision());
  g.w_k = Tensor(p.w_k.shape(), p.w_k.precision());
  g.w_v = Tensor(p.w_v.shape(), p.w_v.precision());
  g.w_o = Tensor(p.w_o.shape(), p.w_o.precision());
  return g;
}

inline void check_attention_params(const AttentionParams& p, const std::string& where) {
  require(p.n_heads > 0, where + ": n_heads must be positive");
  const int d = p.w_q.rows();
  for (const Tensor* w : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) {
    require_matrix(*w, where);
    require(w->rows() == d && w->cols() == d, where + ": projection must be square d_model");
    w->check_finite(where);
  }
  require(d % p.n_heads == 0, where + ": d_model not divisible by n_heads");
}

// Saved forward intermediates for the backward pass.
struct AttentionActs {
  Tensor q, k, v;    // projected inputs
  Tensor weights;    // [n_heads*q x k]; head h holds rows [h*q, (h+1)*q)
  Tensor concat;     // per-head mixed values before w_o, [q x d]
};

namespace detail {

// Softmax of scores[0..len) in place, with max subtraction. Rounds through
// float afterwards when prec is F32 so that full and incremental paths see
// bit-identical weights.
inline void softmax_span(double* scores, int len, Precision prec) {
  double mx = scores[0];
  for (int j = 1; j < len; ++j) mx = std::max(mx, scores[j]);
  double sum = 0.0;
  for (int j = 0; j < len; ++j) {
    scores[j] = std::exp(scores[j] - mx);
    sum += scores[j];
  }
  for (int j = 0; j < len; ++j) scores[j] /= sum;
  if (prec == Precision::F32)
    for (int j = 0; j < len; ++j) scores[j] = static_cast<double>(static_cast<float>(scores[j]));
}

}  // namespace detail

// attend(queries_src, kv_src): output[i] = w_o applied to the concatenation
// over heads of attention-weighted projected value rows. Self-attention is
// the queries_src == kv_src case. With causal set, query i sees keys <= i
// and the weight on any future position is exactly zero.
inline Tensor attend(const Tensor& queries_src, const Tensor& kv_src,
                     const AttentionParams& params, bool causal = false,
                     AttentionActs* acts = nullptr) {
  check_attention_params(params, "attend");
  require_matrix(queries_src, "attend: queries_src");
  require_matrix(kv_src, "attend: kv_src");
  const int d = params.d_model();
  require(queries_src.cols() == d, "attend: queries width != d_model");
  require(kv_src.cols() == d, "attend: kv width != d_model");
  require(!causal || queries_src.rows() == kv_src.rows(),
          "attend: causal flag requires q == k");

  const int nq = queries_src.rows(), nk = kv_src.rows();
  const int H = params.n_heads, dh = params.d_head();
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const Precision prec = queries_src.precision();

  Tensor q = matmul(queries_src, params.w_q);
  Tensor k = matmul(kv_src, params.w_k);
  Tensor v = matmul(kv_src, params.w_v);
  Tensor weights({H * nq, nk}, prec);
  Tensor concat({nq, d}, prec);

  std::vector<double> scores(static_cast<size_t>(nk));
  for (int h = 0; h < H; ++h) {
    const int c0 = h * dh;
    for (int i = 0; i < nq; ++i) {
      const int limit = causal ? i + 1 : nk;
      const double* qi = q.row(i) + c0;
      for (int j = 0; j < limit; ++j) {
        const double* kj = k.row(j) + c0;
        double s = 0.0;
        for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
        scores[static_cast<size_t>(j)] = s * scl;
      }
      detail::softmax_span(scores.data(), limit, prec);
      double* wrow = weights.row(h * nq + i);
      for (int j = 0; j < limit; ++j) wrow[j] = scores[static_cast<size_t>(j)];
      double* out = concat.row(i) + c0;
      for (int j = 0; j < limit; ++j) {
        const double w = wrow[j];
        const double* vj = v.row(j) + c0;
        for (int c = 0; c < dh; ++c) out[c] += w * vj[c];
      }
    }
  }
  concat.round_to_precision();

  Tensor out = matmul(concat, params.w_o);
  if (acts) {
    acts->q = std::move(q);
    acts->k = std::move(k);
    acts->v = std::move(v);
    acts->weights = std::move(weights);
    acts->concat = std::move(concat);
  }
  return out;
}

// Gradients through attend(). Accumulates (+=) into the output tensors, so
// the caller may pass the same tensor for d_queries_src and d_kv_src in the
// self-attention case. Any of the outputs may be null.
inline void attend_backward(const Tensor& queries_src, const Tensor& kv_src,
                            const AttentionParams& params, bool causal,
                            const AttentionActs& acts, const Tensor& upstream,
                            Tensor* d_queries_src, Tensor* d_kv_src,
                            AttentionParams* grads) {
  const int nq = queries_src.rows(), nk = kv_src.rows();
  const int H = params.n_heads, dh = params.d_head(), d = params.d_model();
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  require(upstream.rows() == nq && upstream.cols() == d,
          "attend_backward: upstream shape mismatch");

  Tensor d_concat = matmul_nt(upstream, params.w_o);
  if (grads) grads->w_o = add(grads->w_o, matmul_tn(acts.concat, upstream));

  Tensor dq({nq, d}, Precision::F64);
  Tensor dk({nk, d}, Precision::F64);
  Tensor dv({nk, d}, Precision::F64);

  std::vector<double> dw(static_cast<size_t>(nk));
  for (int h = 0; h < H; ++h) {
    const int c0 = h * dh;
    for (int i = 0; i < nq; ++i) {
      const int limit = causal ? i + 1 : nk;
      const double* wrow = acts.weights.row(h * nq + i);
      const double* dci = d_concat.row(i) + c0;
      // weight grads, then softmax backward within the visible span
      double dot = 0.0;
      for (int j = 0; j < limit; ++j) {
        const double* vj = acts.v.row(j) + c0;
        double s = 0.0;
        for (int c = 0; c < dh; ++c) s += dci[c] * vj[c];
        dw[static_cast<size_t>(j)] = s;
        dot += s * wrow[j];
      }
      const double* qi = acts.q.row(i) + c0;
      double* dqi = dq.row(i) + c0;
      for (int j = 0; j < limit; ++j) {
        const double dscore = wrow[j] * (dw[static_cast<size_t>(j)] - dot) * scl;
        const double* kj = acts.k.row(j) + c0;
        double* dkj = dk.row(j) + c0;
        double* dvj = dv.row(j) + c0;
        for (int c = 0; c < dh; ++c) {
          dqi[c] += dscore * kj[c];
          dkj[c] += dscore * qi[c];
          dvj[c] += wrow[j] * dci[c];
        }
      }
    }
  }

  if (grads) {
    grads->w_q = add(grads->w_q, matmul_tn(queries_src, dq.to_precision(queries_src.precision())));
    grads->w_k = add(grads->w_k, matmul_tn(kv_src, dk.to_precision(kv_src.precision())));
    grads->w_v = add(grads->w_v, matmul_tn(kv_src, dv.to_precision(kv_src.precision())));
  }
  if (d_queries_src)
    *d_queries_src = add(*d_queries_src, matmul_nt(dq.to_precision(queries_src.precision()), params.w_q));
  if (d_kv_src) {
    *d_kv_src = add(*d_kv_src, matmul_nt(dk.to_precision(kv_src.precision()), params.w_k));
    *d_kv_src = add(*d_kv_src, matmul_nt(dv.to_precision(kv_src.precision()), params.w_v));
  }
}

// Step-wise attention over the first `rows` rows of preallocated projected
// K/V buffers. Shared by attend_incremental and the decoder's growing KV
// cache so both paths stay bit-identical with full attend().
inline Tensor attend_cached_rows(const Tensor& query, const Tensor& k_buf,
                                 const Tensor& v_buf, int rows,
                                 const AttentionParams& params,
                                 Tensor* head_weights = nullptr) {
  check_attention_params(params, "attend_incremental");
  require(!k_buf.empty() && !v_buf.empty(), "attend_incremental: empty cache");
  require_matrix(query, "attend_incremental: query");
  require(query.rows() == 1, "attend_incremental: query must be a single row");
  const int d = params.d_model();
  require(query.cols() == d, "attend_incremental: query width != d_model");
  require_matrix(k_buf, "attend_incremental: cached_k");
  require_matrix(v_buf, "attend_incremental: cached_v");
  require(k_buf.cols() == d && v_buf.cols() == d,
          "attend_incremental: cache width does not match params");
  require(rows >= 1 && rows <= k_buf.rows() && rows <= v_buf.rows(),
          "attend_incremental: cache row count out of range");

  const int H = params.n_heads, dh = params.d_head();
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  const Precision prec = query.precision();

  Tensor q = matmul(query, params.w_q);
  Tensor concat({1, d}, prec);
  if (head_weights) *head_weights = Tensor({H, rows}, prec);

  std::vector<double> scores(static_cast<size_t>(rows));
  for (int h = 0; h < H; ++h) {
    const int c0 = h * dh;
    const double* qr = q.row(0) + c0;
    for (int j = 0; j < rows; ++j) {
      const double* kj = k_buf.row(j) + c0;
      double s = 0.0;
      for (int c = 0; c < dh; ++c) s += qr[c] * kj[c];
      scores[static_cast<size_t>(j)] = s * scl;
    }
    detail::softmax_span(scores.data(), rows, prec);
    if (head_weights)
      for (int j = 0; j < rows; ++j) head_weights->at(h, j) = scores[static_cast<size_t>(j)];
    double* out = concat.row(0) + c0;
    for (int j = 0; j < rows; ++j) {
      const double w = scores[static_cast<size_t>(j)];
      const double* vj = v_buf.row(j) + c0;
      for (int c = 0; c < dh; ++c) out[c] += w * vj[c];
    }
  }
  concat.round_to_precision();
  return matmul(concat, params.w_o);
}

// Step-wise attention for decoding: one raw query row against K/V rows that
// were already projected (by this params object). Equals the last-row output
// of attend() over the full sequence. Optionally reports the per-head
// attention weights as [n_heads x k].
inline Tensor attend_incremental(const Tensor& query, const Tensor& cached_k,
                                 const Tensor& cached_v, const AttentionParams& params,
                                 Tensor* head_weights = nullptr) {
  require(!cached_k.empty() && !cached_v.empty(), "attend_incremental: empty cache");
  require(cached_k.ndim() == 2 && cached_v.ndim() == 2 &&
              cached_k.rows() == cached_v.rows(),
          "attend_incremental: cached K/V row counts differ");
  return attend_cached_rows(query, cached_k, cached_v, cached_k.rows(), params,
                            head_weights);
}

}  // namespace vif
