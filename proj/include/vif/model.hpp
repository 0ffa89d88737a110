// Minimal decoder-only multimodal LM: a deterministic vision stub embeds the
// grid image, a linear connector maps it into the decoder width, the visual
// rows are concatenated in front of the text embeddings, and a small causal
// pre-norm transformer predicts next tokens through the output projection.
// Generation runs either in baseline mode (logits from h), VIF mode (logits
// from the fused state), or passthrough mode (VIF plumbing active, fused
// state forced back to h; used to show the plumbing adds no perturbation).
#pragma once

#include <algorithm>
#include <optional>

#include "vif/former.hpp"
#include "vif/synthgrid.hpp"

namespace vif {

enum class Mode { kBaseline, kVif, kPassthrough };

inline std::string mode_name(Mode m) {
  switch (m) {
    case Mode::kBaseline: return "baseline";
    case Mode::kVif: return "vif";
    case Mode::kPassthrough: return "passthrough";
  }
  throw Error("mode_name: unknown mode");
}

inline Mode parse_mode(const std::string& s) {
  if (s == "baseline") return Mode::kBaseline;
  if (s == "vif") return Mode::kVif;
  if (s == "passthrough") return Mode::kPassthrough;
  throw Error("parse_mode: unknown mode '" + s + "'");
}

struct ModelConfig {
  int d_l = 64;        // decoder width
  int d_v = 32;        // vision stub width
  int n_blocks = 2;
  int n_heads = 4;
  int d_ff = 128;
  int vocab = 20;      // specials + symbols
  int max_seq = 512;
  int grid_max = 8;    // largest grid side the position tables cover
  int n_symbols = 16;  // vision stub symbol table size
  Precision prec = Precision::F32;

  void validate() const {
    require(d_l > 0 && d_v > 0 && n_blocks > 0 && d_ff > 0, "ModelConfig: non-positive dims");
    require(d_l >= 2, "ModelConfig: d_l must be >= 2");
    require(n_heads > 0 && d_l % n_heads == 0, "ModelConfig: d_l not divisible by n_heads");
    require(vocab >= Vocabulary::kNumSpecials + 2, "ModelConfig: vocab too small");
    require(max_seq > 0 && grid_max > 0 && n_symbols >= 2, "ModelConfig: bad limits");
    require(vocab >= Vocabulary::kNumSpecials + n_symbols,
            "ModelConfig: vocab too small to host symbol tokens plus specials");
  }
};

struct DecoderBlock {
  Tensor ln1_gamma, ln1_beta;
  AttentionParams attn;
  Tensor ln2_gamma, ln2_beta;
  Tensor w_ff1, b_ff1;  // [d_l x d_ff], [d_ff]
  Tensor w_ff2, b_ff2;  // [d_ff x d_l], [d_l]
};

struct ModelParams {
  ModelConfig cfg;
  // vision stub: symbol table plus 2-D grid position tables
  Tensor sym_embed;             // [n_symbols x d_v]
  Tensor row_embed, col_embed;  // [grid_max x d_v]
  // connector
  Tensor conn_w, conn_b;  // [d_v x d_l], [d_l]
  // decoder
  Tensor tok_embed;  // [vocab x d_l]
  Tensor pos_embed;  // [max_seq x d_l]
  std::vector<DecoderBlock> blocks;
  Tensor lnf_gamma, lnf_beta;
  Tensor w_o;  // [d_l x vocab]
};

inline ModelParams init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const Precision p = cfg.prec;
  ModelParams m;
  m.cfg = cfg;
  m.sym_embed = init_weight({cfg.n_symbols, cfg.d_v}, cfg.d_v, rng, p);
  m.row_embed = init_weight({cfg.grid_max, cfg.d_v}, cfg.d_v, rng, p);
  m.col_embed = init_weight({cfg.grid_max, cfg.d_v}, cfg.d_v, rng, p);
  m.conn_w = init_weight({cfg.d_v, cfg.d_l}, cfg.d_v, rng, p);
  m.conn_b = Tensor({cfg.d_l}, p);
  m.tok_embed = init_weight({cfg.vocab, cfg.d_l}, cfg.d_l, rng, p);
  m.pos_embed = init_weight({cfg.max_seq, cfg.d_l}, cfg.d_l, rng, p);
  m.blocks.resize(static_cast<size_t>(cfg.n_blocks));
  for (auto& b : m.blocks) {
    b.ln1_gamma = Tensor::full({cfg.d_l}, 1.0, p);
    b.ln1_beta = Tensor({cfg.d_l}, p);
    b.attn = init_attention(cfg.d_l, cfg.n_heads, rng, p);
    b.ln2_gamma = Tensor::full({cfg.d_l}, 1.0, p);
    b.ln2_beta = Tensor({cfg.d_l}, p);
    b.w_ff1 = init_weight({cfg.d_l, cfg.d_ff}, cfg.d_l, rng, p);
    b.b_ff1 = Tensor({cfg.d_ff}, p);
    b.w_ff2 = init_weight({cfg.d_ff, cfg.d_l}, cfg.d_ff, rng, p);
    b.b_ff2 = Tensor({cfg.d_l}, p);
  }
  m.lnf_gamma = Tensor::full({cfg.d_l}, 1.0, p);
  m.lnf_beta = Tensor({cfg.d_l}, p);
  m.w_o = init_weight({cfg.d_l, cfg.vocab}, cfg.d_l, rng, p);
  return m;
}

inline ModelParams zeros_like(const ModelParams& m) {
  ModelParams g = m;
  auto zero = [](Tensor& t) { t = Tensor(t.shape(), t.precision()); };
  zero(g.sym_embed);
  zero(g.row_embed);
  zero(g.col_embed);
  zero(g.conn_w);
  zero(g.conn_b);
  zero(g.tok_embed);
  zero(g.pos_embed);
  for (auto& b : g.blocks) {
    zero(b.ln1_gamma);
    zero(b.ln1_beta);
    b.attn = zeros_like(b.attn);
    zero(b.ln2_gamma);
    zero(b.ln2_beta);
    zero(b.w_ff1);
    zero(b.b_ff1);
    zero(b.w_ff2);
    zero(b.b_ff2);
  }
  zero(g.lnf_gamma);
  zero(g.lnf_beta);
  zero(g.w_o);
  return g;
}

// Stable name -> tensor registry; ordering is the checkpoint record order,
// the optimizer state key and the freeze-mask domain.
struct NamedParam {
  std::string name;
  Tensor* tensor;
};

inline void append_attention_params(std::vector<NamedParam>& out, const std::string& prefix,
                                    AttentionParams& p) {
  out.push_back({prefix + ".w_q", &p.w_q});
  out.push_back({prefix + ".w_k", &p.w_k});
  out.push_back({prefix + ".w_v", &p.w_v});
  out.push_back({prefix + ".w_o", &p.w_o});
}

inline std::vector<NamedParam> named_params(ModelParams& m) {
  std::vector<NamedParam> out;
  out.push_back({"vision.sym_embed", &m.sym_embed});
  out.push_back({"vision.row_embed", &m.row_embed});
  out.push_back({"vision.col_embed", &m.col_embed});
  out.push_back({"connector.w", &m.conn_w});
  out.push_back({"connector.b", &m.conn_b});
  out.push_back({"tok_embed", &m.tok_embed});
  out.push_back({"pos_embed", &m.pos_embed});
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    auto& b = m.blocks[i];
    out.push_back({p + ".ln1.gamma", &b.ln1_gamma});
    out.push_back({p + ".ln1.beta", &b.ln1_beta});
    append_attention_params(out, p + ".attn", b.attn);
    out.push_back({p + ".ln2.gamma", &b.ln2_gamma});
    out.push_back({p + ".ln2.beta", &b.ln2_beta});
    out.push_back({p + ".ffn.w1", &b.w_ff1});
    out.push_back({p + ".ffn.b1", &b.b_ff1});
    out.push_back({p + ".ffn.w2", &b.w_ff2});
    out.push_back({p + ".ffn.b2", &b.b_ff2});
  }
  out.push_back({"lnf.gamma", &m.lnf_gamma});
  out.push_back({"lnf.beta", &m.lnf_beta});
  out.push_back({"w_o", &m.w_o});
  return out;
}

inline std::vector<NamedParam> named_params(VifParams& v) {
  std::vector<NamedParam> out;
  append_attention_params(out, "vif.self_attn", v.self_attn);
  append_attention_params(out, "vif.cross_attn", v.cross_attn);
  out.push_back({"vif.fusion.gamma", &v.fusion_gamma});
  out.push_back({"vif.fusion.beta", &v.fusion_beta});
  return out;
}

inline std::vector<NamedParam> named_params(ModelParams& m, VifParams* v) {
  std::vector<NamedParam> out = named_params(m);
  if (v) {
    auto vp = named_params(*v);
    out.insert(out.end(), vp.begin(), vp.end());
  }
  return out;
}

inline int64_t count_params(ModelParams& m, VifParams* v = nullptr) {
  int64_t n = 0;
  for (auto& p : named_params(m, v)) n += p.tensor->numel();
  return n;
}

// ---------------------------------------------------------------------------
// Vision stub and connector
// ---------------------------------------------------------------------------

// Row i of the output is symbol_embed[cells[i]] + row_pos[r] + col_pos[c].
inline Tensor encode_image(const GridImage& img, const ModelParams& m) {
  require(img.k >= 1, "encode_image: empty grid");
  require(img.k <= m.cfg.grid_max, "encode_image: grid side exceeds position table");
  require(static_cast<int>(img.cells.size()) == img.n_cells(),
          "encode_image: cell count mismatch");
  const int d = m.cfg.d_v;
  Tensor out({img.n_cells(), d}, m.sym_embed.precision());
  for (int i = 0; i < img.n_cells(); ++i) {
    const int s = img.cells[static_cast<size_t>(i)];
    require(s >= 0 && s < m.cfg.n_symbols, "encode_image: unknown symbol id");
    const int r = i / img.k, c = i % img.k;
    double* o = out.row(i);
    const double* se = m.sym_embed.row(s);
    const double* re = m.row_embed.row(r);
    const double* ce = m.col_embed.row(c);
    for (int j = 0; j < d; ++j) o[j] = se[j] + re[j] + ce[j];
  }
  out.round_to_precision();
  return out;
}

// Affine connector into the decoder width (Z^v rows).
inline Tensor connect(const Tensor& v, const ModelParams& m) {
  require_matrix(v, "connect");
  require(v.cols() == m.cfg.d_v, "connect: input width != d_v");
  return broadcast_add_row(matmul(v, m.conn_w), m.conn_b);
}

inline void vision_backward(const GridImage& img, const Tensor& vis_raw,
                            const Tensor& d_zvis, ModelParams& g,
                            const ModelParams& m) {
  g.conn_w = add(g.conn_w, matmul_tn(vis_raw, d_zvis));
  colsum_into(d_zvis, g.conn_b);
  g.conn_b.round_to_precision();
  Tensor d_raw = matmul_nt(d_zvis, m.conn_w);
  for (int i = 0; i < img.n_cells(); ++i) {
    const int s = img.cells[static_cast<size_t>(i)];
    const int r = i / img.k, c = i % img.k;
    const double* dr = d_raw.row(i);
    for (int j = 0; j < m.cfg.d_v; ++j) {
      g.sym_embed.at(s, j) += dr[j];
      g.row_embed.at(r, j) += dr[j];
      g.col_embed.at(c, j) += dr[j];
    }
  }
  g.sym_embed.round_to_precision();
  g.row_embed.round_to_precision();
  g.col_embed.round_to_precision();
}

// ---------------------------------------------------------------------------
// Decoder stack
// ---------------------------------------------------------------------------

struct BlockActs {
  Tensor x_in;
  LayerNormActs ln1;
  Tensor ln1_out;
  AttentionActs attn;
  Tensor x_mid;
  LayerNormActs ln2;
  Tensor ln2_out;
  Tensor ff_pre;  // before gelu
  Tensor ff_act;  // after gelu
};

struct ForwardActs {
  std::vector<BlockActs> blocks;
  Tensor x_final;  // input to the final norm
  LayerNormActs lnf;
};

// Causal hidden states for an embedded sequence: position l's output depends
// only on positions <= l.
inline Tensor decoder_forward(const Tensor& z, const ModelParams& m,
                              ForwardActs* acts = nullptr) {
  require_matrix(z, "forward");
  require(z.cols() == m.cfg.d_l, "forward: width != d_l");
  require(z.rows() <= m.cfg.max_seq,
          "forward: sequence length " + std::to_string(z.rows()) +
              " exceeds max_seq " + std::to_string(m.cfg.max_seq));
  if (acts) acts->blocks.resize(m.blocks.size());
  Tensor x = z;
  for (size_t bi = 0; bi < m.blocks.size(); ++bi) {
    const auto& b = m.blocks[bi];
    BlockActs local;
    BlockActs* a = acts ? &acts->blocks[bi] : &local;
    a->x_in = x;
    a->ln1_out = layer_norm(x, b.ln1_gamma, b.ln1_beta, kLayerNormEps, &a->ln1);
    Tensor attn_out = attend(a->ln1_out, a->ln1_out, b.attn, /*causal=*/true, &a->attn);
    a->x_mid = add(x, attn_out);
    a->ln2_out = layer_norm(a->x_mid, b.ln2_gamma, b.ln2_beta, kLayerNormEps, &a->ln2);
    a->ff_pre = broadcast_add_row(matmul(a->ln2_out, b.w_ff1), b.b_ff1);
    a->ff_act = gelu(a->ff_pre);
    Tensor ff_out = broadcast_add_row(matmul(a->ff_act, b.w_ff2), b.b_ff2);
    x = add(a->x_mid, ff_out);
  }
  if (acts) acts->x_final = x;
  LayerNormActs lnf_local;
  Tensor h = layer_norm(x, m.lnf_gamma, m.lnf_beta, kLayerNormEps,
                        acts ? &acts->lnf : &lnf_local);
  return h;
}

// Gradients through the decoder stack; accumulates into g and returns dz.
inline Tensor decoder_backward(const ModelParams& m, const ForwardActs& acts,
                               const Tensor& upstream, ModelParams& g) {
  const int L = acts.x_final.rows(), d = m.cfg.d_l;
  const Precision prec = acts.x_final.precision();
  Tensor dx({L, d}, prec);
  layer_norm_backward(acts.lnf, m.lnf_gamma, upstream, &dx, &g.lnf_gamma, &g.lnf_beta);
  dx.round_to_precision();
  g.lnf_gamma.round_to_precision();
  g.lnf_beta.round_to_precision();

  for (int bi = static_cast<int>(m.blocks.size()) - 1; bi >= 0; --bi) {
    const auto& b = m.blocks[static_cast<size_t>(bi)];
    auto& gb = g.blocks[static_cast<size_t>(bi)];
    const auto& a = acts.blocks[static_cast<size_t>(bi)];

    // feed-forward branch: x_out = x_mid + gelu(ln2(x_mid) w1 + b1) w2 + b2
    colsum_into(dx, gb.b_ff2);
    gb.b_ff2.round_to_precision();
    gb.w_ff2 = add(gb.w_ff2, matmul_tn(a.ff_act, dx));
    Tensor d_ff_act = matmul_nt(dx, b.w_ff2);
    Tensor d_ff_pre = gelu_backward(a.ff_pre, d_ff_act);
    colsum_into(d_ff_pre, gb.b_ff1);
    gb.b_ff1.round_to_precision();
    gb.w_ff1 = add(gb.w_ff1, matmul_tn(a.ln2_out, d_ff_pre));
    Tensor d_ln2_out = matmul_nt(d_ff_pre, b.w_ff1);
    Tensor d_x_mid = dx;  // residual path
    layer_norm_backward(a.ln2, b.ln2_gamma, d_ln2_out, &d_x_mid, &gb.ln2_gamma,
                        &gb.ln2_beta);
    d_x_mid.round_to_precision();
    gb.ln2_gamma.round_to_precision();
    gb.ln2_beta.round_to_precision();

    // attention branch: x_mid = x_in + attn(ln1(x_in))
    Tensor d_ln1_out({L, d}, prec);
    attend_backward(a.ln1_out, a.ln1_out, b.attn, /*causal=*/true, a.attn, d_x_mid,
                    &d_ln1_out, &d_ln1_out, &gb.attn);
    Tensor d_x_in = d_x_mid;  // residual path
    layer_norm_backward(a.ln1, b.ln1_gamma, d_ln1_out, &d_x_in, &gb.ln1_gamma,
                        &gb.ln1_beta);
    d_x_in.round_to_precision();
    gb.ln1_gamma.round_to_precision();
    gb.ln1_beta.round_to_precision();
    dx = d_x_in;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Sequence assembly
// ---------------------------------------------------------------------------

// Decoder input: [connector(vision stub) ; token embeddings] plus learned
// absolute position embeddings over the whole combined sequence. The visual
// block is a plain prefix with no interleaving.
inline Tensor assemble_inputs(const Tensor& z_vis, const std::vector<int>& text,
                              const ModelParams& m) {
  const int n_v = z_vis.rows(), n_t = static_cast<int>(text.size());
  const int L = n_v + n_t, d = m.cfg.d_l;
  require(L <= m.cfg.max_seq, "assemble_inputs: sequence exceeds max_seq");
  Tensor z({L, d}, z_vis.precision());
  for (int i = 0; i < n_v; ++i) {
    const double* v = z_vis.row(i);
    const double* p = m.pos_embed.row(i);
    double* o = z.row(i);
    for (int j = 0; j < d; ++j) o[j] = v[j] + p[j];
  }
  for (int t = 0; t < n_t; ++t) {
    const int tok = text[static_cast<size_t>(t)];
    require(tok >= 0 && tok < m.cfg.vocab, "assemble_inputs: token id out of range");
    const double* e = m.tok_embed.row(tok);
    const double* p = m.pos_embed.row(n_v + t);
    double* o = z.row(n_v + t);
    for (int j = 0; j < d; ++j) o[j] = e[j] + p[j];
  }
  z.round_to_precision();
  return z;
}

// ---------------------------------------------------------------------------
// Next-token distribution and loss
// ---------------------------------------------------------------------------

// softmax(W_o h) in baseline/passthrough mode, softmax(W_o h') in VIF mode.
inline Tensor next_dist(const Tensor& h, const ModelParams& m, Mode mode,
                        const VisualCache* cache = nullptr,
                        const VifParams* vif = nullptr) {
  require(h.rows() == 1 && h.cols() == m.cfg.d_l, "next_dist: bad hidden state shape");
  if (mode == Mode::kVif) {
    require(cache != nullptr && vif != nullptr, "next_dist: VIF mode requires a visual cache");
    StepState s = vif_step(h, *cache, *vif);
    return softmax_rows(matmul(s.h_fused, m.w_o));
  }
  return softmax_rows(matmul(h, m.w_o));
}

// Mean negative log-likelihood over unmasked positions, from raw logits.
inline double ntp_loss(const Tensor& logits, const std::vector<int>& targets,
                       const std::vector<bool>& mask) {
  require_matrix(logits, "ntp_loss");
  require(static_cast<size_t>(logits.rows()) == targets.size() &&
              targets.size() == mask.size(),
          "ntp_loss: length mismatch");
  logits.check_finite("ntp_loss");
  double sum = 0.0;
  int n = 0;
  for (int i = 0; i < logits.rows(); ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const int t = targets[static_cast<size_t>(i)];
    require(t >= 0 && t < logits.cols(), "ntp_loss: target id out of range");
    const double* row = logits.row(i);
    double mx = row[0];
    for (int j = 1; j < logits.cols(); ++j) mx = std::max(mx, row[j]);
    double lse = 0.0;
    for (int j = 0; j < logits.cols(); ++j) lse += std::exp(row[j] - mx);
    sum += std::log(lse) + mx - row[t];
    ++n;
  }
  require(n > 0, "ntp_loss: no unmasked positions");
  return sum / n;
}

// ---------------------------------------------------------------------------
// Teacher-forced training pass (per sample)
// ---------------------------------------------------------------------------

struct LossActs {
  Tensor vis_raw;            // [N_v x d_v]
  Tensor z_vis;              // connector outputs (pre position embedding)
  std::vector<int> text_in;  // prompt ++ targets[:-1]
  Tensor z;                  // assembled decoder input
  ForwardActs dec;
  Tensor h;                  // decoder hidden states [L x d_l]
  VifSeqActs vif;
  Tensor h_out;              // rows projected by w_o (h or fused h')
  Tensor probs;              // softmax(logits)
  std::vector<int> labels;   // per sequence row; -1 where no loss
  double sum_nll = 0.0;
  int n_tokens = 0;
};

// Returns summed NLL over this sample's target positions (the caller
// normalizes across the batch). Fills acts for the matching backward call.
inline double sample_loss_forward(const ModelParams& m, const VifParams* vp, Mode mode,
                                  const TaskSample& sample, LossActs& acts) {
  require(!sample.prompt.empty(), "sample_loss_forward: empty prompt");
  require(!sample.targets.empty(), "sample_loss_forward: empty targets");
  if (mode == Mode::kVif)
    require(vp != nullptr, "sample_loss_forward: VIF mode requires VifParams");

  acts.vis_raw = encode_image(sample.image, m);
  acts.z_vis = connect(acts.vis_raw, m);
  acts.text_in = sample.prompt;
  acts.text_in.insert(acts.text_in.end(), sample.targets.begin(),
                      sample.targets.end() - 1);
  acts.z = assemble_inputs(acts.z_vis, acts.text_in, m);
  acts.h = decoder_forward(acts.z, m, &acts.dec);

  if (mode == Mode::kVif) {
    acts.h_out = vif_forward_seq(acts.h, acts.z_vis, *vp, &acts.vif);
  } else {
    acts.h_out = acts.h;  // passthrough trains identically to baseline
  }
  Tensor logits = matmul(acts.h_out, m.w_o);
  acts.probs = softmax_rows(logits);

  const int n_v = acts.z_vis.rows();
  const int p_len = static_cast<int>(sample.prompt.size());
  const int L = acts.z.rows();
  acts.labels.assign(static_cast<size_t>(L), -1);
  for (size_t t = 0; t < sample.targets.size(); ++t)
    acts.labels[static_cast<size_t>(n_v + p_len - 1 + static_cast<int>(t))] =
        sample.targets[t];

  acts.sum_nll = 0.0;
  acts.n_tokens = 0;
  for (int i = 0; i < L; ++i) {
    const int lbl = acts.labels[static_cast<size_t>(i)];
    if (lbl < 0) continue;
    const double p = acts.probs.at(i, lbl);
    require(p > 0.0, "sample_loss_forward: zero probability on target");
    acts.sum_nll += -std::log(p);
    ++acts.n_tokens;
  }
  require(std::isfinite(acts.sum_nll), "sample_loss_forward: non-finite loss");
  return acts.sum_nll;
}

// upstream_scale is d(total objective)/d(sum_nll of this sample), i.e.
// 1/(tokens in batch) when the objective is the batch token mean.
inline void sample_loss_backward(const ModelParams& m, const VifParams* vp, Mode mode,
                                 const TaskSample& sample, const LossActs& acts,
                                 double upstream_scale, ModelParams& g, VifParams* gv) {
  const int L = acts.z.rows(), d = m.cfg.d_l;
  const Precision prec = acts.z.precision();

  // d(sum_nll)/d(logits) = probs - onehot at labeled rows
  Tensor dlogits({L, m.cfg.vocab}, prec);
  for (int i = 0; i < L; ++i) {
    const int lbl = acts.labels[static_cast<size_t>(i)];
    if (lbl < 0) continue;
    const double* p = acts.probs.row(i);
    double* dl = dlogits.row(i);
    for (int j = 0; j < m.cfg.vocab; ++j) dl[j] = p[j] * upstream_scale;
    dl[lbl] -= upstream_scale;
  }
  dlogits.round_to_precision();

  g.w_o = add(g.w_o, matmul_tn(acts.h_out, dlogits));
  Tensor dh_out = matmul_nt(dlogits, m.w_o);

  Tensor dh({L, d}, prec);
  Tensor d_zvis(acts.z_vis.shape(), prec);
  if (mode == Mode::kVif) {
    vif_backward_seq(acts.h, acts.z_vis, *vp, acts.vif, dh_out, &dh, &d_zvis, gv);
  } else {
    dh = dh_out;
  }

  Tensor dz = decoder_backward(m, acts.dec, dh, g);

  // split dz into vision rows and text rows; position embeddings see all rows
  const int n_v = acts.z_vis.rows();
  for (int i = 0; i < L; ++i) {
    const double* dzi = dz.row(i);
    for (int j = 0; j < d; ++j) g.pos_embed.at(i, j) += dzi[j];
  }
  g.pos_embed.round_to_precision();
  for (int i = 0; i < n_v; ++i) {
    const double* dzi = dz.row(i);
    for (int j = 0; j < d; ++j) d_zvis.at(i, j) += dzi[j];
  }
  d_zvis.round_to_precision();
  for (size_t t = 0; t < acts.text_in.size(); ++t) {
    const int tok = acts.text_in[t];
    const double* dzi = dz.row(n_v + static_cast<int>(t));
    for (int j = 0; j < d; ++j) g.tok_embed.at(tok, j) += dzi[j];
  }
  g.tok_embed.round_to_precision();

  vision_backward(sample.image, acts.vis_raw, d_zvis, g, m);
}

// ---------------------------------------------------------------------------
// Greedy generation
// ---------------------------------------------------------------------------

struct GenerationConfig {
  Mode mode = Mode::kBaseline;
  int max_new_tokens = 1;
  uint64_t seed = 0;  // recorded in outputs; greedy decoding draws nothing
  // Diagnostic: rebuild the visual cache from scratch at every step instead
  // of reusing the per-image cache (the naive route the cache replaces).
  bool recompute_cache_each_step = false;
};

struct StepRecord {
  int token = -1;
  Tensor dist;           // next-token distribution the argmax was taken from
  Tensor h;              // decoder hidden state
  Tensor z_h;            // retrieved visual evidence; empty in baseline mode
  Tensor h_fused;        // state actually projected (h in baseline/passthrough)
  Tensor cross_weights;  // per-head retrieval weights; empty in baseline mode
};

struct DecodingTrace {
  Mode mode = Mode::kBaseline;
  int n_v = 0;
  int n_t = 0;  // prompt length
  std::vector<int> prompt;
  std::vector<StepRecord> steps;

  std::vector<int> tokens() const {
    std::vector<int> out;
    out.reserve(steps.size());
    for (const auto& s : steps) out.push_back(s.token);
    return out;
  }
};

// Incremental decode state: per block, projected K/V rows seen so far.
struct DecodeState {
  struct BlockKV {
    Tensor k, v;
  };
  std::vector<BlockKV> kv;
  int len = 0;

  explicit DecodeState(const ModelParams& m) {
    kv.resize(m.blocks.size());
    for (auto& b : kv) {
      b.k = Tensor({m.cfg.max_seq, m.cfg.d_l}, m.cfg.prec);
      b.v = Tensor({m.cfg.max_seq, m.cfg.d_l}, m.cfg.prec);
    }
  }
};

// Feed one embedded row; returns the final-norm hidden state for its
// position. Bit-identical to the matching row of decoder_forward.
inline Tensor decoder_step(const Tensor& x_row, const ModelParams& m, DecodeState& st) {
  require(x_row.rows() == 1 && x_row.cols() == m.cfg.d_l, "decoder_step: bad row shape");
  require(st.len < m.cfg.max_seq, "decoder_step: sequence exceeds max_seq");
  Tensor x = x_row;
  for (size_t bi = 0; bi < m.blocks.size(); ++bi) {
    const auto& b = m.blocks[bi];
    auto& kv = st.kv[bi];
    Tensor u = layer_norm(x, b.ln1_gamma, b.ln1_beta);
    Tensor k_new = matmul(u, b.attn.w_k);
    Tensor v_new = matmul(u, b.attn.w_v);
    std::copy(k_new.row(0), k_new.row(0) + m.cfg.d_l, kv.k.row(st.len));
    std::copy(v_new.row(0), v_new.row(0) + m.cfg.d_l, kv.v.row(st.len));
    Tensor attn_out = attend_cached_rows(u, kv.k, kv.v, st.len + 1, b.attn);
    x = add(x, attn_out);
    Tensor u2 = layer_norm(x, b.ln2_gamma, b.ln2_beta);
    Tensor ff = broadcast_add_row(matmul(gelu(broadcast_add_row(matmul(u2, b.w_ff1), b.b_ff1)), b.w_ff2), b.b_ff2);
    x = add(x, ff);
  }
  ++st.len;
  return layer_norm(x, m.lnf_gamma, m.lnf_beta);
}

inline Tensor embed_token(int tok, int position, const ModelParams& m) {
  require(tok >= 0 && tok < m.cfg.vocab, "embed_token: token id out of range");
  require(position < m.cfg.max_seq, "embed_token: position exceeds max_seq");
  Tensor z({1, m.cfg.d_l}, m.cfg.prec);
  const double* e = m.tok_embed.row(tok);
  const double* p = m.pos_embed.row(position);
  for (int j = 0; j < m.cfg.d_l; ++j) z.at(0, j) = e[j] + p[j];
  z.round_to_precision();
  return z;
}

// Greedy autoregressive decode; stops at EOS or max_new_tokens. Argmax ties
// break to the lowest token id, so identical inputs give identical traces.
inline DecodingTrace generate(const GridImage& image, const std::vector<int>& prompt,
                              const ModelParams& m, const VifParams* vp,
                              const GenerationConfig& cfg) {
  require(!prompt.empty(), "generate: empty prompt");
  require(cfg.max_new_tokens >= 1, "generate: max_new_tokens must be >= 1");
  const bool wants_vif = cfg.mode != Mode::kBaseline;
  if (wants_vif) require(vp != nullptr, "generate: VIF/passthrough mode requires VifParams");

  Tensor vis_raw = encode_image(image, m);
  Tensor z_vis = connect(vis_raw, m);
  const int n_v = z_vis.rows();
  const int p_len = static_cast<int>(prompt.size());
  require(n_v + p_len + cfg.max_new_tokens <= m.cfg.max_seq,
          "generate: prefix plus generation budget exceeds max_seq");

  std::optional<VisualCache> cache;
  if (wants_vif && !cfg.recompute_cache_each_step) cache = build_cache(z_vis, *vp);

  DecodingTrace trace;
  trace.mode = cfg.mode;
  trace.n_v = n_v;
  trace.n_t = p_len;
  trace.prompt = prompt;

  DecodeState st(m);
  Tensor h;
  for (int i = 0; i < n_v; ++i) {
    Tensor row({1, m.cfg.d_l}, m.cfg.prec);
    const double* v = z_vis.row(i);
    const double* p = m.pos_embed.row(i);
    for (int j = 0; j < m.cfg.d_l; ++j) row.at(0, j) = v[j] + p[j];
    row.round_to_precision();
    h = decoder_step(row, m, st);
  }
  for (int t = 0; t < p_len; ++t)
    h = decoder_step(embed_token(prompt[static_cast<size_t>(t)], n_v + t, m), m, st);

  for (int stp = 0; stp < cfg.max_new_tokens; ++stp) {
    StepRecord rec;
    rec.h = h;
    Tensor projected;
    if (wants_vif) {
      const VisualCache* c;
      VisualCache fresh;
      if (cfg.recompute_cache_each_step) {
        fresh = build_cache(z_vis, *vp);
        c = &fresh;
      } else {
        c = &*cache;
      }
      StepState s = vif_step(h, *c, *vp);
      rec.z_h = s.z_h;
      rec.cross_weights = s.cross_weights;
      rec.h_fused = cfg.mode == Mode::kPassthrough ? h : s.h_fused;
    } else {
      rec.h_fused = h;
    }
    rec.dist = softmax_rows(matmul(rec.h_fused, m.w_o));

    int best = 0;
    for (int j = 1; j < m.cfg.vocab; ++j)
      if (rec.dist.at(0, j) > rec.dist.at(0, best)) best = j;
    rec.token = best;
    trace.steps.push_back(std::move(rec));

    if (best == Vocabulary::kEos || stp + 1 == cfg.max_new_tokens) break;
    h = decoder_step(embed_token(best, n_v + p_len + stp, m), m, st);
  }
  return trace;
}

}  // namespace vif
