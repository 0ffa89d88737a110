// Diagnostics: per-position image-text correlation curves with
// Savitzky-Golay smoothing and slope estimation, a brute-force verifier of
// the conditional mutual-information chain rule on explicit discrete joints,
// and a matched-workload overhead benchmark for the former block.
#pragma once

#include <chrono>

#include "vif/model.hpp"

namespace vif {

// ---------------------------------------------------------------------------
// Savitzky-Golay smoothing
// ---------------------------------------------------------------------------

namespace detail {

// Gaussian elimination with partial pivoting; systems here are at most
// (polyorder+1)^2 with polyorder < window, so conditioning is not a concern.
inline std::vector<double> solve_small(std::vector<std::vector<double>> a,
                                       std::vector<double> b) {
  const size_t n = b.size();
  for (size_t col = 0; col < n; ++col) {
    size_t piv = col;
    for (size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    require(std::abs(a[col][col]) > 1e-300, "solve_small: singular system");
    for (size_t r = col + 1; r < n; ++r) {
      const double f = a[r][col] / a[col][col];
      for (size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n, 0.0);
  for (size_t r = n; r-- > 0;) {
    double s = b[r];
    for (size_t c = r + 1; c < n; ++c) s -= a[r][c] * x[c];
    x[r] = s / a[r][r];
  }
  return x;
}

// Least-squares polynomial fit of y over integer offsets xs; returns the
// coefficients lowest order first.
inline std::vector<double> polyfit(const std::vector<double>& xs,
                                   const std::vector<double>& ys, int order) {
  const size_t n = xs.size();
  const size_t m = static_cast<size_t>(order) + 1;
  std::vector<std::vector<double>> ata(m, std::vector<double>(m, 0.0));
  std::vector<double> atb(m, 0.0);
  for (size_t i = 0; i < n; ++i) {
    double pow_r = 1.0;
    std::vector<double> powers(m);
    for (size_t r = 0; r < m; ++r) {
      powers[r] = pow_r;
      pow_r *= xs[i];
    }
    for (size_t r = 0; r < m; ++r) {
      atb[r] += powers[r] * ys[i];
      for (size_t c = 0; c < m; ++c) ata[r][c] += powers[r] * powers[c];
    }
  }
  return solve_small(std::move(ata), std::move(atb));
}

inline double polyval(const std::vector<double>& coeffs, double x) {
  double v = 0.0;
  for (size_t i = coeffs.size(); i-- > 0;) v = v * x + coeffs[i];
  return v;
}

}  // namespace detail

// Interior points take the center value of the least-squares polynomial fit
// over their window; the first/last half-windows are filled by evaluating
// the polynomial fitted to the nearest full window (so any series that is
// itself a degree <= polyorder polynomial is reproduced everywhere).
inline std::vector<double> savgol(const std::vector<double>& values, int window,
                                  int polyorder) {
  require(window >= 1 && window % 2 == 1, "savgol: window must be odd and positive");
  require(polyorder >= 0 && polyorder < window, "savgol: polyorder must be < window");
  require(static_cast<int>(values.size()) >= window,
          "savgol: series shorter than window");
  const int n = static_cast<int>(values.size());
  const int m = window / 2;

  // center-evaluation weights are the same for every interior point
  std::vector<double> xs(static_cast<size_t>(window));
  for (int i = 0; i < window; ++i) xs[static_cast<size_t>(i)] = i - m;
  std::vector<double> center_w(static_cast<size_t>(window));
  for (int j = 0; j < window; ++j) {
    std::vector<double> e(static_cast<size_t>(window), 0.0);
    e[static_cast<size_t>(j)] = 1.0;
    center_w[static_cast<size_t>(j)] = detail::polyval(detail::polyfit(xs, e, polyorder), 0.0);
  }

  std::vector<double> out(static_cast<size_t>(n), 0.0);
  for (int i = m; i < n - m; ++i) {
    double s = 0.0;
    for (int j = 0; j < window; ++j)
      s += center_w[static_cast<size_t>(j)] * values[static_cast<size_t>(i - m + j)];
    out[static_cast<size_t>(i)] = s;
  }

  std::vector<double> head(values.begin(), values.begin() + window);
  std::vector<double> head_x(static_cast<size_t>(window));
  for (int i = 0; i < window; ++i) head_x[static_cast<size_t>(i)] = i;
  const auto head_fit = detail::polyfit(head_x, head, polyorder);
  for (int i = 0; i < m; ++i) out[static_cast<size_t>(i)] = detail::polyval(head_fit, i);

  std::vector<double> tail(values.end() - window, values.end());
  const auto tail_fit = detail::polyfit(head_x, tail, polyorder);
  for (int i = 0; i < m; ++i) {
    const int pos = n - m + i;
    out[static_cast<size_t>(pos)] = detail::polyval(tail_fit, pos - (n - window));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Consistency curves
// ---------------------------------------------------------------------------

struct ConsistencyCurve {
  std::vector<int> n;           // samples contributing at each position
  std::vector<double> cos_mean;
  std::vector<double> l2_mean;
  std::vector<double> cos_smooth;
  std::vector<double> l2_smooth;
  std::string mode;
  uint64_t seed = 0;
  int window = 11;
  int polyorder = 3;
};

struct CurveOptions {
  int window = 11;
  int polyorder = 3;
  // false: represent a generated token by its input-embedding row;
  // true: by its w_o column (the output-embedding variant).
  bool use_output_embedding = false;
};

namespace detail {

inline double cosine(const double* a, const double* b, int d) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int j = 0; j < d; ++j) {
    dot += a[j] * b[j];
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  if (denom == 0.0) return 0.0;
  return std::max(-1.0, std::min(1.0, dot / denom));
}

inline double l2_distance(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int j = 0; j < d; ++j) {
    const double c = a[j] - b[j];
    s += c * c;
  }
  return std::sqrt(s);
}

}  // namespace detail

// For each generated token o_l, the token representative e(o_l) is compared
// against every visual token z_i^v (the connector outputs for that trace's
// image); the per-position record is mean_i cos(e, z_i) and mean_i |e - z_i|,
// aggregated across samples. Shorter generations simply stop contributing,
// so counts are non-increasing in l.
inline ConsistencyCurve consistency_curve(const std::vector<DecodingTrace>& traces,
                                          const std::vector<TaskSample>& samples,
                                          const ModelParams& model,
                                          const CurveOptions& opts = {}) {
  require(!traces.empty(), "consistency_curve: empty trace set");
  require(traces.size() == samples.size(), "consistency_curve: traces/samples mismatch");
  const int d = model.cfg.d_l;

  size_t max_len = 0;
  for (const auto& t : traces) max_len = std::max(max_len, t.steps.size());
  ConsistencyCurve curve;
  curve.window = opts.window;
  curve.polyorder = opts.polyorder;
  curve.n.assign(max_len, 0);
  curve.cos_mean.assign(max_len, 0.0);
  curve.l2_mean.assign(max_len, 0.0);

  Tensor w_o_t;  // token columns of w_o as rows, built once if needed
  if (opts.use_output_embedding) w_o_t = transpose(model.w_o);

  for (size_t si = 0; si < traces.size(); ++si) {
    const Tensor z_vis = connect(encode_image(samples[si].image, model), model);
    const int n_v = z_vis.rows();
    const auto& steps = traces[si].steps;
    for (size_t l = 0; l < steps.size(); ++l) {
      const int tok = steps[l].token;
      const double* e = opts.use_output_embedding ? w_o_t.row(tok) : model.tok_embed.row(tok);
      double cos_sum = 0.0, l2_sum = 0.0;
      for (int i = 0; i < n_v; ++i) {
        cos_sum += detail::cosine(e, z_vis.row(i), d);
        l2_sum += detail::l2_distance(e, z_vis.row(i), d);
      }
      curve.cos_mean[l] += cos_sum / n_v;
      curve.l2_mean[l] += l2_sum / n_v;
      curve.n[l] += 1;
    }
  }
  for (size_t l = 0; l < max_len; ++l) {
    curve.cos_mean[l] /= curve.n[l];
    curve.l2_mean[l] /= curve.n[l];
  }

  // clamp the smoothing window to the series length (keeps short diagnostic
  // runs usable; full-size runs use the configured window unchanged)
  int w = std::min(opts.window, static_cast<int>(max_len));
  if (w % 2 == 0) --w;
  if (w >= 1 && opts.polyorder < w) {
    curve.cos_smooth = savgol(curve.cos_mean, w, opts.polyorder);
    curve.l2_smooth = savgol(curve.l2_mean, w, opts.polyorder);
  } else {
    curve.cos_smooth = curve.cos_mean;
    curve.l2_smooth = curve.l2_mean;
  }
  return curve;
}

// Ordinary least squares slope of y against position, weighted by sample
// count. Requires at least two positions.
inline double weighted_ols_slope(const std::vector<double>& y, const std::vector<int>& w) {
  require(y.size() == w.size(), "weighted_ols_slope: length mismatch");
  require(y.size() >= 2, "weighted_ols_slope: need at least two points");
  double sw = 0.0, sx = 0.0, sy = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    sw += w[i];
    sx += w[i] * static_cast<double>(i);
    sy += w[i] * y[i];
  }
  require(sw > 0.0, "weighted_ols_slope: zero total weight");
  const double mx = sx / sw, my = sy / sw;
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    const double dx = static_cast<double>(i) - mx;
    num += w[i] * dx * (y[i] - my);
    den += w[i] * dx * dx;
  }
  require(den > 0.0, "weighted_ols_slope: degenerate positions");
  return num / den;
}

struct DecaySlopes {
  double cos_raw = 0.0;
  double cos_smooth = 0.0;
  double l2_raw = 0.0;
  double l2_smooth = 0.0;
};

inline DecaySlopes decay_slope(const ConsistencyCurve& curve) {
  DecaySlopes s;
  s.cos_raw = weighted_ols_slope(curve.cos_mean, curve.n);
  s.cos_smooth = weighted_ols_slope(curve.cos_smooth, curve.n);
  s.l2_raw = weighted_ols_slope(curve.l2_mean, curve.n);
  s.l2_smooth = weighted_ols_slope(curve.l2_smooth, curve.n);
  return s;
}

// ---------------------------------------------------------------------------
// Mutual-information verification on explicit discrete joints
// ---------------------------------------------------------------------------

// Explicit joint p(o, z, a, t) on small supports.
struct JointTable {
  int no = 0, nz = 0, na = 0, nt = 0;
  std::vector<double> p;  // row-major over (o, z, a, t)

  double& at(int o, int z, int a, int t) {
    return p[static_cast<size_t>(((o * nz + z) * na + a) * nt + t)];
  }
  double at(int o, int z, int a, int t) const {
    return p[static_cast<size_t>(((o * nz + z) * na + a) * nt + t)];
  }

  static JointTable zeros(int no, int nz, int na, int nt) {
    require(no >= 1 && nz >= 1 && na >= 1 && nt >= 1, "JointTable: bad support sizes");
    JointTable j{no, nz, na, nt, {}};
    j.p.assign(static_cast<size_t>(no) * nz * na * nt, 0.0);
    return j;
  }

  void validate() const {
    require(static_cast<size_t>(no) * nz * na * nt == p.size(), "JointTable: size mismatch");
    double sum = 0.0;
    for (double v : p) {
      require(std::isfinite(v) && v >= 0.0, "JointTable: invalid probability");
      sum += v;
    }
    require(std::abs(sum - 1.0) <= 1e-12, "JointTable: probabilities must sum to 1");
  }
};

// Flat-Dirichlet random joint with supports drawn from [2, max_support].
inline JointTable random_joint(Rng& rng, int max_support = 6) {
  require(max_support >= 2, "random_joint: max_support must be >= 2");
  auto dim = [&]() { return 2 + rng.uniform_int(max_support - 1); };
  JointTable j = JointTable::zeros(dim(), dim(), dim(), dim());
  double sum = 0.0;
  for (auto& v : j.p) {
    v = -std::log(1.0 - rng.uniform());  // Exp(1); Dirichlet(1) after normalizing
    sum += v;
  }
  for (auto& v : j.p) v /= sum;
  return j;
}

struct MICheckReport {
  int no = 0, nz = 0, na = 0, nt = 0;    // joint distribution spec
  double mi_o_z = 0.0;                    // I(o; Z | t), bits
  double mi_o_a_given_z = 0.0;            // I(o; A | Z, t), bits
  double mi_o_za = 0.0;                   // I(o; Z, A | t), bits
  double residual = 0.0;                  // I(o;Z,A|t) - I(o;Z|t) - I(o;A|Z,t)
  double margin = 0.0;                    // I(o;Z,A|t) - I(o;Z|t)
};

// Exhaustive-summation conditional MIs in f64, log base 2, 0 log 0 = 0.
// The three quantities are summed independently (each from its own
// marginalizations), so the chain-rule residual is a genuine numerical
// check rather than an algebraic tautology.
inline MICheckReport mi_check(const JointTable& j) {
  j.validate();
  MICheckReport r;
  r.no = j.no;
  r.nz = j.nz;
  r.na = j.na;
  r.nt = j.nt;

  // marginals
  auto idx2 = [](int a, int b, int nb) { return static_cast<size_t>(a) * nb + b; };
  std::vector<double> p_t(static_cast<size_t>(j.nt), 0.0);
  std::vector<double> p_ot(static_cast<size_t>(j.no) * j.nt, 0.0);
  std::vector<double> p_zt(static_cast<size_t>(j.nz) * j.nt, 0.0);
  std::vector<double> p_ozt(static_cast<size_t>(j.no) * j.nz * j.nt, 0.0);
  std::vector<double> p_azt(static_cast<size_t>(j.na) * j.nz * j.nt, 0.0);
  std::vector<double> p_zat(static_cast<size_t>(j.nz) * j.na * j.nt, 0.0);
  for (int o = 0; o < j.no; ++o)
    for (int z = 0; z < j.nz; ++z)
      for (int a = 0; a < j.na; ++a)
        for (int t = 0; t < j.nt; ++t) {
          const double p = j.at(o, z, a, t);
          p_t[static_cast<size_t>(t)] += p;
          p_ot[idx2(o, t, j.nt)] += p;
          p_zt[idx2(z, t, j.nt)] += p;
          p_ozt[(static_cast<size_t>(o) * j.nz + z) * j.nt + t] += p;
          p_azt[(static_cast<size_t>(a) * j.nz + z) * j.nt + t] += p;
          p_zat[(static_cast<size_t>(z) * j.na + a) * j.nt + t] += p;
        }

  const double inv_log2 = 1.0 / std::log(2.0);

  // I(o; Z | t) = sum p(o,z,t) log[ p(o,z,t) p(t) / (p(o,t) p(z,t)) ]
  for (int o = 0; o < j.no; ++o)
    for (int z = 0; z < j.nz; ++z)
      for (int t = 0; t < j.nt; ++t) {
        const double pozt = p_ozt[(static_cast<size_t>(o) * j.nz + z) * j.nt + t];
        if (pozt <= 0.0) continue;
        r.mi_o_z += pozt * std::log(pozt * p_t[static_cast<size_t>(t)] /
                                    (p_ot[idx2(o, t, j.nt)] * p_zt[idx2(z, t, j.nt)])) *
                    inv_log2;
      }

  // I(o; A | Z, t) = sum p(o,z,a,t) log[ p(o,z,a,t) p(z,t) / (p(o,z,t) p(a,z,t)) ]
  for (int o = 0; o < j.no; ++o)
    for (int z = 0; z < j.nz; ++z)
      for (int a = 0; a < j.na; ++a)
        for (int t = 0; t < j.nt; ++t) {
          const double p = j.at(o, z, a, t);
          if (p <= 0.0) continue;
          const double pozt = p_ozt[(static_cast<size_t>(o) * j.nz + z) * j.nt + t];
          const double pazt = p_azt[(static_cast<size_t>(a) * j.nz + z) * j.nt + t];
          r.mi_o_a_given_z +=
              p * std::log(p * p_zt[idx2(z, t, j.nt)] / (pozt * pazt)) * inv_log2;
        }

  // I(o; Z, A | t) = sum p(o,z,a,t) log[ p(o,z,a,t) p(t) / (p(o,t) p(z,a,t)) ]
  for (int o = 0; o < j.no; ++o)
    for (int z = 0; z < j.nz; ++z)
      for (int a = 0; a < j.na; ++a)
        for (int t = 0; t < j.nt; ++t) {
          const double p = j.at(o, z, a, t);
          if (p <= 0.0) continue;
          const double pzat = p_zat[(static_cast<size_t>(z) * j.na + a) * j.nt + t];
          r.mi_o_za += p * std::log(p * p_t[static_cast<size_t>(t)] /
                                    (p_ot[idx2(o, t, j.nt)] * pzat)) *
                       inv_log2;
        }

  r.residual = r.mi_o_za - r.mi_o_z - r.mi_o_a_given_z;
  r.margin = r.mi_o_za - r.mi_o_z;
  return r;
}

// ---------------------------------------------------------------------------
// Overhead measurement
// ---------------------------------------------------------------------------

struct OverheadWorkload {
  std::vector<TaskSample> samples;
  int max_new_tokens = 16;
  int repeats = 5;   // timed repetitions (median reported)
  int warmups = 3;   // discarded
};

struct OverheadReport {
  // medians over repeats, single-threaded
  double baseline_step_us = 0.0;
  double vif_cached_step_us = 0.0;
  double vif_naive_step_us = 0.0;
  double time_ratio_cached = 0.0;  // vif_cached / baseline
  double time_ratio_naive = 0.0;
  // parameter counts
  int64_t params_baseline = 0;
  int64_t params_vif = 0;
  double param_ratio = 0.0;
  // analytic per-step multiply-add counts (see the formula functions)
  int64_t madds_vif_step = 0;
  int64_t madds_cache_build = 0;
  int n_samples = 0;
  int64_t steps_per_run = 0;
  int repeats = 0;
};

// Extra multiply-adds VIF performs per decoding step with a built cache:
//   query projection d_l^2 + output projection d_l^2   (cross-attention)
// + scores N_v*d_l + value mixing N_v*d_l               (over cached keys)
// + fusion norm 2*d_l                                   (rstd and gamma scaling)
inline int64_t vif_step_madds(int d_l, int n_v) {
  const int64_t d = d_l, nv = n_v;
  return 2 * d * d + 2 * nv * d + 2 * d;
}

// One-time per-image cache construction:
// self-attention refine (when enabled): QKV+output projections 4*N_v*d_l^2,
// scores + mixing 2*N_v^2*d_l, sub-layer norm 2*N_v*d_l; plus the cached
// cross-attention K/V projections 2*N_v*d_l^2.
inline int64_t cache_build_madds(int d_l, int n_v, bool self_attn_enabled) {
  const int64_t d = d_l, nv = n_v;
  int64_t total = 2 * nv * d * d;  // cross K/V projections
  if (self_attn_enabled) total += 4 * nv * d * d + 2 * nv * nv * d + 2 * nv * d;
  return total;
}

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Matched workload: the same images, prompts and step budget decoded in
// baseline mode, VIF mode with the per-image cache, and VIF mode rebuilding
// the cache at every step. Per-step medians over `repeats` runs after
// discarding warmups.
inline OverheadReport measure_overhead(const ModelParams& model, const VifParams& vif,
                                       const OverheadWorkload& workload) {
  require(!workload.samples.empty(), "measure_overhead: empty workload");
  require(workload.repeats >= 1, "measure_overhead: repeats must be >= 1");

  auto run_once = [&](Mode mode, bool naive) -> std::pair<double, int64_t> {
    GenerationConfig cfg;
    cfg.mode = mode;
    cfg.max_new_tokens = workload.max_new_tokens;
    cfg.recompute_cache_each_step = naive;
    int64_t steps = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& s : workload.samples) {
      DecodingTrace tr = generate(s.image, s.prompt, model,
                                  mode == Mode::kBaseline ? nullptr : &vif, cfg);
      steps += static_cast<int64_t>(tr.steps.size());
    }
    const auto t1 = std::chrono::steady_clock::now();
    const double us =
        std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count() / 1000.0;
    return {us, steps};
  };

  auto timed = [&](Mode mode, bool naive) -> std::pair<double, int64_t> {
    for (int w = 0; w < workload.warmups; ++w) run_once(mode, naive);
    std::vector<double> per_step(static_cast<size_t>(workload.repeats));
    int64_t steps = 0;
    for (int rteration = 0; rteration < workload.repeats; ++rteration) {
      auto [us, st] = run_once(mode, naive);
      require(us >= 10000.0, "measure_overhead: workload too short to time (< 10 ms)");
      steps = st;
      per_step[static_cast<size_t>(rteration)] = us / static_cast<double>(st);
    }
    return {detail::median(per_step), steps};
  };

  OverheadReport rep;
  rep.n_samples = static_cast<int>(workload.samples.size());
  rep.repeats = workload.repeats;
  auto [b_us, b_steps] = timed(Mode::kBaseline, false);
  auto [c_us, c_steps] = timed(Mode::kVif, false);
  auto [n_us, n_steps] = timed(Mode::kVif, true);
  rep.baseline_step_us = b_us;
  rep.vif_cached_step_us = c_us;
  rep.vif_naive_step_us = n_us;
  rep.steps_per_run = c_steps;
  rep.time_ratio_cached = c_us / b_us;
  rep.time_ratio_naive = n_us / b_us;

  ModelParams& m = const_cast<ModelParams&>(model);
  VifParams& v = const_cast<VifParams&>(vif);
  rep.params_baseline = count_params(m);
  rep.params_vif = count_params(m, &v);
  rep.param_ratio = static_cast<double>(rep.params_vif) / rep.params_baseline;

  const int n_v = workload.samples.front().image.n_cells();
  rep.madds_vif_step = vif_step_madds(model.cfg.d_l, n_v);
  rep.madds_cache_build = cache_build_madds(model.cfg.d_l, n_v, vif.enable_self_attn);
  return rep;
}

}  // namespace vif
