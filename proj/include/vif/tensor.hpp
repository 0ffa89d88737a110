// Dense row-major tensor kernels with paired forward/backward contracts.
// All math runs in double; tensors flagged F32 keep their values rounded to
// float after every kernel, so storage precision is a per-tensor property
// rather than a build-wide one. Every kernel is a pure function of its
// inputs and checks shapes at the boundary.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace vif {

// Contract violations (bad shapes, non-finite values, invalid arguments)
// surface as this exception type; the CLI maps it to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

enum class Precision : uint8_t { F32 = 0, F64 = 1 };

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, Precision prec = Precision::F64)
      : shape_(std::move(shape)), prec_(prec) {
    validate_shape();
    data_.assign(static_cast<size_t>(numel()), 0.0);
  }

  static Tensor zeros(std::vector<int> shape, Precision prec = Precision::F64) {
    return Tensor(std::move(shape), prec);
  }

  static Tensor full(std::vector<int> shape, double value,
                     Precision prec = Precision::F64) {
    Tensor t(std::move(shape), prec);
    for (auto& v : t.data_) v = value;
    t.round_to_precision();
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     Precision prec = Precision::F64) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.prec_ = prec;
    t.validate_shape();
    require(static_cast<int64_t>(values.size()) == t.numel(),
            "Tensor::from: data length does not match shape");
    t.data_ = std::move(values);
    for (double v : t.data_)
      require(std::isfinite(v), "Tensor::from: non-finite value");
    t.round_to_precision();
    return t;
  }

  static Tensor identity(int n, Precision prec = Precision::F64) {
    Tensor t({n, n}, prec);
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  Precision precision() const { return prec_; }

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape_) n *= d;
    return shape_.empty() ? 0 : n;
  }

  bool empty() const { return data_.empty(); }

  // 2-D accessors; rows()/cols() require ndim == 2.
  int rows() const {
    require(ndim() == 2, "Tensor: rows() on non-matrix");
    return shape_[0];
  }
  int cols() const {
    require(ndim() == 2, "Tensor: cols() on non-matrix");
    return shape_[1];
  }

  double& at(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  double at(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  double& at(int i) { return data_[static_cast<size_t>(i)]; }
  double at(int i) const { return data_[static_cast<size_t>(i)]; }

  double* row(int i) { return data_.data() + static_cast<size_t>(i) * shape_[1]; }
  const double* row(int i) const {
    return data_.data() + static_cast<size_t>(i) * shape_[1];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& values() const { return data_; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Rounds values through float when the tensor is F32; no-op for F64.
  void round_to_precision() {
    if (prec_ == Precision::F32)
      for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
  }

  Tensor to_precision(Precision p) const {
    Tensor t = *this;
    t.prec_ = p;
    t.round_to_precision();
    return t;
  }

  void check_finite(const std::string& where) const {
    for (double v : data_)
      require(std::isfinite(v), where + ": non-finite value in tensor");
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && prec_ == o.prec_ && data_ == o.data_;
  }

 private:
  void validate_shape() {
    require(!shape_.empty(), "Tensor: empty shape");
    for (int d : shape_) require(d > 0, "Tensor: non-positive dimension");
  }

  std::vector<int> shape_;
  std::vector<double> data_;
  Precision prec_ = Precision::F64;
};

inline std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (int i = 0; i < t.ndim(); ++i)
    s += (i ? "x" : "") + std::to_string(t.dim(i));
  return s + "]";
}

inline void require_matrix(const Tensor& t, const std::string& where) {
  require(t.ndim() == 2, where + ": expected a 2-D tensor, got " + shape_str(t));
}

inline void require_same_precision(const Tensor& a, const Tensor& b,
                                   const std::string& where) {
  require(a.precision() == b.precision(), where + ": mixed precision operands");
}

// ---------------------------------------------------------------------------
// Seeded deterministic RNG (splitmix64). Identical seed gives an identical
// draw sequence on every platform; std::random distributions are not
// portable, so draws are derived from raw bits here.
// ---------------------------------------------------------------------------

inline uint64_t hash64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n) without modulo bias
  int uniform_int(int n) {
    require(n > 0, "Rng::uniform_int: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return static_cast<int>(r % un);
  }

  // Independent child stream; children with distinct tags do not collide
  // with the parent or each other in practice.
  Rng split(uint64_t tag) const {
    return Rng(hash64(state_ ^ hash64(tag ^ 0xD1B54A32D192ED03ull)));
  }

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

inline Tensor rand_uniform(std::vector<int> shape, double lo, double hi, Rng& rng,
                           Precision prec = Precision::F64) {
  Tensor t(std::move(shape), prec);
  for (int64_t i = 0; i < t.numel(); ++i) t.at(static_cast<int>(i)) = rng.uniform(lo, hi);
  t.round_to_precision();
  return t;
}

// Weight init: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
inline Tensor init_weight(std::vector<int> shape, int fan_in, Rng& rng,
                          Precision prec = Precision::F64) {
  require(fan_in > 0, "init_weight: fan_in must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rand_uniform(std::move(shape), -bound, bound, rng, prec);
}

// ---------------------------------------------------------------------------
// Kernels. Inputs are shape-checked; no implicit broadcasting anywhere
// (broadcast_add_row is the one explicit broadcast, for bias terms).
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  require(a.cols() == b.rows(), "matmul: inner dimensions " + shape_str(a) +
                                    " vs " + shape_str(b));
  require_same_precision(a, b, "matmul");
  a.check_finite("matmul: a");
  b.check_finite("matmul: b");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n}, a.precision());
  for (int i = 0; i < m; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (int kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      const double* bk = b.row(kk);
      for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
  c.round_to_precision();
  return c;
}

// a * b^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions mismatch");
  require_same_precision(a, b, "matmul_nt");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c({m, n}, a.precision());
  for (int i = 0; i < m; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (int j = 0; j < n; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (int kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
      ci[j] = s;
    }
  }
  c.round_to_precision();
  return c;
}

// a^T * b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  require(a.rows() == b.rows(), "matmul_tn: inner dimensions mismatch");
  require_same_precision(a, b, "matmul_tn");
  const int m = a.cols(), k = a.rows(), n = b.cols();
  Tensor c({m, n}, a.precision());
  for (int kk = 0; kk < k; ++kk) {
    const double* ak = a.row(kk);
    const double* bk = b.row(kk);
    for (int i = 0; i < m; ++i) {
      const double av = ak[i];
      double* ci = c.row(i);
      for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
  c.round_to_precision();
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor t({a.cols(), a.rows()}, a.precision());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "add: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  require_same_precision(a, b, "add");
  Tensor c = a;
  for (int64_t i = 0; i < c.numel(); ++i) c.data()[i] += b.data()[i];
  c.round_to_precision();
  return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "sub: shape mismatch");
  require_same_precision(a, b, "sub");
  Tensor c = a;
  for (int64_t i = 0; i < c.numel(); ++i) c.data()[i] -= b.data()[i];
  c.round_to_precision();
  return c;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (int64_t i = 0; i < c.numel(); ++i) c.data()[i] *= s;
  c.round_to_precision();
  return c;
}

// x[m x d] + bias broadcast over rows; bias is [1 x d] or [d].
inline Tensor broadcast_add_row(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "broadcast_add_row");
  require(bias.numel() == x.cols(), "broadcast_add_row: bias width mismatch");
  require_same_precision(x, bias, "broadcast_add_row");
  Tensor c = x;
  for (int i = 0; i < x.rows(); ++i) {
    double* ci = c.row(i);
    for (int j = 0; j < x.cols(); ++j) ci[j] += bias.data()[j];
  }
  c.round_to_precision();
  return c;
}

// Exact (erf-based) GELU.
inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

inline double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

inline Tensor gelu(const Tensor& x) {
  Tensor y = x;
  for (int64_t i = 0; i < y.numel(); ++i) y.data()[i] = gelu_scalar(x.data()[i]);
  y.round_to_precision();
  return y;
}

inline Tensor gelu_backward(const Tensor& x, const Tensor& upstream) {
  require(x.same_shape(upstream), "gelu_backward: shape mismatch");
  Tensor dx = x;
  for (int64_t i = 0; i < dx.numel(); ++i)
    dx.data()[i] = upstream.data()[i] * gelu_grad_scalar(x.data()[i]);
  dx.round_to_precision();
  return dx;
}

// Numerically stable row softmax (max subtraction). Rows sum to 1.
inline Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  x.check_finite("softmax_rows");
  Tensor y({x.rows(), x.cols()}, x.precision());
  for (int i = 0; i < x.rows(); ++i) {
    const double* xi = x.row(i);
    double* yi = y.row(i);
    double mx = xi[0];
    for (int j = 1; j < x.cols(); ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (int j = 0; j < x.cols(); ++j) {
      yi[j] = std::exp(xi[j] - mx);
      sum += yi[j];
    }
    for (int j = 0; j < x.cols(); ++j) yi[j] /= sum;
  }
  y.round_to_precision();
  return y;
}

// dx_i = y_i * (dy_i - sum_j dy_j y_j), per row; takes the forward output y.
inline Tensor softmax_rows_backward(const Tensor& y, const Tensor& upstream) {
  require(y.same_shape(upstream), "softmax_rows_backward: shape mismatch");
  Tensor dx({y.rows(), y.cols()}, y.precision());
  for (int i = 0; i < y.rows(); ++i) {
    const double* yi = y.row(i);
    const double* ui = upstream.row(i);
    double* di = dx.row(i);
    double dot = 0.0;
    for (int j = 0; j < y.cols(); ++j) dot += ui[j] * yi[j];
    for (int j = 0; j < y.cols(); ++j) di[j] = yi[j] * (ui[j] - dot);
  }
  dx.round_to_precision();
  return dx;
}

constexpr double kLayerNormEps = 1e-5;

struct LayerNormActs {
  Tensor xhat;               // normalized input, [m x d]
  std::vector<double> rstd;  // 1/sqrt(var + eps) per row
};

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = kLayerNormEps, LayerNormActs* acts = nullptr) {
  require_matrix(x, "layer_norm");
  require(x.cols() >= 2, "layer_norm: width must be >= 2 (degenerate variance)");
  require(gamma.numel() == x.cols() && beta.numel() == x.cols(),
          "layer_norm: gamma/beta width mismatch");
  x.check_finite("layer_norm");
  const int m = x.rows(), d = x.cols();
  Tensor y({m, d}, x.precision());
  if (acts) {
    acts->xhat = Tensor({m, d}, Precision::F64);
    acts->rstd.assign(static_cast<size_t>(m), 0.0);
  }
  for (int i = 0; i < m; ++i) {
    const double* xi = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xi[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xi[j] - mean;
      var += c * c;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + eps);
    double* yi = y.row(i);
    for (int j = 0; j < d; ++j) {
      const double xh = (xi[j] - mean) * rstd;
      if (acts) acts->xhat.at(i, j) = xh;
      yi[j] = xh * gamma.data()[j] + beta.data()[j];
    }
    if (acts) acts->rstd[static_cast<size_t>(i)] = rstd;
  }
  y.round_to_precision();
  return y;
}

// Backward through layer_norm; accumulates dgamma/dbeta, writes dx.
inline void layer_norm_backward(const LayerNormActs& acts, const Tensor& gamma,
                                const Tensor& upstream, Tensor* dx, Tensor* dgamma,
                                Tensor* dbeta) {
  const int m = acts.xhat.rows(), d = acts.xhat.cols();
  require(upstream.rows() == m && upstream.cols() == d,
          "layer_norm_backward: upstream shape mismatch");
  for (int i = 0; i < m; ++i) {
    const double* xh = acts.xhat.row(i);
    const double* ui = upstream.row(i);
    double mean_g = 0.0, mean_gx = 0.0;
    for (int j = 0; j < d; ++j) {
      const double g = ui[j] * gamma.data()[j];
      mean_g += g;
      mean_gx += g * xh[j];
    }
    mean_g /= d;
    mean_gx /= d;
    const double rstd = acts.rstd[static_cast<size_t>(i)];
    for (int j = 0; j < d; ++j) {
      const double g = ui[j] * gamma.data()[j];
      if (dx) dx->at(i, j) += (g - mean_g - xh[j] * mean_gx) * rstd;
      if (dgamma) dgamma->data()[j] += ui[j] * xh[j];
      if (dbeta) dbeta->data()[j] += ui[j];
    }
  }
}

inline double colsum_into(const Tensor& x, Tensor& out) {
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) out.data()[j] += x.at(i, j);
  return 0.0;
}

// ---------------------------------------------------------------------------
// vjp dispatcher: uniform vector-Jacobian surface over the registered
// kernels. Returns the gradient w.r.t. each input, in input order.
// ---------------------------------------------------------------------------

enum class OpId {
  kMatMul,         // inputs {a, b}
  kAdd,            // inputs {a, b}
  kBroadcastAddRow,// inputs {x, bias}
  kScale,          // inputs {x, s} with s a 1-element tensor
  kGelu,           // inputs {x}
  kSoftmaxRows,    // inputs {x}
  kLayerNorm,      // inputs {x, gamma, beta}; eps passed alongside
};

inline std::vector<Tensor> vjp(OpId op, const std::vector<Tensor>& inputs,
                               const Tensor& upstream, double eps = kLayerNormEps) {
  switch (op) {
    case OpId::kMatMul: {
      require(inputs.size() == 2, "vjp(matmul): expects 2 inputs");
      return {matmul_nt(upstream, inputs[1]), matmul_tn(inputs[0], upstream)};
    }
    case OpId::kAdd: {
      require(inputs.size() == 2, "vjp(add): expects 2 inputs");
      return {upstream, upstream};
    }
    case OpId::kBroadcastAddRow: {
      require(inputs.size() == 2, "vjp(broadcast_add_row): expects 2 inputs");
      Tensor dbias(inputs[1].shape(), inputs[1].precision());
      colsum_into(upstream, dbias);
      dbias.round_to_precision();
      return {upstream, dbias};
    }
    case OpId::kScale: {
      require(inputs.size() == 2 && inputs[1].numel() == 1,
              "vjp(scale): expects {x, scalar}");
      Tensor dx = scale(upstream, inputs[1].data()[0]);
      double ds = 0.0;
      for (int64_t i = 0; i < upstream.numel(); ++i)
        ds += upstream.data()[i] * inputs[0].data()[i];
      Tensor dst = Tensor::from({1}, {ds}, inputs[1].precision());
      return {dx, dst};
    }
    case OpId::kGelu: {
      require(inputs.size() == 1, "vjp(gelu): expects 1 input");
      return {gelu_backward(inputs[0], upstream)};
    }
    case OpId::kSoftmaxRows: {
      require(inputs.size() == 1, "vjp(softmax_rows): expects 1 input");
      return {softmax_rows_backward(softmax_rows(inputs[0]), upstream)};
    }
    case OpId::kLayerNorm: {
      require(inputs.size() == 3, "vjp(layer_norm): expects {x, gamma, beta}");
      LayerNormActs acts;
      layer_norm(inputs[0], inputs[1], inputs[2], eps, &acts);
      Tensor dx(inputs[0].shape(), inputs[0].precision());
      Tensor dgamma(inputs[1].shape(), inputs[1].precision());
      Tensor dbeta(inputs[2].shape(), inputs[2].precision());
      layer_norm_backward(acts, inputs[1], upstream, &dx, &dgamma, &dbeta);
      dx.round_to_precision();
      dgamma.round_to_precision();
      dbeta.round_to_precision();
      return {dx, dgamma, dbeta};
    }
  }
  throw Error("vjp: unknown op id");
}

}  // namespace vif
