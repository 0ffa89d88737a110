// Staged optimization: a warm-up stage trains only the former and the LM
// head with everything else frozen, then a full stage fine-tunes all
// parameters. Adam (decoupled weight decay fixed at 0) with a cosine LR
// schedule and linear warmup; the former group runs at a configurable
// multiple of the global LR.
#pragma once

#include <functional>
#include <map>

#include "vif/model.hpp"

namespace vif {

// Linear ramp 0 -> base_lr over ceil(warmup_ratio * total) steps, then a
// half cosine down to 0 at step == total_steps.
inline double cosine_lr(int step, int total_steps, double base_lr, double warmup_ratio) {
  require(total_steps > 0, "cosine_lr: total_steps must be positive");
  require(step >= 0 && step <= total_steps, "cosine_lr: step out of range");
  require(warmup_ratio >= 0.0 && warmup_ratio <= 1.0, "cosine_lr: bad warmup ratio");
  const int warmup = static_cast<int>(std::ceil(warmup_ratio * total_steps));
  if (step < warmup) return base_lr * static_cast<double>(step) / warmup;
  if (total_steps == warmup) return step == total_steps ? 0.0 : base_lr;
  const double t = static_cast<double>(step - warmup) / (total_steps - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter first/second moments keyed by registry name.
struct OptimState {
  struct Moments {
    Tensor m, v;
  };
  std::map<std::string, Moments> moments;
  int64_t step = 0;

  Moments& get(const std::string& name, const Tensor& like) {
    auto it = moments.find(name);
    if (it == moments.end()) {
      it = moments
               .emplace(name, Moments{Tensor(like.shape(), like.precision()),
                                      Tensor(like.shape(), like.precision())})
               .first;
    }
    return it->second;
  }
};

// One bias-corrected Adam update on a single tensor. t is 1-based.
inline void adam_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v,
                        int64_t t, double lr, const AdamConfig& cfg) {
  require(param.same_shape(grad) && param.same_shape(m) && param.same_shape(v),
          "adam_update: shape mismatch");
  require(t >= 1, "adam_update: step must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (int64_t i = 0; i < param.numel(); ++i) {
    const double g = grad.data()[i];
    double& mi = m.data()[i];
    double& vi = v.data()[i];
    mi = cfg.beta1 * mi + (1.0 - cfg.beta1) * g;
    vi = cfg.beta2 * vi + (1.0 - cfg.beta2) * g * g;
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    param.data()[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
  param.round_to_precision();
  m.round_to_precision();
  v.round_to_precision();
}

// Applies one optimizer step over a named parameter set. Frozen parameters
// (mask false) are left bit-identical and their moments untouched.
inline void adam_step(const std::vector<NamedParam>& params,
                      const std::vector<NamedParam>& grads, OptimState& state, double lr,
                      const AdamConfig& cfg,
                      const std::function<bool(const std::string&)>& trainable,
                      const std::function<double(const std::string&)>& lr_mult) {
  require(params.size() == grads.size(), "adam_step: registry size mismatch");
  ++state.step;
  for (size_t i = 0; i < params.size(); ++i) {
    require(params[i].name == grads[i].name, "adam_step: registry order mismatch");
    if (trainable && !trainable(params[i].name)) continue;
    auto& mom = state.get(params[i].name, *params[i].tensor);
    const double mult = lr_mult ? lr_mult(params[i].name) : 1.0;
    adam_update(*params[i].tensor, *grads[i].tensor, mom.m, mom.v, state.step,
                lr * mult, cfg);
  }
}

struct StageSpec {
  std::string name = "full";  // the CSV stage column
  std::function<bool(const std::string&)> trainable;  // named-parameter predicate
  int epochs = 1;
  int steps = 0;  // optimizer steps; 0 derives from epochs and batch size
  double base_lr = 1e-3;
  int batch_size = 8;
  int grad_accum = 1;
  double former_lr_mult = 2.0;  // applied to "vif.*" parameters
  double warmup_ratio = 0.03;
};

// Warm-up mask: the former and the LM head only.
inline bool warmup_trainable(const std::string& name) {
  return name.rfind("vif.", 0) == 0 || name == "w_o";
}

inline bool all_trainable(const std::string&) { return true; }

struct MetricsRow {
  int step = 0;        // global step counter across stages
  std::string stage;
  double lr = 0.0;
  double loss = 0.0;   // batch mean NLL per target token
};

// Runs one stage; parameters outside the mask stay bit-identical. The batch
// order is a seeded shuffle, reshuffled per pass over the data.
inline std::vector<MetricsRow> train_stage(ModelParams& model, VifParams* vif, Mode mode,
                                           const std::vector<TaskSample>& dataset,
                                           const StageSpec& stage, uint64_t seed,
                                           OptimState& state, int step_offset = 0) {
  require(!dataset.empty(), "train_stage: empty dataset");
  require(stage.batch_size >= 1 && stage.grad_accum >= 1, "train_stage: bad batch config");
  auto params = named_params(model, mode == Mode::kVif ? vif : nullptr);
  {
    bool any = false;
    for (const auto& p : params)
      if (!stage.trainable || stage.trainable(p.name)) any = true;
    require(any, "train_stage: no trainable parameters under this mask");
  }
  int total_steps = stage.steps;
  if (total_steps == 0) {
    const int per_epoch =
        (static_cast<int>(dataset.size()) + stage.batch_size - 1) / stage.batch_size;
    total_steps = per_epoch * std::max(1, stage.epochs);
  }

  Rng rng = Rng(seed).split(0x747261696e /* "train" */);
  std::vector<int> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  size_t cursor = order.size();  // force initial shuffle
  auto next_index = [&]() {
    if (cursor >= order.size()) {
      for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);
      cursor = 0;
    }
    return order[cursor++];
  };

  AdamConfig adam;
  ModelParams g_model = zeros_like(model);
  VifParams g_vif = vif ? zeros_like(*vif) : VifParams{};
  std::vector<NamedParam> grads =
      vif && mode == Mode::kVif
          ? named_params(g_model, &g_vif)
          : named_params(g_model, static_cast<VifParams*>(nullptr));

  std::vector<MetricsRow> log;
  log.reserve(static_cast<size_t>(total_steps));
  for (int step = 0; step < total_steps; ++step) {
    // zero grads
    for (auto& gp : grads) *gp.tensor = Tensor(gp.tensor->shape(), gp.tensor->precision());

    double nll_sum = 0.0;
    int tok_count = 0;
    std::vector<LossActs> acts(static_cast<size_t>(stage.batch_size * stage.grad_accum));
    std::vector<const TaskSample*> picked(acts.size());
    for (size_t b = 0; b < acts.size(); ++b) {
      picked[b] = &dataset[static_cast<size_t>(next_index())];
      nll_sum += sample_loss_forward(model, vif, mode, *picked[b], acts[b]);
      tok_count += acts[b].n_tokens;
    }
    const double scale = 1.0 / tok_count;  // loss averaged over unmasked tokens
    for (size_t b = 0; b < acts.size(); ++b)
      sample_loss_backward(model, vif, mode, *picked[b], acts[b], scale, g_model,
                           mode == Mode::kVif ? &g_vif : nullptr);

    const double lr = cosine_lr(step, total_steps, stage.base_lr, stage.warmup_ratio);
    adam_step(params, grads, state, lr, adam, stage.trainable,
              [&](const std::string& name) {
                return name.rfind("vif.", 0) == 0 ? stage.former_lr_mult : 1.0;
              });
    log.push_back({step_offset + step, stage.name, lr, nll_sum / tok_count});
  }
  return log;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckOptions {
  double h = 1e-5;
  int coords_per_tensor = 12;  // deterministic random subset per tensor
  uint64_t seed = 0;
  // Test hook: corrupts analytic grads before comparison (nullptr normally).
  std::function<void(const std::string&, Tensor&)> mutate = nullptr;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::map<std::string, double> per_param;
  int64_t coords_checked = 0;
};

// rel = |analytic - fd| / max(|analytic|, |fd|, 1e-3): absolute below the
// floor, relative above it.
inline double gradcheck_rel_err(double analytic, double fd) {
  return std::abs(analytic - fd) /
         std::max({std::abs(analytic), std::abs(fd), 1e-3});
}

// Central finite differences (loss at theta +/- h) against analytic grads for
// every parameter tensor of the model and, in VIF mode, the former. Requires
// an f64 model.
inline GradCheckReport grad_check_all(ModelParams& model, VifParams* vif, Mode mode,
                                      const TaskSample& sample,
                                      const GradCheckOptions& opts = {}) {
  require(model.cfg.prec == Precision::F64,
          "grad_check_all: requires an f64 model (precision = f64)");

  auto loss_of = [&]() {
    LossActs acts;
    const double sum = sample_loss_forward(model, vif, mode, sample, acts);
    require(std::isfinite(sum), "grad_check_all: non-finite loss");
    return sum / acts.n_tokens;
  };

  // analytic gradients of the mean NLL
  ModelParams g_model = zeros_like(model);
  VifParams g_vif = vif ? zeros_like(*vif) : VifParams{};
  {
    LossActs acts;
    sample_loss_forward(model, vif, mode, sample, acts);
    sample_loss_backward(model, vif, mode, sample, acts, 1.0 / acts.n_tokens, g_model,
                         mode == Mode::kVif ? &g_vif : nullptr);
  }

  auto params = named_params(model, mode == Mode::kVif ? vif : nullptr);
  auto grads = named_params(g_model, mode == Mode::kVif ? &g_vif : nullptr);

  Rng rng = Rng(opts.seed).split(0x67636b /* "gck" */);
  GradCheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* theta = params[pi].tensor;
    Tensor analytic = *grads[pi].tensor;
    if (opts.mutate) opts.mutate(params[pi].name, analytic);
    const int64_t n = theta->numel();
    const int n_probe = static_cast<int>(std::min<int64_t>(n, opts.coords_per_tensor));
    double worst = 0.0;
    for (int probe = 0; probe < n_probe; ++probe) {
      const int idx = n <= opts.coords_per_tensor
                          ? probe
                          : rng.uniform_int(static_cast<int>(n));
      const double saved = theta->data()[idx];
      theta->data()[idx] = saved + opts.h;
      const double lp = loss_of();
      theta->data()[idx] = saved - opts.h;
      const double lm = loss_of();
      theta->data()[idx] = saved;
      const double fd = (lp - lm) / (2.0 * opts.h);
      worst = std::max(worst, gradcheck_rel_err(analytic.data()[idx], fd));
      ++report.coords_checked;
    }
    report.per_param[params[pi].name] = worst;
    if (worst > report.max_rel_err) {
      report.max_rel_err = worst;
      report.worst_param = params[pi].name;
    }
  }
  return report;
}

}  // namespace vif
