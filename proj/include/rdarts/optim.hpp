#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rdarts/supernet.hpp"

namespace rdarts {

struct OptimizerConfig {
  double w_lr0 = 0.025;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double grad_clip = 5.0;  // global norm; <= 0 disables
  double arch_lr = 3e-4;
  double arch_beta1 = 0.5;
  double arch_beta2 = 0.999;
  double arch_eps = 1e-8;
  double arch_weight_decay = 1e-3;
  double xi = 0.0;  // unrolling step; 0 selects the first-order update
  // Weight-space step of the finite-difference Hessian product, divided by
  // the gradient norm. 0 picks 1e-2 in 32-bit and 1e-6 in 64-bit; large
  // steps in 64-bit tend to straddle ReLU and max-pool kinks.
  double hvp_radius = 0.0;

  void validate() const {
    if (w_lr0 < 0 || arch_lr < 0 || weight_decay < 0 || arch_weight_decay < 0 || xi < 0 || !(hvp_radius >= 0))
      throw UsageError("optimizer config: rates must be non-negative");
    if (!(momentum >= 0 && momentum < 1)) throw UsageError("optimizer config: momentum must lie in [0, 1)");
    if (!(arch_beta1 >= 0 && arch_beta1 < 1) || !(arch_beta2 >= 0 && arch_beta2 < 1))
      throw UsageError("optimizer config: adaptive-moment betas must lie in [0, 1)");
  }
};

inline nlohmann::json to_json(const OptimizerConfig& c) {
  return {{"w_lr0", c.w_lr0},
          {"w_lr_schedule", "cosine_to_zero"},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},
          {"arch_lr", c.arch_lr},
          {"arch_beta1", c.arch_beta1},
          {"arch_beta2", c.arch_beta2},
          {"arch_eps", c.arch_eps},
          {"arch_weight_decay", c.arch_weight_decay},
          {"xi", c.xi},
          {"hvp_radius", c.hvp_radius}};
}

inline OptimizerConfig optimizer_config_from_json(const nlohmann::json& j) {
  OptimizerConfig c;
  c.w_lr0 = j.value("w_lr0", c.w_lr0);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.arch_lr = j.value("arch_lr", c.arch_lr);
  c.arch_beta1 = j.value("arch_beta1", c.arch_beta1);
  c.arch_beta2 = j.value("arch_beta2", c.arch_beta2);
  c.arch_eps = j.value("arch_eps", c.arch_eps);
  c.arch_weight_decay = j.value("arch_weight_decay", c.arch_weight_decay);
  c.xi = j.value("xi", c.xi);
  c.hvp_radius = j.value("hvp_radius", c.hvp_radius);
  c.validate();
  return c;
}

// 0.5 * lr0 * (1 + cos(pi * t / T)).
inline double cosine_lr(double t, double total, double lr0) {
  if (!(total > 0)) throw UsageError("cosine_lr: total must be positive");
  if (t < 0 || t > total) throw UsageError("cosine_lr: step outside [0, total]");
  if (t == total) return 0.0;
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * t / total));
}

template <typename S>
struct SgdState {
  std::vector<std::vector<S>> velocity;
};

template <typename S>
void check_finite_grads(const ParamList<S>& params, const char* group) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) continue;
    for (auto g : params[i].grad())
      if (!std::isfinite(g))
        throw NumericalError(std::string("non-finite gradient in ") + group + " parameter #" + std::to_string(i) +
                             " (shape " + shape_str(params[i]) + ")");
  }
}

// v <- momentum * v + (grad + weight_decay * p);  p <- p - lr * v.
// Parameters without a gradient are left alone.
template <typename S>
void sgd_step(ParamList<S>& params, SgdState<S>& state, double lr, double momentum, double weight_decay) {
  check_finite_grads(params, "weight");
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto& p : params) state.velocity.emplace_back(p.numel(), S(0));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) continue;
    auto& v = state.velocity[i];
    if (v.size() != p.numel()) throw ShapeError("sgd_step", "momentum buffer does not match parameter " + shape_str(p));
    auto g = p.grad();
    auto d = p.data();
    for (std::size_t k = 0; k < d.size(); ++k) {
      v[k] = static_cast<S>(momentum) * v[k] + (g[k] + static_cast<S>(weight_decay) * d[k]);
      d[k] -= static_cast<S>(lr) * v[k];
    }
  }
}

template <typename S>
struct AdamState {
  std::vector<std::vector<S>> m, v;
  std::vector<std::size_t> steps;
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

// Adaptive-moment step with L2 decay folded into the gradient and bias
// correction. Parameters without a gradient are skipped entirely.
template <typename S>
void adam_step(ParamList<S>& params, AdamState<S>& state, const AdamConfig& cfg) {
  check_finite_grads(params, "architecture");
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), S(0));
      state.v.emplace_back(p.numel(), S(0));
    }
    state.steps.assign(params.size(), 0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) continue;
    const auto t = ++state.steps[i];
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    auto g = p.grad();
    auto d = p.data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < d.size(); ++k) {
      const S gk = g[k] + static_cast<S>(cfg.weight_decay) * d[k];
      m[k] = static_cast<S>(cfg.beta1) * m[k] + static_cast<S>(1.0 - cfg.beta1) * gk;
      v[k] = static_cast<S>(cfg.beta2) * v[k] + static_cast<S>(1.0 - cfg.beta2) * gk * gk;
      const S denom = std::sqrt(v[k] / static_cast<S>(bc2)) + static_cast<S>(cfg.eps);
      d[k] -= static_cast<S>(cfg.lr / bc1) * m[k] / denom;
    }
  }
}

// Rescales all gradients so their joint L2 norm is at most max_norm.
template <typename S>
double clip_grad_norm(ParamList<S>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    if (p.has_grad())
      for (auto g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const S f = static_cast<S>(max_norm / (norm + 1e-6));
    for (auto& p : params)
      if (p.has_grad())
        for (auto& g : p.grad()) g *= f;
  }
  return norm;
}

template <typename S>
void zero_grads(ParamList<S>& params) {
  for (auto& p : params) p.zero_grad();
}

template <typename S>
struct Batch {
  Tensor<S> x;
  std::vector<int> y;
};

template <typename S>
struct TripleState {
  SgdState<S> w;
  AdamState<S> alpha;
  AdamState<S> beta;
  std::size_t epoch = 0;
  std::size_t step = 0;
};

// Temporarily overrides requires_grad on a parameter group, restoring the
// caller's flags on scope exit.
template <typename S>
class GradScope {
 public:
  GradScope(ParamList<S>& params, bool enabled) : params_(params) {
    for (auto& p : params_) {
      saved_.push_back(p.requires_grad());
      if (!enabled) p.set_requires_grad(false);
    }
  }
  ~GradScope() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(saved_[i]);
  }
  GradScope(const GradScope&) = delete;
  GradScope& operator=(const GradScope&) = delete;

 private:
  ParamList<S>& params_;
  std::vector<bool> saved_;
};

template <typename S>
Tensor<S> supernet_loss(Supernet<S>& net, const Batch<S>& b) {
  if (b.y.empty()) throw DataError("empty batch");
  return ops::cross_entropy(net.forward(b.x).logits, b.y);
}

template <typename S>
double checked_loss(const Tensor<S>& loss, const char* which) {
  const double v = static_cast<double>(loss.item());
  if (!std::isfinite(v)) throw NumericalError(std::string("non-finite ") + which + " loss");
  return v;
}

template <typename S>
std::vector<std::vector<S>> snapshot_values(const ParamList<S>& ps) {
  std::vector<std::vector<S>> out;
  for (const auto& p : ps) out.push_back(p.values());
  return out;
}

template <typename S>
std::vector<std::vector<S>> snapshot_grads(const ParamList<S>& ps) {
  std::vector<std::vector<S>> out;
  for (const auto& p : ps) out.push_back(p.has_grad() ? std::vector<S>(p.grad().begin(), p.grad().end()) : std::vector<S>{});
  return out;
}

template <typename S>
void restore_values(ParamList<S>& ps, const std::vector<std::vector<S>>& vals) {
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i].values() = vals[i];
}

// Gradients of the validation loss w.r.t. alpha and beta, left in their
// .grad buffers. With xi > 0 the weights are first unrolled one step,
// w' = w - xi * dL_train/dw, and the mixed second derivative is
// approximated by central differences along dL_val/dw'. Returns the
// validation loss that was differentiated.
template <typename S>
constexpr double default_hvp_radius() {
  return sizeof(S) >= sizeof(double) ? 1e-6 : 1e-2;
}

template <typename S>
double arch_gradients(Supernet<S>& net, const Batch<S>& train, const Batch<S>& val, double xi, double radius = 0) {
  if (radius <= 0) radius = default_hvp_radius<S>();
  auto weights = net.weights();
  auto arch = net.arch_parameters();
  zero_grads(arch);
  if (xi <= 0.0) {
    GradScope<S> w_off(weights, false);
    auto loss = supernet_loss(net, val);
    const double v = checked_loss(loss, "validation");
    backward(loss);
    return v;
  }

  const auto backup = snapshot_values(weights);
  std::vector<std::vector<S>> gw;
  {
    GradScope<S> a_off(arch, false);
    zero_grads(weights);
    auto loss = supernet_loss(net, train);
    checked_loss(loss, "training");
    backward(loss);
    gw = snapshot_grads(weights);
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    auto d = weights[i].data();
    if (gw[i].empty()) continue;
    for (std::size_t k = 0; k < d.size(); ++k) d[k] -= static_cast<S>(xi) * gw[i][k];
  }
  zero_grads(weights);
  zero_grads(arch);
  auto vloss = supernet_loss(net, val);
  const double v = checked_loss(vloss, "validation");
  backward(vloss);
  const auto d_arch = snapshot_grads(arch);
  const auto d_w = snapshot_grads(weights);
  zero_grads(weights);

  double sq = 0;
  for (const auto& g : d_w)
    for (auto x : g) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  std::vector<std::vector<S>> hess(arch.size());
  if (norm > 0) {
    const double r = radius / norm;
    auto arch_grad_at = [&](double sign) {
      for (std::size_t i = 0; i < weights.size(); ++i) {
        auto d = weights[i].data();
        for (std::size_t k = 0; k < d.size(); ++k)
          d[k] = backup[i][k] + (d_w[i].empty() ? S(0) : static_cast<S>(sign * r) * d_w[i][k]);
      }
      GradScope<S> w_off(weights, false);
      zero_grads(arch);
      auto loss = supernet_loss(net, train);
      checked_loss(loss, "training");
      backward(loss);
      return snapshot_grads(arch);
    };
    const auto gp = arch_grad_at(+1.0);
    const auto gn = arch_grad_at(-1.0);
    for (std::size_t i = 0; i < arch.size(); ++i) {
      if (gp[i].empty()) continue;
      hess[i].resize(gp[i].size());
      for (std::size_t k = 0; k < gp[i].size(); ++k)
        hess[i][k] = static_cast<S>((static_cast<double>(gp[i][k]) - static_cast<double>(gn[i][k])) / (2.0 * r));
    }
  }
  restore_values(weights, backup);
  zero_grads(arch);
  for (std::size_t i = 0; i < arch.size(); ++i) {
    if (d_arch[i].empty()) continue;
    auto& g = arch[i].grad_buffer();
    for (std::size_t k = 0; k < g.size(); ++k)
      g[k] = d_arch[i][k] - (hess[i].empty() ? S(0) : static_cast<S>(xi) * hess[i][k]);
  }
  return v;
}

struct StepLosses {
  double train_loss = 0;
  double val_loss = 0;
};

// One iteration of the alternating update: alpha and beta from the
// validation batch, then the weights from the training batch.
template <typename S>
StepLosses triple_step(Supernet<S>& net, const Batch<S>& train, const Batch<S>& val, TripleState<S>& state,
                       const OptimizerConfig& cfg, double w_lr) {
  if (train.y.empty() || val.y.empty()) throw DataError("triple_step: empty batch");
  StepLosses out;
  auto weights = net.weights();
  auto alphas = ParamList<S>(net.alphas().begin(), net.alphas().end());
  auto betas = net.betas();
  auto arch = net.arch_parameters();

  out.val_loss = arch_gradients(net, train, val, cfg.xi, cfg.hvp_radius);
  const AdamConfig acfg{cfg.arch_lr, cfg.arch_beta1, cfg.arch_beta2, cfg.arch_eps, cfg.arch_weight_decay};
  adam_step(alphas, state.alpha, acfg);
  if (!betas.empty()) adam_step(betas, state.beta, acfg);
  zero_grads(arch);

  {
    GradScope<S> a_off(arch, false);
    zero_grads(weights);
    auto loss = supernet_loss(net, train);
    out.train_loss = checked_loss(loss, "training");
    backward(loss);
    if (cfg.grad_clip > 0) clip_grad_norm(weights, cfg.grad_clip);
    sgd_step(weights, state.w, w_lr, cfg.momentum, cfg.weight_decay);
    zero_grads(weights);
  }
  ++state.step;
  return out;
}

}  // namespace rdarts
