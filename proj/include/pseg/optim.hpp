#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pseg/common.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
void collect_param(std::vector<NamedParam<T>>& out, const std::string& name,
                   const Tensor<T>& t) {
  out.push_back({name, t});
}

// Linear warmup to base_lr followed by cosine decay to floor.
struct ScheduleConfig {
  double base_lr = 1e-3;
  long warmup_steps = 0;
  long total_steps = 1;
  double floor = 0.0;

  void validate() const {
    if (warmup_steps < 0 || total_steps <= 0 || warmup_steps > total_steps)
      throw ConfigError(cat("schedule: warmup ", warmup_steps,
                            " must lie in [0, total ", total_steps, "]"));
  }
};

// Steps past total_steps clamp to the floor.
inline double lr_at(long step, const ScheduleConfig& cfg) {
  cfg.validate();
  if (step > cfg.total_steps) return cfg.floor;
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return cfg.base_lr * static_cast<double>(step) /
           static_cast<double>(cfg.warmup_steps);
  if (cfg.total_steps == cfg.warmup_steps) return cfg.base_lr;
  double t = static_cast<double>(step - cfg.warmup_steps) /
             static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return cfg.floor +
         (cfg.base_lr - cfg.floor) * 0.5 * (1.0 + std::cos(M_PI * t));
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;
  double eps = 1e-8;
};

// AdamW with decoupled weight decay and bias-corrected moments. With
// weight_decay = 0 the update is a plain Adam step.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedParam<T>> params, AdamWConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].tensor.numel(), T(0));
      v_[i].assign(params_[i].tensor.numel(), T(0));
    }
  }

  long step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }
  std::vector<NamedParam<T>>& params() { return params_; }

  void step() { step_with_lr(cfg_.lr); }

  void step_with_lr(double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].tensor;
      if (p.grad().size() != p.numel())
        throw ContractError(cat("adamw: parameter '", params_[i].name,
                                "' has no gradient"));
      auto& w = p.value();
      const auto& g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
      if (cfg_.weight_decay != 0.0) {
        const T decay = static_cast<T>(lr * cfg_.weight_decay);
        for (auto& x : w) x -= decay * x;
      }
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        const double mhat = static_cast<double>(m[j]) / bc1;
        const double vhat = static_cast<double>(v[j]) / bc2;
        w[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // moment access for checkpointing
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  void restore_state(long step, std::vector<std::vector<T>> m,
                     std::vector<std::vector<T>> v) {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (m.at(i).size() != params_[i].tensor.numel() ||
          v.at(i).size() != params_[i].tensor.numel())
        throw ConfigError(cat("optimizer state for '", params_[i].name,
                              "' does not match parameter size"));
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  std::vector<NamedParam<T>> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  long step_ = 0;
};

// Global gradient norm across a parameter set; part of step diagnostics.
template <typename T>
double grad_norm(const std::vector<NamedParam<T>>& params) {
  double acc = 0;
  for (const auto& p : params)
    for (T g : p.tensor.grad()) acc += static_cast<double>(g) * g;
  return std::sqrt(acc);
}

}  // namespace pseg
