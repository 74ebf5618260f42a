#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kd/core/graph.hpp"

namespace kd {

struct OptimizerConfig {
  enum class Kind { adam, adamw };
  Kind kind = Kind::adam;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // coupled L2 for adam, decoupled for adamw

  void validate() const {
    if (lr < 0) throw ConfigError("optimizer: learning rate must be >= 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("optimizer: betas must lie in [0, 1)");
    if (eps <= 0) throw ConfigError("optimizer: eps must be > 0");
    if (weight_decay < 0) throw ConfigError("optimizer: weight decay must be >= 0");
  }
};

// Adam / AdamW over a fixed parameter list. AdamW applies the decay directly
// to the weights, outside the adaptive update; per-element math runs in
// double and is stored back as float.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(std::vector<Var<float>> params, OptimizerConfig cfg)
      : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    slots_.reserve(params_.size());
    for (auto& p : params_) {
      slots_.push_back({Tensor<float>::zeros(p->value.shape), Tensor<float>::zeros(p->value.shape)});
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Node<float>& p = *params_[k];
      if (!p.trainable) continue;
      p.ensure_grad();
      Tensor<float>& m = slots_[k].m;
      Tensor<float>& v = slots_[k].v;
      const int64_t n = p.value.numel();
      for (int64_t i = 0; i < n; ++i) {
        double g = static_cast<double>(p.grad[i]);
        const double w = static_cast<double>(p.value[i]);
        if (cfg_.kind == OptimizerConfig::Kind::adam && cfg_.weight_decay > 0)
          g += cfg_.weight_decay * w;
        const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * g * g;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        double upd = cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
        if (cfg_.kind == OptimizerConfig::Kind::adamw) upd += cfg_.lr * cfg_.weight_decay * w;
        p.value[i] = static_cast<float>(w - upd);
      }
    }
  }

  uint64_t step_count() const { return t_; }
  void set_step_count(uint64_t t) { t_ = t; }

  const std::vector<Var<float>>& params() const { return params_; }

  int64_t trainable_value_count() const {
    int64_t n = 0;
    for (const auto& p : params_)
      if (p->trainable) n += p->value.numel();
    return n;
  }

  // Moment tensors for checkpointing, keyed by the owning parameter name.
  void visit_state(const std::function<void(const std::string&, Tensor<float>*)>& fn) {
    for (size_t k = 0; k < params_.size(); ++k) {
      fn("m." + params_[k]->name, &slots_[k].m);
      fn("v." + params_[k]->name, &slots_[k].v);
    }
  }

 private:
  struct Slot {
    Tensor<float> m, v;
  };
  OptimizerConfig cfg_;
  std::vector<Var<float>> params_;
  std::vector<Slot> slots_;
  uint64_t t_ = 0;
};

template <typename Net>
std::vector<Var<float>> collect_params(const Net& net) {
  std::vector<Var<float>> out;
  net.visit_params([&](const Var<float>& p) { out.push_back(p); });
  return out;
}

// Order-sensitive FNV-1a over the raw bits of every trainable parameter;
// used to pin down exactly which weights produced a set of targets.
template <typename Net>
uint64_t param_hash(const Net& net) {
  uint64_t h = 1469598103934665603ull;
  net.visit_params([&](const Var<float>& p) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.ptr());
    const size_t n = p->value.data.size() * sizeof(float);
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  });
  return h;
}

}  // namespace kd
