#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include "kd/core/ops.hpp"
#include "kd/core/rng.hpp"

namespace kd {

using FVar = Var<float>;

// Parameter visitation callbacks. visit_params sees trainable parameters,
// visit_state additionally sees persistent buffers (running statistics), which
// is the set a checkpoint must carry for bit-identical forward replay.
template <typename S>
using ParamVisitor = std::function<void(const Var<S>&)>;
template <typename S>
using StateVisitor = std::function<void(const std::string&, Tensor<S>*)>;

template <typename S>
Tensor<S> gaussian_init(Shape shape, double stddev, Rng& rng) {
  Tensor<S> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<S>(rng.normal(stddev));
  return t;
}

// Convolution module without bias; a batch norm always follows in both
// networks here. Weights use fan-out scaled Gaussian init.
template <typename S>
struct Conv2dModule {
  Var<S> weight;
  int64_t cin = 0, cout = 0, k = 0, stride = 1, pad = 0;

  Conv2dModule() = default;
  Conv2dModule(const std::string& name, int64_t cin_, int64_t cout_, int64_t k_, int64_t stride_,
               int64_t pad_, Rng& rng)
      : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(cout * k * k));
    weight = make_param(name + ".weight", gaussian_init<S>({cout, cin, k, k}, stddev, rng));
  }

  Var<S> forward(const Var<S>& x) const { return conv2d(x, weight, Var<S>{}, stride, pad); }

  void visit_params(const ParamVisitor<S>& fn) const { fn(weight); }
  void visit_state(const StateVisitor<S>& fn) { fn(weight->name, &weight->value); }
  int64_t param_count() const { return cout * cin * k * k; }
};

template <typename S>
struct DepthwiseConv2dModule {
  Var<S> weight;
  int64_t channels = 0, k = 0, stride = 1, pad = 0;

  DepthwiseConv2dModule() = default;
  DepthwiseConv2dModule(const std::string& name, int64_t channels_, int64_t k_, int64_t stride_,
                        int64_t pad_, Rng& rng)
      : channels(channels_), k(k_), stride(stride_), pad(pad_) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(k * k));
    weight = make_param(name + ".weight", gaussian_init<S>({channels, 1, k, k}, stddev, rng));
  }

  Var<S> forward(const Var<S>& x) const { return depthwise_conv2d(x, weight, stride, pad); }

  void visit_params(const ParamVisitor<S>& fn) const { fn(weight); }
  void visit_state(const StateVisitor<S>& fn) { fn(weight->name, &weight->value); }
  int64_t param_count() const { return channels * k * k; }
};

template <typename S>
struct BatchNorm2dModule {
  Var<S> gamma, beta;
  Tensor<S> running_mean, running_var;
  S momentum = S(0.1), eps = S(1e-5);
  int64_t channels = 0;
  std::string name;

  BatchNorm2dModule() = default;
  BatchNorm2dModule(const std::string& name_, int64_t channels_) : channels(channels_), name(name_) {
    gamma = make_param(name + ".gamma", Tensor<S>::full({channels}, S(1)));
    beta = make_param(name + ".beta", Tensor<S>::zeros({channels}));
    running_mean = Tensor<S>::zeros({channels});
    running_var = Tensor<S>::full({channels}, S(1));
  }

  Var<S> forward(const Var<S>& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, momentum, eps, training);
  }

  void visit_params(const ParamVisitor<S>& fn) const {
    fn(gamma);
    fn(beta);
  }
  void visit_state(const StateVisitor<S>& fn) {
    fn(gamma->name, &gamma->value);
    fn(beta->name, &beta->value);
    fn(name + ".running_mean", &running_mean);
    fn(name + ".running_var", &running_var);
  }
  int64_t param_count() const { return 2 * channels; }
};

template <typename S>
struct LinearModule {
  Var<S> weight, bias;
  int64_t in_features = 0, out_features = 0;

  LinearModule() = default;
  LinearModule(const std::string& name, int64_t in_f, int64_t out_f, Rng& rng)
      : in_features(in_f), out_features(out_f) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(out_f));
    weight = make_param(name + ".weight", gaussian_init<S>({out_f, in_f}, stddev, rng));
    bias = make_param(name + ".bias", Tensor<S>::zeros({out_f}));
  }

  Var<S> forward(const Var<S>& x) const { return linear(x, weight, bias); }

  void visit_params(const ParamVisitor<S>& fn) const {
    fn(weight);
    fn(bias);
  }
  void visit_state(const StateVisitor<S>& fn) {
    fn(weight->name, &weight->value);
    fn(bias->name, &bias->value);
  }
  int64_t param_count() const { return in_features * out_features + out_features; }
};

}  // namespace kd
