#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "kd/core/graph.hpp"
#include "kd/core/rng.hpp"

namespace kdtest {

template <typename S>
kd::Tensor<S> random_tensor(kd::Shape shape, kd::Rng& rng, double stddev = 1.0) {
  kd::Tensor<S> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<S>(rng.normal(stddev));
  return t;
}

template <typename S>
kd::Var<S> random_param(const std::string& name, kd::Shape shape, kd::Rng& rng,
                        double stddev = 1.0) {
  return kd::make_param(name, random_tensor<S>(std::move(shape), rng, stddev));
}

// Central finite-difference gradient oracle. loss_fn() must rebuild the graph
// from the current parameter values on every call. Checks up to
// max_coords_per_param sampled coordinates per parameter against the analytic
// gradient at relative tolerance rtol (small absolute floor for
// true-zero-gradient coordinates).
template <typename LossFn>
void check_gradients(const std::vector<kd::Var<double>>& params, LossFn&& loss_fn,
                     double step = 1e-3, double rtol = 1e-3, int max_coords_per_param = 24,
                     uint64_t seed = 42, double atol = 1e-6) {
  for (auto& p : params) {
    p->ensure_grad();
    p->zero_grad();
  }
  auto loss = loss_fn();
  kd::backward(loss);
  std::vector<kd::Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p->grad);

  kd::Rng pick(seed);
  int checked = 0;
  for (size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const int64_t n = p->value.numel();
    std::vector<int64_t> coords;
    if (n <= max_coords_per_param) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < max_coords_per_param; ++i) coords.push_back(pick.below(n));
    }
    for (int64_t i : coords) {
      const double orig = p->value[i];
      double f_plus, f_minus;
      {
        kd::NoGradGuard ng;
        p->value[i] = orig + step;
        f_plus = kd::scalar_value(loss_fn());
        p->value[i] = orig - step;
        f_minus = kd::scalar_value(loss_fn());
        p->value[i] = orig;
      }
      const double numeric = (f_plus - f_minus) / (2 * step);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric);
      const double bound = rtol * std::max(std::abs(a), std::abs(numeric)) + atol;
      INFO("param " << p->name << " coord " << i << ": analytic " << a << " numeric " << numeric);
      REQUIRE(err <= bound);
      ++checked;
    }
  }
  REQUIRE(checked > 0);
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() /
             ("kd_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace kdtest
