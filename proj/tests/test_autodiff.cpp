// Reverse-mode gradient contract. Finite-difference checks instantiate the
// double-precision kernels so the oracle is meaningful at the stated
// tolerance; the float path shares the same templated code.
#include "testutil.hpp"

#include "kd/core/ops.hpp"

using kd::Tensor;
using kd::Var;

namespace {
Var<double> dleaf(Tensor<double> t) { return kd::make_var(std::move(t)); }
}  // namespace

TEST_CASE("linear case: d(sum(Wx))/dW is a broadcast of x", "[autodiff]") {
  kd::Rng rng(20);
  auto w = kdtest::random_param<double>("w", {3, 4}, rng);
  Tensor<double> xt = kdtest::random_tensor<double>({1, 4}, rng);
  auto loss = kd::sum_all(kd::linear(dleaf(Tensor<double>(xt)), w, Var<double>{}));
  kd::backward(loss);
  for (int64_t o = 0; o < 3; ++o)
    for (int64_t i = 0; i < 4; ++i)
      REQUIRE(w->grad.at2(o, i) == Catch::Approx(xt[i]).margin(1e-12));
}

TEST_CASE("backward requires a recorded forward and a scalar", "[autodiff]") {
  auto lonely = kd::make_var(Tensor<double>::full({1}, 2.0));
  REQUIRE_THROWS_AS(kd::backward(lonely), kd::StateError);
  kd::Rng rng(21);
  auto w = kdtest::random_param<double>("w", {2, 2}, rng);
  auto y = kd::scale(w, 2.0);
  REQUIRE_THROWS_AS(kd::backward(y), kd::ShapeError);  // not a scalar
}

TEST_CASE("detached branches receive no gradient", "[autodiff]") {
  kd::Rng rng(22);
  auto w = kdtest::random_param<double>("w", {2, 3}, rng);
  auto live = kd::mean_all(kd::mul(w, w));
  auto dead = kd::mean_all(kd::detach(kd::scale(w, 3.0)));
  auto loss = kd::add(live, dead);
  kd::backward(loss);
  // gradient equals that of the live term alone
  for (int64_t i = 0; i < w->value.numel(); ++i)
    REQUIRE(w->grad[i] == Catch::Approx(2.0 * w->value[i] / 6.0).margin(1e-12));
}

TEST_CASE("no-grad scope records nothing", "[autodiff]") {
  kd::Rng rng(23);
  auto w = kdtest::random_param<double>("w", {2, 2}, rng);
  kd::NoGradGuard ng;
  auto y = kd::mean_all(kd::mul(w, w));
  REQUIRE_FALSE(y->requires_grad);
  REQUIRE(y->parents.empty());
}

TEST_CASE("finite differences: conv2d with stride and padding", "[autodiff]") {
  kd::Rng rng(24);
  auto x = kdtest::random_param<double>("x", {2, 3, 7, 7}, rng);
  auto w = kdtest::random_param<double>("w", {4, 3, 3, 3}, rng);
  auto b = kdtest::random_param<double>("b", {4}, rng);
  kdtest::check_gradients({x, w, b},
                          [&] { return kd::mean_all(kd::conv2d(x, w, b, 2, 1)); });
}

TEST_CASE("finite differences: pointwise conv fast path", "[autodiff]") {
  kd::Rng rng(25);
  auto x = kdtest::random_param<double>("x", {2, 5, 4, 4}, rng);
  auto w = kdtest::random_param<double>("w", {3, 5, 1, 1}, rng);
  kdtest::check_gradients({x, w},
                          [&] { return kd::mean_all(kd::conv2d(x, w, Var<double>{}, 1, 0)); });
}

TEST_CASE("finite differences: depthwise conv", "[autodiff]") {
  kd::Rng rng(26);
  auto x = kdtest::random_param<double>("x", {2, 4, 6, 6}, rng);
  auto w = kdtest::random_param<double>("w", {4, 1, 3, 3}, rng);
  kdtest::check_gradients({x, w},
                          [&] { return kd::mean_all(kd::depthwise_conv2d(x, w, 2, 1)); });
}

TEST_CASE("finite differences: batch norm in train and eval mode", "[autodiff]") {
  kd::Rng rng(27);
  auto x = kdtest::random_param<double>("x", {3, 2, 4, 4}, rng);
  auto g = kdtest::random_param<double>("g", {2}, rng);
  auto b = kdtest::random_param<double>("b", {2}, rng);
  Tensor<double> rm = Tensor<double>::zeros({2});
  Tensor<double> rv = Tensor<double>::full({2}, 1.0);
  // weight the outputs so the per-channel mean-gradient terms are exercised
  auto wobble = kdtest::random_tensor<double>({3, 2, 4, 4}, rng);
  kdtest::check_gradients({x, g, b}, [&] {
    auto y = kd::batch_norm(x, g, b, rm, rv, 0.1, 1e-5, true);
    return kd::mean_all(kd::mul(y, dleaf(Tensor<double>(wobble))));
  });
  Tensor<double> rm2 = kdtest::random_tensor<double>({2}, rng);
  Tensor<double> rv2 = Tensor<double>::full({2}, 0.8);
  kdtest::check_gradients({x, g, b}, [&] {
    auto y = kd::batch_norm(x, g, b, rm2, rv2, 0.1, 1e-5, false);
    return kd::mean_all(kd::mul(y, dleaf(Tensor<double>(wobble))));
  });
}

TEST_CASE("finite differences: activations", "[autodiff]") {
  kd::Rng rng(28);
  auto x = kdtest::random_param<double>("x", {2, 3, 5, 5}, rng, 2.0);
  kdtest::check_gradients({x}, [&] { return kd::mean_all(kd::relu(x)); });
  kdtest::check_gradients({x}, [&] { return kd::mean_all(kd::relu6(kd::scale(x, 2.0))); });
}

TEST_CASE("finite differences: pooling", "[autodiff]") {
  kd::Rng rng(29);
  auto x = kdtest::random_param<double>("x", {2, 3, 6, 6}, rng, 2.0);
  auto wobble = kdtest::random_tensor<double>({2, 3, 3, 3}, rng);
  kdtest::check_gradients({x}, [&] {
    return kd::mean_all(kd::mul(kd::max_pool(x, 3, 2, 1), dleaf(Tensor<double>(wobble))));
  });
  kdtest::check_gradients({x}, [&] {
    return kd::mean_all(kd::mul(kd::avg_pool(x, 2, 2), dleaf(Tensor<double>(wobble))));
  });
  kdtest::check_gradients({x}, [&] { return kd::mean_all(kd::global_avg_pool(x)); });
}

TEST_CASE("finite differences: linear, concat, add, reshape", "[autodiff]") {
  kd::Rng rng(30);
  auto x = kdtest::random_param<double>("x", {3, 4}, rng);
  auto w = kdtest::random_param<double>("w", {2, 4}, rng);
  auto b = kdtest::random_param<double>("b", {2}, rng);
  kdtest::check_gradients({x, w, b}, [&] { return kd::mean_all(kd::linear(x, w, b)); });

  auto a4 = kdtest::random_param<double>("a4", {1, 2, 3, 3}, rng);
  auto b4 = kdtest::random_param<double>("b4", {1, 3, 3, 3}, rng);
  auto wobble = kdtest::random_tensor<double>({1, 5, 3, 3}, rng);
  kdtest::check_gradients({a4, b4}, [&] {
    return kd::mean_all(kd::mul(kd::concat_channels(a4, b4), dleaf(Tensor<double>(wobble))));
  });
  auto c4 = kdtest::random_param<double>("c4", {1, 2, 3, 3}, rng);
  kdtest::check_gradients({a4, c4}, [&] {
    return kd::mean_all(kd::flatten(kd::add(a4, c4)));
  });
}

TEST_CASE("finite differences: softmax family and scalar reductions", "[autodiff]") {
  kd::Rng rng(31);
  auto z = kdtest::random_param<double>("z", {3, 5}, rng, 2.0);
  auto wobble = kdtest::random_tensor<double>({3, 5}, rng);
  for (double tau : {0.5, 1.0, 4.0}) {
    kdtest::check_gradients({z}, [&] {
      return kd::mean_all(kd::mul(kd::softmax_tau(z, tau), dleaf(Tensor<double>(wobble))));
    });
    kdtest::check_gradients({z}, [&] {
      return kd::mean_all(kd::mul(kd::log_softmax_tau(z, tau), dleaf(Tensor<double>(wobble))));
    });
  }
  std::vector<int> labels{1, 0, 4};
  kdtest::check_gradients({z}, [&] { return kd::nll_loss(kd::log_softmax_tau(z, 1.0), labels); });

  auto v = kdtest::random_param<double>("v", {4, 3}, rng);
  kdtest::check_gradients({v}, [&] {
    auto sq = kd::mul(v, v);
    return kd::mean_all(kd::sqrt_op(kd::row_sum(sq)));
  });
  kdtest::check_gradients({v}, [&] { return kd::mean_all(kd::exp_op(kd::scale(v, 0.5))); });
}

TEST_CASE("finite differences: randomly initialized two-layer net", "[autodiff]") {
  kd::Rng rng(32);
  auto x = kdtest::random_param<double>("x", {4, 2, 8, 8}, rng);
  auto w1 = kdtest::random_param<double>("w1", {3, 2, 3, 3}, rng, 0.5);
  auto g = kdtest::random_param<double>("g", {3}, rng, 0.3);
  auto b = kdtest::random_param<double>("b", {3}, rng, 0.3);
  auto w2 = kdtest::random_param<double>("w2", {3, 12}, rng, 0.5);
  auto b2 = kdtest::random_param<double>("b2", {3}, rng, 0.3);
  Tensor<double> rm = Tensor<double>::zeros({3});
  Tensor<double> rv = Tensor<double>::full({3}, 1.0);
  std::vector<int> labels{0, 2, 1, 2};
  // more than 100 coordinates in total across the six parameters
  kdtest::check_gradients(
      {x, w1, g, b, w2, b2},
      [&] {
        auto h = kd::conv2d(x, w1, Var<double>{}, 2, 1);
        h = kd::batch_norm(h, g, b, rm, rv, 0.1, 1e-5, true);
        h = kd::relu(h);
        h = kd::global_avg_pool(h);
        auto logits = kd::linear(kd::flatten(h), w2, b2);
        return kd::nll_loss(kd::log_softmax_tau(logits, 1.0), labels);
      },
      1e-3, 1e-3, 32);
}

TEST_CASE("parameter gradients accumulate until zeroed", "[autodiff]") {
  kd::Rng rng(33);
  auto w = kdtest::random_param<double>("w", {2, 2}, rng);
  auto once = [&] { return kd::mean_all(kd::mul(w, w)); };
  kd::backward(once());
  Tensor<double> first = w->grad;
  kd::backward(once());
  for (int64_t i = 0; i < 4; ++i) REQUIRE(w->grad[i] == Catch::Approx(2 * first[i]).margin(1e-12));
  w->zero_grad();
  for (int64_t i = 0; i < 4; ++i) REQUIRE(w->grad[i] == 0.0);
}
