// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "drg/adam.hpp"
#include "drg/errors.hpp"
#include "drg/nn/layers.hpp"
#include "drg/tensor.hpp"

using namespace drg;

namespace {

struct Param {
  Tensor<double> value;
  Tensor<double> grad;
  Param(std::initializer_list<std::size_t> shape) : value(shape), grad(shape) {}
  nn::ParamRef<double> ref(const std::string& name) {
    return {name, &value, &grad};
  }
};

}  // namespace

TEST_CASE("adam minimizes w^2 along the long-double reference trace") {
  // Loss w^2/2 so the gradient is w itself; ten steps, checked against an
  // independently coded update rule at long-double precision.
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam<double> opt(cfg);
  Param p({1});
  p.value[0] = 1.0;

  long double w = 1.0L, m = 0.0L, v = 0.0L;
  for (int t = 1; t <= 10; ++t) {
    p.grad[0] = p.value[0];
    opt.step({p.ref("w")});

    const long double g = w;
    m = 0.9L * m + 0.1L * g;
    v = 0.999L * v + 0.001L * g * g;
    const long double mhat = m / (1.0L - std::pow(0.9L, t));
    const long double vhat = v / (1.0L - std::pow(0.999L, t));
    w = w - 0.1L * mhat / (std::sqrt(vhat) + 1e-8L);

    INFO("step " << t);
    CHECK(p.value[0] == Catch::Approx(static_cast<double>(w)).margin(1e-10));
  }
  CHECK(p.value[0] < 1.0);
  CHECK(opt.step_count() == 10);
}

TEST_CASE("first adam step moves by roughly lr regardless of gradient scale") {
  // Bias correction makes mhat/sqrt(vhat) equal sign(g) on step one.
  for (double scale : {1e-6, 1.0, 1e6}) {
    Adam<double> opt(AdamConfig{0.01, 0.9, 0.999, 1e-8});
    Param p({1});
    p.value[0] = 0.0;
    p.grad[0] = scale;
    opt.step({p.ref("w")});
    CHECK(p.value[0] == Catch::Approx(-0.01).epsilon(1e-2));
  }
}

TEST_CASE("zero gradient leaves parameters unchanged") {
  Adam<double> opt(AdamConfig{0.1, 0.9, 0.999, 1e-8});
  Param p({3});
  p.value[0] = 1.0;
  p.value[1] = -2.0;
  p.value[2] = 0.5;
  p.grad.zero();
  for (int t = 0; t < 5; ++t) opt.step({p.ref("w")});
  CHECK(p.value[0] == 1.0);
  CHECK(p.value[1] == -2.0);
  CHECK(p.value[2] == 0.5);
}

TEST_CASE("lr zero is a no-op even with gradients") {
  Adam<double> opt(AdamConfig{0.0, 0.9, 0.999, 1e-8});
  Param p({2});
  p.value[0] = 3.0;
  p.value[1] = -1.0;
  p.grad[0] = 10.0;
  p.grad[1] = -4.0;
  opt.step({p.ref("w")});
  CHECK(p.value[0] == 3.0);
  CHECK(p.value[1] == -1.0);
}

TEST_CASE("nan gradients are rejected with the parameter name") {
  Adam<double> opt;
  Param p({2});
  p.grad[0] = 0.0;
  p.grad[1] = std::nan("");
  CHECK_THROWS_MATCHES(
      opt.step({p.ref("conv.w")}), NumericError,
      Catch::Matchers::MessageMatches(
          Catch::Matchers::ContainsSubstring("conv.w")));
}

TEST_CASE("parameter list changes are rejected") {
  Adam<double> opt;
  Param a({1}), b({1});
  a.grad[0] = 1.0;
  b.grad[0] = 1.0;
  opt.step({a.ref("a"), b.ref("b")});
  CHECK_THROWS_AS(opt.step({a.ref("a")}), std::invalid_argument);
  CHECK_THROWS_AS(opt.step({b.ref("b"), a.ref("a")}), std::invalid_argument);
  CHECK_THROWS_AS(opt.step({a.ref("a"), b.ref("renamed")}),
                  std::invalid_argument);
  CHECK_NOTHROW(opt.step({a.ref("a"), b.ref("b")}));
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(Adam<double>(AdamConfig{-1.0, 0.9, 0.999, 1e-8}),
                  std::invalid_argument);
  CHECK_THROWS_AS(Adam<double>(AdamConfig{0.1, 1.0, 0.999, 1e-8}),
                  std::invalid_argument);
  CHECK_THROWS_AS(Adam<double>(AdamConfig{0.1, 0.9, -0.1, 1e-8}),
                  std::invalid_argument);
  CHECK_THROWS_AS(Adam<double>(AdamConfig{0.1, 0.9, 0.999, 0.0}),
                  std::invalid_argument);
  CHECK_NOTHROW(Adam<double>(AdamConfig{0.0, 0.0, 0.0, 1e-8}));
}

TEST_CASE("skip mask freezes parameters and their moments") {
  AdamConfig cfg;
  cfg.lr = 0.05;
  Adam<double> frozen_opt(cfg), free_opt(cfg);
  Param frozen_a({1}), frozen_b({1});
  Param free_a({1}), free_b({1});
  frozen_a.value[0] = free_a.value[0] = 1.0;
  frozen_b.value[0] = free_b.value[0] = 2.0;

  for (int t = 0; t < 4; ++t) {
    frozen_a.grad[0] = free_a.grad[0] = 0.5;
    frozen_b.grad[0] = free_b.grad[0] = -0.25;
    frozen_opt.step({frozen_a.ref("a"), frozen_b.ref("b")}, {0, 1});
    free_opt.step({free_a.ref("a"), free_b.ref("b")});
  }

  // The masked parameter never moved; the unmasked one took the exact same
  // trajectory as in the optimizer with no mask.
  CHECK(frozen_b.value[0] == 2.0);
  CHECK(frozen_a.value[0] == free_a.value[0]);
  CHECK(frozen_a.value[0] != 1.0);

  // Unfreezing later starts from untouched (zero) moments; only the shared
  // step counter has advanced, so bias correction uses t = 5.
  frozen_b.grad[0] = -0.25;
  frozen_a.grad[0] = 0.0;
  frozen_opt.step({frozen_a.ref("a"), frozen_b.ref("b")});
  const double g = -0.25;
  const double mhat = (0.1 * g) / (1.0 - std::pow(0.9, 5));
  const double vhat = (0.001 * g * g) / (1.0 - std::pow(0.999, 5));
  const double expect = 2.0 - 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
  CHECK(frozen_b.value[0] == Catch::Approx(expect).margin(1e-12));

  CHECK_THROWS_AS(
      frozen_opt.step({frozen_a.ref("a"), frozen_b.ref("b")}, {1}),
      std::invalid_argument);
}

TEST_CASE("float32 parameters update with float64 math inside") {
  Adam<float> opt(AdamConfig{0.1, 0.9, 0.999, 1e-8});
  Tensor<float> value({1}), grad({1});
  value[0] = 1.0f;
  grad[0] = 1.0f;
  opt.step({{"w", &value, &grad}});
  // First step: mhat = 1, vhat = 1, so the update is lr / (1 + eps).
  CHECK(value[0] == Catch::Approx(1.0 - 0.1 / (1.0 + 1e-8)).margin(1e-6));
}
