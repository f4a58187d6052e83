#include <doctest.h>

#include <cmath>

#include "pseg/optim.hpp"
#include "pseg/rng.hpp"

using namespace pseg;
using T64 = Tensor<double>;

TEST_CASE("adamw first step with wd=0 matches the bias-corrected form") {
  // at t=1, mhat = g and vhat = g^2, so dw = -lr * g / (|g| + eps)
  auto w = T64::from({1}, {0.7});
  w.set_requires_grad(true);
  AdamWConfig cfg;
  cfg.lr = 0.01;
  cfg.weight_decay = 0.0;
  AdamW<double> opt({{"w", w}}, cfg);
  const double g = -0.3;
  w.grad_buffer()[0] = g;
  opt.step();
  double expect = 0.7 - cfg.lr * g / (std::abs(g) + cfg.eps);
  CHECK(w.value()[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("adamw zero gradient with wd>0 is pure decoupled decay") {
  auto w = T64::from({2}, {2.0, -4.0});
  w.set_requires_grad(true);
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.05;
  AdamW<double> opt({{"w", w}}, cfg);
  w.zero_grad();
  opt.step();
  CHECK(w.value()[0] == doctest::Approx(2.0 * (1 - 0.1 * 0.05)));
  CHECK(w.value()[1] == doctest::Approx(-4.0 * (1 - 0.1 * 0.05)));
}

TEST_CASE("adamw converges on a convex quadratic") {
  auto w = T64::from({1}, {0.0});
  w.set_requires_grad(true);
  AdamWConfig cfg;
  cfg.lr = 0.2;
  AdamW<double> opt({{"w", w}}, cfg);
  for (int i = 0; i < 100; ++i) {
    w.zero_grad();
    w.grad_buffer()[0] = 2.0 * (w.value()[0] - 3.0);
    opt.step();
  }
  CHECK(std::abs(w.value()[0] - 3.0) < 0.1);
}

TEST_CASE("adamw with wd=0 is bit-identical to a plain adam reference") {
  Rng rng(5);
  auto w = T64::from({6}, {0.3, -0.7, 1.1, 0.0, 2.5, -1.4});
  w.set_requires_grad(true);
  AdamWConfig cfg;
  cfg.lr = 3e-3;
  cfg.weight_decay = 0.0;
  AdamW<double> opt({{"w", w}}, cfg);

  // plain adam, maintained by hand on a copy
  std::vector<double> ref = w.value(), m(6, 0.0), v(6, 0.0);
  for (int t = 1; t <= 25; ++t) {
    std::vector<double> g(6);
    for (auto& x : g) x = rng.normal(0.0, 1.0);
    auto& gb = w.grad_buffer();
    for (int i = 0; i < 6; ++i) gb[i] = g[i];
    opt.step();
    for (int i = 0; i < 6; ++i) {
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
      double mhat = m[i] / (1 - std::pow(cfg.beta1, t));
      double vhat = v[i] / (1 - std::pow(cfg.beta2, t));
      ref[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    w.zero_grad();
  }
  for (int i = 0; i < 6; ++i) CHECK(w.value()[i] == ref[i]);
}

TEST_CASE("adamw missing grad is a contract error") {
  auto w = T64::from({2}, {1.0, 2.0});
  w.set_requires_grad(true);
  AdamW<double> opt({{"w", w}}, {});
  CHECK_THROWS_AS(opt.step(), ContractError);
}

TEST_CASE("identical seeds give bit-identical trajectories") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    auto w = T64::from({4}, {0.1, 0.2, 0.3, 0.4});
    w.set_requires_grad(true);
    AdamWConfig cfg;
    cfg.lr = 1e-2;
    cfg.weight_decay = 0.01;
    AdamW<double> opt({{"w", w}}, cfg);
    for (int t = 0; t < 50; ++t) {
      auto& g = w.grad_buffer();
      for (auto& x : g) x = rng.normal(0.0, 1.0);
      opt.step();
      w.zero_grad();
    }
    return w.value();
  };
  CHECK(run(123) == run(123));
}

TEST_CASE("lr schedule endpoints and clamping") {
  ScheduleConfig cfg;
  cfg.base_lr = 0.1;
  cfg.warmup_steps = 10;
  cfg.total_steps = 110;
  cfg.floor = 0.0;

  CHECK(lr_at(10, cfg) == doctest::Approx(0.1));                // ramp end
  CHECK(lr_at(110, cfg) == doctest::Approx(0.0).epsilon(1e-12));  // cos(pi)
  CHECK(lr_at(60, cfg) == doctest::Approx(0.05));               // midpoint
  CHECK(lr_at(5, cfg) == doctest::Approx(0.05));                // ramp middle
  CHECK(lr_at(200, cfg) == cfg.floor);                          // clamp

  SUBCASE("floor is respected") {
    cfg.floor = 0.01;
    CHECK(lr_at(110, cfg) == doctest::Approx(0.01));
    CHECK(lr_at(60, cfg) == doctest::Approx(0.5 * (0.1 + 0.01)));
  }

  SUBCASE("no warmup starts at base lr") {
    cfg.warmup_steps = 0;
    CHECK(lr_at(0, cfg) == doctest::Approx(0.1));
  }

  SUBCASE("invalid warmup rejected") {
    cfg.warmup_steps = 200;
    CHECK_THROWS_AS(lr_at(0, cfg), ConfigError);
  }
}
