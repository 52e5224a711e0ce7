#include <doctest.h>

#include <cmath>
#include <limits>

#include "dscm/optimizer.hpp"

using namespace dscm;

TEST_CASE("zero gradient and zero weight decay leave parameters unchanged") {
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  Optimizer opt(cfg);
  Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5});
  Tensor g = Tensor::zeros({3});
  CHECK(opt.step({&p}, {g}));
  CHECK(p[0] == 1.0);
  CHECK(p[1] == -2.0);
  CHECK(p[2] == 0.5);
}

TEST_CASE("gradient norm above the skip threshold skips the whole step") {
  OptimizerConfig cfg;
  cfg.grad_skip_norm = 500.0;
  Optimizer opt(cfg);
  Tensor p = Tensor::from_data({1}, {1.0});
  Tensor g = Tensor::from_data({1}, {1000.0});
  CHECK_FALSE(opt.step({&p}, {g}));
  CHECK(p[0] == 1.0);
  CHECK(opt.skip_count() == 1);
  CHECK(opt.step_count() == 0);
  // first moment untouched by the skipped step
  CHECK(opt.first_moments().at(0)[0] == 0.0);
}

TEST_CASE("NaN gradients are skipped and counted, never applied") {
  Optimizer opt{OptimizerConfig{}};
  Tensor p = Tensor::from_data({2}, {1.0, 2.0});
  Tensor g = Tensor::from_data({2}, {0.1, std::numeric_limits<double>::quiet_NaN()});
  CHECK_FALSE(opt.step({&p}, {g}));
  CHECK(p[0] == 1.0);
  CHECK(p[1] == 2.0);
  CHECK(opt.skip_count() == 1);
}

TEST_CASE("first adaptive-moment step with unit gradient moves by about -lr") {
  // Hand-computed: m-hat = 1, v-hat = 1, update = lr * 1 / (1 + eps).
  OptimizerConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.weight_decay = 0.0;
  Optimizer opt(cfg);
  Tensor p = Tensor::from_data({1}, {0.7});
  Tensor g = Tensor::from_data({1}, {1.0});
  CHECK(opt.step({&p}, {g}));
  const double expected = 0.7 - 1e-3 * (1.0 / (1.0 + cfg.epsilon));
  CHECK(p[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(opt.step_count() == 1);
}

TEST_CASE("zero learning rate is the identity for any gradients") {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.weight_decay = 0.1;  // decoupled decay is also scaled by lr
  Optimizer opt(cfg);
  Tensor p = Tensor::from_data({3}, {0.3, -1.0, 5.0});
  Tensor g = Tensor::from_data({3}, {10.0, -3.0, 0.01});
  for (int i = 0; i < 5; ++i) CHECK(opt.step({&p}, {g}));
  CHECK(p[0] == 0.3);
  CHECK(p[1] == -1.0);
  CHECK(p[2] == 5.0);
}

TEST_CASE("gradient clipping rescales to the clip norm") {
  OptimizerConfig cfg;
  cfg.grad_clip_norm = 1.0;
  cfg.grad_skip_norm = 500.0;
  cfg.beta1 = 0.0;  // makes the first moment equal the clipped gradient
  Optimizer opt(cfg);
  Tensor p = Tensor::from_data({2}, {0.0, 0.0});
  Tensor g = Tensor::from_data({2}, {3.0, 4.0});  // norm 5 -> clipped to 1
  CHECK(opt.step({&p}, {g}));
  CHECK(opt.first_moments().at(0)[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(opt.first_moments().at(0)[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("EMA shadow tracks parameters at the configured rate") {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.ema_rate = 0.5;
  Optimizer opt(cfg);
  Tensor p = Tensor::from_data({1}, {1.0});
  opt.init_ema({&p});
  Tensor g = Tensor::from_data({1}, {1.0});
  opt.step({&p}, {g});
  // shadow = 0.5 * 1.0 + 0.5 * p_new
  CHECK(opt.ema().at(0)[0] == doctest::Approx(0.5 + 0.5 * p[0]).epsilon(1e-12));
}

TEST_CASE("linear warmup scales the first steps") {
  OptimizerConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.warmup_steps = 10;
  Optimizer opt(cfg);
  Tensor p = Tensor::from_data({1}, {0.0});
  Tensor g = Tensor::from_data({1}, {1.0});
  opt.step({&p}, {g});
  // effective lr on step 1 is 0.1
  CHECK(std::fabs(p[0] + 0.1 / (1.0 + cfg.epsilon)) < 1e-9);
}
