#include <doctest.h>

#include <cmath>
#include <vector>

#include "dscm/flows.hpp"
#include "dscm/synthblob.hpp"

using namespace dscm;

namespace {

ParentCodec scalar_parent_codec() {
  return ParentCodec{{VariableSpec{"t", VarKind::Continuous, 0, 0, 0, {}}}};
}

FlowConfig intensity_config() {
  FlowConfig cfg;
  cfg.bounded = true;
  cfg.support_lo = 0.0;
  cfg.support_hi = 191.0;
  return cfg;
}

// Trapezoid integral of exp(log_prob) over the support on a graded grid: a
// uniform grid in a plus the forward image of a uniform grid in u, so narrow
// density spikes (tiny forward derivative) are resolved.
double density_integral(const ConditionalFlow& flow, const std::vector<Value>& pa) {
  std::vector<double> grid;
  const double lo = 1e-6, hi = 191.0 - 1e-6;
  const int na = 20001, nu = 20001;
  for (int k = 0; k < na; ++k) grid.push_back(lo + (hi - lo) * k / (na - 1.0));
  for (int k = 0; k < nu; ++k) {
    const double u = -9.0 + 18.0 * k / (nu - 1.0);
    const double a = flow.forward(u, pa);
    if (a > lo && a < hi) grid.push_back(a);
  }
  std::sort(grid.begin(), grid.end());
  double integral = 0.0;
  double prev_a = grid[0], prev_p = std::exp(flow.log_prob(grid[0], pa));
  for (std::size_t k = 1; k < grid.size(); ++k) {
    if (grid[k] - prev_a < 1e-12) continue;
    const double p = std::exp(flow.log_prob(grid[k], pa));
    integral += 0.5 * (prev_p + p) * (grid[k] - prev_a);
    prev_a = grid[k];
    prev_p = p;
  }
  return integral;
}

}  // namespace

TEST_CASE("single zeroed affine layer is the identity") {
  FlowConfig cfg;
  cfg.affine_layers = 1;
  cfg.interleave_asinh = false;
  RngStream init(1);
  ConditionalFlow flow(cfg, ParentCodec{}, init);  // parentless: constant coefficients (zeros)
  CHECK(flow.forward(0.3, {}) == 0.3);
  CHECK(flow.inverse(0.3, {}) == 0.3);
  // standard Gaussian log-density at zero
  CHECK(flow.log_prob(0.0, {}) == doctest::Approx(-0.5 * std::log(2.0 * M_PI)).epsilon(1e-12));
}

TEST_CASE("forward is strictly increasing in u on randomized layers") {
  RngStream init(2);
  ConditionalFlow flow(intensity_config(), scalar_parent_codec(), init);
  RngStream rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Value> pa{Value::scalar(1.0 + 3.0 * rng.uniform())};
    double u1 = 4.0 * rng.uniform() - 2.0;
    double u2 = u1 + 0.01 + rng.uniform();
    CHECK(flow.forward(u1, pa) < flow.forward(u2, pa));
  }
}

TEST_CASE("inversion round-trip residual below 1e-9 over 1e4 random cases") {
  RngStream init(4);
  ConditionalFlow flow(intensity_config(), scalar_parent_codec(), init);
  RngStream rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<Value> pa{Value::scalar(1.0 + 3.0 * rng.uniform())};
    // draw an in-support value through the flow itself
    const double a = flow.forward(rng.normal(), pa);
    const double u = flow.inverse(a, pa);
    worst = std::max(worst, std::fabs(flow.forward(u, pa) - a));
  }
  INFO("worst round-trip residual: " << worst);
  CHECK(worst < 1e-9);
}

TEST_CASE("density integrates to one within 1e-3 (trapezoid oracle)") {
  RngStream init(6);
  ConditionalFlow flow(intensity_config(), scalar_parent_codec(), init);
  std::vector<Value> pa{Value::scalar(2.2)};
  CHECK(std::fabs(density_integral(flow, pa) - 1.0) < 1e-3);
}

TEST_CASE("a pure scaling layer shifts log_prob by -s uniformly") {
  FlowConfig cfg;
  cfg.affine_layers = 1;
  cfg.interleave_asinh = false;
  RngStream init(7);
  ConditionalFlow flow(cfg, ParentCodec{}, init);
  const double s = 0.73;
  flow.params().get("aff0.coef").mutable_data()[1] = s;  // log-scale
  for (double u : {-1.2, 0.0, 0.4, 2.0}) {
    const double a = u * std::exp(s);
    const double base = -0.5 * std::log(2.0 * M_PI) - 0.5 * u * u;
    CHECK(flow.log_prob(a, {}) == doctest::Approx(base - s).epsilon(1e-12));
  }
}

TEST_CASE("support boundary raises a domain error") {
  RngStream init(8);
  ConditionalFlow flow(intensity_config(), scalar_parent_codec(), init);
  std::vector<Value> pa{Value::scalar(2.0)};
  CHECK_THROWS_AS(flow.inverse(191.0, pa), DomainError);
  CHECK_THROWS_AS(flow.inverse(-0.5, pa), DomainError);
  CHECK_THROWS_AS(flow.log_prob(191.0, pa), DomainError);
}

TEST_CASE("counterfactual attributes") {
  RngStream init(9);
  ConditionalFlow flow(intensity_config(), scalar_parent_codec(), init);
  std::vector<Value> pa{Value::scalar(2.0)};
  std::vector<Value> pa_cf{Value::scalar(3.0)};
  const double a = flow.forward(0.4, pa);

  // composition: unchanged parents return the value exactly
  CHECK(flow.counterfactual(a, pa, pa) == a);
  // idempotence under a fixed counterfactual parent
  const double c1 = flow.counterfactual(a, pa, pa_cf);
  const double c2 = flow.counterfactual(a, pa, pa_cf);
  CHECK(c1 == c2);
}

TEST_CASE("generate-and-refit recovers an affine ground truth within 0.05 nats") {
  // Ground truth: a parentless 1-affine flow with fixed coefficients.
  FlowConfig gt_cfg;
  gt_cfg.affine_layers = 1;
  gt_cfg.interleave_asinh = false;
  RngStream init(10);
  ConditionalFlow gt(gt_cfg, ParentCodec{}, init);
  gt.params().get("aff0.coef").mutable_data()[0] = 1.3;   // shift
  gt.params().get("aff0.coef").mutable_data()[1] = -0.4;  // log-scale

  RngStream data_rng(11);
  std::vector<double> values;
  std::vector<std::vector<Value>> parents;
  double gt_nll = 0.0;
  for (int k = 0; k < 4000; ++k) {
    const double a = gt.forward(data_rng.normal(), {});
    values.push_back(a);
    parents.push_back({});
    gt_nll -= gt.log_prob(a, {});
  }
  gt_nll /= values.size();

  ConditionalFlow fit(gt_cfg, ParentCodec{}, init);
  FlowTrainConfig tcfg;
  tcfg.epochs = 60;
  tcfg.learning_rate = 0.05;
  RngStream train_rng(12);
  auto trace = fit.train(parents, values, tcfg, train_rng);
  double fit_nll = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) fit_nll -= fit.log_prob(values[k], {});
  fit_nll /= values.size();
  INFO("ground-truth NLL " << gt_nll << " vs fitted " << fit_nll);
  CHECK(fit_nll <= gt_nll + 0.05);
}

TEST_CASE("constant datasets are rejected as degenerate") {
  RngStream init(13);
  ConditionalFlow flow(FlowConfig{}, ParentCodec{}, init);
  std::vector<double> values(200, 3.25);
  std::vector<std::vector<Value>> parents(200);
  FlowTrainConfig cfg;
  RngStream rng(14);
  CHECK_THROWS_AS(flow.train(parents, values, cfg, rng), ContractError);
}

TEST_CASE("opt-in rational-quadratic spline layer") {
  FlowConfig cfg = intensity_config();
  cfg.use_spline = true;
  cfg.spline_bins = 6;
  RngStream init(15);
  ConditionalFlow flow(cfg, scalar_parent_codec(), init);
  // Perturb the spline coefficients away from the near-identity init.
  RngStream prng(16);
  for (const std::string& name : flow.params().names()) {
    if (name.rfind("spline", 0) == 0) {
      Tensor& t = flow.params().get(name);
      for (std::size_t k = 0; k < t.size(); ++k) t.mutable_data()[k] += 0.3 * prng.normal();
    }
  }

  SUBCASE("round-trip stays exact to 1e-9") {
    RngStream rng(17);
    double worst = 0.0;
    for (int trial = 0; trial < 2000; ++trial) {
      std::vector<Value> pa{Value::scalar(1.0 + 3.0 * rng.uniform())};
      const double a = flow.forward(rng.normal(), pa);
      const double u = flow.inverse(a, pa);
      worst = std::max(worst, std::fabs(flow.forward(u, pa) - a));
    }
    INFO("worst spline round-trip: " << worst);
    CHECK(worst < 1e-9);
  }

  SUBCASE("monotone and normalized") {
    std::vector<Value> pa{Value::scalar(2.0)};
    double prev = flow.forward(-6.0, pa);
    for (double u = -5.9; u < 6.0; u += 0.1) {
      const double cur = flow.forward(u, pa);
      CHECK(cur > prev);
      prev = cur;
    }
    CHECK(std::fabs(density_integral(flow, pa) - 1.0) < 1e-3);
  }

  SUBCASE("spline training takes gradient steps without diverging") {
    RngStream drng(18);
    std::vector<double> values;
    std::vector<std::vector<Value>> parents;
    for (int k = 0; k < 512; ++k) {
      const double t = 1.5 + 2.0 * drng.uniform();
      parents.push_back({Value::scalar(t)});
      values.push_back(synthblob::intensity_from(t, drng.normal()));
    }
    FlowTrainConfig tcfg;
    tcfg.epochs = 3;
    tcfg.batch = 128;
    tcfg.learning_rate = 1e-3;
    RngStream rng(19);
    auto trace = flow.train(parents, values, tcfg, rng);
    CHECK(std::isfinite(trace.train_nll.back()));
    CHECK(trace.train_nll.back() <= trace.train_nll.front());
  }
}
