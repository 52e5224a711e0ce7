#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include "dscm/autodiff.hpp"
#include "dscm/rng.hpp"
#include "dscm/tensor.hpp"

using namespace dscm;

namespace {

// Central finite differences against the recorded adjoints. Loss must reduce
// to a scalar. Returns the max error scaled by max(1, |analytic|, |numeric|).
double gradcheck(std::function<Tensor(std::vector<Tensor>&)> loss_fn, std::vector<Tensor> inputs,
                 double h = 1e-5) {
  Tape tape;
  std::vector<Tensor> tracked;
  for (const Tensor& t : inputs) tracked.push_back(Tensor::from_data(t.shape(), t.values()));
  {
    TapeScope scope(tape);
    for (Tensor& t : tracked) tape.watch(t);
    Tensor loss = loss_fn(tracked);
    tape.backward(loss);
  }

  double worst = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor analytic = tape.grad(tracked[ti]);
    for (std::size_t i = 0; i < inputs[ti].size(); ++i) {
      std::vector<Tensor> plus, minus;
      for (const Tensor& t : inputs) {
        plus.push_back(Tensor::from_data(t.shape(), t.values()));
        minus.push_back(Tensor::from_data(t.shape(), t.values()));
      }
      plus[ti].mutable_data()[i] += h;
      minus[ti].mutable_data()[i] -= h;
      const double fp = loss_fn(plus).item();
      const double fm = loss_fn(minus).item();
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double err = std::fabs(a - numeric) / std::max({1.0, std::fabs(a), std::fabs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

Tensor rand_uniform(const Shape& s, RngStream& rng, double lo, double hi) {
  Tensor t = Tensor::zeros(s);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t.mutable_data()[i] = lo + (hi - lo) * rng.uniform();
  }
  return t;
}

// Explicitly tiles `a` to `target` (trailing-aligned), for the broadcast law.
Tensor tile_to(const Tensor& a, const Shape& target) {
  Tensor out = Tensor::zeros(target);
  auto ts = row_major_strides(target);
  Shape as = a.shape();
  auto astr = row_major_strides(as);
  const std::size_t off = target.size() - as.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t rem = i, ia = 0;
    for (std::size_t d = 0; d < target.size(); ++d) {
      std::size_t idx = rem / ts[d];
      rem %= ts[d];
      if (d >= off && as[d - off] != 1) ia += idx * astr[d - off];
    }
    out.mutable_data()[i] = a[ia];
  }
  return out;
}

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor::from_data({2, 3}, {1.0, 2.0}), ContractError);
  Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(t.size() == 4);
  CHECK_THROWS_AS(t.item(), ContractError);
  CHECK(Tensor::scalar(5.0).item() == 5.0);
}

TEST_CASE("f32 storage precision rounds values, f64 does not") {
  Tensor t = Tensor::from_data({2}, {0.1, 1.0 / 3.0});
  Tensor t32 = t.to_precision(Precision::f32);
  CHECK(t32[0] == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(t32[0] != t[0]);
  CHECK(static_cast<double>(static_cast<float>(1.0 / 3.0)) == t32[1]);
  CHECK(add(t32, t32).precision() == Precision::f32);
  CHECK(add(t32, t).precision() == Precision::f64);  // mixed ops promote to f64
}

TEST_CASE("forward op examples") {
  // sigmoid(0) = 0.5, symmetry of the logistic function
  CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);

  // matmul(I3, A) = A
  Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  RngStream rng(5);
  Tensor a = Tensor::randn({3, 3}, rng);
  Tensor prod = matmul(eye, a);
  for (std::size_t i = 0; i < 9; ++i) CHECK(prod[i] == a[i]);

  // log-sum-exp([0,0]) = ln 2 (checked against the direct evaluation)
  Tensor lse = log_sum_exp(Tensor::from_data({2}, {0.0, 0.0}));
  CHECK(lse.item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("shape and domain errors") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS(add(a, b), ContractError);
  CHECK_THROWS_AS(matmul(a, a), ContractError);

  try {
    log_op(Tensor::from_data({3}, {1.0, -2.0, 3.0}));
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("index 1") != std::string::npos);
  }
  try {
    divide(Tensor::from_data({2}, {1.0, 1.0}), Tensor::from_data({2}, {2.0, 0.0}));
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(std::string(e.what()).find("index 1") != std::string::npos);
  }
}

TEST_CASE("broadcasting equals explicit tiling") {
  RngStream rng(17);
  Tensor a = rand_uniform({3, 1, 4}, rng, -2, 2);
  Tensor b = rand_uniform({2, 4}, rng, -2, 2);
  Shape full = {3, 2, 4};
  for (int op = 0; op < 3; ++op) {
    Tensor lhs = op == 0 ? add(a, b) : op == 1 ? mul(a, b) : sub(a, b);
    Tensor rhs = op == 0   ? add(tile_to(a, full), tile_to(b, full))
                 : op == 1 ? mul(tile_to(a, full), tile_to(b, full))
                           : sub(tile_to(a, full), tile_to(b, full));
    REQUIRE(lhs.shape() == full);
    for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(lhs[i] == rhs[i]);
  }
}

TEST_CASE("backward basics") {
  // d/dx (x*x) = 2x = 6 at x = 3
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = Tensor::scalar(3.0);
    tape.watch(x);
    Tensor y = mul(x, x);
    tape.backward(y);
    CHECK(tape.grad(x).item() == doctest::Approx(6.0).epsilon(1e-14));
  }
  // d/dx sigmoid(x) = 0.25 at x = 0
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = Tensor::scalar(0.0);
    tape.watch(x);
    Tensor y = sigmoid(x);
    tape.backward(y);
    CHECK(tape.grad(x).item() == 0.25);
  }
  // non-scalar root is a contract violation
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = Tensor::from_data({2}, {1.0, 2.0});
    tape.watch(x);
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
  // leaves with no path to the root keep zero gradients
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = Tensor::scalar(2.0);
    Tensor unused = Tensor::from_data({3}, {1, 2, 3});
    tape.watch(x);
    tape.watch(unused);
    Tensor y = mul(x, x);
    tape.backward(y);
    Tensor gu = tape.grad(unused);
    for (std::size_t i = 0; i < gu.size(); ++i) CHECK(gu[i] == 0.0);
  }
}

TEST_CASE("random 5-op graph matches finite differences below 1e-6") {
  RngStream rng(23);
  Tensor a = rand_uniform({3, 4}, rng, 0.2, 1.5);
  Tensor b = rand_uniform({3, 4}, rng, 0.2, 1.5);
  auto loss = [](std::vector<Tensor>& in) {
    Tensor t1 = mul(in[0], in[1]);
    Tensor t2 = sigmoid(t1);
    Tensor t3 = add(t2, in[0]);
    Tensor t4 = log_op(t3);
    return sum_all(t4);
  };
  CHECK(gradcheck(loss, {a, b}) < 1e-6);
}

TEST_CASE("every registered primitive has an adjoint matching finite differences") {
  RngStream rng(31);
  std::map<std::string, std::function<double()>> cases;

  cases["add"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(add(in[0], in[1])); },
                     {rand_uniform({2, 3}, rng, -2, 2), rand_uniform({3}, rng, -2, 2)});
  };
  cases["sub"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(sub(in[0], in[1])); },
                     {rand_uniform({2, 3}, rng, -2, 2), rand_uniform({1, 3}, rng, -2, 2)});
  };
  cases["mul"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(mul(in[0], in[1])); },
                     {rand_uniform({2, 3}, rng, -2, 2), rand_uniform({2, 1}, rng, -2, 2)});
  };
  cases["div"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(divide(in[0], in[1])); },
                     {rand_uniform({2, 3}, rng, -2, 2), rand_uniform({2, 3}, rng, 0.5, 2)});
  };
  cases["scale"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(scale(in[0], -1.7)); },
                     {rand_uniform({4}, rng, -2, 2)});
  };
  cases["shift"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(shift(in[0], 0.3)); },
                     {rand_uniform({4}, rng, -2, 2)});
  };
  cases["matmul"] = [&] {
    return gradcheck(
        [](std::vector<Tensor>& in) { return sum_all(matmul(in[0], in[1])); },
        {rand_uniform({2, 3}, rng, -1, 1), rand_uniform({3, 4}, rng, -1, 1)});
  };
  cases["reshape"] = [&] {
    return gradcheck(
        [](std::vector<Tensor>& in) { return sum_all(mul(reshape(in[0], {6}), reshape(in[0], {6}))); },
        {rand_uniform({2, 3}, rng, -1, 1)});
  };
  cases["concat"] = [&] {
    return gradcheck(
        [](std::vector<Tensor>& in) {
          Tensor c = concat({in[0], in[1]}, 1);
          return sum_all(mul(c, c));
        },
        {rand_uniform({2, 3}, rng, -1, 1), rand_uniform({2, 2}, rng, -1, 1)});
  };
  cases["slice"] = [&] {
    return gradcheck(
        [](std::vector<Tensor>& in) {
          Tensor s = slice(in[0], 1, 1, 2);
          return sum_all(mul(s, s));
        },
        {rand_uniform({2, 4}, rng, -1, 1)});
  };
  cases["sum"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(mul(in[0], in[0])); },
                     {rand_uniform({5}, rng, -1, 1)});
  };
  cases["mean"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return mean_all(mul(in[0], in[0])); },
                     {rand_uniform({2, 3}, rng, -1, 1)});
  };
  cases["sum_last"] = [&] {
    return gradcheck(
        [](std::vector<Tensor>& in) {
          Tensor s = sum_last(in[0]);
          return sum_all(mul(s, s));
        },
        {rand_uniform({3, 4}, rng, -1, 1)});
  };
  cases["exp"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(exp_op(in[0])); },
                     {rand_uniform({4}, rng, -1, 1)});
  };
  cases["log"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(log_op(in[0])); },
                     {rand_uniform({4}, rng, 0.3, 3)});
  };
  cases["sqrt"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(sqrt_op(in[0])); },
                     {rand_uniform({4}, rng, 0.5, 3)});
  };
  cases["sigmoid"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(sigmoid(in[0])); },
                     {rand_uniform({4}, rng, -3, 3)});
  };
  cases["softplus"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(softplus(in[0])); },
                     {rand_uniform({4}, rng, -3, 3)});
  };
  cases["tanh"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(tanh_op(in[0])); },
                     {rand_uniform({4}, rng, -2, 2)});
  };
  cases["leaky_relu"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(leaky_relu(in[0], 0.01)); },
                     {rand_uniform({6}, rng, 0.2, 2)});  // away from the kink
  };
  cases["clamp_min"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(mul(clamp_min(in[0], 0.5), in[0])); },
                     {rand_uniform({6}, rng, 0.8, 2)});
  };
  cases["softmax"] = [&] {
    Tensor w = rand_uniform({2, 4}, rng, -1, 1);
    return gradcheck(
        [w](std::vector<Tensor>& in) { return sum_all(mul(softmax(in[0]), w)); },
        {rand_uniform({2, 4}, rng, -2, 2)});
  };
  cases["log_sum_exp"] = [&] {
    Tensor w = rand_uniform({3}, rng, 0.5, 1.5);
    return gradcheck(
        [w](std::vector<Tensor>& in) { return sum_all(mul(log_sum_exp(in[0]), w)); },
        {rand_uniform({3, 4}, rng, -2, 2)});
  };
  cases["gaussian_log_density"] = [&] {
    return gradcheck(
        [](std::vector<Tensor>& in) {
          return sum_all(gaussian_log_density(in[0], in[1], in[2]));
        },
        {rand_uniform({4}, rng, -1, 1), rand_uniform({4}, rng, -1, 1),
         rand_uniform({4}, rng, 0.5, 2)});
  };
  cases["gaussian_cdf"] = [&] {
    return gradcheck([](std::vector<Tensor>& in) { return sum_all(gaussian_cdf(in[0])); },
                     {rand_uniform({5}, rng, -2, 2)});
  };

  std::set<std::string> covered;
  for (const auto& [name, fn] : cases) covered.insert(name);
  for (const std::string& op : registered_ops()) {
    INFO("primitive: " << op);
    REQUIRE(covered.count(op) == 1);  // a new primitive must add a gradcheck case
    double err = cases[op]();
    INFO("max relative error: " << err);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("tape confinement: tensors from a dead tape are plain values") {
  Tensor x = Tensor::scalar(1.5);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.watch(x);
    Tensor y = mul(x, x);
    tape.backward(y);
  }
  Tape tape2;
  TapeScope scope(tape2);
  Tensor z = mul(x, x);  // x's node belongs to the old tape; not tracked here
  CHECK(tape2.node_of(z) == -1);
}

TEST_CASE("gaussian_cdf values against the erfc oracle") {
  for (double x : {-3.0, -1.0, 0.0, 0.5, 2.5}) {
    long double oracle = 0.5L * erfcl(-static_cast<long double>(x) / std::sqrt(2.0L));
    CHECK(gaussian_cdf(Tensor::scalar(x)).item() ==
          doctest::Approx(static_cast<double>(oracle)).epsilon(1e-14));
  }
}
