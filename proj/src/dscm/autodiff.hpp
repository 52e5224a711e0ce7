#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dscm/tensor.hpp"

namespace dscm {

// Reverse-mode tape. Ops record themselves on the thread-local active tape
// whenever an input is tracked; backward() replays the record once in reverse
// topological (i.e. recording) order. A tape is confined to a single thread.
class Tape {
 public:
  Tape();

  // Marks a tensor as a differentiable leaf on this tape.
  void watch(Tensor& t);

  // Gradient of a scalar root with respect to every tracked node.
  // Untouched leaves get zero gradients.
  void backward(const Tensor& root);

  // Gradient slot for a tensor tracked on this tape (empty tensor if the
  // tensor never participated or backward() has not run).
  Tensor grad(const Tensor& t) const;

  int node_of(const Tensor& t) const {
    return t.tape_serial == serial_ ? t.tape_node : -1;
  }
  std::size_t num_nodes() const { return nodes_.size(); }
  std::uint64_t serial() const { return serial_; }

  static Tape* active();

  // Recording interface used by ops.
  using BackwardFn = std::function<void(const Tensor& grad_out, Tape& tape)>;
  int record(const char* op, std::vector<int> parents, Shape out_shape, BackwardFn fn);
  void accumulate(int node, const Tensor& contribution);
  const Tensor& grad_at(int node) const { return grads_[node]; }

 private:
  struct Node {
    const char* op;
    std::vector<int> parents;
    Shape shape;
    BackwardFn backward;
  };

  std::uint64_t serial_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Names of every primitive with a registered adjoint; gradient-check tests
// iterate this list so a new primitive cannot land untested.
const std::vector<std::string>& registered_ops();

// ---- primitives ----------------------------------------------------------
// Binary elementwise ops broadcast with trailing-dimension alignment.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double k);   // k * a
Tensor shift(const Tensor& a, double k);   // a + k

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_last(const Tensor& a);  // reduces the trailing axis

Tensor exp_op(const Tensor& a);
Tensor log_op(const Tensor& a);  // domain error on non-positive entries
Tensor sqrt_op(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.01);
Tensor clamp_min(const Tensor& a, double floor);

Tensor softmax(const Tensor& a);        // over the trailing axis
Tensor log_sum_exp(const Tensor& a);    // over the trailing axis

// Elementwise log N(x | mu, sigma); shapes must match (scalars broadcast).
Tensor gaussian_log_density(const Tensor& x, const Tensor& mu, const Tensor& sigma);
// Standard normal CDF, elementwise.
Tensor gaussian_cdf(const Tensor& a);

// Convenience (recorded via the primitives above).
Tensor add(const Tensor& a, double k);
Tensor mul(const Tensor& a, double k);
Tensor neg(const Tensor& a);

// Plain helpers (not differentiable, not recorded).
double l2_norm(const std::vector<Tensor>& ts);
Tensor transpose2d(const Tensor& a);

}  // namespace dscm
