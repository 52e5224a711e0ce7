#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dscm/tensor.hpp"

namespace dscm {

// Adaptive-moment optimizer with decoupled weight decay, global-norm gradient
// clipping, update skipping on oversized or non-finite gradients, and an
// exponential moving average of the parameters kept for inference.
struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.9;  // matches the training recipe this engine follows
  double weight_decay = 0.0;
  double grad_clip_norm = 350.0;
  double grad_skip_norm = 500.0;
  double ema_rate = 0.999;
  double epsilon = 1e-8;
  int warmup_steps = 0;  // linear learning-rate warmup
};

class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  // Updates params in place given matching grads. Returns false when the step
  // was skipped (oversized or non-finite gradient); skipped steps leave the
  // moments, step counter and parameters untouched.
  bool step(std::vector<Tensor*> params, const std::vector<Tensor>& grads);

  // EMA shadows track params by position; call after construction or loading.
  void init_ema(const std::vector<Tensor*>& params);
  const std::vector<Tensor>& ema() const { return ema_; }
  std::vector<Tensor>& mutable_ema() { return ema_; }

  std::int64_t step_count() const { return step_count_; }
  std::int64_t skip_count() const { return skip_count_; }
  const OptimizerConfig& config() const { return config_; }
  OptimizerConfig& mutable_config() { return config_; }

  // Moment accumulators, exposed for checkpointing.
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void set_step_count(std::int64_t n) { step_count_ = n; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::vector<Tensor> ema_;
  std::int64_t step_count_ = 0;
  std::int64_t skip_count_ = 0;
};

}  // namespace dscm
