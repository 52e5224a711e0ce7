#include "dscm/optimizer.hpp"

#include <cmath>

namespace dscm {

void Optimizer::init_ema(const std::vector<Tensor*>& params) {
  ema_.clear();
  for (const Tensor* p : params) {
    ema_.push_back(Tensor::from_data(p->shape(), p->values()));
  }
}

bool Optimizer::step(std::vector<Tensor*> params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) {
    throw ContractError("optimizer: params/grads count mismatch");
  }
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.push_back(Tensor::zeros(p->shape()));
      v_.push_back(Tensor::zeros(p->shape()));
    }
  }
  if (m_.size() != params.size()) {
    throw ContractError("optimizer: parameter set changed between steps");
  }

  double sq = 0.0;
  bool finite = true;
  for (const Tensor& g : grads) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      if (!std::isfinite(gi)) finite = false;
      sq += gi * gi;
    }
  }
  const double norm = std::sqrt(sq);
  if (!finite || norm > config_.grad_skip_norm) {
    ++skip_count_;
    return false;
  }
  const double clip =
      norm > config_.grad_clip_norm ? config_.grad_clip_norm / norm : 1.0;

  ++step_count_;
  double lr = config_.learning_rate;
  if (config_.warmup_steps > 0 && step_count_ <= config_.warmup_steps) {
    lr *= static_cast<double>(step_count_) / config_.warmup_steps;
  }
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    const Tensor& g = grads[pi];
    if (!p.same_shape(g) || !p.same_shape(m_[pi])) {
      throw ContractError("optimizer: shape mismatch on parameter " + std::to_string(pi));
    }
    double* pm = m_[pi].mutable_data();
    double* pv = v_[pi].mutable_data();
    double* pp = p.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * clip;
      pm[i] = config_.beta1 * pm[i] + (1.0 - config_.beta1) * gi;
      pv[i] = config_.beta2 * pv[i] + (1.0 - config_.beta2) * gi * gi;
      const double mhat = pm[i] / bc1;
      const double vhat = pv[i] / bc2;
      pp[i] -= lr * (mhat / (std::sqrt(vhat) + config_.epsilon) +
                     config_.weight_decay * pp[i]);
    }
    p.round_to_storage();
  }

  if (!ema_.empty()) {
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      double* pe = ema_[pi].mutable_data();
      const double* pp = params[pi]->data();
      for (std::size_t i = 0; i < ema_[pi].size(); ++i) {
        pe[i] = config_.ema_rate * pe[i] + (1.0 - config_.ema_rate) * pp[i];
      }
    }
  }
  return true;
}

}  // namespace dscm
