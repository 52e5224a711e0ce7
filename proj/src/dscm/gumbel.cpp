#include "dscm/gumbel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "dscm/optimizer.hpp"

namespace dscm {

namespace {

double logsumexp_vec(const std::vector<double>& v) {
  double mx = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double x : v) z += std::exp(x - mx);
  return mx + std::log(z);
}

// -log(exp(-a) + exp(-b)), overflow-safe via max-subtraction.
double neg_log_sum_exp_neg(double a, double b) {
  const double m = std::min(a, b);
  return m - std::log1p(std::exp(-std::fabs(a - b)));
}

}  // namespace

GumbelMechanism::GumbelMechanism(int categories, ParentCodec codec, RngStream& init_rng,
                                 std::size_t hidden)
    : categories_(categories), codec_(std::move(codec)) {
  if (categories_ < 2) throw ContractError("categorical mechanism needs K >= 2");
  if (codec_.dim() == 0) {
    params_.create("logits", {1, static_cast<std::size_t>(categories_)});
  } else {
    net_ = Mlp("logit_net", {codec_.dim(), hidden, hidden, static_cast<std::size_t>(categories_)});
    net_.init_params(params_, init_rng, 0.1);
  }
}

Tensor GumbelMechanism::logits_batch(const Tensor& encoded) const {
  const std::size_t b = encoded.shape()[0];
  if (codec_.dim() == 0) {
    return matmul(Tensor::full({b, 1}, 1.0), params_.get("logits"));
  }
  return net_(params_, encoded);
}

std::vector<double> GumbelMechanism::logits(const std::vector<Value>& parents) const {
  Tensor enc = codec_.encode_batch({parents});
  Tensor out = logits_batch(enc);
  std::vector<double> v(out.values());
  for (double x : v) {
    if (!std::isfinite(x)) throw DomainError("non-finite logit");
  }
  return v;
}

int GumbelMechanism::argmax_with_lowest_tie(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

std::pair<int, std::vector<double>> GumbelMechanism::sample(const std::vector<Value>& parents,
                                                            RngStream& rng) const {
  const std::vector<double> lam = logits(parents);
  std::vector<double> eps(lam.size()), tot(lam.size());
  for (std::size_t i = 0; i < lam.size(); ++i) {
    eps[i] = rng.gumbel();
    tot[i] = eps[i] + lam[i];
  }
  return {argmax_with_lowest_tie(tot), eps};
}

std::vector<double> GumbelMechanism::posterior(int k, const std::vector<Value>& parents,
                                               RngStream& rng) const {
  if (k < 0 || k >= categories_) throw ContractError("observed category out of range");
  const std::vector<double> lam = logits(parents);
  const double lse = logsumexp_vec(lam);
  std::vector<double> eps(lam.size());
  // Top value for the observed index: its location-shifted maximum is
  // Gumbel(logsumexp(lambda)).
  eps[k] = rng.gumbel() + lse - lam[k];
  const double top = eps[k] + lam[k];
  for (int i = 0; i < categories_; ++i) {
    if (i == k) continue;
    // Truncated Gumbel below the top value.
    const double g = rng.gumbel();
    eps[i] = neg_log_sum_exp_neg(g + lam[i], top) - lam[i];
  }
  return eps;
}

int GumbelMechanism::counterfactual(int k, const std::vector<Value>& parents,
                                    const std::vector<Value>& cf_parents, RngStream& rng) const {
  const std::vector<double> eps = posterior(k, parents, rng);
  const std::vector<double> lam_cf = logits(cf_parents);
  std::vector<double> tot(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) tot[i] = eps[i] + lam_cf[i];
  return argmax_with_lowest_tie(tot);
}

std::vector<double> GumbelMechanism::counterfactual_distribution(
    int k, const std::vector<Value>& parents, const std::vector<Value>& cf_parents, RngStream& rng,
    int n_draws) const {
  std::vector<double> freq(categories_, 0.0);
  for (int d = 0; d < n_draws; ++d) {
    freq[counterfactual(k, parents, cf_parents, rng)] += 1.0;
  }
  for (double& f : freq) f /= n_draws;
  return freq;
}

std::vector<double> GumbelMechanism::train(const std::vector<std::vector<Value>>& parents,
                                           const std::vector<int>& categories,
                                           const TrainConfig& cfg, RngStream& rng) {
  if (parents.size() != categories.size() || parents.empty()) {
    throw ContractError("training data mismatch");
  }
  std::set<int> distinct(categories.begin(), categories.end());
  if (distinct.size() < 2) {
    throw ContractError("degenerate categorical target: a single observed class");
  }

  Optimizer opt;
  opt.mutable_config().learning_rate = cfg.learning_rate;
  opt.mutable_config().weight_decay = cfg.weight_decay;

  std::vector<std::size_t> order(parents.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> losses;
  const std::size_t b = std::min<std::size_t>(cfg.batch, parents.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Deterministic shuffle per epoch.
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + b <= order.size(); start += b) {
      std::vector<std::vector<Value>> pa;
      Tensor onehot = Tensor::zeros({b, static_cast<std::size_t>(categories_)});
      for (std::size_t j = 0; j < b; ++j) {
        const std::size_t idx = order[start + j];
        pa.push_back(parents[idx]);
        onehot.mutable_data()[j * categories_ + categories[idx]] = 1.0;
      }
      Tape tape;
      TapeScope scope(tape);
      params_.watch_all(tape);
      Tensor lam = logits_batch(codec_.encode_batch(pa));
      Tensor nll = mean_all(sub(log_sum_exp(lam), sum_last(mul(lam, onehot))));
      tape.backward(nll);
      std::vector<Tensor> grads;
      for (Tensor* p : params_.all()) grads.push_back(tape.grad(*p));
      opt.step(params_.all(), grads);
      epoch_loss += nll.item();
      ++batches;
    }
    losses.push_back(epoch_loss / std::max<std::size_t>(1, batches));
  }
  return losses;
}

namespace {

class GumbelEngineMechanism final : public Mechanism {
 public:
  explicit GumbelEngineMechanism(std::shared_ptr<GumbelMechanism> impl) : impl_(std::move(impl)) {}

  Value sample(const std::vector<Value>& parents, RngStream& rng,
               NoiseRecord* noise_out) const override {
    auto [k, eps] = impl_->sample(parents, rng);
    if (noise_out) {
      (*noise_out)["eps"] = Tensor::from_data({eps.size()}, eps);
    }
    return Value::category(k);
  }

  NoiseRecord abduct(const Value& value, const std::vector<Value>& parents,
                     RngStream& rng) const override {
    std::vector<double> eps = impl_->posterior(value.as_category(), parents, rng);
    const Shape shape{eps.size()};
    return {{"eps", Tensor::from_data(shape, std::move(eps))}};
  }

  Value forward(const std::vector<Value>& parents, const NoiseRecord& noise) const override {
    const Tensor& eps = noise.at("eps");
    std::vector<double> lam = impl_->logits(parents);
    std::vector<double> tot(lam.size());
    for (std::size_t i = 0; i < lam.size(); ++i) tot[i] = eps[i] + lam[i];
    return Value::category(GumbelMechanism::argmax_with_lowest_tie(tot));
  }

  bool stochastic_abduction() const override { return true; }
  bool exact_reconstruction() const override { return true; }

 private:
  std::shared_ptr<GumbelMechanism> impl_;
};

}  // namespace

std::shared_ptr<Mechanism> gumbel_as_mechanism(std::shared_ptr<GumbelMechanism> mech) {
  return std::make_shared<GumbelEngineMechanism>(std::move(mech));
}

}  // namespace dscm
