#pragma once

#include <memory>
#include <vector>

#include "dscm/nn.hpp"
#include "dscm/parent_codec.hpp"
#include "dscm/rng.hpp"
#include "dscm/scm.hpp"

namespace dscm {

// Categorical causal mechanism with Gumbel-max parameterization. The forward
// mechanism is y := argmax_k(eps_k + logits_k) with standard Gumbel noise;
// abduction samples the exact posterior over eps given the observed category
// (top value for the observed index, truncated construction for the rest), so
// every posterior draw reproduces the observation under the original logits.
class GumbelMechanism {
 public:
  // Parentless: learnable constant logits. With parents: a small MLP maps the
  // encoded parents to K logits.
  GumbelMechanism(int categories, ParentCodec codec, RngStream& init_rng,
                  std::size_t hidden = 32);

  int categories() const { return categories_; }

  std::vector<double> logits(const std::vector<Value>& parents) const;

  std::pair<int, std::vector<double>> sample(const std::vector<Value>& parents,
                                             RngStream& rng) const;
  // Exact posterior noise given observed category k (0-based).
  std::vector<double> posterior(int k, const std::vector<Value>& parents, RngStream& rng) const;
  int counterfactual(int k, const std::vector<Value>& parents,
                     const std::vector<Value>& cf_parents, RngStream& rng) const;
  // Counterfactual category frequencies over repeated posterior draws.
  std::vector<double> counterfactual_distribution(int k, const std::vector<Value>& parents,
                                                  const std::vector<Value>& cf_parents,
                                                  RngStream& rng, int n_draws = 100000) const;

  static int argmax_with_lowest_tie(const std::vector<double>& v);

  // Maximum-likelihood training of the logit parameters (cross-entropy).
  struct TrainConfig {
    int epochs = 200;
    int batch = 256;
    double learning_rate = 1e-2;
    double weight_decay = 0.0;
  };
  std::vector<double> train(const std::vector<std::vector<Value>>& parents,
                            const std::vector<int>& categories, const TrainConfig& cfg,
                            RngStream& rng);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const ParentCodec& codec() const { return codec_; }
  ParentCodec& codec() { return codec_; }

  // Engine adapter; the single-draw counterfactual mode with caller-owned rng.
  std::shared_ptr<Mechanism> as_mechanism(std::shared_ptr<GumbelMechanism> self);

 private:
  Tensor logits_batch(const Tensor& encoded) const;  // [B, K], on tape

  int categories_;
  ParentCodec codec_;
  Mlp net_;
  ParamStore params_;
};

std::shared_ptr<Mechanism> gumbel_as_mechanism(std::shared_ptr<GumbelMechanism> mech);

}  // namespace dscm
