#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dscm/checkpoint.hpp"
#include "dscm/hvae.hpp"
#include "dscm/nn.hpp"
#include "dscm/rng.hpp"
#include "dscm/scm.hpp"

namespace dscm {

// Anticausal parent predictor q_psi(pa_k | x): a fully connected network over
// the flattened image with a Gaussian head for continuous targets or a
// categorical head for discrete ones. Predictors double as the variational
// distribution of the mutual-information lower bound and as pseudo-oracles
// for effectiveness evaluation.
class ParentPredictor {
 public:
  ParentPredictor(std::string target, VarKind kind, int categories, std::size_t image_dim,
                  RngStream& init_rng, std::size_t hidden = 128);

  const std::string& target() const { return target_; }
  VarKind kind() const { return kind_; }

  // log q(value | x) per row; differentiable through x.
  Tensor log_prob(const Tensor& x, const std::vector<Value>& targets) const;

  double predict_scalar(const Tensor& x_row) const;  // Gaussian mean head
  int predict_category(const Tensor& x_row) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Standardization of continuous targets (fitted during training) so the
  // Gaussian head works on unit scale; log_prob accounts for the Jacobian.
  void fit_target_scaling(const std::vector<double>& values);

  nlohmann::json meta() const;
  static std::shared_ptr<ParentPredictor> from_checkpoint(const Checkpoint& ckpt,
                                                          const std::string& prefix);
  void to_checkpoint(Checkpoint* ckpt, const std::string& prefix) const;

 private:
  std::string target_;
  VarKind kind_;
  int categories_;
  double target_mean_ = 0.0;
  double target_std_ = 1.0;
  Mlp net_;
  ParamStore params_;
};

struct PredictorTrainConfig {
  int steps = 4000;
  int batch = 64;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  int val_interval = 500;
  std::uint64_t seed = 0;
};

struct PredictorMetrics {
  std::map<std::string, double> mae;       // continuous targets
  std::map<std::string, double> accuracy;  // categorical targets
};

// Trains one predictor per target jointly (summed losses, one optimizer);
// returns held-out observational metrics. Degenerate categorical targets
// (a single observed class) are an error.
struct PredictorSet {
  std::vector<std::shared_ptr<ParentPredictor>> items;
  ParentPredictor& by_target(const std::string& name);
  const ParentPredictor& by_target(const std::string& name) const;
};

PredictorSet train_predictors(const std::vector<Tensor>& images,
                              const std::map<std::string, std::vector<Value>>& targets,
                              const std::vector<VariableSpec>& specs,
                              const PredictorTrainConfig& cfg, PredictorMetrics* metrics);

void save_predictors(const std::string& path, const PredictorSet& set);
PredictorSet load_predictors(const std::string& path);

// Variational mutual-information lower bound E[log q(pa_k | x)] + H(pa_k).
double mi_lower_bound(const ParentPredictor& predictor, const std::vector<Tensor>& images,
                      const std::vector<Value>& targets, double entropy);

// Closed-form entropies for the marginals used here.
double categorical_entropy(const std::vector<double>& probs);
double gamma_entropy(double shape, double rate);
double gaussian_entropy(double stddev);
// Plug-in entropy of an empirical categorical distribution.
double empirical_categorical_entropy(const std::vector<int>& draws, int categories);

// ---- counterfactual training --------------------------------------------------

// Ties together the attribute SCM, the image mechanism and frozen predictors
// for the counterfactual loss and the constrained Lagrangian fine-tune.
class CounterfactualTrainer {
 public:
  // Marginal sampler per parent name (ground-truth closed forms by default).
  using MarginalSampler = std::function<Value(RngStream&)>;

  CounterfactualTrainer(std::shared_ptr<CausalGraph> attribute_graph,
                        std::shared_ptr<HvaeMechanism> image_mechanism,
                        std::vector<std::string> image_parents,
                        std::map<std::string, MarginalSampler> marginals,
                        const PredictorSet* predictors);

  struct Batch {
    std::vector<Tensor> images;                 // [1, D] rows
    std::vector<Evidence> attribute_evidence;   // complete attribute records
  };

  // L_CT: for each parent k, draw pa~_k from its marginal, run the full
  // counterfactual query, sample x~ (one reparameterized draw; gradients flow
  // through the whole counterfactual path), and score -log q_psi_k(pa~_k|x~).
  // Recorded on the active tape.
  Tensor counterfactual_loss(const Batch& batch, RngStream& rng) const;

  struct FinetuneConfig {
    double lagrange_init = 10.0;
    double lagrange_lr = 0.1;
    double learning_rate = 1e-4;  // pre-training rate / 10
    double weight_decay = 0.01;
    int steps = 2000;
    int batch = 16;
    int trace_interval = 50;
    std::uint64_t seed = 0;
  };
  struct FinetuneTrace {
    std::vector<int> step;
    std::vector<double> loss_ct;
    std::vector<double> free_energy;
    std::vector<double> lagrange_multiplier;
    double constraint_value = 0.0;  // c
    bool constraint_satisfied = true;
    std::string status;
  };

  // Constrained fine-tune of the image mechanism only: minimize
  // L_CT + lagrange * (F_FE - c) over the HVAE parameters, plain gradient
  // ascent on the multiplier (clamped at zero). All other mechanisms and the
  // predictors stay frozen.
  FinetuneTrace finetune(const std::vector<Batch>& steps_data_pool, const FinetuneConfig& cfg);

  // Mean observational negative ELBO over a dataset (the constraint c).
  double mean_free_energy(const std::vector<Batch>& pool, std::uint64_t seed) const;

 private:
  Tensor encode_attr(const Evidence& ev) const;

  std::shared_ptr<CausalGraph> graph_;
  std::shared_ptr<HvaeMechanism> hvae_;
  std::vector<std::string> image_parents_;
  std::map<std::string, MarginalSampler> marginals_;
  const PredictorSet* predictors_;
};

}  // namespace dscm
