#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dscm/nn.hpp"
#include "dscm/optimizer.hpp"
#include "dscm/parent_codec.hpp"
#include "dscm/rng.hpp"
#include "dscm/scm.hpp"

namespace dscm {

// Invertible mechanism for a continuous attribute: a stack of monotone
// bijective layers with exact density and exact inversion (the conditional
// density follows the change of variables through the accumulated
// log-derivative). Conditioning enters through per-layer conditioner networks
// mapping the encoded parents to layer coefficients.
struct FlowConfig {
  int affine_layers = 3;       // conditional-affine layers
  bool interleave_asinh = true;  // fixed monotone nonlinearity between affines
  bool use_spline = false;     // opt-in monotone rational-quadratic spline
  int spline_bins = 8;
  double spline_bound = 4.0;
  std::size_t cond_hidden = 32;
  // Declared support. Bounded attributes get a final fixed sigmoid-affine
  // squashing layer onto (lo, hi) whose log-derivative joins the Jacobian sum.
  bool bounded = false;
  double support_lo = 0.0;
  double support_hi = 1.0;
};

struct FlowTrainConfig {
  int epochs = 40;
  int batch = 256;
  double learning_rate = 1e-2;
  double weight_decay = 0.0;
  double validation_fraction = 0.1;
};

class ConditionalFlow {
 public:
  ConditionalFlow(FlowConfig config, ParentCodec codec, RngStream& init_rng);

  // Batched paths (columns are [B,1]); recorded on the active tape if any.
  Tensor forward_batch(const Tensor& u, const Tensor& cond) const;
  // Returns u and accumulates log|d forward/du| (evaluated at the returned u)
  // into *fwd_logdet when non-null.
  Tensor inverse_batch(const Tensor& a, const Tensor& cond, Tensor* fwd_logdet) const;
  Tensor log_prob_batch(const Tensor& a, const Tensor& cond) const;

  // Scalar conveniences.
  double forward(double u, const std::vector<Value>& parents) const;
  double inverse(double a, const std::vector<Value>& parents) const;  // pure, no rng
  double log_prob(double a, const std::vector<Value>& parents) const;
  // Abduct-then-forward under counterfactual parents; exactly `a` when the
  // counterfactual parents equal the observed ones.
  double counterfactual(double a, const std::vector<Value>& parents,
                        const std::vector<Value>& cf_parents) const;

  struct TrainTrace {
    std::vector<double> train_nll;  // per epoch
    std::vector<double> val_nll;
  };
  TrainTrace train(const std::vector<std::vector<Value>>& parents,
                   const std::vector<double>& values, const FlowTrainConfig& cfg, RngStream& rng);

  const FlowConfig& config() const { return config_; }
  nlohmann::json config_json() const;
  static FlowConfig config_from_json(const nlohmann::json& j);
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  ParentCodec& codec() { return codec_; }
  const ParentCodec& codec() const { return codec_; }

 private:
  struct Layer {
    enum class Kind { CondAffine, Asinh, SigmoidSquash, RqSpline };
    Kind kind;
    Mlp conditioner;     // CondAffine / RqSpline with parents
    std::string param;   // constant-coefficient parameter name when parentless
  };

  Tensor layer_coeffs(const Layer& layer, const Tensor& cond, std::size_t rows) const;
  Tensor apply_forward(const Layer& layer, const Tensor& x, const Tensor& cond,
                       Tensor* logdet) const;
  Tensor apply_inverse(const Layer& layer, const Tensor& y, const Tensor& cond,
                       Tensor* logdet) const;

  FlowConfig config_;
  ParentCodec codec_;
  std::vector<Layer> layers_;
  ParamStore params_;
};

// Engine adapter: noise record {"u"}; abduction is deterministic.
std::shared_ptr<Mechanism> flow_as_mechanism(std::shared_ptr<ConditionalFlow> flow);

}  // namespace dscm
