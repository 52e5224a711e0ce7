#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dscm/checkpoint.hpp"
#include "dscm/nn.hpp"
#include "dscm/optimizer.hpp"
#include "dscm/parent_codec.hpp"
#include "dscm/rng.hpp"
#include "dscm/scm.hpp"

namespace dscm {

// Conditional hierarchical VAE used as the image variable's causal mechanism.
//
// Two conditioning variants:
//  - Exo: the latent prior p(z_{1:L}) never reads the parents, so z and the
//    pixel residual are exogenous noise; parents enter through the top-down
//    merges and the likelihood only.
//  - Med: the prior is parent-conditioned at every level, turning z into an
//    endogenous mediator with its own exogenous noise U_z per layer.
// The Med prior either reads the shared top-down state (which during
// inference carries posterior information, PriorCorrection::Posterior) or a
// separate state accumulated from the sampled latents only
// (PriorCorrection::None).
enum class HvaeVariant { Exo, Med };
enum class MedPrior { WithPosteriorCorrection, WithoutPosteriorCorrection };
// How the counterfactual mediator mixture r = pi*prior + (1-pi)*posterior is
// reparameterized: Interpolate uses the pi-weighted mean and scale of both
// components; Select picks one component per layer with probability pi.
enum class MixtureRule { Interpolate, Select };

struct HvaeConfig {
  HvaeVariant variant = HvaeVariant::Exo;
  MedPrior med_prior = MedPrior::WithoutPosteriorCorrection;
  MixtureRule mixture_rule = MixtureRule::Interpolate;
  int layers = 3;
  std::vector<std::size_t> latent_widths = {8, 16, 32};  // ordered z_L .. z_1
  std::size_t hidden = 64;
  int image_h = 16;
  int image_w = 16;
  double beta = 1.0;
  double pi = 0.5;              // counterfactual mixture weight
  double cond_dropout = 0.1;    // Med only, training only
  double sigma_floor = 1e-3;
  // The likelihood scale is floored well above the quantization step: the
  // discretized-Gaussian tail gradient grows like z/sigma, and scales below
  // ~5 gray levels keep the gradient norm past the update-skipping threshold.
  double likelihood_sigma_floor = 0.02;
  double temperature = 1.0;

  std::size_t pixels() const { return static_cast<std::size_t>(image_h) * image_w; }
  void check() const;
  nlohmann::json to_json() const;
  static HvaeConfig from_json(const nlohmann::json& j);
};

// Per-layer tensors of one pass, ordered top-down (index 0 is z_L).
struct HvaeLayerState {
  Tensor mu_q, sigma_q, z, u;   // posterior side (empty on generative passes)
  Tensor mu_p, sigma_p;         // prior parameters at this layer
};

struct HvaePass {
  std::vector<HvaeLayerState> layers;
  Tensor h1;               // bottom deterministic state (pixel extent)
  Tensor mu_x, sigma_x;    // likelihood parameters
};

struct ElboParts {
  Tensor objective;   // distortion + beta * rate, per batch mean, nats
  Tensor distortion;  // negative discretized-Gaussian log-likelihood
  Tensor rate;        // total KL(q || p)
};

struct MediationTriple {
  Tensor de, ie, te;                     // image-valued effects
  Tensor out_cf_parents;                 // g(pa~, z)
  Tensor out_cf_mediator;                // g(pa, z~)  (cross-world)
  Tensor out_cf_both;                    // g(pa~, z~)
};

class HvaeMechanism {
 public:
  HvaeMechanism(HvaeConfig config, ParentCodec codec, RngStream& init_rng);

  const HvaeConfig& config() const { return config_; }
  HvaeConfig& mutable_config() { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  ParentCodec& codec() { return codec_; }

  // Posterior pass: bottom-up features once, then top-down sampling of each
  // q(z_i | z_{>i}, x, pa); also produces the prior parameters and decoder
  // outputs along the way. Batched; records on the active tape.
  HvaePass encode(const Tensor& x, const Tensor& pa, RngStream& rng,
                  bool drop_merge_pa = false, bool drop_prior_pa = false) const;

  // Generative pass with given latents (ordered top-down).
  HvaePass decode(const std::vector<Tensor>& zs, const Tensor& pa) const;

  // Ancestral sampling from the prior at a temperature; pixel noise is scaled
  // by the same temperature.
  HvaePass sample_prior(const Tensor& pa, double temperature, RngStream& rng) const;

  ElboParts elbo(const Tensor& x, const Tensor& pa, RngStream& rng, double beta,
                 bool drop_merge_pa = false, bool drop_prior_pa = false) const;

  // Exogenous-noise bundle (batch size 1 contract):
  //  Exo: z per layer and the pixel residual eps = (x - mu) / sigma.
  //  Med: U_z per layer plus the factual posterior parameters and mediator
  //       (needed by the counterfactual mixture), and U_x.
  NoiseRecord abduct_noise(const Tensor& x, const Tensor& pa, RngStream& rng) const;

  // Forward the mechanism from a noise bundle under (possibly counterfactual)
  // parents. This is the raw reparameterized output; exact-composition
  // compensation happens at the call sites that own the observation.
  Tensor forward_noise(const NoiseRecord& noise, const Tensor& pa) const;

  // Counterfactual image with difference compensation when the variant
  // reconstructs exactly (Exo always; Med at pi = 0).
  Tensor counterfactual(const Tensor& x, const Tensor& pa, const Tensor& pa_cf,
                        RngStream& rng) const;

  // Direct / indirect / total effects (Med only): pixel-mean decoder outputs
  // with the shared U_x carried through all four generator evaluations.
  MediationTriple mediation_effects(const Tensor& x, const Tensor& pa, const Tensor& pa_cf,
                                    RngStream& rng) const;

  // Counterfactual mediator descent given an abducted Med bundle.
  std::vector<Tensor> counterfactual_mediator(const NoiseRecord& noise, const Tensor& pa_cf) const;

  bool exact_reconstruction() const {
    return config_.variant == HvaeVariant::Exo || config_.pi == 0.0;
  }

  struct TrainConfig {
    int steps = 20000;
    int batch = 32;
    double learning_rate = 1e-3;
    double weight_decay = 0.01;
    int warmup_steps = 100;
    // Clip/skip defaults follow the shared optimizer recipe; the desk-scale
    // image objective (summed over pixels) runs a few times hotter than the
    // reference setup, so training configs may scale them together.
    double grad_clip_norm = 350.0;
    double grad_skip_norm = 500.0;
    int val_interval = 500;
    int val_batch = 256;
    std::uint64_t seed = 0;
  };
  struct TrainTrace {
    std::vector<int> step;
    std::vector<double> train_objective;  // nats per image
    std::vector<double> val_objective;
    std::vector<double> val_distortion;
    std::vector<double> val_rate;
    std::vector<std::string> warnings;
    std::int64_t skipped_steps = 0;
  };
  // dataset images are [N, pixels] rows on the 8-bit grid in [-1,1]; parents
  // are raw Values encoded through the codec (standardization fitted here).
  TrainTrace train(const std::vector<Tensor>& images,
                   const std::vector<std::vector<Value>>& parents, const TrainConfig& cfg);

  // EMA parameter handling: training keeps raw parameters in the store and a
  // shadow copy; inference swaps the shadow in.
  Optimizer& optimizer() { return optimizer_; }
  void use_ema_parameters();
  bool has_ema() const { return !optimizer_.ema().empty(); }

  Checkpoint to_checkpoint(bool include_optimizer_state = false) const;
  static std::shared_ptr<HvaeMechanism> from_checkpoint(const Checkpoint& ckpt);

  // Encode raw parent Values through the codec into a [1, dim] row.
  Tensor encode_parents(const std::vector<Value>& parents) const;

 private:
  Tensor prior_state_seed(std::size_t batch) const;
  // Prior parameters for layer `li` given the variant's conditioning state.
  std::pair<Tensor, Tensor> prior_params(std::size_t li, const Tensor& h, const Tensor& s,
                                         const Tensor& pa_prior) const;
  Tensor merge_f(std::size_t li, const Tensor& z, const Tensor& pa_merge) const;
  Tensor prior_merge(std::size_t li, const Tensor& z) const;
  std::pair<Tensor, Tensor> posterior_params(std::size_t li, const Tensor& d, const Tensor& h,
                                             const Tensor& pa) const;
  std::pair<Tensor, Tensor> likelihood_params(const Tensor& h1) const;
  std::vector<Tensor> bottom_up(const Tensor& x) const;

  HvaeConfig config_;
  ParentCodec codec_;
  ParamStore params_;
  Optimizer optimizer_;
  std::vector<Mlp> q_nets_, f_nets_, p_nets_, pm_nets_, enc_nets_;
};

// Discretized Gaussian log-likelihood of 8-bit pixels mapped to [-1,1]:
// per-pixel log bin mass with +-1/255 half-width bins, open-ended at +-1.
// `x` must lie on the 8-bit grid.
Tensor discretized_gaussian_log_likelihood(const Tensor& x, const Tensor& mu,
                                           const Tensor& sigma);
bool on_pixel_grid(const Tensor& x);
double quantize_to_grid(double v);
Tensor quantize_image(const Tensor& x);

// Engine adapter for the image variable.
std::shared_ptr<Mechanism> hvae_as_mechanism(std::shared_ptr<HvaeMechanism> mech);

}  // namespace dscm
