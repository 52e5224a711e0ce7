#include "dscm/hvae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dscm {

namespace {

constexpr double kBinHalfWidth = 1.0 / 255.0;

Tensor broadcast_rows(const Tensor& row, std::size_t batch) {
  if (row.shape()[0] == batch) return row;
  return matmul(Tensor::full({batch, 1}, 1.0), row);
}

Tensor softplus_sigma(const Tensor& raw, double floor) {
  return shift(softplus(raw), floor);
}

// KL(q || p) between diagonal Gaussians, summed over the trailing axis.
Tensor gaussian_kl_rows(const Tensor& mu_q, const Tensor& sigma_q, const Tensor& mu_p,
                        const Tensor& sigma_p) {
  Tensor diff = sub(mu_q, mu_p);
  Tensor var_ratio = divide(add(mul(sigma_q, sigma_q), mul(diff, diff)),
                            scale(mul(sigma_p, sigma_p), 2.0));
  Tensor elem = shift(add(log_op(divide(sigma_p, sigma_q)), var_ratio), -0.5);
  return sum_last(elem);
}

}  // namespace

void HvaeConfig::check() const {
  if (layers < 1) throw ContractError("hvae: layers must be >= 1");
  if (latent_widths.size() != static_cast<std::size_t>(layers)) {
    throw ContractError("hvae: latent_widths must list one width per layer");
  }
  for (std::size_t w : latent_widths) {
    if (w == 0) throw ContractError("hvae: latent widths must be positive");
  }
  if (beta <= 0.0) throw ContractError("hvae: beta must be positive");
  if (pi < 0.0 || pi > 1.0) throw ContractError("hvae: pi must lie in [0,1]");
  if (sigma_floor <= 0.0 || likelihood_sigma_floor <= 0.0) {
    throw ContractError("hvae: sigma floors must be positive");
  }
  if (image_h < 1 || image_w < 1) throw ContractError("hvae: image extent must be positive");
}

nlohmann::json HvaeConfig::to_json() const {
  return {{"variant", variant == HvaeVariant::Exo ? "exo" : "med"},
          {"med_prior", med_prior == MedPrior::WithPosteriorCorrection ? "with_correction"
                                                                       : "without_correction"},
          {"mixture_rule", mixture_rule == MixtureRule::Interpolate ? "interpolate" : "select"},
          {"layers", layers},
          {"latent_widths", latent_widths},
          {"hidden", hidden},
          {"image_h", image_h},
          {"image_w", image_w},
          {"beta", beta},
          {"pi", pi},
          {"cond_dropout", cond_dropout},
          {"sigma_floor", sigma_floor},
          {"likelihood_sigma_floor", likelihood_sigma_floor},
          {"temperature", temperature}};
}

HvaeConfig HvaeConfig::from_json(const nlohmann::json& j) {
  HvaeConfig c;
  c.variant = j.at("variant") == "exo" ? HvaeVariant::Exo : HvaeVariant::Med;
  c.med_prior = j.at("med_prior") == "with_correction" ? MedPrior::WithPosteriorCorrection
                                                       : MedPrior::WithoutPosteriorCorrection;
  c.mixture_rule =
      j.at("mixture_rule") == "interpolate" ? MixtureRule::Interpolate : MixtureRule::Select;
  c.layers = j.at("layers").get<int>();
  c.latent_widths = j.at("latent_widths").get<std::vector<std::size_t>>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.image_h = j.at("image_h").get<int>();
  c.image_w = j.at("image_w").get<int>();
  c.beta = j.at("beta").get<double>();
  c.pi = j.at("pi").get<double>();
  c.cond_dropout = j.at("cond_dropout").get<double>();
  c.sigma_floor = j.at("sigma_floor").get<double>();
  c.likelihood_sigma_floor = j.value("likelihood_sigma_floor", 0.02);
  c.temperature = j.at("temperature").get<double>();
  c.check();
  return c;
}

HvaeMechanism::HvaeMechanism(HvaeConfig config, ParentCodec codec, RngStream& init_rng)
    : config_(std::move(config)), codec_(std::move(codec)) {
  config_.check();
  const std::size_t d = config_.pixels();
  const std::size_t hid = config_.hidden;
  const std::size_t pa = codec_.dim();
  const std::size_t layers = static_cast<std::size_t>(config_.layers);

  params_.add("hinit", Tensor::randn({1, d}, init_rng, 0.1));
  const bool separate_prior_state = config_.variant == HvaeVariant::Exo ||
                                    config_.med_prior == MedPrior::WithoutPosteriorCorrection;
  if (separate_prior_state) {
    params_.add("sinit", Tensor::randn({1, hid}, init_rng, 0.1));
  }

  for (std::size_t i = 0; i < layers; ++i) {
    const std::size_t bu_in = (i + 1 == layers) ? d : hid;  // enc nets run bottom-up
    enc_nets_.emplace_back("enc" + std::to_string(i), std::vector<std::size_t>{bu_in, hid});
    enc_nets_.back().init_params(params_, init_rng);
  }
  for (std::size_t li = 0; li < layers; ++li) {
    const std::size_t zw = config_.latent_widths[li];
    q_nets_.emplace_back("q" + std::to_string(li),
                         std::vector<std::size_t>{hid + d + pa, hid, 2 * zw});
    q_nets_.back().init_params(params_, init_rng, 0.05);
    f_nets_.emplace_back("f" + std::to_string(li), std::vector<std::size_t>{zw + pa, hid, d});
    f_nets_.back().init_params(params_, init_rng, 0.05);
    std::size_t p_in;
    if (config_.variant == HvaeVariant::Exo) {
      p_in = hid;
    } else if (config_.med_prior == MedPrior::WithPosteriorCorrection) {
      p_in = d + pa;
    } else {
      p_in = hid + pa;
    }
    p_nets_.emplace_back("p" + std::to_string(li), std::vector<std::size_t>{p_in, hid, 2 * zw});
    p_nets_.back().init_params(params_, init_rng, 0.05);
    if (separate_prior_state) {
      pm_nets_.emplace_back("pm" + std::to_string(li), std::vector<std::size_t>{zw, hid});
      pm_nets_.back().init_params(params_, init_rng, 0.1);
    }
  }
  params_.add("out.mu.scale", Tensor::full({1, d}, 1.0));
  params_.create("out.mu.bias", {1, d});
  params_.add("out.sg.scale", Tensor::randn({1, d}, init_rng, 0.01));
  // Start with a wide likelihood (sigma ~ 1) so early gradients stay under
  // the update-skipping threshold; training tightens it.
  params_.add("out.sg.bias", Tensor::full({1, d}, 0.5413));
}

Tensor HvaeMechanism::encode_parents(const std::vector<Value>& parents) const {
  return codec_.encode_batch({parents});
}

std::vector<Tensor> HvaeMechanism::bottom_up(const Tensor& x) const {
  // Returns features ordered top-down to match the layer arrays: index 0 is
  // the deepest feature (read by z_L), index L-1 is read by z_1.
  const std::size_t layers = static_cast<std::size_t>(config_.layers);
  std::vector<Tensor> tmp;
  Tensor h = x;
  for (std::size_t i = layers; i-- > 0;) {
    h = leaky_relu(enc_nets_[i](params_, h));
    tmp.push_back(h);
  }
  std::vector<Tensor> out(layers);
  for (std::size_t li = 0; li < layers; ++li) out[li] = tmp[layers - 1 - li];
  return out;
}

Tensor HvaeMechanism::prior_state_seed(std::size_t batch) const {
  if (params_.has("sinit")) return broadcast_rows(params_.get("sinit"), batch);
  return Tensor{};
}

std::pair<Tensor, Tensor> HvaeMechanism::prior_params(std::size_t li, const Tensor& h,
                                                      const Tensor& s,
                                                      const Tensor& pa_prior) const {
  Tensor in;
  if (config_.variant == HvaeVariant::Exo) {
    in = s;
  } else if (config_.med_prior == MedPrior::WithPosteriorCorrection) {
    in = concat({h, pa_prior}, 1);
  } else {
    in = concat({s, pa_prior}, 1);
  }
  Tensor out = p_nets_[li](params_, in);
  const std::size_t zw = config_.latent_widths[li];
  Tensor mu = slice(out, 1, 0, zw);
  Tensor sigma = softplus_sigma(slice(out, 1, zw, zw), config_.sigma_floor);
  return {mu, sigma};
}

Tensor HvaeMechanism::merge_f(std::size_t li, const Tensor& z, const Tensor& pa_merge) const {
  return f_nets_[li](params_, concat({z, pa_merge}, 1));
}

Tensor HvaeMechanism::prior_merge(std::size_t li, const Tensor& z) const {
  return pm_nets_[li](params_, z);
}

std::pair<Tensor, Tensor> HvaeMechanism::posterior_params(std::size_t li, const Tensor& d,
                                                          const Tensor& h,
                                                          const Tensor& pa) const {
  Tensor out = q_nets_[li](params_, concat({d, h, pa}, 1));
  const std::size_t zw = config_.latent_widths[li];
  Tensor mu = slice(out, 1, 0, zw);
  Tensor sigma = softplus_sigma(slice(out, 1, zw, zw), config_.sigma_floor);
  return {mu, sigma};
}

std::pair<Tensor, Tensor> HvaeMechanism::likelihood_params(const Tensor& h1) const {
  Tensor raw_mu = add(mul(h1, params_.get("out.mu.scale")), params_.get("out.mu.bias"));
  // Bounded mean head: pixels live in [-1,1], and the open-ended boundary
  // bins of the discretized likelihood would otherwise pull the background
  // means towards -inf (free tail mass), wrecking decoder-mean reconstruction.
  Tensor mu = scale(tanh_op(raw_mu), 1.05);
  Tensor raw = add(mul(h1, params_.get("out.sg.scale")), params_.get("out.sg.bias"));
  return {mu, softplus_sigma(raw, config_.likelihood_sigma_floor)};
}

HvaePass HvaeMechanism::encode(const Tensor& x, const Tensor& pa, RngStream& rng,
                               bool drop_merge_pa, bool drop_prior_pa) const {
  const std::size_t batch = x.shape()[0];
  if (x.ndim() != 2 || x.shape()[1] != config_.pixels()) {
    throw ContractError("hvae encode: expected rows of " + std::to_string(config_.pixels()) +
                        " pixels");
  }
  Tensor pa_merge = drop_merge_pa ? Tensor::zeros(pa.shape()) : pa;
  Tensor pa_prior = drop_prior_pa ? Tensor::zeros(pa.shape()) : pa;

  std::vector<Tensor> d = bottom_up(x);
  HvaePass pass;
  Tensor h = broadcast_rows(params_.get("hinit"), batch);
  Tensor s = prior_state_seed(batch);
  for (std::size_t li = 0; li < static_cast<std::size_t>(config_.layers); ++li) {
    HvaeLayerState layer;
    std::tie(layer.mu_p, layer.sigma_p) = prior_params(li, h, s, pa_prior);
    std::tie(layer.mu_q, layer.sigma_q) = posterior_params(li, d[li], h, pa);
    layer.u = Tensor::randn({batch, config_.latent_widths[li]}, rng);
    layer.z = add(layer.mu_q, mul(layer.sigma_q, layer.u));
    for (std::size_t k = 0; k < layer.z.size(); ++k) {
      if (!std::isfinite(layer.z[k])) {
        throw std::runtime_error("hvae encode: non-finite activation at layer " +
                                 std::to_string(li));
      }
    }
    h = add(h, merge_f(li, layer.z, pa_merge));
    if (s.defined()) s = add(s, prior_merge(li, layer.z));
    pass.layers.push_back(std::move(layer));
  }
  pass.h1 = h;
  std::tie(pass.mu_x, pass.sigma_x) = likelihood_params(h);
  return pass;
}

HvaePass HvaeMechanism::decode(const std::vector<Tensor>& zs, const Tensor& pa) const {
  if (zs.size() != static_cast<std::size_t>(config_.layers)) {
    throw ContractError("hvae decode: expected one latent per layer");
  }
  const std::size_t batch = zs[0].shape()[0];
  HvaePass pass;
  Tensor h = broadcast_rows(params_.get("hinit"), batch);
  Tensor s = prior_state_seed(batch);
  for (std::size_t li = 0; li < zs.size(); ++li) {
    HvaeLayerState layer;
    std::tie(layer.mu_p, layer.sigma_p) = prior_params(li, h, s, pa);
    layer.z = zs[li];
    h = add(h, merge_f(li, layer.z, pa));
    if (s.defined()) s = add(s, prior_merge(li, layer.z));
    pass.layers.push_back(std::move(layer));
  }
  pass.h1 = h;
  std::tie(pass.mu_x, pass.sigma_x) = likelihood_params(h);
  return pass;
}

HvaePass HvaeMechanism::sample_prior(const Tensor& pa, double temperature, RngStream& rng) const {
  if (temperature <= 0.0) throw ContractError("hvae sample_prior: temperature must be positive");
  const std::size_t batch = pa.shape()[0];
  HvaePass pass;
  Tensor h = broadcast_rows(params_.get("hinit"), batch);
  Tensor s = prior_state_seed(batch);
  for (std::size_t li = 0; li < static_cast<std::size_t>(config_.layers); ++li) {
    HvaeLayerState layer;
    std::tie(layer.mu_p, layer.sigma_p) = prior_params(li, h, s, pa);
    layer.u = Tensor::randn({batch, config_.latent_widths[li]}, rng);
    layer.z = add(layer.mu_p, mul(scale(layer.sigma_p, temperature), layer.u));
    h = add(h, merge_f(li, layer.z, pa));
    if (s.defined()) s = add(s, prior_merge(li, layer.z));
    pass.layers.push_back(std::move(layer));
  }
  pass.h1 = h;
  std::tie(pass.mu_x, pass.sigma_x) = likelihood_params(h);
  return pass;
}

// ---- discretized likelihood -------------------------------------------------

double quantize_to_grid(double v) {
  double b = std::round((v + 1.0) * 0.5 * 255.0);
  b = std::min(255.0, std::max(0.0, b));
  return 2.0 * b / 255.0 - 1.0;
}

Tensor quantize_image(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) out.mutable_data()[k] = quantize_to_grid(x[k]);
  return out;
}

bool on_pixel_grid(const Tensor& x) {
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (std::fabs(x[k] - quantize_to_grid(x[k])) > 1e-9) return false;
  }
  return true;
}

Tensor discretized_gaussian_log_likelihood(const Tensor& x, const Tensor& mu,
                                           const Tensor& sigma) {
  // Bin edges +-1/255 around each grid value, open-ended at the extremes.
  Tensor top_mask = Tensor::zeros(x.shape());
  Tensor bot_mask = Tensor::zeros(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (x[k] >= 1.0 - 1e-9) top_mask.mutable_data()[k] = 1.0;
    if (x[k] <= -1.0 + 1e-9) bot_mask.mutable_data()[k] = 1.0;
  }
  Tensor z_hi = divide(sub(shift(x, kBinHalfWidth), mu), sigma);
  Tensor z_lo = divide(sub(shift(x, -kBinHalfWidth), mu), sigma);
  Tensor cdf_hi = gaussian_cdf(z_hi);
  Tensor cdf_lo = gaussian_cdf(z_lo);
  // x = 1: upper tail mass 1; x = -1: lower bound 0.
  Tensor one = Tensor::full({1}, 1.0);
  cdf_hi = add(top_mask, mul(sub(one, top_mask), cdf_hi));
  cdf_lo = mul(sub(one, bot_mask), cdf_lo);
  Tensor mass = clamp_min(sub(cdf_hi, cdf_lo), 1e-12);
  return log_op(mass);
}

ElboParts HvaeMechanism::elbo(const Tensor& x, const Tensor& pa, RngStream& rng, double beta,
                              bool drop_merge_pa, bool drop_prior_pa) const {
  if (!on_pixel_grid(x)) {
    throw ContractError("elbo: pixels must lie on the 8-bit grid mapped into [-1,1]");
  }
  HvaePass pass = encode(x, pa, rng, drop_merge_pa, drop_prior_pa);
  Tensor logmass = discretized_gaussian_log_likelihood(x, pass.mu_x, pass.sigma_x);
  Tensor distortion = neg(sum_last(logmass));  // [B]
  Tensor rate;
  for (const HvaeLayerState& layer : pass.layers) {
    Tensor kl = gaussian_kl_rows(layer.mu_q, layer.sigma_q, layer.mu_p, layer.sigma_p);
    rate = rate.defined() ? add(rate, kl) : kl;
  }
  ElboParts parts;
  parts.distortion = mean_all(distortion);
  parts.rate = mean_all(rate);
  parts.objective = add(parts.distortion, scale(parts.rate, beta));
  return parts;
}

// ---- abduction and counterfactuals -------------------------------------------

NoiseRecord HvaeMechanism::abduct_noise(const Tensor& x, const Tensor& pa, RngStream& rng) const {
  HvaePass pass = encode(x, pa, rng);
  NoiseRecord noise;
  if (config_.variant == HvaeVariant::Exo) {
    for (std::size_t li = 0; li < pass.layers.size(); ++li) {
      noise["z" + std::to_string(li)] = pass.layers[li].z;
    }
    noise["eps"] = divide(sub(x, pass.mu_x), pass.sigma_x);
  } else {
    for (std::size_t li = 0; li < pass.layers.size(); ++li) {
      const std::string id = std::to_string(li);
      noise["uz" + id] = pass.layers[li].u;  // exactly (z - mu_q) / sigma_q
      noise["z" + id] = pass.layers[li].z;
      noise["qmu" + id] = pass.layers[li].mu_q;
      noise["qsig" + id] = pass.layers[li].sigma_q;
      // Component choice for the Select mixture rule, fixed at abduction time
      // so forwarding a persisted world stays deterministic.
      Tensor sel = Tensor::zeros({x.shape()[0], 1});
      for (std::size_t b = 0; b < sel.size(); ++b) sel.mutable_data()[b] = rng.uniform();
      noise["mixsel" + id] = sel;
    }
    noise["ux"] = divide(sub(x, pass.mu_x), pass.sigma_x);
  }
  return noise;
}

std::vector<Tensor> HvaeMechanism::counterfactual_mediator(const NoiseRecord& noise,
                                                           const Tensor& pa_cf) const {
  if (config_.variant != HvaeVariant::Med) {
    throw ContractError("counterfactual mediator requires the latent mediator variant");
  }
  const std::size_t batch = pa_cf.shape()[0];
  const double pi = config_.pi;
  std::vector<Tensor> zs;
  Tensor h = broadcast_rows(params_.get("hinit"), batch);
  Tensor s = prior_state_seed(batch);
  for (std::size_t li = 0; li < static_cast<std::size_t>(config_.layers); ++li) {
    const std::string id = std::to_string(li);
    auto [mu_p, sigma_p] = prior_params(li, h, s, pa_cf);
    const Tensor& mu_q = noise.at("qmu" + id);
    const Tensor& sigma_q = noise.at("qsig" + id);
    const Tensor& z = noise.at("z" + id);
    const Tensor& u = noise.at("uz" + id);

    Tensor mu_r, sigma_r;
    if (config_.mixture_rule == MixtureRule::Interpolate) {
      mu_r = add(scale(mu_p, pi), scale(mu_q, 1.0 - pi));
      sigma_r = add(scale(sigma_p, pi), scale(sigma_q, 1.0 - pi));
    } else {
      // Per-row component selection via the abducted selector draws.
      const Tensor& sel = noise.at("mixsel" + id);
      Tensor prior_mask = Tensor::zeros(sel.shape());
      for (std::size_t b = 0; b < sel.size(); ++b) {
        prior_mask.mutable_data()[b] = sel[b] < pi ? 1.0 : 0.0;
      }
      Tensor post_mask = shift(neg(prior_mask), 1.0);
      mu_r = add(mul(prior_mask, mu_p), mul(post_mask, mu_q));
      sigma_r = add(mul(prior_mask, sigma_p), mul(post_mask, sigma_q));
    }
    // Difference-compensated reparameterization: exactly z at pi = 0.
    Tensor z_cf = add(add(z, sub(mu_r, mu_q)), mul(sub(sigma_r, sigma_q), u));
    h = add(h, merge_f(li, z_cf, pa_cf));
    if (s.defined()) s = add(s, prior_merge(li, z_cf));
    zs.push_back(std::move(z_cf));
  }
  return zs;
}

Tensor HvaeMechanism::forward_noise(const NoiseRecord& noise, const Tensor& pa) const {
  if (config_.variant == HvaeVariant::Exo) {
    std::vector<Tensor> zs;
    for (std::size_t li = 0; li < static_cast<std::size_t>(config_.layers); ++li) {
      zs.push_back(noise.at("z" + std::to_string(li)));
    }
    HvaePass pass = decode(zs, pa);
    return add(pass.mu_x, mul(pass.sigma_x, noise.at("eps")));
  }
  std::vector<Tensor> zs = counterfactual_mediator(noise, pa);
  HvaePass pass = decode(zs, pa);
  return add(pass.mu_x, mul(pass.sigma_x, noise.at("ux")));
}

Tensor HvaeMechanism::counterfactual(const Tensor& x, const Tensor& pa, const Tensor& pa_cf,
                                     RngStream& rng) const {
  NoiseRecord noise = abduct_noise(x, pa, rng);
  Tensor cf = forward_noise(noise, pa_cf);
  if (!exact_reconstruction()) return cf;
  Tensor base = forward_noise(noise, pa);
  return add(x, sub(cf, base));
}

MediationTriple HvaeMechanism::mediation_effects(const Tensor& x, const Tensor& pa,
                                                 const Tensor& pa_cf, RngStream& rng) const {
  if (config_.variant != HvaeVariant::Med) {
    throw ContractError("mediation effects require the latent mediator variant");
  }
  NoiseRecord noise = abduct_noise(x, pa, rng);
  std::vector<Tensor> z_fact;
  for (std::size_t li = 0; li < static_cast<std::size_t>(config_.layers); ++li) {
    z_fact.push_back(noise.at("z" + std::to_string(li)));
  }
  std::vector<Tensor> z_cf = counterfactual_mediator(noise, pa_cf);
  const Tensor& ux = noise.at("ux");

  auto generator = [&](const Tensor& pa_in, const std::vector<Tensor>& zs) {
    HvaePass pass = decode(zs, pa_in);
    return add(pass.mu_x, mul(pass.sigma_x, ux));
  };
  Tensor base = generator(pa, z_fact);
  MediationTriple out;
  out.out_cf_parents = generator(pa_cf, z_fact);
  out.out_cf_mediator = generator(pa, z_cf);
  out.out_cf_both = generator(pa_cf, z_cf);
  out.de = sub(out.out_cf_parents, base);
  out.ie = sub(out.out_cf_mediator, base);
  out.te = sub(out.out_cf_both, base);
  return out;
}

// ---- training ------------------------------------------------------------------

HvaeMechanism::TrainTrace HvaeMechanism::train(const std::vector<Tensor>& images,
                                               const std::vector<std::vector<Value>>& parents,
                                               const TrainConfig& cfg) {
  if (images.size() != parents.size() || images.empty()) {
    throw ContractError("hvae train: image/parent count mismatch");
  }
  // Standardize continuous parent fields on the training data.
  for (std::size_t f = 0; f < codec_.field_count(); ++f) {
    std::vector<double> col;
    bool continuous = true;
    for (const auto& pa : parents) {
      if (pa.at(f).kind() != VarKind::Continuous) {
        continuous = false;
        break;
      }
      col.push_back(pa.at(f).as_scalar());
    }
    if (continuous && !col.empty()) codec_.fit_field(f, col);
  }

  const std::size_t n = images.size();
  const std::size_t n_val = std::min<std::size_t>(cfg.val_batch, n / 10 + 1);
  const std::size_t n_train = n - n_val;
  Tensor val_x = Tensor::zeros({n_val, config_.pixels()});
  std::vector<std::vector<Value>> val_pa;
  for (std::size_t k = 0; k < n_val; ++k) {
    const Tensor& img = images[n_train + k];
    std::copy(img.data(), img.data() + img.size(), val_x.mutable_data() + k * config_.pixels());
    val_pa.push_back(parents[n_train + k]);
  }
  Tensor val_cond = codec_.encode_batch(val_pa);

  optimizer_.mutable_config().learning_rate = cfg.learning_rate;
  optimizer_.mutable_config().weight_decay = cfg.weight_decay;
  optimizer_.mutable_config().warmup_steps = cfg.warmup_steps;
  optimizer_.mutable_config().grad_clip_norm = cfg.grad_clip_norm;
  optimizer_.mutable_config().grad_skip_norm = cfg.grad_skip_norm;
  if (optimizer_.ema().empty()) optimizer_.init_ema(params_.all());

  RngStream data_rng(cfg.seed, 101);
  RngStream model_rng(cfg.seed, 202);
  RngStream drop_rng(cfg.seed, 303);

  TrainTrace trace;
  std::int64_t window_skips = 0;
  int window_steps = 0;
  const std::size_t batch = std::min<std::size_t>(cfg.batch, n_train);
  const double dims = static_cast<double>(config_.pixels());

  for (int step = 1; step <= cfg.steps; ++step) {
    Tensor bx = Tensor::zeros({batch, config_.pixels()});
    std::vector<std::vector<Value>> bpa;
    for (std::size_t j = 0; j < batch; ++j) {
      const std::size_t idx = data_rng.below(n_train);
      const Tensor& img = images[idx];
      std::copy(img.data(), img.data() + img.size(), bx.mutable_data() + j * config_.pixels());
      bpa.push_back(parents[idx]);
    }
    Tensor bcond = codec_.encode_batch(bpa);

    bool drop_merge = false, drop_prior = false;
    if (config_.variant == HvaeVariant::Med && config_.cond_dropout > 0.0) {
      if (drop_rng.uniform() < config_.cond_dropout) {
        (drop_rng.uniform() < 0.5 ? drop_merge : drop_prior) = true;
      }
    }

    double train_obj = 0.0;
    {
      Tape tape;
      TapeScope scope(tape);
      params_.watch_all(tape);
      ElboParts parts = elbo(bx, bcond, model_rng, config_.beta, drop_merge, drop_prior);
      train_obj = parts.objective.item();
      tape.backward(parts.objective);
      std::vector<Tensor> grads;
      for (Tensor* p : params_.all()) grads.push_back(tape.grad(*p));
      if (!optimizer_.step(params_.all(), grads)) {
        ++window_skips;
        ++trace.skipped_steps;
      }
      ++window_steps;
    }

    if (step % cfg.val_interval == 0 || step == cfg.steps) {
      RngStream val_rng(cfg.seed, 404);
      // Validation on the EMA shadow, the parameters used at inference time.
      std::vector<Tensor> raw = params_.snapshot_values();
      params_.assign_values(optimizer_.ema());
      ElboParts val = elbo(val_x, val_cond, val_rng, config_.beta);
      params_.assign_values(raw);
      trace.step.push_back(step);
      trace.train_objective.push_back(train_obj);
      trace.val_objective.push_back(val.objective.item() / dims);
      trace.val_distortion.push_back(val.distortion.item() / dims);
      trace.val_rate.push_back(val.rate.item() / dims);
      if (window_steps > 0 && window_skips > window_steps / 5) {
        trace.warnings.push_back("step " + std::to_string(step) + ": " +
                                 std::to_string(window_skips) + "/" +
                                 std::to_string(window_steps) + " steps skipped in window");
      }
      window_skips = 0;
      window_steps = 0;
    }
  }
  return trace;
}

void HvaeMechanism::use_ema_parameters() {
  if (optimizer_.ema().empty()) throw ContractError("no EMA shadow parameters available");
  params_.assign_values(optimizer_.ema());
}

Checkpoint HvaeMechanism::to_checkpoint(bool include_optimizer_state) const {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "hvae";
  ckpt.meta["config"] = config_.to_json();
  ckpt.meta["codec"] = codec_.to_json();
  ckpt.step_counter = optimizer_.step_count();
  ckpt.add_store("raw/", params_);
  const auto names = params_.names();
  if (!optimizer_.ema().empty()) {
    ckpt.has_ema = true;
    for (std::size_t i = 0; i < names.size(); ++i) {
      ckpt.add("ema/" + names[i], optimizer_.ema()[i]);
    }
  }
  if (include_optimizer_state && !optimizer_.first_moments().empty()) {
    ckpt.meta["optimizer_state"] = true;
    for (std::size_t i = 0; i < names.size(); ++i) {
      ckpt.add("m/" + names[i], optimizer_.first_moments()[i]);
      ckpt.add("v/" + names[i], optimizer_.second_moments()[i]);
    }
  }
  return ckpt;
}

std::shared_ptr<HvaeMechanism> HvaeMechanism::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "hvae") {
    throw CheckpointError("checkpoint does not hold an hvae mechanism");
  }
  HvaeConfig config = HvaeConfig::from_json(ckpt.meta.at("config"));
  ParentCodec codec = ParentCodec::from_json(ckpt.meta.at("codec"));
  RngStream init(0);
  auto mech = std::make_shared<HvaeMechanism>(config, std::move(codec), init);
  ckpt.load_store("raw/", mech->params_);
  if (ckpt.has_ema) {
    std::vector<Tensor> ema;
    for (const std::string& name : mech->params_.names()) {
      ema.push_back(ckpt.get("ema/" + name));
    }
    mech->optimizer_.mutable_ema() = std::move(ema);
  }
  if (ckpt.meta.value("optimizer_state", false)) {
    for (const std::string& name : mech->params_.names()) {
      mech->optimizer_.first_moments().push_back(ckpt.get("m/" + name));
      mech->optimizer_.second_moments().push_back(ckpt.get("v/" + name));
    }
  }
  mech->optimizer_.set_step_count(ckpt.step_counter);
  return mech;
}

// ---- engine adapter ---------------------------------------------------------------

namespace {

class HvaeEngineMechanism final : public Mechanism {
 public:
  explicit HvaeEngineMechanism(std::shared_ptr<HvaeMechanism> impl) : impl_(std::move(impl)) {}

  Value sample(const std::vector<Value>& parents, RngStream& rng,
               NoiseRecord* noise_out) const override {
    Tensor pa = impl_->encode_parents(parents);
    HvaePass pass = impl_->sample_prior(pa, impl_->config().temperature, rng);
    Tensor eps = Tensor::randn(pass.mu_x.shape(), rng);
    Tensor x = add(pass.mu_x, mul(scale(pass.sigma_x, impl_->config().temperature), eps));
    Tensor xq = quantize_image(x);
    if (noise_out) *noise_out = impl_->abduct_noise(xq, pa, rng);
    return Value::image(reshape(xq, {static_cast<std::size_t>(impl_->config().image_h),
                                     static_cast<std::size_t>(impl_->config().image_w)}));
  }

  NoiseRecord abduct(const Value& value, const std::vector<Value>& parents,
                     RngStream& rng) const override {
    Tensor x = reshape(value.as_image(), {1, impl_->config().pixels()});
    return impl_->abduct_noise(x, impl_->encode_parents(parents), rng);
  }

  Value forward(const std::vector<Value>& parents, const NoiseRecord& noise) const override {
    Tensor x = impl_->forward_noise(noise, impl_->encode_parents(parents));
    return Value::image(reshape(x, {static_cast<std::size_t>(impl_->config().image_h),
                                    static_cast<std::size_t>(impl_->config().image_w)}));
  }

  bool stochastic_abduction() const override { return true; }
  bool exact_reconstruction() const override { return impl_->exact_reconstruction(); }

 private:
  std::shared_ptr<HvaeMechanism> impl_;
};

}  // namespace

std::shared_ptr<Mechanism> hvae_as_mechanism(std::shared_ptr<HvaeMechanism> mech) {
  return std::make_shared<HvaeEngineMechanism>(std::move(mech));
}

}  // namespace dscm
