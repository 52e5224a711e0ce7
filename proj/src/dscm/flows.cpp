#include "dscm/flows.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dscm {

namespace {

constexpr double kMinBinFraction = 1e-3;
constexpr double kMinDerivative = 1e-3;

Tensor clamp_max(const Tensor& a, double ceiling) {
  return neg(clamp_min(neg(a), -ceiling));
}

Tensor asinh_fwd(const Tensor& x) {
  // asinh(x) = log(x + sqrt(x^2 + 1))
  return log_op(add(x, sqrt_op(shift(mul(x, x), 1.0))));
}

Tensor sinh_fwd(const Tensor& x) {
  // Saturate far outside any reachable range so deep-tail densities underflow
  // to zero instead of producing inf - inf.
  Tensor xc = neg(clamp_min(neg(clamp_min(x, -350.0)), -350.0));
  return scale(sub(exp_op(xc), exp_op(neg(xc))), 0.5);
}

// Constant matrices for exclusive prefix sums along the trailing axis.
Tensor strict_lower_ones(std::size_t k) {
  Tensor m = Tensor::zeros({k, k});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) m.mutable_data()[i * k + j] = 1.0;
  return m;
}

}  // namespace

ConditionalFlow::ConditionalFlow(FlowConfig config, ParentCodec codec, RngStream& init_rng)
    : config_(config), codec_(std::move(codec)) {
  auto add_coeff_layer = [&](Layer::Kind kind, const std::string& name, std::size_t out_dim) {
    Layer layer;
    layer.kind = kind;
    if (codec_.dim() > 0) {
      layer.conditioner =
          Mlp(name, {codec_.dim(), config_.cond_hidden, config_.cond_hidden, out_dim});
      layer.conditioner.init_params(params_, init_rng, 0.05);
    } else {
      layer.param = name + ".coef";
      params_.create(layer.param, {1, out_dim});
    }
    layers_.push_back(std::move(layer));
  };

  for (int l = 0; l < config_.affine_layers; ++l) {
    add_coeff_layer(Layer::Kind::CondAffine, "aff" + std::to_string(l), 2);
    if (config_.interleave_asinh && l + 1 < config_.affine_layers) {
      layers_.push_back(Layer{Layer::Kind::Asinh, Mlp{}, ""});
    }
  }
  if (config_.use_spline) {
    add_coeff_layer(Layer::Kind::RqSpline, "spline",
                    static_cast<std::size_t>(3 * config_.spline_bins - 1));
  }
  if (config_.bounded) {
    if (!(config_.support_hi > config_.support_lo)) {
      throw ContractError("bounded flow support must have lo < hi");
    }
    layers_.push_back(Layer{Layer::Kind::SigmoidSquash, Mlp{}, ""});
  }
}

Tensor ConditionalFlow::layer_coeffs(const Layer& layer, const Tensor& cond,
                                     std::size_t rows) const {
  if (!layer.param.empty()) {
    return matmul(Tensor::full({rows, 1}, 1.0), params_.get(layer.param));
  }
  return layer.conditioner(params_, cond);
}

namespace {

struct SplineParts {
  Tensor w_sel, h_sel, x_left, y_left, d_lo, d_hi;  // all [B]
};

// Gather per-row bin quantities with constant one-hot masks; `by_y` selects
// the bin by output-side knots (for inversion).
SplineParts spline_gather(const Tensor& widths, const Tensor& heights, const Tensor& derivs,
                          const Tensor& pos, bool by_y, double bound, int bins) {
  const std::size_t b = pos.shape()[0];
  const std::size_t k = static_cast<std::size_t>(bins);
  Tensor lower = strict_lower_ones(k);
  Tensor x_left_all = shift(matmul(widths, lower), -bound);   // [B,K]
  Tensor y_left_all = shift(matmul(heights, lower), -bound);  // [B,K]

  // Data-dependent bin choice; the selection mask is treated as constant.
  const Tensor& ref = by_y ? y_left_all : x_left_all;
  const Tensor& len = by_y ? heights : widths;
  Tensor mask = Tensor::zeros({b, k});
  for (std::size_t r = 0; r < b; ++r) {
    std::size_t sel = k - 1;
    for (std::size_t j = 0; j < k; ++j) {
      const double left = ref[r * k + j];
      const double right = left + len[r * k + j];
      if (pos[r] < right || j == k - 1) {
        sel = j;
        break;
      }
    }
    mask.mutable_data()[r * k + sel] = 1.0;
  }

  Tensor d_all = concat({Tensor::full({b, 1}, 1.0), derivs, Tensor::full({b, 1}, 1.0)}, 1);
  SplineParts parts;
  parts.w_sel = sum_last(mul(widths, mask));
  parts.h_sel = sum_last(mul(heights, mask));
  parts.x_left = sum_last(mul(x_left_all, mask));
  parts.y_left = sum_last(mul(y_left_all, mask));
  parts.d_lo = sum_last(mul(slice(d_all, 1, 0, k), mask));
  parts.d_hi = sum_last(mul(slice(d_all, 1, 1, k), mask));
  return parts;
}

struct SplineParams {
  Tensor widths, heights, derivs;  // [B,K], [B,K], [B,K-1]
};

SplineParams spline_params(const Tensor& coeffs, int bins, double bound) {
  const std::size_t k = static_cast<std::size_t>(bins);
  Tensor raw_w = slice(coeffs, 1, 0, k);
  Tensor raw_h = slice(coeffs, 1, k, k);
  Tensor raw_d = slice(coeffs, 1, 2 * k, k - 1);
  const double denom = 1.0 + k * kMinBinFraction;
  SplineParams p;
  p.widths = scale(shift(softmax(raw_w), kMinBinFraction), 2.0 * bound / denom);
  p.heights = scale(shift(softmax(raw_h), kMinBinFraction), 2.0 * bound / denom);
  p.derivs = shift(softplus(raw_d), kMinDerivative);
  return p;
}

}  // namespace

Tensor ConditionalFlow::apply_forward(const Layer& layer, const Tensor& x, const Tensor& cond,
                                      Tensor* logdet) const {
  const std::size_t rows = x.shape()[0];
  switch (layer.kind) {
    case Layer::Kind::CondAffine: {
      Tensor c = layer_coeffs(layer, cond, rows);
      Tensor shift_c = slice(c, 1, 0, 1);
      Tensor raw = slice(c, 1, 1, 1);
      if (logdet) *logdet = add(*logdet, raw);
      return add(mul(x, exp_op(raw)), shift_c);
    }
    case Layer::Kind::Asinh: {
      if (logdet) {
        *logdet = sub(*logdet, scale(log_op(shift(mul(x, x), 1.0)), 0.5));
      }
      return asinh_fwd(x);
    }
    case Layer::Kind::SigmoidSquash: {
      const double span = config_.support_hi - config_.support_lo;
      if (logdet) {
        Tensor ld = sub(sub(Tensor::full({1, 1}, std::log(span)), softplus(neg(x))), softplus(x));
        *logdet = add(*logdet, ld);
      }
      return shift(scale(sigmoid(x), span), config_.support_lo);
    }
    case Layer::Kind::RqSpline: {
      const int bins = config_.spline_bins;
      const double bound = config_.spline_bound;
      Tensor coeffs = layer_coeffs(layer, cond, rows);
      SplineParams sp = spline_params(coeffs, bins, bound);
      Tensor xf = reshape(x, {rows});
      Tensor xin = clamp_max(clamp_min(xf, -bound), bound);
      SplineParts g = spline_gather(sp.widths, sp.heights, sp.derivs, xin, false, bound, bins);

      Tensor s = divide(g.h_sel, g.w_sel);
      Tensor xi = divide(sub(xin, g.x_left), g.w_sel);
      xi = clamp_max(clamp_min(xi, 0.0), 1.0);
      Tensor omxi = sub(Tensor::full({rows}, 1.0), xi);
      Tensor xi_omxi = mul(xi, omxi);
      Tensor dsum = sub(add(g.d_hi, g.d_lo), scale(s, 2.0));
      Tensor denom = add(s, mul(dsum, xi_omxi));
      Tensor numer = mul(g.h_sel, add(mul(s, mul(xi, xi)), mul(g.d_lo, xi_omxi)));
      Tensor y_in = add(g.y_left, divide(numer, denom));

      // dy/dx = s^2 [d_hi xi^2 + 2 s xi(1-xi) + d_lo (1-xi)^2] / denom^2
      Tensor dnum = add(add(mul(g.d_hi, mul(xi, xi)), scale(mul(s, xi_omxi), 2.0)),
                        mul(g.d_lo, mul(omxi, omxi)));
      Tensor ld_in = sub(add(scale(log_op(s), 2.0), log_op(dnum)), scale(log_op(denom), 2.0));

      // Identity outside the spline interval.
      Tensor inside = Tensor::zeros({rows});
      for (std::size_t r = 0; r < rows; ++r) {
        inside.mutable_data()[r] = (xf[r] >= -bound && xf[r] <= bound) ? 1.0 : 0.0;
      }
      Tensor outside = sub(Tensor::full({rows}, 1.0), inside);
      Tensor y = add(mul(inside, y_in), mul(outside, xf));
      if (logdet) {
        Tensor ld = mul(inside, ld_in);
        *logdet = add(*logdet, reshape(ld, {rows, 1}));
      }
      return reshape(y, {rows, 1});
    }
  }
  throw ContractError("unreachable flow layer kind");
}

Tensor ConditionalFlow::apply_inverse(const Layer& layer, const Tensor& y, const Tensor& cond,
                                      Tensor* logdet) const {
  const std::size_t rows = y.shape()[0];
  switch (layer.kind) {
    case Layer::Kind::CondAffine: {
      Tensor c = layer_coeffs(layer, cond, rows);
      Tensor shift_c = slice(c, 1, 0, 1);
      Tensor raw = slice(c, 1, 1, 1);
      if (logdet) *logdet = add(*logdet, raw);
      return mul(sub(y, shift_c), exp_op(neg(raw)));
    }
    case Layer::Kind::Asinh: {
      Tensor x = sinh_fwd(y);
      if (logdet) {
        *logdet = sub(*logdet, scale(log_op(shift(mul(x, x), 1.0)), 0.5));
      }
      return x;
    }
    case Layer::Kind::SigmoidSquash: {
      const double lo = config_.support_lo, hi = config_.support_hi;
      for (std::size_t r = 0; r < y.size(); ++r) {
        if (!(y[r] > lo && y[r] < hi)) {
          std::ostringstream os;
          os << "value " << y[r] << " outside the open support (" << lo << ", " << hi << ")";
          throw DomainError(os.str());
        }
      }
      Tensor p = scale(shift(y, -lo), 1.0 / (hi - lo));
      Tensor x = sub(log_op(p), log_op(sub(Tensor::full({1, 1}, 1.0), p)));
      if (logdet) {
        Tensor ld =
            sub(sub(Tensor::full({1, 1}, std::log(hi - lo)), softplus(neg(x))), softplus(x));
        *logdet = add(*logdet, ld);
      }
      return x;
    }
    case Layer::Kind::RqSpline: {
      const int bins = config_.spline_bins;
      const double bound = config_.spline_bound;
      Tensor coeffs = layer_coeffs(layer, cond, rows);
      SplineParams sp = spline_params(coeffs, bins, bound);
      Tensor yf = reshape(y, {rows});
      Tensor yin = clamp_max(clamp_min(yf, -bound), bound);
      SplineParts g = spline_gather(sp.widths, sp.heights, sp.derivs, yin, true, bound, bins);

      Tensor s = divide(g.h_sel, g.w_sel);
      Tensor e = sub(yin, g.y_left);
      Tensor dsum = sub(add(g.d_hi, g.d_lo), scale(s, 2.0));
      // a xi^2 + b xi + c = 0 with the monotone branch xi = 2c / (-b - sqrt(b^2-4ac)).
      Tensor qa = add(mul(g.h_sel, sub(s, g.d_lo)), mul(e, dsum));
      Tensor qb = sub(mul(g.h_sel, g.d_lo), mul(e, dsum));
      Tensor qc = neg(mul(s, e));
      Tensor disc = clamp_min(sub(mul(qb, qb), scale(mul(qa, qc), 4.0)), 1e-300);
      Tensor xi = divide(scale(qc, 2.0), neg(add(qb, sqrt_op(disc))));
      xi = clamp_max(clamp_min(xi, 0.0), 1.0);
      Tensor x_in = add(g.x_left, mul(xi, g.w_sel));

      Tensor omxi = sub(Tensor::full({rows}, 1.0), xi);
      Tensor xi_omxi = mul(xi, omxi);
      Tensor denom = add(s, mul(dsum, xi_omxi));
      Tensor dnum = add(add(mul(g.d_hi, mul(xi, xi)), scale(mul(s, xi_omxi), 2.0)),
                        mul(g.d_lo, mul(omxi, omxi)));
      Tensor ld_in = sub(add(scale(log_op(s), 2.0), log_op(dnum)), scale(log_op(denom), 2.0));

      Tensor inside = Tensor::zeros({rows});
      for (std::size_t r = 0; r < rows; ++r) {
        inside.mutable_data()[r] = (yf[r] >= -bound && yf[r] <= bound) ? 1.0 : 0.0;
      }
      Tensor outside = sub(Tensor::full({rows}, 1.0), inside);
      Tensor x = add(mul(inside, x_in), mul(outside, yf));
      if (logdet) {
        *logdet = add(*logdet, reshape(mul(inside, ld_in), {rows, 1}));
      }
      return reshape(x, {rows, 1});
    }
  }
  throw ContractError("unreachable flow layer kind");
}

Tensor ConditionalFlow::forward_batch(const Tensor& u, const Tensor& cond) const {
  Tensor x = u;
  for (const Layer& layer : layers_) x = apply_forward(layer, x, cond, nullptr);
  return x;
}

Tensor ConditionalFlow::inverse_batch(const Tensor& a, const Tensor& cond,
                                      Tensor* fwd_logdet) const {
  Tensor x = a;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    x = apply_inverse(*it, x, cond, fwd_logdet);
  }
  return x;
}

Tensor ConditionalFlow::log_prob_batch(const Tensor& a, const Tensor& cond) const {
  const std::size_t rows = a.shape()[0];
  Tensor logdet = Tensor::zeros({rows, 1});
  Tensor u = inverse_batch(a, cond, &logdet);
  Tensor base = gaussian_log_density(u, Tensor::scalar(0.0), Tensor::scalar(1.0));
  return sub(base, logdet);
}

namespace {

Tensor column(double v) { return Tensor::from_data({1, 1}, {v}); }

}  // namespace

double ConditionalFlow::forward(double u, const std::vector<Value>& parents) const {
  Tensor cond = codec_.encode_batch({parents});
  return forward_batch(column(u), cond).item();
}

double ConditionalFlow::inverse(double a, const std::vector<Value>& parents) const {
  Tensor cond = codec_.encode_batch({parents});
  return inverse_batch(column(a), cond, nullptr).item();
}

double ConditionalFlow::log_prob(double a, const std::vector<Value>& parents) const {
  Tensor cond = codec_.encode_batch({parents});
  return log_prob_batch(column(a), cond).item();
}

double ConditionalFlow::counterfactual(double a, const std::vector<Value>& parents,
                                       const std::vector<Value>& cf_parents) const {
  const double u = inverse(a, parents);
  const double cf = forward(u, cf_parents);
  const double base = forward(u, parents);
  return a + (cf - base);
}

ConditionalFlow::TrainTrace ConditionalFlow::train(const std::vector<std::vector<Value>>& parents,
                                                   const std::vector<double>& values,
                                                   const FlowTrainConfig& cfg, RngStream& rng) {
  if (parents.size() != values.size() || values.empty()) {
    throw ContractError("flow training data mismatch");
  }
  {
    double mn = values[0], mx = values[0];
    for (double v : values) {
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    if (mx - mn < 1e-9) {
      throw ContractError("degenerate attribute support: all training values are equal");
    }
  }
  // Standardize continuous conditioning fields on the training data.
  for (std::size_t f = 0; f < codec_.field_count(); ++f) {
    bool continuous = true;
    std::vector<double> col;
    for (const auto& pa : parents) {
      if (pa.at(f).kind() != VarKind::Continuous) {
        continuous = false;
        break;
      }
      col.push_back(pa.at(f).as_scalar());
    }
    if (continuous && !col.empty()) codec_.fit_field(f, col);
  }

  const std::size_t n = values.size();
  const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(n * cfg.validation_fraction));
  const std::size_t n_train = n - n_val;
  Tensor val_a = Tensor::zeros({n_val, 1});
  std::vector<std::vector<Value>> val_pa;
  for (std::size_t i = 0; i < n_val; ++i) {
    val_a.mutable_data()[i] = values[n_train + i];
    val_pa.push_back(parents[n_train + i]);
  }
  Tensor val_cond = codec_.encode_batch(val_pa);

  Optimizer opt;
  opt.mutable_config().learning_rate = cfg.learning_rate;
  opt.mutable_config().weight_decay = cfg.weight_decay;

  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = std::min<std::size_t>(cfg.batch, n_train);

  TrainTrace trace;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double epoch_nll = 0.0;
    std::size_t nb = 0;
    for (std::size_t start = 0; start + batch <= n_train; start += batch) {
      Tensor a = Tensor::zeros({batch, 1});
      std::vector<std::vector<Value>> pa;
      for (std::size_t j = 0; j < batch; ++j) {
        a.mutable_data()[j] = values[order[start + j]];
        pa.push_back(parents[order[start + j]]);
      }
      Tensor cond = codec_.encode_batch(pa);
      Tape tape;
      TapeScope scope(tape);
      params_.watch_all(tape);
      Tensor nll = neg(mean_all(log_prob_batch(a, cond)));
      const double loss = nll.item();
      if (!std::isfinite(loss)) {
        throw std::runtime_error("flow training diverged: non-finite NLL at epoch " +
                                 std::to_string(epoch));
      }
      tape.backward(nll);
      std::vector<Tensor> grads;
      for (Tensor* p : params_.all()) grads.push_back(tape.grad(*p));
      opt.step(params_.all(), grads);
      epoch_nll += loss;
      ++nb;
    }
    trace.train_nll.push_back(epoch_nll / std::max<std::size_t>(1, nb));
    trace.val_nll.push_back(neg(mean_all(log_prob_batch(val_a, val_cond))).item());
  }
  return trace;
}

nlohmann::json ConditionalFlow::config_json() const {
  return {{"affine_layers", config_.affine_layers},
          {"interleave_asinh", config_.interleave_asinh},
          {"use_spline", config_.use_spline},
          {"spline_bins", config_.spline_bins},
          {"spline_bound", config_.spline_bound},
          {"cond_hidden", config_.cond_hidden},
          {"bounded", config_.bounded},
          {"support_lo", config_.support_lo},
          {"support_hi", config_.support_hi}};
}

FlowConfig ConditionalFlow::config_from_json(const nlohmann::json& j) {
  FlowConfig c;
  c.affine_layers = j.at("affine_layers").get<int>();
  c.interleave_asinh = j.at("interleave_asinh").get<bool>();
  c.use_spline = j.at("use_spline").get<bool>();
  c.spline_bins = j.at("spline_bins").get<int>();
  c.spline_bound = j.at("spline_bound").get<double>();
  c.cond_hidden = j.at("cond_hidden").get<std::size_t>();
  c.bounded = j.at("bounded").get<bool>();
  c.support_lo = j.at("support_lo").get<double>();
  c.support_hi = j.at("support_hi").get<double>();
  return c;
}

namespace {

class FlowEngineMechanism final : public Mechanism {
 public:
  explicit FlowEngineMechanism(std::shared_ptr<ConditionalFlow> flow) : flow_(std::move(flow)) {}

  Value sample(const std::vector<Value>& parents, RngStream& rng,
               NoiseRecord* noise_out) const override {
    const double u = rng.normal();
    if (noise_out) (*noise_out)["u"] = Tensor::scalar(u);
    return Value::scalar(flow_->forward(u, parents));
  }
  NoiseRecord abduct(const Value& value, const std::vector<Value>& parents,
                     RngStream&) const override {
    return {{"u", Tensor::scalar(flow_->inverse(value.as_scalar(), parents))}};
  }
  Value forward(const std::vector<Value>& parents, const NoiseRecord& noise) const override {
    return Value::scalar(flow_->forward(noise.at("u").item(), parents));
  }
  bool stochastic_abduction() const override { return false; }
  bool exact_reconstruction() const override { return true; }

 private:
  std::shared_ptr<ConditionalFlow> flow_;
};

}  // namespace

std::shared_ptr<Mechanism> flow_as_mechanism(std::shared_ptr<ConditionalFlow> flow) {
  return std::make_shared<FlowEngineMechanism>(std::move(flow));
}

}  // namespace dscm
