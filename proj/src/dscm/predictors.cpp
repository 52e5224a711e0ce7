#include "dscm/predictors.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "dscm/optimizer.hpp"

namespace dscm {

ParentPredictor::ParentPredictor(std::string target, VarKind kind, int categories,
                                 std::size_t image_dim, RngStream& init_rng, std::size_t hidden)
    : target_(std::move(target)), kind_(kind), categories_(categories) {
  const std::size_t out =
      kind_ == VarKind::Categorical ? static_cast<std::size_t>(categories_) : 2;
  net_ = Mlp("net", {image_dim, hidden, hidden, out});
  net_.init_params(params_, init_rng, 0.1);
}

void ParentPredictor::fit_target_scaling(const std::vector<double>& values) {
  double sum = 0.0, sq = 0.0;
  for (double v : values) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(values.size());
  target_mean_ = sum / n;
  const double var = sq / n - target_mean_ * target_mean_;
  target_std_ = var > 1e-12 ? std::sqrt(var) : 1.0;
}

Tensor ParentPredictor::log_prob(const Tensor& x, const std::vector<Value>& targets) const {
  const std::size_t b = x.shape()[0];
  if (targets.size() != b) throw ContractError("predictor log_prob: batch mismatch");
  Tensor out = net_(params_, x);
  if (kind_ == VarKind::Categorical) {
    Tensor onehot = Tensor::zeros({b, static_cast<std::size_t>(categories_)});
    for (std::size_t r = 0; r < b; ++r) {
      onehot.mutable_data()[r * categories_ + targets[r].as_category()] = 1.0;
    }
    return sub(sum_last(mul(out, onehot)), log_sum_exp(out));
  }
  Tensor v = Tensor::zeros({b, 1});
  for (std::size_t r = 0; r < b; ++r) {
    v.mutable_data()[r] = (targets[r].as_scalar() - target_mean_) / target_std_;
  }
  Tensor mu = slice(out, 1, 0, 1);
  Tensor sigma = shift(softplus(slice(out, 1, 1, 1)), 1e-3);
  // Jacobian of the standardization joins the density.
  Tensor lp = shift(gaussian_log_density(v, mu, sigma), -std::log(target_std_));
  return reshape(lp, {b});
}

double ParentPredictor::predict_scalar(const Tensor& x_row) const {
  Tensor out = net_(params_, x_row);
  return out[0] * target_std_ + target_mean_;
}

int ParentPredictor::predict_category(const Tensor& x_row) const {
  Tensor out = net_(params_, x_row);
  int best = 0;
  for (int k = 1; k < categories_; ++k) {
    if (out[k] > out[best]) best = k;
  }
  return best;
}

nlohmann::json ParentPredictor::meta() const {
  return {{"target", target_},
          {"kind", kind_ == VarKind::Categorical ? "categorical" : "continuous"},
          {"categories", categories_},
          {"target_mean", target_mean_},
          {"target_std", target_std_},
          {"image_dim", net_.in_dim()},
          {"hidden", 0}};
}

void ParentPredictor::to_checkpoint(Checkpoint* ckpt, const std::string& prefix) const {
  ckpt->add_store(prefix + "/", params_);
}

std::shared_ptr<ParentPredictor> ParentPredictor::from_checkpoint(const Checkpoint& ckpt,
                                                                  const std::string& prefix) {
  const nlohmann::json& m = ckpt.meta.at("predictors").at(prefix);
  RngStream init(0);
  auto p = std::make_shared<ParentPredictor>(
      m.at("target").get<std::string>(),
      m.at("kind") == "categorical" ? VarKind::Categorical : VarKind::Continuous,
      m.at("categories").get<int>(), m.at("image_dim").get<std::size_t>(), init);
  ckpt.load_store(prefix + "/", p->params_);
  p->target_mean_ = m.at("target_mean").get<double>();
  p->target_std_ = m.at("target_std").get<double>();
  return p;
}

ParentPredictor& PredictorSet::by_target(const std::string& name) {
  for (auto& p : items) {
    if (p->target() == name) return *p;
  }
  throw ContractError("no predictor for target " + name);
}

const ParentPredictor& PredictorSet::by_target(const std::string& name) const {
  for (const auto& p : items) {
    if (p->target() == name) return *p;
  }
  throw ContractError("no predictor for target " + name);
}

PredictorSet train_predictors(const std::vector<Tensor>& images,
                              const std::map<std::string, std::vector<Value>>& targets,
                              const std::vector<VariableSpec>& specs,
                              const PredictorTrainConfig& cfg, PredictorMetrics* metrics) {
  if (images.empty()) throw ContractError("predictor training needs data");
  const std::size_t n = images.size();
  const std::size_t image_dim = images[0].size();

  PredictorSet set;
  RngStream init(cfg.seed, 11);
  for (const VariableSpec& spec : specs) {
    const auto& vals = targets.at(spec.name);
    if (vals.size() != n) throw ContractError("target column size mismatch for " + spec.name);
    if (spec.kind == VarKind::Categorical) {
      std::set<int> distinct;
      for (const Value& v : vals) distinct.insert(v.as_category());
      if (distinct.size() < 2) {
        throw ContractError("degenerate target " + spec.name + ": a single observed class");
      }
    }
    auto p = std::make_shared<ParentPredictor>(spec.name, spec.kind, spec.categories, image_dim,
                                               init);
    if (spec.kind == VarKind::Continuous) {
      std::vector<double> col;
      for (const Value& v : vals) col.push_back(v.as_scalar());
      p->fit_target_scaling(col);
    }
    set.items.push_back(std::move(p));
  }

  // Joint training: the total loss is the sum of the per-target losses.
  std::vector<Tensor*> all_params;
  for (auto& p : set.items) {
    for (Tensor* t : p->params().all()) all_params.push_back(t);
  }
  Optimizer opt;
  opt.mutable_config().learning_rate = cfg.learning_rate;
  opt.mutable_config().weight_decay = cfg.weight_decay;
  opt.init_ema(all_params);

  const std::size_t n_val = std::max<std::size_t>(1, n / 10);
  const std::size_t n_train = n - n_val;
  RngStream data_rng(cfg.seed, 22);
  const std::size_t batch = std::min<std::size_t>(cfg.batch, n_train);

  for (int step = 1; step <= cfg.steps; ++step) {
    Tensor bx = Tensor::zeros({batch, image_dim});
    std::vector<std::size_t> rows(batch);
    for (std::size_t j = 0; j < batch; ++j) {
      rows[j] = data_rng.below(n_train);
      const Tensor& img = images[rows[j]];
      std::copy(img.data(), img.data() + image_dim, bx.mutable_data() + j * image_dim);
    }
    Tape tape;
    TapeScope scope(tape);
    for (Tensor* t : all_params) tape.watch(*t);
    Tensor loss;
    for (auto& p : set.items) {
      std::vector<Value> bt;
      for (std::size_t j = 0; j < batch; ++j) bt.push_back(targets.at(p->target())[rows[j]]);
      Tensor nll = neg(mean_all(p->log_prob(bx, bt)));
      loss = loss.defined() ? add(loss, nll) : nll;
    }
    tape.backward(loss);
    std::vector<Tensor> grads;
    for (Tensor* t : all_params) grads.push_back(tape.grad(*t));
    opt.step(all_params, grads);
  }

  // Inference uses the EMA shadow.
  std::size_t off = 0;
  for (auto& p : set.items) {
    const std::size_t count = p->params().count();
    std::vector<Tensor> shadow(opt.ema().begin() + off, opt.ema().begin() + off + count);
    p->params().assign_values(shadow);
    off += count;
  }

  if (metrics) {
    for (auto& p : set.items) {
      double err = 0.0;
      int hits = 0;
      for (std::size_t k = n_train; k < n; ++k) {
        Tensor row = reshape(images[k], {1, image_dim});
        const Value& truth = targets.at(p->target())[k];
        if (p->kind() == VarKind::Categorical) {
          hits += (p->predict_category(row) == truth.as_category());
        } else {
          err += std::fabs(p->predict_scalar(row) - truth.as_scalar());
        }
      }
      if (p->kind() == VarKind::Categorical) {
        metrics->accuracy[p->target()] = static_cast<double>(hits) / n_val;
      } else {
        metrics->mae[p->target()] = err / n_val;
      }
    }
  }
  return set;
}

void save_predictors(const std::string& path, const PredictorSet& set) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "predictors";
  nlohmann::json pm = nlohmann::json::object();
  for (const auto& p : set.items) {
    pm[p->target()] = p->meta();
    p->to_checkpoint(&ckpt, p->target());
  }
  ckpt.meta["predictors"] = pm;
  save_checkpoint(path, ckpt);
}

PredictorSet load_predictors(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "predictors") {
    throw CheckpointError(path + ": not a predictor checkpoint");
  }
  PredictorSet set;
  for (const auto& [target, meta] : ckpt.meta.at("predictors").items()) {
    set.items.push_back(ParentPredictor::from_checkpoint(ckpt, target));
  }
  return set;
}

double mi_lower_bound(const ParentPredictor& predictor, const std::vector<Tensor>& images,
                      const std::vector<Value>& targets, double entropy) {
  if (images.size() != targets.size() || images.empty()) {
    throw ContractError("mi_lower_bound: sample mismatch");
  }
  double mean_logq = 0.0;
  for (std::size_t k = 0; k < images.size(); ++k) {
    Tensor row = reshape(images[k], {1, images[k].size()});
    mean_logq += predictor.log_prob(row, {targets[k]}).item();
  }
  mean_logq /= static_cast<double>(images.size());
  return mean_logq + entropy;
}

double categorical_entropy(const std::vector<double>& probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double gamma_entropy(double shape, double rate) {
  // alpha - ln(rate) + ln Gamma(alpha) + (1 - alpha) psi(alpha)
  const double digamma = [](double x) {
    double r = 0.0;
    while (x < 6.0) {
      r -= 1.0 / x;
      x += 1.0;
    }
    const double inv = 1.0 / x, inv2 = inv * inv;
    return r + std::log(x) - 0.5 * inv -
           inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 / 252.0));
  }(shape);
  return shape - std::log(rate) + std::lgamma(shape) + (1.0 - shape) * digamma;
}

double gaussian_entropy(double stddev) {
  return 0.5 * std::log(2.0 * M_PI * M_E * stddev * stddev);
}

double empirical_categorical_entropy(const std::vector<int>& draws, int categories) {
  std::vector<double> freq(categories, 0.0);
  for (int d : draws) freq.at(d) += 1.0 / draws.size();
  return categorical_entropy(freq);
}

// ---- counterfactual training ----------------------------------------------------

CounterfactualTrainer::CounterfactualTrainer(std::shared_ptr<CausalGraph> attribute_graph,
                                             std::shared_ptr<HvaeMechanism> image_mechanism,
                                             std::vector<std::string> image_parents,
                                             std::map<std::string, MarginalSampler> marginals,
                                             const PredictorSet* predictors)
    : graph_(std::move(attribute_graph)),
      hvae_(std::move(image_mechanism)),
      image_parents_(std::move(image_parents)),
      marginals_(std::move(marginals)),
      predictors_(predictors) {
  for (const std::string& name : image_parents_) {
    if (!marginals_.count(name)) {
      throw ContractError("no marginal sampler for parent " + name);
    }
  }
}

Tensor CounterfactualTrainer::encode_attr(const Evidence& ev) const {
  std::vector<Value> pa;
  for (const std::string& name : image_parents_) pa.push_back(ev.at(name));
  return hvae_->encode_parents(pa);
}

Tensor CounterfactualTrainer::counterfactual_loss(const Batch& batch, RngStream& rng) const {
  const std::size_t b = batch.images.size();
  if (b == 0 || batch.attribute_evidence.size() != b) {
    throw ContractError("counterfactual_loss: empty or mismatched batch");
  }
  const std::size_t d = hvae_->config().pixels();
  Tensor x = Tensor::zeros({b, d});
  std::vector<std::vector<Value>> pa_obs(b);
  for (std::size_t r = 0; r < b; ++r) {
    std::copy(batch.images[r].data(), batch.images[r].data() + d, x.mutable_data() + r * d);
    for (const std::string& name : image_parents_) {
      pa_obs[r].push_back(batch.attribute_evidence[r].at(name));
    }
  }
  Tensor pa_obs_enc = hvae_->codec().encode_batch(pa_obs);

  Tensor total;
  std::uint64_t sub = 0;
  for (const std::string& k : image_parents_) {
    std::vector<std::vector<Value>> pa_cf(b);
    std::vector<Value> cf_targets;
    for (std::size_t r = 0; r < b; ++r) {
      RngStream draw_rng = rng.substream(sub++);
      Value intervened = marginals_.at(k)(draw_rng);
      Intervention iv;
      iv.do_hard(k, intervened);
      RngStream query_rng = rng.substream(sub++);
      Evidence cf =
          counterfactual_query(*graph_, batch.attribute_evidence[r], iv, query_rng).counterfactual;
      for (const std::string& name : image_parents_) pa_cf[r].push_back(cf.at(name));
      cf_targets.push_back(intervened);
    }
    Tensor pa_cf_enc = hvae_->codec().encode_batch(pa_cf);
    RngStream cf_rng = rng.substream(sub++);
    Tensor x_cf = hvae_->counterfactual(x, pa_obs_enc, pa_cf_enc, cf_rng);
    Tensor logq = predictors_->by_target(k).log_prob(x_cf, cf_targets);
    if (!std::isfinite(mean_all(logq).item())) {
      throw std::runtime_error("counterfactual loss diverged (non-finite) for parent " + k);
    }
    Tensor term = neg(mean_all(logq));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(image_parents_.size()));
}

double CounterfactualTrainer::mean_free_energy(const std::vector<Batch>& pool,
                                               std::uint64_t seed) const {
  double sum = 0.0;
  std::size_t count = 0;
  RngStream rng(seed, 515);
  const std::size_t d = hvae_->config().pixels();
  for (const Batch& batch : pool) {
    const std::size_t b = batch.images.size();
    Tensor x = Tensor::zeros({b, d});
    std::vector<std::vector<Value>> pa(b);
    for (std::size_t r = 0; r < b; ++r) {
      std::copy(batch.images[r].data(), batch.images[r].data() + d, x.mutable_data() + r * d);
      for (const std::string& name : image_parents_) {
        pa[r].push_back(batch.attribute_evidence[r].at(name));
      }
    }
    ElboParts parts = hvae_->elbo(x, hvae_->codec().encode_batch(pa), rng, hvae_->config().beta);
    sum += parts.objective.item() * static_cast<double>(b);
    count += b;
  }
  return sum / static_cast<double>(count);
}

CounterfactualTrainer::FinetuneTrace CounterfactualTrainer::finetune(
    const std::vector<Batch>& pool, const FinetuneConfig& cfg) {
  FinetuneTrace trace;
  if (pool.empty()) throw ContractError("finetune: empty training pool");

  // Start from the EMA of the pre-trained parameters.
  if (cfg.steps > 0 && hvae_->has_ema()) hvae_->use_ema_parameters();
  const double c = mean_free_energy(pool, cfg.seed);
  trace.constraint_value = c;
  if (cfg.steps == 0) {
    trace.status = "zero-iteration budget: parameters untouched";
    return trace;
  }

  Optimizer opt;
  opt.mutable_config().learning_rate = cfg.learning_rate;
  opt.mutable_config().weight_decay = cfg.weight_decay;
  opt.init_ema(hvae_->params().all());

  double lagrange = cfg.lagrange_init;
  RngStream pick_rng(cfg.seed, 616);
  RngStream step_rng(cfg.seed, 717);

  for (int step = 1; step <= cfg.steps; ++step) {
    const Batch& batch = pool[pick_rng.below(pool.size())];
    const std::size_t b = batch.images.size();
    const std::size_t d = hvae_->config().pixels();
    Tensor x = Tensor::zeros({b, d});
    std::vector<std::vector<Value>> pa(b);
    for (std::size_t r = 0; r < b; ++r) {
      std::copy(batch.images[r].data(), batch.images[r].data() + d, x.mutable_data() + r * d);
      for (const std::string& name : image_parents_) {
        pa[r].push_back(batch.attribute_evidence[r].at(name));
      }
    }
    Tensor pa_enc = hvae_->codec().encode_batch(pa);

    double lct_value = 0.0, fe_value = 0.0;
    {
      Tape tape;
      TapeScope scope(tape);
      hvae_->params().watch_all(tape);
      RngStream loss_rng = step_rng.substream(static_cast<std::uint64_t>(step) * 2);
      Tensor lct = counterfactual_loss(batch, loss_rng);
      RngStream fe_rng = step_rng.substream(static_cast<std::uint64_t>(step) * 2 + 1);
      Tensor fe = hvae_->elbo(x, pa_enc, fe_rng, hvae_->config().beta).objective;
      lct_value = lct.item();
      fe_value = fe.item();
      Tensor loss = add(lct, scale(fe, lagrange));
      tape.backward(loss);
      std::vector<Tensor> grads;
      for (Tensor* p : hvae_->params().all()) grads.push_back(tape.grad(*p));
      opt.step(hvae_->params().all(), grads);
    }
    // Plain gradient ascent on the multiplier: the sign of the update always
    // follows the sign of the constraint violation.
    lagrange = std::max(0.0, lagrange + cfg.lagrange_lr * (fe_value - c));

    if (step % cfg.trace_interval == 0 || step == cfg.steps || step == 1) {
      trace.step.push_back(step);
      trace.loss_ct.push_back(lct_value);
      trace.free_energy.push_back(fe_value);
      trace.lagrange_multiplier.push_back(lagrange);
    }
  }

  // The fine-tuned artifact is the EMA of the fine-tuned parameters; leave it
  // swapped in for inference and judge the constraint on it.
  hvae_->optimizer().mutable_ema() = opt.ema();
  hvae_->use_ema_parameters();
  const double final_fe = mean_free_energy(pool, cfg.seed + 1);
  if (final_fe > c + 0.10 * std::fabs(c)) {
    trace.constraint_satisfied = false;
    trace.status = "constraint violated by more than 10% of |c| at budget end";
  } else {
    trace.constraint_satisfied = true;
    trace.status = "ok";
  }
  return trace;
}

}  // namespace dscm
