// Command-line front end: dataset generation, staged training, counterfactual
// queries, evaluation and sampling. Every run writes a manifest (resolved
// config, input/output hashes, wall clock, seed) beside its outputs; with a
// fixed seed the produced artifacts are byte-identical across runs.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dscm/eval.hpp"
#include "dscm/pgm.hpp"
#include "dscm/pipeline.hpp"
#include "dscm/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dscm;

namespace {

struct RunContext {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  fs::path out_dir;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  void note_input(const std::string& path) { inputs.push_back(path); }
  std::string out_file(const std::string& name) {
    fs::create_directories(out_dir);
    std::string p = (out_dir / name).string();
    outputs.push_back(p);
    return p;
  }

  void write_manifest() {
    json manifest;
    manifest["command"] = command;
    manifest["seed"] = seed;
    manifest["config"] = config;
    manifest["config_hash"] = hash_string(config.dump());
    json in = json::object();
    for (const std::string& p : inputs) in[p] = hash_file(p);
    manifest["input_hashes"] = in;
    json out = json::array();
    for (const std::string& p : outputs) {
      out.push_back({{"path", p}, {"hash", hash_file(p)}});
    }
    manifest["outputs"] = out;
    manifest["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    std::ofstream f(out_dir / "manifest.json", std::ios::trunc);
    f << manifest.dump(2) << "\n";
    // The resolved configuration sits beside the outputs as well.
    std::ofstream cf(out_dir / "config.json", std::ios::trunc);
    cf << config.dump(2) << "\n";
  }
};

void reject_unknown_keys(const json& config, const std::set<std::string>& known) {
  for (const auto& [key, value] : config.items()) {
    if (!known.count(key)) {
      throw ContractError("unknown config key: " + key);
    }
  }
}

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path);
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("config " + path + " is not valid JSON");
  return j;
}

std::string variable_key(const std::string& name) {
  if (name == "thickness" || name == "t") return "t";
  if (name == "intensity" || name == "i") return "i";
  if (name == "shape" || name == "y") return "y";
  throw ContractError("unknown variable '" + name + "' (expected thickness, intensity or shape)");
}

synthblob::Dataset load_split(RunContext& ctx, const std::string& data_dir,
                              const std::string& split) {
  const std::string path = (fs::path(data_dir) / (split + ".dsc")).string();
  if (!fs::exists(path)) throw std::runtime_error("missing dataset file: " + path);
  ctx.note_input(path);
  return synthblob::load_dataset(path);
}

std::shared_ptr<HvaeMechanism> load_hvae(RunContext& ctx, const std::string& path,
                                         bool use_ema = true) {
  if (!fs::exists(path)) throw std::runtime_error("missing checkpoint: " + path);
  ctx.note_input(path);
  auto mech = HvaeMechanism::from_checkpoint(load_checkpoint(path));
  if (use_ema && mech->has_ema()) mech->use_ema_parameters();
  return mech;
}

BlobScm load_scm(RunContext& ctx, const std::string& attrs_path, const std::string& hvae_path) {
  if (!fs::exists(attrs_path)) throw std::runtime_error("missing checkpoint: " + attrs_path);
  ctx.note_input(attrs_path);
  BlobScm scm;
  load_attribute_mechanisms(attrs_path, &scm);
  if (!hvae_path.empty()) scm.image_mechanism = load_hvae(ctx, hvae_path);
  return scm;
}

void write_trace_csv(const std::string& path, const std::vector<std::string>& header,
                     const std::vector<std::vector<double>>& columns) {
  std::ofstream f(path, std::ios::trunc);
  for (std::size_t c = 0; c < header.size(); ++c) f << (c ? "," : "") << header[c];
  f << "\n";
  const std::size_t rows = columns.empty() ? 0 : columns[0].size();
  char buf[64];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.10g", columns[c][r]);
      f << (c ? "," : "") << buf;
    }
    f << "\n";
  }
}

// ---- commands ---------------------------------------------------------------

int cmd_gen_data(RunContext& ctx) {
  reject_unknown_keys(ctx.config, {"n_train", "n_val", "n_test"});
  const int n_train = ctx.config.value("n_train", 20000);
  const int n_val = ctx.config.value("n_val", 2000);
  const int n_test = ctx.config.value("n_test", 2000);
  for (auto [split, count] : std::vector<std::pair<std::string, int>>{
           {"train", n_train}, {"val", n_val}, {"test", n_test}}) {
    synthblob::Dataset ds = synthblob::generate(ctx.seed, split, count);
    synthblob::save_dataset(ctx.out_file(split + ".dsc"), ds);
  }
  return 0;
}

int cmd_train_flows(RunContext& ctx, const std::string& data_dir) {
  reject_unknown_keys(ctx.config, {"epochs", "batch", "learning_rate", "spline"});
  synthblob::Dataset train = load_split(ctx, data_dir, "train");
  FlowTrainConfig cfg;
  cfg.epochs = ctx.config.value("epochs", 40);
  cfg.batch = ctx.config.value("batch", 256);
  cfg.learning_rate = ctx.config.value("learning_rate", 1e-2);
  AttributeTrainResult result =
      train_attribute_mechanisms(train, cfg, ctx.seed, ctx.config.value("spline", false));
  save_attribute_mechanisms(ctx.out_file("attrs.ckpt"), result.scm);
  {
    std::ofstream g(ctx.out_file("attribute_graph.json"), std::ios::trunc);
    g << graph_to_json(*result.scm.attribute_graph(),
                       {{"t", "flow:t"}, {"i", "flow:i"}, {"y", "gumbel:y"}})
             .dump(2)
      << "\n";
  }
  std::vector<double> epochs;
  for (std::size_t k = 0; k < result.thickness_trace.train_nll.size(); ++k) {
    epochs.push_back(static_cast<double>(k + 1));
  }
  write_trace_csv(ctx.out_file("flow_nll.csv"),
                  {"epoch", "thickness_train_nll", "thickness_val_nll", "intensity_train_nll",
                   "intensity_val_nll"},
                  {epochs, result.thickness_trace.train_nll, result.thickness_trace.val_nll,
                   result.intensity_trace.train_nll, result.intensity_trace.val_nll});
  return 0;
}

int cmd_train_hvae(RunContext& ctx, const std::string& data_dir, const std::string& variant,
                   double beta, double pi) {
  reject_unknown_keys(ctx.config,
                      {"steps", "batch", "learning_rate", "weight_decay", "layers",
                       "latent_widths", "hidden", "cond_dropout", "med_prior", "mixture_rule",
                       "grad_clip_norm", "grad_skip_norm", "val_interval"});
  synthblob::Dataset train = load_split(ctx, data_dir, "train");

  HvaeConfig cfg;
  if (variant != "exo" && variant != "med") throw ContractError("--variant must be exo or med");
  cfg.variant = variant == "med" ? HvaeVariant::Med : HvaeVariant::Exo;
  cfg.beta = beta;
  cfg.pi = pi;
  cfg.layers = ctx.config.value("layers", 3);
  if (ctx.config.contains("latent_widths")) {
    cfg.latent_widths = ctx.config.at("latent_widths").get<std::vector<std::size_t>>();
  }
  cfg.hidden = ctx.config.value("hidden", 64);
  cfg.cond_dropout = ctx.config.value("cond_dropout", 0.1);
  if (ctx.config.contains("med_prior")) {
    cfg.med_prior = ctx.config.at("med_prior") == "with_correction"
                        ? MedPrior::WithPosteriorCorrection
                        : MedPrior::WithoutPosteriorCorrection;
  }
  if (ctx.config.contains("mixture_rule")) {
    cfg.mixture_rule = ctx.config.at("mixture_rule") == "select" ? MixtureRule::Select
                                                                 : MixtureRule::Interpolate;
  }

  ParentCodec codec({{"t", VarKind::Continuous, 0, 0, 0, {}},
                     {"i", VarKind::Continuous, 0, 0, 0, {}},
                     {"y", VarKind::Categorical, synthblob::kShapes, 0, 0, {}}});
  RngStream init(ctx.seed, 31);
  auto mech = std::make_shared<HvaeMechanism>(cfg, codec, init);

  std::vector<Tensor> images;
  std::vector<std::vector<Value>> parents;
  dataset_views(train, &images, &parents);

  HvaeMechanism::TrainConfig tcfg;
  tcfg.steps = ctx.config.value("steps", 20000);
  tcfg.batch = ctx.config.value("batch", 32);
  tcfg.learning_rate = ctx.config.value("learning_rate", 1e-3);
  tcfg.weight_decay = ctx.config.value("weight_decay", 0.01);
  tcfg.grad_clip_norm = ctx.config.value("grad_clip_norm", 5000.0);
  tcfg.grad_skip_norm = ctx.config.value("grad_skip_norm", 10000.0);
  tcfg.val_interval = ctx.config.value("val_interval", 1000);
  tcfg.seed = ctx.seed;
  HvaeMechanism::TrainTrace trace = mech->train(images, parents, tcfg);
  for (const std::string& w : trace.warnings) std::cerr << "warning: " << w << "\n";

  save_checkpoint(ctx.out_file("hvae.ckpt"), mech->to_checkpoint());
  std::vector<double> steps(trace.step.begin(), trace.step.end());
  write_trace_csv(ctx.out_file("hvae_trace.csv"),
                  {"step", "train_objective", "val_objective_per_dim", "val_distortion_per_dim",
                   "val_rate_per_dim"},
                  {steps, trace.train_objective, trace.val_objective, trace.val_distortion,
                   trace.val_rate});
  return 0;
}

int cmd_train_predictors(RunContext& ctx, const std::string& data_dir) {
  reject_unknown_keys(ctx.config, {"steps", "batch", "learning_rate"});
  synthblob::Dataset train = load_split(ctx, data_dir, "train");
  std::vector<Tensor> images;
  dataset_views(train, &images, nullptr);
  auto targets = target_columns(train);
  std::vector<VariableSpec> specs{{"t", VarKind::Continuous, 0, 0, 0, {}},
                                  {"i", VarKind::Continuous, 0, 0, 0, {}},
                                  {"y", VarKind::Categorical, synthblob::kShapes, 0, 0, {}}};
  PredictorTrainConfig cfg;
  cfg.steps = ctx.config.value("steps", 9000);
  cfg.batch = ctx.config.value("batch", 64);
  cfg.learning_rate = ctx.config.value("learning_rate", 2e-3);

  // Two disjoint sets: one guides fine-tuning, the other evaluates it.
  for (auto [tag, salt] : std::vector<std::pair<std::string, std::uint64_t>>{
           {"train", 1000}, {"eval", 2000}}) {
    cfg.seed = ctx.seed + salt;
    PredictorMetrics metrics;
    PredictorSet set = train_predictors(images, targets, specs, cfg, &metrics);
    save_predictors(ctx.out_file("predictors_" + tag + ".ckpt"), set);
    std::ofstream f(ctx.out_file("predictors_" + tag + "_metrics.csv"), std::ios::trunc);
    f << "target,metric,value\n";
    char buf[64];
    for (const auto& [name, v] : metrics.mae) {
      std::snprintf(buf, sizeof(buf), "%.10g", v);
      f << name << ",mae," << buf << "\n";
    }
    for (const auto& [name, v] : metrics.accuracy) {
      std::snprintf(buf, sizeof(buf), "%.10g", v);
      f << name << ",accuracy," << buf << "\n";
    }
  }
  return 0;
}

int cmd_finetune(RunContext& ctx, const std::string& data_dir, const std::string& attrs_path,
                 const std::string& hvae_path, const std::string& predictors_path) {
  reject_unknown_keys(ctx.config, {"steps", "batch", "learning_rate", "lagrange_init",
                                   "lagrange_lr", "trace_interval"});
  synthblob::Dataset train = load_split(ctx, data_dir, "train");
  BlobScm scm = load_scm(ctx, attrs_path, "");
  // Fine-tuning continues from the raw+EMA training state.
  if (!fs::exists(hvae_path)) throw std::runtime_error("missing checkpoint: " + hvae_path);
  ctx.note_input(hvae_path);
  scm.image_mechanism = HvaeMechanism::from_checkpoint(load_checkpoint(hvae_path));
  if (!fs::exists(predictors_path)) {
    throw std::runtime_error("missing checkpoint: " + predictors_path);
  }
  ctx.note_input(predictors_path);
  PredictorSet predictors = load_predictors(predictors_path);

  CounterfactualTrainer trainer(scm.attribute_graph(), scm.image_mechanism,
                                BlobScm::image_parent_names(), BlobScm::marginal_samplers(),
                                &predictors);
  CounterfactualTrainer::FinetuneConfig cfg;
  cfg.steps = ctx.config.value("steps", 2000);
  cfg.batch = ctx.config.value("batch", 16);
  cfg.learning_rate = ctx.config.value("learning_rate", 1e-4);
  cfg.lagrange_init = ctx.config.value("lagrange_init", 10.0);
  cfg.lagrange_lr = ctx.config.value("lagrange_lr", 0.1);
  cfg.trace_interval = ctx.config.value("trace_interval", 50);
  cfg.seed = ctx.seed;
  auto pool = make_batches(train, static_cast<std::size_t>(cfg.batch));
  CounterfactualTrainer::FinetuneTrace trace = trainer.finetune(pool, cfg);
  if (!trace.constraint_satisfied) {
    std::cerr << "warning: " << trace.status << "\n";
  }

  save_checkpoint(ctx.out_file("hvae_cf.ckpt"), scm.image_mechanism->to_checkpoint());
  std::vector<double> steps(trace.step.begin(), trace.step.end());
  std::vector<double> constraint(steps.size(), trace.constraint_value);
  write_trace_csv(ctx.out_file("finetune_trace.csv"),
                  {"iteration", "loss_ct", "free_energy", "lagrange_multiplier", "constraint_c"},
                  {steps, trace.loss_ct, trace.free_energy, trace.lagrange_multiplier,
                   constraint});
  return 0;
}

int cmd_counterfactual(RunContext& ctx, const std::string& data_dir,
                       const std::string& attrs_path, const std::string& hvae_path,
                       const std::string& obs, const std::vector<std::string>& do_specs,
                       int n_samples) {
  reject_unknown_keys(ctx.config, {});
  synthblob::Dataset test = load_split(ctx, data_dir, "test");
  BlobScm scm = load_scm(ctx, attrs_path, hvae_path);
  auto graph = scm.full_graph();

  if (obs.rfind("idx=", 0) != 0) throw ContractError("--obs expects idx=<record index>");
  const std::size_t idx = std::stoul(obs.substr(4));
  if (idx >= test.records.size()) throw ContractError("--obs index out of range");
  const synthblob::Record& record = test.records[idx];

  Intervention iv;
  for (const std::string& spec : do_specs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ContractError("--do expects name=value");
    const std::string key = variable_key(spec.substr(0, eq));
    const std::string val = spec.substr(eq + 1);
    if (key == "y") {
      iv.do_hard(key, Value::category(std::stoi(val)));
    } else {
      iv.do_hard(key, Value::scalar(std::stod(val)));
    }
  }

  Evidence ev = BlobScm::full_evidence(record);
  RngStream rng(ctx.seed, 41);
  CounterfactualResult res = counterfactual_query(*graph, ev, iv, rng);
  CounterfactualMoments moments = counterfactual_moments(*graph, ev, iv, n_samples, rng);

  const int hw = synthblob::kImage;
  Tensor factual = record.image;
  Tensor cf = report_image(reshape(res.counterfactual.at("x").as_image(),
                                   {static_cast<std::size_t>(hw) * hw}),
                           hw, hw);
  Tensor effect = Tensor::zeros({static_cast<std::size_t>(hw), static_cast<std::size_t>(hw)});
  for (std::size_t k = 0; k < effect.size(); ++k) {
    // difference in [-2,2] mapped into the PGM range via 0.5x
    effect.mutable_data()[k] = 0.5 * (cf[k] - factual[k]);
  }
  Tensor uncertainty = reshape(moments.stddev.at("x"),
                               {static_cast<std::size_t>(hw), static_cast<std::size_t>(hw)});

  write_pgm(ctx.out_file("factual.pgm"), factual);
  write_pgm(ctx.out_file("counterfactual.pgm"), cf);
  write_pgm(ctx.out_file("effect.pgm"), effect);
  write_pgm_heat(ctx.out_file("uncertainty.pgm"), uncertainty, 4.0);
  write_pgm(ctx.out_file("panel.pgm"), tile_row({factual, cf, effect, uncertainty}));

  std::ofstream f(ctx.out_file("attributes.csv"), std::ios::trunc);
  f << "variable,observed,counterfactual\n";
  char buf[64];
  auto put = [&](const std::string& name, double obs_v, double cf_v) {
    std::snprintf(buf, sizeof(buf), "%.10g", obs_v);
    f << name << "," << buf;
    std::snprintf(buf, sizeof(buf), "%.10g", cf_v);
    f << "," << buf << "\n";
  };
  put("thickness", record.t, res.counterfactual.at("t").as_scalar());
  put("intensity", record.i, res.counterfactual.at("i").as_scalar());
  f << "shape," << record.y << "," << res.counterfactual.at("y").as_category() << "\n";
  return 0;
}

int cmd_evaluate(RunContext& ctx, const std::string& data_dir, const std::string& attrs_path,
                 const std::string& hvae_path, const std::string& predictors_path, int cycles,
                 int n_samples) {
  reject_unknown_keys(ctx.config, {"max_records", "panel_records"});
  synthblob::Dataset test = load_split(ctx, data_dir, "test");
  BlobScm scm = load_scm(ctx, attrs_path, hvae_path);
  std::optional<PredictorSet> predictors;
  if (!predictors_path.empty()) {
    if (!fs::exists(predictors_path)) {
      throw std::runtime_error("missing checkpoint: " + predictors_path);
    }
    ctx.note_input(predictors_path);
    predictors = load_predictors(predictors_path);
  }
  const std::size_t cap = ctx.config.value("max_records", std::size_t{500});
  std::vector<synthblob::Record> records(
      test.records.begin(), test.records.begin() + std::min(cap, test.records.size()));
  {
    std::ofstream g(ctx.out_file("graph.json"), std::ios::trunc);
    g << graph_to_json(*scm.full_graph(), {{"t", "flow:t"},
                                           {"i", "flow:i"},
                                           {"y", "gumbel:y"},
                                           {"x", "hvae:x"}})
             .dump(2)
      << "\n";
  }

  CompositionCurve comp = eval_composition(*scm.image_mechanism, records, cycles, ctx.seed);
  std::vector<double> cyc(comp.cycle.begin(), comp.cycle.end());
  write_trace_csv(ctx.out_file("composition.csv"), {"cycle", "l1_per_pixel"},
                  {cyc, comp.l1_per_pixel});

  EvalReport report = eval_effectiveness(
      scm, records,
      {InterventionKind::Thickness, InterventionKind::Intensity, InterventionKind::Shape,
       InterventionKind::Mixed},
      predictors ? &*predictors : nullptr, ctx.seed);
  report.write_csv_dir((ctx.out_dir / "effectiveness").string());
  ctx.outputs.push_back((ctx.out_dir / "effectiveness" / "report.csv").string());

  CompositionCurve rev = eval_reversibility(scm, records, cycles, ctx.seed);
  std::vector<double> rcyc(rev.cycle.begin(), rev.cycle.end());
  write_trace_csv(ctx.out_file("reversibility.csv"), {"cycle", "l1_per_pixel"},
                  {rcyc, rev.l1_per_pixel});

  // Objective on the evaluated records in nats/dim plus the bpd conversion.
  {
    std::vector<std::vector<Value>> parents;
    const std::size_t d = scm.image_mechanism->config().pixels();
    Tensor x = Tensor::zeros({records.size(), d});
    for (std::size_t k = 0; k < records.size(); ++k) {
      std::copy(records[k].image.data(), records[k].image.data() + d, x.mutable_data() + k * d);
      parents.push_back(BlobScm::image_parents(records[k]));
    }
    RngStream rng(ctx.seed, 55);
    ElboParts parts = scm.image_mechanism->elbo(
        x, scm.image_mechanism->codec().encode_batch(parents), rng,
        scm.image_mechanism->config().beta);
    const double per_dim = parts.objective.item() / static_cast<double>(d);
    write_trace_csv(ctx.out_file("bpd.csv"), {"objective_nats_per_dim", "bpd"},
                    {{per_dim}, {bits_per_dim(per_dim, 1)}});
  }

  // Inspection panels: factual | counterfactual | effect | uncertainty.
  const std::size_t panels =
      std::min<std::size_t>(ctx.config.value("panel_records", std::size_t{4}), records.size());
  auto graph = scm.full_graph();
  for (std::size_t k = 0; k < panels; ++k) {
    RngStream rng(ctx.seed, 7000 + k);
    Intervention iv;
    iv.do_hard("t", BlobScm::sample_marginal("t", rng));
    Evidence ev = BlobScm::full_evidence(records[k]);
    CounterfactualResult res = counterfactual_query(*graph, ev, iv, rng);
    CounterfactualMoments moments = counterfactual_moments(*graph, ev, iv, n_samples, rng);
    const int hw = synthblob::kImage;
    Tensor cf = report_image(reshape(res.counterfactual.at("x").as_image(),
                                     {static_cast<std::size_t>(hw) * hw}),
                             hw, hw);
    Tensor effect = Tensor::zeros({static_cast<std::size_t>(hw), static_cast<std::size_t>(hw)});
    for (std::size_t j = 0; j < effect.size(); ++j) {
      effect.mutable_data()[j] = 0.5 * (cf[j] - records[k].image[j]);
    }
    Tensor unc = reshape(moments.stddev.at("x"),
                         {static_cast<std::size_t>(hw), static_cast<std::size_t>(hw)});
    write_pgm(ctx.out_file("panel_" + std::to_string(k) + ".pgm"),
              tile_row({records[k].image, cf, effect, unc}));
  }
  return 0;
}

int cmd_sample(RunContext& ctx, const std::string& attrs_path, const std::string& hvae_path,
               int n, double temperature) {
  reject_unknown_keys(ctx.config, {});
  BlobScm scm = load_scm(ctx, attrs_path, hvae_path);
  auto graph = scm.full_graph();
  RngStream rng(ctx.seed, 61);
  std::vector<Evidence> draws = sample_observational(*graph, rng, n);

  std::vector<Tensor> images;
  std::ofstream f(ctx.out_file("samples.csv"), std::ios::trunc);
  f << "index,thickness,intensity,shape\n";
  char buf[64];
  for (int k = 0; k < n; ++k) {
    // re-render through the prior at the requested temperature
    RngStream srng(ctx.seed, 6200 + static_cast<std::uint64_t>(k));
    std::vector<Value> pa{draws[k].at("t"), draws[k].at("i"), draws[k].at("y")};
    HvaePass pass = scm.image_mechanism->sample_prior(
        scm.image_mechanism->encode_parents(pa), temperature, srng);
    Tensor eps = Tensor::randn(pass.mu_x.shape(), srng);
    Tensor x = add(pass.mu_x, mul(scale(pass.sigma_x, temperature), eps));
    images.push_back(report_image(x, synthblob::kImage, synthblob::kImage));
    f << k << ",";
    std::snprintf(buf, sizeof(buf), "%.10g", draws[k].at("t").as_scalar());
    f << buf << ",";
    std::snprintf(buf, sizeof(buf), "%.10g", draws[k].at("i").as_scalar());
    f << buf << "," << draws[k].at("y").as_category() << "\n";
  }
  f.close();
  write_pgm(ctx.out_file("samples.pgm"), tile_row(images));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep structural causal model toolkit"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir = ".", attrs_path, hvae_path, predictors_path;
  std::string variant = "exo", obs;
  std::uint64_t seed = 0;
  double beta = 1.0, pi = 0.5, temperature = 1.0;
  int cycles = 5, n_samples = 32, n = 16;
  std::vector<std::string> do_specs;

  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--seed", seed, "base random seed");
  app.add_option("--out", out_dir, "output directory");

  auto* gen = app.add_subcommand("gen-data", "generate synthetic datasets");
  auto* flows = app.add_subcommand("train-flows", "fit the attribute mechanisms");
  flows->add_option("--data", data_dir, "dataset directory")->required();
  auto* hvae = app.add_subcommand("train-hvae", "fit the image mechanism");
  hvae->add_option("--data", data_dir, "dataset directory")->required();
  hvae->add_option("--variant", variant, "exo|med");
  hvae->add_option("--beta", beta, "KL weight");
  hvae->add_option("--pi", pi, "counterfactual mixture weight");
  auto* preds = app.add_subcommand("train-predictors", "fit anticausal parent predictors");
  preds->add_option("--data", data_dir, "dataset directory")->required();
  auto* ft = app.add_subcommand("finetune-cf", "constrained counterfactual fine-tune");
  ft->add_option("--data", data_dir, "dataset directory")->required();
  ft->add_option("--attrs", attrs_path, "attribute mechanisms checkpoint")->required();
  ft->add_option("--hvae", hvae_path, "image mechanism checkpoint")->required();
  ft->add_option("--predictors", predictors_path, "predictor checkpoint")->required();
  auto* cf = app.add_subcommand("counterfactual", "abduction-action-prediction query");
  cf->add_option("--data", data_dir, "dataset directory")->required();
  cf->add_option("--attrs", attrs_path, "attribute mechanisms checkpoint")->required();
  cf->add_option("--hvae", hvae_path, "image mechanism checkpoint")->required();
  cf->add_option("--obs", obs, "observation, idx=<record>")->required();
  cf->add_option("--do", do_specs, "intervention name=value (repeatable)");
  cf->add_option("--samples", n_samples, "posterior resamples for uncertainty");
  auto* ev = app.add_subcommand("evaluate", "axiomatic counterfactual evaluation");
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--attrs", attrs_path, "attribute mechanisms checkpoint")->required();
  ev->add_option("--hvae", hvae_path, "image mechanism checkpoint")->required();
  ev->add_option("--predictors", predictors_path, "held-out predictor checkpoint");
  ev->add_option("--cycles", cycles, "composition/reversibility cycles");
  ev->add_option("--samples", n_samples, "posterior resamples for uncertainty");
  auto* sample = app.add_subcommand("sample", "ancestral sampling from the SCM");
  sample->add_option("--attrs", attrs_path, "attribute mechanisms checkpoint")->required();
  sample->add_option("--hvae", hvae_path, "image mechanism checkpoint")->required();
  sample->add_option("--n", n, "number of samples");
  sample->add_option("--temperature", temperature, "prior sampling temperature");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage errors
  }

  RunContext ctx;
  ctx.seed = seed;
  ctx.out_dir = out_dir;
  try {
    ctx.config = load_config_file(config_path);
    int rc = 1;
    if (gen->parsed()) {
      ctx.command = "gen-data";
      rc = cmd_gen_data(ctx);
    } else if (flows->parsed()) {
      ctx.command = "train-flows";
      rc = cmd_train_flows(ctx, data_dir);
    } else if (hvae->parsed()) {
      ctx.command = "train-hvae";
      rc = cmd_train_hvae(ctx, data_dir, variant, beta, pi);
    } else if (preds->parsed()) {
      ctx.command = "train-predictors";
      rc = cmd_train_predictors(ctx, data_dir);
    } else if (ft->parsed()) {
      ctx.command = "finetune-cf";
      rc = cmd_finetune(ctx, data_dir, attrs_path, hvae_path, predictors_path);
    } else if (cf->parsed()) {
      ctx.command = "counterfactual";
      rc = cmd_counterfactual(ctx, data_dir, attrs_path, hvae_path, obs, do_specs, n_samples);
    } else if (ev->parsed()) {
      ctx.command = "evaluate";
      rc = cmd_evaluate(ctx, data_dir, attrs_path, hvae_path, predictors_path, cycles, n_samples);
    } else if (sample->parsed()) {
      ctx.command = "sample";
      rc = cmd_sample(ctx, attrs_path, hvae_path, n, temperature);
    }
    if (rc == 0) ctx.write_manifest();
    return rc;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
