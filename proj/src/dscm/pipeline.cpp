#include "dscm/pipeline.hpp"

namespace dscm {

namespace sb = synthblob;

namespace {

VariableSpec spec_t() { return {"t", VarKind::Continuous, 0, 0, 0, {}}; }
VariableSpec spec_i() { return {"i", VarKind::Continuous, 0, 0, 0, {"t"}}; }
VariableSpec spec_y() { return {"y", VarKind::Categorical, sb::kShapes, 0, 0, {}}; }
VariableSpec spec_x() {
  return {"x", VarKind::Image, 0, sb::kImage, sb::kImage, {"t", "i", "y"}};
}

}  // namespace

const std::vector<std::string>& BlobScm::image_parent_names() {
  static const std::vector<std::string> names{"t", "i", "y"};
  return names;
}

std::shared_ptr<CausalGraph> BlobScm::attribute_graph() const {
  auto graph = std::make_shared<CausalGraph>();
  graph->add_variable(spec_t());
  graph->add_variable(spec_i());
  graph->add_variable(spec_y());
  graph->bind("t", flow_as_mechanism(thickness_flow));
  graph->bind("i", flow_as_mechanism(intensity_flow));
  graph->bind("y", gumbel_as_mechanism(shape_mechanism));
  graph->validate();
  return graph;
}

std::shared_ptr<CausalGraph> BlobScm::full_graph() const {
  if (!image_mechanism) throw ContractError("full graph requires a trained image mechanism");
  auto graph = std::make_shared<CausalGraph>();
  graph->add_variable(spec_t());
  graph->add_variable(spec_i());
  graph->add_variable(spec_y());
  graph->add_variable(spec_x());
  graph->bind("t", flow_as_mechanism(thickness_flow));
  graph->bind("i", flow_as_mechanism(intensity_flow));
  graph->bind("y", gumbel_as_mechanism(shape_mechanism));
  graph->bind("x", hvae_as_mechanism(image_mechanism));
  graph->validate();
  return graph;
}

Evidence BlobScm::attribute_evidence(const sb::Record& r) {
  return {{"t", Value::scalar(r.t)}, {"i", Value::scalar(r.i)}, {"y", Value::category(r.y)}};
}

Evidence BlobScm::full_evidence(const sb::Record& r) {
  Evidence ev = attribute_evidence(r);
  ev["x"] = Value::image(r.image);
  return ev;
}

std::vector<Value> BlobScm::image_parents(const sb::Record& r) {
  return {Value::scalar(r.t), Value::scalar(r.i), Value::category(r.y)};
}

Value BlobScm::sample_marginal(const std::string& name, RngStream& rng) {
  if (name == "t") return Value::scalar(sb::sample_thickness_marginal(rng));
  if (name == "i") return Value::scalar(sb::sample_intensity_marginal(rng));
  if (name == "y") return Value::category(sb::sample_shape_marginal(rng));
  throw ContractError("no marginal for variable " + name);
}

std::map<std::string, CounterfactualTrainer::MarginalSampler> BlobScm::marginal_samplers() {
  std::map<std::string, CounterfactualTrainer::MarginalSampler> out;
  for (const std::string& name : image_parent_names()) {
    out[name] = [name](RngStream& rng) { return sample_marginal(name, rng); };
  }
  return out;
}

AttributeTrainResult train_attribute_mechanisms(const sb::Dataset& data,
                                                const FlowTrainConfig& cfg, std::uint64_t seed,
                                                bool spline) {
  AttributeTrainResult out;
  RngStream init(seed, 1);

  FlowConfig tcfg;
  tcfg.use_spline = spline;
  out.scm.thickness_flow = std::make_shared<ConditionalFlow>(tcfg, ParentCodec{}, init);

  FlowConfig icfg;
  icfg.bounded = true;
  icfg.support_lo = 0.0;
  icfg.support_hi = sb::kIntensityMax;
  icfg.use_spline = spline;
  out.scm.intensity_flow =
      std::make_shared<ConditionalFlow>(icfg, ParentCodec({spec_t()}), init);

  out.scm.shape_mechanism = std::make_shared<GumbelMechanism>(sb::kShapes, ParentCodec{}, init);

  std::vector<double> t_vals, i_vals;
  std::vector<std::vector<Value>> no_parents, t_parents;
  std::vector<int> y_vals;
  for (const sb::Record& r : data.records) {
    t_vals.push_back(r.t);
    i_vals.push_back(r.i);
    y_vals.push_back(r.y);
    no_parents.push_back({});
    t_parents.push_back({Value::scalar(r.t)});
  }

  RngStream t_rng(seed, 2), i_rng(seed, 3), y_rng(seed, 4);
  out.thickness_trace = out.scm.thickness_flow->train(no_parents, t_vals, cfg, t_rng);
  out.intensity_trace = out.scm.intensity_flow->train(t_parents, i_vals, cfg, i_rng);
  GumbelMechanism::TrainConfig gcfg;
  out.shape_trace = out.scm.shape_mechanism->train(no_parents, y_vals, gcfg, y_rng);
  return out;
}

void save_attribute_mechanisms(const std::string& path, const BlobScm& scm) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "blob_attributes";
  ckpt.meta["thickness"] = {{"config", scm.thickness_flow->config_json()},
                            {"codec", scm.thickness_flow->codec().to_json()}};
  ckpt.meta["intensity"] = {{"config", scm.intensity_flow->config_json()},
                            {"codec", scm.intensity_flow->codec().to_json()}};
  ckpt.meta["shape"] = {{"categories", scm.shape_mechanism->categories()},
                        {"codec", scm.shape_mechanism->codec().to_json()}};
  ckpt.add_store("t/", scm.thickness_flow->params());
  ckpt.add_store("i/", scm.intensity_flow->params());
  ckpt.add_store("y/", scm.shape_mechanism->params());
  save_checkpoint(path, ckpt);
}

void load_attribute_mechanisms(const std::string& path, BlobScm* scm) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "blob_attributes") {
    throw CheckpointError(path + ": not an attribute-mechanism checkpoint");
  }
  RngStream init(0);
  scm->thickness_flow = std::make_shared<ConditionalFlow>(
      ConditionalFlow::config_from_json(ckpt.meta.at("thickness").at("config")),
      ParentCodec::from_json(ckpt.meta.at("thickness").at("codec")), init);
  scm->intensity_flow = std::make_shared<ConditionalFlow>(
      ConditionalFlow::config_from_json(ckpt.meta.at("intensity").at("config")),
      ParentCodec::from_json(ckpt.meta.at("intensity").at("codec")), init);
  scm->shape_mechanism = std::make_shared<GumbelMechanism>(
      ckpt.meta.at("shape").at("categories").get<int>(),
      ParentCodec::from_json(ckpt.meta.at("shape").at("codec")), init);
  ckpt.load_store("t/", scm->thickness_flow->params());
  ckpt.load_store("i/", scm->intensity_flow->params());
  ckpt.load_store("y/", scm->shape_mechanism->params());
}

void dataset_views(const sb::Dataset& data, std::vector<Tensor>* images,
                   std::vector<std::vector<Value>>* parents) {
  for (const sb::Record& r : data.records) {
    if (images) images->push_back(reshape(r.image, {1, r.image.size()}));
    if (parents) parents->push_back(BlobScm::image_parents(r));
  }
}

std::map<std::string, std::vector<Value>> target_columns(const sb::Dataset& data) {
  std::map<std::string, std::vector<Value>> out;
  for (const sb::Record& r : data.records) {
    out["t"].push_back(Value::scalar(r.t));
    out["i"].push_back(Value::scalar(r.i));
    out["y"].push_back(Value::category(r.y));
  }
  return out;
}

std::vector<CounterfactualTrainer::Batch> make_batches(const sb::Dataset& data,
                                                       std::size_t batch) {
  std::vector<CounterfactualTrainer::Batch> out;
  CounterfactualTrainer::Batch current;
  for (const sb::Record& r : data.records) {
    current.images.push_back(reshape(r.image, {1, r.image.size()}));
    current.attribute_evidence.push_back(BlobScm::attribute_evidence(r));
    if (current.images.size() == batch) {
      out.push_back(std::move(current));
      current = {};
    }
  }
  if (!current.images.empty()) out.push_back(std::move(current));
  return out;
}

}  // namespace dscm
