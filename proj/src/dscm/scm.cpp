#include "dscm/scm.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace dscm {

// ---- Value -----------------------------------------------------------------

Value Value::scalar(double v) {
  Value out;
  out.kind_ = VarKind::Continuous;
  out.scalar_ = v;
  return out;
}

Value Value::category(int k) {
  Value out;
  out.kind_ = VarKind::Categorical;
  out.category_ = k;
  return out;
}

Value Value::image(Tensor t) {
  Value out;
  out.kind_ = VarKind::Image;
  out.image_ = std::move(t);
  return out;
}

double Value::as_scalar() const {
  if (kind_ != VarKind::Continuous) throw ContractError("value is not a scalar");
  return scalar_;
}

int Value::as_category() const {
  if (kind_ != VarKind::Categorical) throw ContractError("value is not categorical");
  return category_;
}

const Tensor& Value::as_image() const {
  if (kind_ != VarKind::Image) throw ContractError("value is not an image");
  return image_;
}

bool Value::matches(const VariableSpec& spec) const {
  if (kind_ != spec.kind) return false;
  if (kind_ == VarKind::Categorical) {
    return category_ >= 0 && category_ < spec.categories;
  }
  if (kind_ == VarKind::Image) {
    return image_.defined() &&
           image_.size() == static_cast<std::size_t>(spec.height) * spec.width;
  }
  return true;
}

bool Value::identical(const Value& other) const {
  if (kind_ != other.kind_) return false;
  switch (kind_) {
    case VarKind::Continuous:
      return scalar_ == other.scalar_;
    case VarKind::Categorical:
      return category_ == other.category_;
    case VarKind::Image: {
      if (!image_.same_shape(other.image_)) return false;
      for (std::size_t i = 0; i < image_.size(); ++i) {
        if (image_[i] != other.image_[i]) return false;
      }
      return true;
    }
  }
  return false;
}

// ---- Intervention ------------------------------------------------------------

Intervention& Intervention::do_hard(const std::string& name, Value v) {
  if (find(name)) throw ContractError("duplicate intervention on " + name);
  entries.push_back(Entry{Entry::Type::Hard, name, std::move(v), nullptr});
  return *this;
}

Intervention& Intervention::do_soft(const std::string& name, std::shared_ptr<Mechanism> m) {
  if (find(name)) throw ContractError("duplicate intervention on " + name);
  entries.push_back(Entry{Entry::Type::Soft, name, Value{}, std::move(m)});
  return *this;
}

const Intervention::Entry* Intervention::find(const std::string& name) const {
  for (const Entry& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

// ---- CausalGraph ---------------------------------------------------------------

void CausalGraph::add_variable(VariableSpec spec) {
  if (index_.count(spec.name)) throw ContractError("duplicate variable: " + spec.name);
  index_[spec.name] = specs_.size();
  specs_.push_back(std::move(spec));
  validated_ = false;
}

void CausalGraph::bind(const std::string& name, std::shared_ptr<Mechanism> mechanism) {
  if (!index_.count(name)) throw ContractError("bind: unknown variable " + name);
  mechanisms_[name] = std::move(mechanism);
  validated_ = false;
}

void CausalGraph::validate() {
  for (const VariableSpec& spec : specs_) {
    for (const std::string& p : spec.parents) {
      if (!index_.count(p)) {
        throw ContractError("variable " + spec.name + " references undeclared parent " + p);
      }
      if (p == spec.name) {
        throw ContractError("cycle detected: self-loop on edge (" + spec.name + "," + spec.name + ")");
      }
    }
    if (!mechanisms_.count(spec.name) || !mechanisms_.at(spec.name)) {
      throw ContractError("variable " + spec.name + " has no bound mechanism");
    }
  }

  // Kahn's algorithm; among ready nodes always pick the earliest declared,
  // which makes the order deterministic.
  std::map<std::string, int> remaining;
  for (const VariableSpec& spec : specs_) remaining[spec.name] = static_cast<int>(spec.parents.size());
  topo_.clear();
  std::vector<bool> done(specs_.size(), false);
  for (std::size_t step = 0; step < specs_.size(); ++step) {
    int pick = -1;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      if (!done[i] && remaining[specs_[i].name] == 0) {
        pick = static_cast<int>(i);
        break;
      }
    }
    if (pick < 0) {
      // Some edge inside the leftover set closes a cycle; report one.
      for (std::size_t i = 0; i < specs_.size(); ++i) {
        if (done[i]) continue;
        for (const std::string& p : specs_[i].parents) {
          if (!done[index_.at(p)]) {
            throw ContractError("cycle detected: back-edge (" + p + "," + specs_[i].name + ")");
          }
        }
      }
      throw ContractError("cycle detected");
    }
    done[pick] = true;
    topo_.push_back(specs_[pick].name);
    for (const VariableSpec& spec : specs_) {
      if (std::find(spec.parents.begin(), spec.parents.end(), specs_[pick].name) !=
          spec.parents.end()) {
        remaining[spec.name] -= 1;
      }
    }
  }
  validated_ = true;
}

const VariableSpec& CausalGraph::spec(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown variable: " + name);
  return specs_[it->second];
}

const Mechanism& CausalGraph::mechanism(const std::string& name) const {
  auto it = mechanisms_.find(name);
  if (it == mechanisms_.end() || !it->second) {
    throw ContractError("variable " + name + " has no bound mechanism");
  }
  return *it->second;
}

std::shared_ptr<Mechanism> CausalGraph::mechanism_ptr(const std::string& name) const {
  auto it = mechanisms_.find(name);
  if (it == mechanisms_.end()) throw ContractError("variable " + name + " has no bound mechanism");
  return it->second;
}

const std::vector<std::string>& CausalGraph::topological_order() const {
  if (!validated_) throw ContractError("graph not validated");
  return topo_;
}

bool CausalGraph::is_descendant(const std::string& name, const std::string& ancestor) const {
  if (name == ancestor) return false;
  std::set<std::string> reached{ancestor};
  bool grew = true;
  while (grew) {
    grew = false;
    for (const VariableSpec& spec : specs_) {
      if (reached.count(spec.name)) continue;
      for (const std::string& p : spec.parents) {
        if (reached.count(p)) {
          reached.insert(spec.name);
          grew = true;
          break;
        }
      }
    }
  }
  return reached.count(name) > 0;
}

// ---- engine ---------------------------------------------------------------------

namespace {

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<Value> gather_parents(const CausalGraph& graph, const std::string& name,
                                  const Evidence& values) {
  std::vector<Value> out;
  for (const std::string& p : graph.spec(name).parents) out.push_back(values.at(p));
  return out;
}

bool parents_identical(const std::vector<Value>& a, const std::vector<Value>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].identical(b[i])) return false;
  }
  return true;
}

void check_complete_evidence(const CausalGraph& graph, const Evidence& evidence) {
  std::vector<std::string> missing;
  for (const VariableSpec& spec : graph.variables()) {
    auto it = evidence.find(spec.name);
    if (it == evidence.end()) {
      missing.push_back(spec.name);
    } else if (!it->second.matches(spec)) {
      throw ContractError("evidence for " + spec.name + " does not match its declared kind");
    }
  }
  if (!missing.empty()) {
    std::ostringstream os;
    os << "incomplete evidence; missing:";
    for (const std::string& m : missing) os << " " << m;
    throw ContractError(os.str());
  }
}

// Difference-compensated counterfactual value: obs + (f(cf) - f(obs)) equals
// f(cf) up to floating-point noise, and is exactly obs when the counterfactual
// parents are unchanged. Only valid for exact-reconstruction mechanisms.
Value compensated_forward(const Mechanism& mech, const VariableSpec& spec, const Value& observed,
                          const std::vector<Value>& obs_parents,
                          const std::vector<Value>& cf_parents, const NoiseRecord& noise) {
  if (parents_identical(obs_parents, cf_parents)) return observed;
  Value cf = mech.forward(cf_parents, noise);
  if (spec.kind == VarKind::Categorical) return cf;
  Value base = mech.forward(obs_parents, noise);
  if (spec.kind == VarKind::Continuous) {
    return Value::scalar(observed.as_scalar() + (cf.as_scalar() - base.as_scalar()));
  }
  const Tensor& o = observed.as_image();
  const Tensor& c = cf.as_image();
  const Tensor& b = base.as_image();
  Tensor out = Tensor::zeros(o.shape());
  for (std::size_t i = 0; i < o.size(); ++i) {
    out.mutable_data()[i] = o[i] + (c[i] - b[i]);
  }
  return Value::image(std::move(out));
}

}  // namespace

std::vector<Evidence> sample_observational(const CausalGraph& graph, RngStream& rng, int n,
                                           std::vector<WorldSample>* worlds) {
  if (!graph.validated()) throw ContractError("graph not validated");
  if (n < 0) throw ContractError("negative sample count");
  std::vector<Evidence> out;
  for (int i = 0; i < n; ++i) {
    RngStream record_rng = rng.substream(static_cast<std::uint64_t>(i));
    Evidence record;
    WorldSample world;
    for (const std::string& name : graph.topological_order()) {
      RngStream var_rng = record_rng.substream(name_hash(name));
      NoiseRecord noise;
      try {
        record[name] = graph.mechanism(name).sample(gather_parents(graph, name, record), var_rng,
                                                    &noise);
      } catch (const std::exception& e) {
        throw std::runtime_error("sampling " + name + ": " + e.what());
      }
      world.noise[name] = std::move(noise);
    }
    out.push_back(std::move(record));
    if (worlds) worlds->push_back(std::move(world));
  }
  return out;
}

WorldSample abduce_world(const CausalGraph& graph, const Evidence& evidence, RngStream& rng) {
  if (!graph.validated()) throw ContractError("graph not validated");
  check_complete_evidence(graph, evidence);
  WorldSample world;
  for (const std::string& name : graph.topological_order()) {
    // Noise of intervened-upon variables is abducted as well (retained but
    // unused), so successive interventions on one world are well-defined.
    RngStream var_rng = rng.substream(name_hash(name));
    world.noise[name] = graph.mechanism(name).abduct(evidence.at(name),
                                                     gather_parents(graph, name, evidence), var_rng);
  }
  return world;
}

Evidence predict_with_world(const CausalGraph& graph, const Evidence& evidence,
                            const Intervention& intervention, const WorldSample& world) {
  if (!graph.validated()) throw ContractError("graph not validated");
  check_complete_evidence(graph, evidence);
  for (const auto& e : intervention.entries) {
    const VariableSpec& spec = graph.spec(e.name);
    if (e.type == Intervention::Entry::Type::Hard && !e.constant.matches(spec)) {
      throw ContractError("intervention constant for " + e.name + " does not match its kind");
    }
  }

  Evidence result;
  for (const std::string& name : graph.topological_order()) {
    const Intervention::Entry* entry = intervention.find(name);
    if (entry && entry->type == Intervention::Entry::Type::Hard) {
      result[name] = entry->constant;
      continue;
    }
    std::vector<Value> cf_parents = gather_parents(graph, name, result);
    if (entry && entry->type == Intervention::Entry::Type::Soft) {
      auto it = world.noise.find("do:" + name);
      if (it == world.noise.end()) {
        throw ContractError("soft intervention on " + name +
                            " requires a world sampled with this intervention");
      }
      result[name] = entry->replacement->forward(cf_parents, it->second);
      continue;
    }
    const Mechanism& mech = graph.mechanism(name);
    const NoiseRecord& noise = world.noise.at(name);
    std::vector<Value> obs_parents = gather_parents(graph, name, evidence);
    if (mech.exact_reconstruction()) {
      result[name] = compensated_forward(mech, graph.spec(name), evidence.at(name), obs_parents,
                                         cf_parents, noise);
    } else {
      result[name] = mech.forward(cf_parents, noise);
    }
  }
  return result;
}

CounterfactualResult counterfactual_query(const CausalGraph& graph, const Evidence& evidence,
                                          const Intervention& intervention, RngStream& rng) {
  WorldSample world = abduce_world(graph, evidence, rng);
  // Soft interventions carry fresh replacement noise, fixed per world.
  for (const auto& e : intervention.entries) {
    if (e.type == Intervention::Entry::Type::Soft) {
      RngStream soft_rng = rng.substream(name_hash("do:" + e.name));
      NoiseRecord noise;
      e.replacement->sample(gather_parents(graph, e.name, evidence), soft_rng, &noise);
      world.noise["do:" + e.name] = std::move(noise);
    }
  }
  Evidence cf = predict_with_world(graph, evidence, intervention, world);
  return CounterfactualResult{std::move(cf), std::move(world)};
}

namespace {

std::vector<double> value_as_flat(const Value& v) {
  switch (v.kind()) {
    case VarKind::Continuous:
      return {v.as_scalar()};
    case VarKind::Categorical:
      return {static_cast<double>(v.as_category())};
    case VarKind::Image:
      return v.as_image().values();
  }
  return {};
}

}  // namespace

CounterfactualMoments counterfactual_moments(const CausalGraph& graph, const Evidence& evidence,
                                             const Intervention& intervention, int n_samples,
                                             RngStream& rng) {
  if (n_samples < 1) throw ContractError("counterfactual_moments requires n_samples >= 1");

  // Deterministic abductions are shared across repeats; stochastic ones are
  // redrawn with independent substreams per repeat.
  RngStream base_rng = rng.substream(0);
  WorldSample base = abduce_world(graph, evidence, base_rng);
  std::map<std::string, std::vector<double>> sum, sumsq;
  std::map<std::string, Shape> shapes;

  for (int s = 0; s < n_samples; ++s) {
    WorldSample world = base;
    RngStream repeat_rng = rng.substream(1 + static_cast<std::uint64_t>(s));
    for (const std::string& name : graph.topological_order()) {
      const Mechanism& mech = graph.mechanism(name);
      if (mech.stochastic_abduction()) {
        RngStream var_rng = repeat_rng.substream(name_hash(name));
        world.noise[name] =
            mech.abduct(evidence.at(name), gather_parents(graph, name, evidence), var_rng);
      }
    }
    for (const auto& e : intervention.entries) {
      if (e.type == Intervention::Entry::Type::Soft) {
        RngStream soft_rng = repeat_rng.substream(name_hash("do:" + e.name));
        NoiseRecord noise;
        e.replacement->sample(gather_parents(graph, e.name, evidence), soft_rng, &noise);
        world.noise["do:" + e.name] = std::move(noise);
      }
    }
    Evidence cf = predict_with_world(graph, evidence, intervention, world);
    for (const auto& [name, value] : cf) {
      std::vector<double> flat = value_as_flat(value);
      auto& acc = sum[name];
      auto& acc2 = sumsq[name];
      if (acc.empty()) {
        acc.assign(flat.size(), 0.0);
        acc2.assign(flat.size(), 0.0);
        shapes[name] = value.kind() == VarKind::Image ? value.as_image().shape() : Shape{1};
      }
      for (std::size_t i = 0; i < flat.size(); ++i) {
        acc[i] += flat[i];
        acc2[i] += flat[i] * flat[i];
      }
    }
  }

  CounterfactualMoments out;
  for (auto& [name, acc] : sum) {
    const double n = static_cast<double>(n_samples);
    std::vector<double> mean(acc.size()), sd(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
      mean[i] = acc[i] / n;
      double var = sumsq[name][i] / n - mean[i] * mean[i];
      sd[i] = var > 0.0 ? std::sqrt(var) : 0.0;
    }
    out.mean[name] = Tensor::from_data(shapes[name], std::move(mean));
    out.stddev[name] = Tensor::from_data(shapes[name], std::move(sd));
  }
  return out;
}

// ---- JSON graph description -----------------------------------------------------

namespace {

VarKind kind_from_string(const std::string& s) {
  if (s == "continuous") return VarKind::Continuous;
  if (s == "categorical") return VarKind::Categorical;
  if (s == "image") return VarKind::Image;
  throw ContractError("unknown variable kind: " + s);
}

std::string kind_to_string(VarKind k) {
  switch (k) {
    case VarKind::Continuous:
      return "continuous";
    case VarKind::Categorical:
      return "categorical";
    case VarKind::Image:
      return "image";
  }
  return "?";
}

}  // namespace

CausalGraph graph_from_json(const nlohmann::json& doc, const MechanismResolver& resolver) {
  CausalGraph graph;
  std::vector<std::pair<std::string, std::string>> bindings;
  for (const auto& v : doc.at("variables")) {
    VariableSpec spec;
    spec.name = v.at("name").get<std::string>();
    spec.kind = kind_from_string(v.at("kind").get<std::string>());
    if (spec.kind == VarKind::Categorical) spec.categories = v.at("categories").get<int>();
    if (spec.kind == VarKind::Image) {
      spec.height = v.at("height").get<int>();
      spec.width = v.at("width").get<int>();
    }
    for (const auto& p : v.value("parents", nlohmann::json::array())) {
      spec.parents.push_back(p.get<std::string>());
    }
    bindings.emplace_back(spec.name, v.at("mechanism").get<std::string>());
    graph.add_variable(std::move(spec));
  }
  for (const auto& [name, binding] : bindings) {
    graph.bind(name, resolver(binding, graph.spec(name)));
  }
  graph.validate();
  return graph;
}

nlohmann::json graph_to_json(const CausalGraph& graph,
                             const std::map<std::string, std::string>& bindings) {
  nlohmann::json doc;
  doc["variables"] = nlohmann::json::array();
  for (const VariableSpec& spec : graph.variables()) {
    nlohmann::json v;
    v["name"] = spec.name;
    v["kind"] = kind_to_string(spec.kind);
    if (spec.kind == VarKind::Categorical) v["categories"] = spec.categories;
    if (spec.kind == VarKind::Image) {
      v["height"] = spec.height;
      v["width"] = spec.width;
    }
    v["parents"] = spec.parents;
    v["mechanism"] = bindings.at(spec.name);
    doc["variables"].push_back(v);
  }
  return doc;
}

}  // namespace dscm
