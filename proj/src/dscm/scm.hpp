#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dscm/rng.hpp"
#include "dscm/tensor.hpp"

namespace dscm {

enum class VarKind { Continuous, Categorical, Image };

struct VariableSpec {
  std::string name;
  VarKind kind = VarKind::Continuous;
  int categories = 0;  // Categorical
  int height = 0, width = 0;  // Image
  std::vector<std::string> parents;  // ordered
};

// Value of one endogenous variable.
class Value {
 public:
  Value() = default;
  static Value scalar(double v);
  static Value category(int k);
  static Value image(Tensor t);

  VarKind kind() const { return kind_; }
  double as_scalar() const;
  int as_category() const;
  const Tensor& as_image() const;

  bool matches(const VariableSpec& spec) const;
  bool identical(const Value& other) const;  // bit-level comparison

 private:
  VarKind kind_ = VarKind::Continuous;
  double scalar_ = 0.0;
  int category_ = 0;
  Tensor image_;
};

using Evidence = std::map<std::string, Value>;
// Exogenous noise for one variable, named fields (e.g. "u", "eps", "z1").
using NoiseRecord = std::map<std::string, Tensor>;

// A realization of all exogenous noise: one causal world.
struct WorldSample {
  std::map<std::string, NoiseRecord> noise;
};

// Behavioral contract of a structural assignment x := f(pa, u).
class Mechanism {
 public:
  virtual ~Mechanism() = default;

  virtual Value sample(const std::vector<Value>& parents, RngStream& rng,
                       NoiseRecord* noise_out) const = 0;
  virtual NoiseRecord abduct(const Value& value, const std::vector<Value>& parents,
                             RngStream& rng) const = 0;
  virtual Value forward(const std::vector<Value>& parents, const NoiseRecord& noise) const = 0;

  // True when abduction draws fresh randomness per call (the posterior is a
  // distribution rather than a point).
  virtual bool stochastic_abduction() const = 0;
  // True when forward(parents, abduct(value, parents)) reproduces the value
  // exactly, enabling exact null-intervention composition.
  virtual bool exact_reconstruction() const = 0;
};

struct Intervention {
  struct Entry {
    enum class Type { Hard, Soft };
    Type type = Type::Hard;
    std::string name;
    Value constant;                       // Hard
    std::shared_ptr<Mechanism> replacement;  // Soft
  };
  std::vector<Entry> entries;

  static Intervention none() { return {}; }
  Intervention& do_hard(const std::string& name, Value v);
  Intervention& do_soft(const std::string& name, std::shared_ptr<Mechanism> m);
  const Entry* find(const std::string& name) const;
};

class CausalGraph {
 public:
  void add_variable(VariableSpec spec);
  void bind(const std::string& name, std::shared_ptr<Mechanism> mechanism);

  // Confirms acyclicity and parent declarations; computes the deterministic
  // topological order (ties broken by declaration order). Must be called
  // before any engine operation.
  void validate();
  bool validated() const { return validated_; }

  const std::vector<VariableSpec>& variables() const { return specs_; }
  const VariableSpec& spec(const std::string& name) const;
  const Mechanism& mechanism(const std::string& name) const;
  std::shared_ptr<Mechanism> mechanism_ptr(const std::string& name) const;
  const std::vector<std::string>& topological_order() const;
  bool has_variable(const std::string& name) const { return index_.count(name) > 0; }

  // True when `name` is a (strict) descendant of `ancestor`.
  bool is_descendant(const std::string& name, const std::string& ancestor) const;

 private:
  std::vector<VariableSpec> specs_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::shared_ptr<Mechanism>> mechanisms_;
  std::vector<std::string> topo_;
  bool validated_ = false;
};

struct CounterfactualResult {
  Evidence counterfactual;
  WorldSample world;
};

// Ancestral sampling of n complete evidence records.
std::vector<Evidence> sample_observational(const CausalGraph& graph, RngStream& rng, int n,
                                           std::vector<WorldSample>* worlds = nullptr);

// Abduction step only: infer every variable's noise from complete evidence.
WorldSample abduce_world(const CausalGraph& graph, const Evidence& evidence, RngStream& rng);

// Prediction step: forward all mechanisms under the intervention using a
// persisted world. Null interventions reproduce the evidence exactly for
// exact-reconstruction mechanisms.
Evidence predict_with_world(const CausalGraph& graph, const Evidence& evidence,
                            const Intervention& intervention, const WorldSample& world);

// Full abduction-action-prediction query.
CounterfactualResult counterfactual_query(const CausalGraph& graph, const Evidence& evidence,
                                          const Intervention& intervention, RngStream& rng);

// Per-variable elementwise mean/std over repeated queries with independent
// posterior noise resamples; only stochastic-abduction mechanisms vary.
struct CounterfactualMoments {
  std::map<std::string, Tensor> mean;  // categorical values use the index
  std::map<std::string, Tensor> stddev;
};
CounterfactualMoments counterfactual_moments(const CausalGraph& graph, const Evidence& evidence,
                                             const Intervention& intervention, int n_samples,
                                             RngStream& rng);

// Graph description I/O: variables, kinds, parents and mechanism binding
// names; the resolver maps a binding name to a mechanism instance.
using MechanismResolver =
    std::function<std::shared_ptr<Mechanism>(const std::string& binding, const VariableSpec&)>;
CausalGraph graph_from_json(const nlohmann::json& doc, const MechanismResolver& resolver);
nlohmann::json graph_to_json(const CausalGraph& graph,
                             const std::map<std::string, std::string>& bindings);

}  // namespace dscm
