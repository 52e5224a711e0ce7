#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dscm/flows.hpp"
#include "dscm/gumbel.hpp"
#include "dscm/hvae.hpp"
#include "dscm/predictors.hpp"
#include "dscm/scm.hpp"
#include "dscm/synthblob.hpp"

namespace dscm {

// Assembly of the learned synthblob SCM: invertible flows for the thickness
// and intensity attributes, a Gumbel-max mechanism for the shape class, and
// the HVAE mechanism for the image.
struct BlobScm {
  std::shared_ptr<ConditionalFlow> thickness_flow;
  std::shared_ptr<ConditionalFlow> intensity_flow;
  std::shared_ptr<GumbelMechanism> shape_mechanism;
  std::shared_ptr<HvaeMechanism> image_mechanism;  // optional

  std::shared_ptr<CausalGraph> attribute_graph() const;
  std::shared_ptr<CausalGraph> full_graph() const;  // requires image_mechanism

  static Evidence attribute_evidence(const synthblob::Record& r);
  static Evidence full_evidence(const synthblob::Record& r);
  static std::vector<Value> image_parents(const synthblob::Record& r);
  static const std::vector<std::string>& image_parent_names();

  // Ground-truth marginal samplers for random interventions.
  static std::map<std::string, CounterfactualTrainer::MarginalSampler> marginal_samplers();
  static Value sample_marginal(const std::string& name, RngStream& rng);
};

// Stage: fit the attribute mechanisms (flows + Gumbel) on a dataset.
struct AttributeTrainResult {
  BlobScm scm;  // image_mechanism left empty
  ConditionalFlow::TrainTrace thickness_trace;
  ConditionalFlow::TrainTrace intensity_trace;
  std::vector<double> shape_trace;
};
AttributeTrainResult train_attribute_mechanisms(const synthblob::Dataset& data,
                                                const FlowTrainConfig& cfg, std::uint64_t seed,
                                                bool spline = false);

void save_attribute_mechanisms(const std::string& path, const BlobScm& scm);
void load_attribute_mechanisms(const std::string& path, BlobScm* scm);

// Dataset adapters for the image mechanism and predictors.
void dataset_views(const synthblob::Dataset& data, std::vector<Tensor>* images,
                   std::vector<std::vector<Value>>* parents);
std::map<std::string, std::vector<Value>> target_columns(const synthblob::Dataset& data);
std::vector<CounterfactualTrainer::Batch> make_batches(const synthblob::Dataset& data,
                                                       std::size_t batch);

}  // namespace dscm
