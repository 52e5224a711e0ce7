#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dscm/pipeline.hpp"
#include "dscm/predictors.hpp"

namespace dscm {

// Axiomatic counterfactual evaluation: composition, effectiveness and
// reversibility, plus bits-per-dimension reporting.

struct EvalRow {
  std::string intervened;   // "do_t", "do_i", "do_y", "mixed", "null"
  std::string metric;       // "thickness_mae", "intensity_mae", "shape_accuracy", ...
  double value = 0.0;
  int samples = 0;
  std::string provenance;   // "oracle" or "predictor"
};

struct EvalReport {
  std::vector<EvalRow> rows;
  const EvalRow& find(const std::string& intervened, const std::string& metric,
                      const std::string& provenance) const;
  // One CSV per row, named {intervention}_{metric}.csv, plus a combined
  // report.csv; fixed formatting so a fixed seed gives byte-identical files.
  void write_csv_dir(const std::string& dir) const;
  void write_csv(const std::string& path) const;
};

struct CompositionCurve {
  std::vector<int> cycle;
  std::vector<double> l1_per_pixel;  // decoder-mean L1 against the original
};

// Null-intervention cycles: encode, take the decoder mean, report L1 to the
// original, re-encode the quantized mean. The epsilon-carried reconstruction
// is exactly the input by construction, so the mean is the informative
// reconstruction (counterfactual generation still carries the noise).
CompositionCurve eval_composition(const HvaeMechanism& mech,
                                  const std::vector<synthblob::Record>& test, int cycles,
                                  std::uint64_t seed);
// Generic form over any mean-reconstruction map (x row, parents row, rng).
using MeanReconstructor =
    std::function<Tensor(const Tensor&, const synthblob::Record&, RngStream&)>;
CompositionCurve eval_composition_fn(const std::vector<synthblob::Record>& test, int cycles,
                                     std::uint64_t seed, const MeanReconstructor& reconstruct);

enum class InterventionKind { Thickness, Intensity, Shape, Mixed };
std::string intervention_name(InterventionKind kind);

// Effectiveness per the random-interventions protocol: draw the intervened
// values from the ground-truth marginals, generate counterfactual images,
// measure them (renderer-inversion oracle and/or held-out predictors), and
// report MAE for continuous targets and accuracy for the shape class against
// the counterfactual attribute values.
EvalReport eval_effectiveness(const BlobScm& scm, const std::vector<synthblob::Record>& test,
                              const std::vector<InterventionKind>& plan,
                              const PredictorSet* predictors, std::uint64_t seed);

// do(pa~) then do(pa) on the persisted noise per cycle, re-abducting from the
// previous (quantized) output between cycles; reports L1 to the original.
CompositionCurve eval_reversibility(const BlobScm& scm,
                                    const std::vector<synthblob::Record>& test, int cycles,
                                    std::uint64_t seed);

// objective / (dims * ln 2)
double bits_per_dim(double objective_nats_total, std::size_t dims);

// Clamped-for-reporting view of a model image row.
Tensor report_image(const Tensor& row, int h, int w);

}  // namespace dscm
