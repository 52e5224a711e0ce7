#pragma once

#include <vector>

#include <json.hpp>

#include "dscm/scm.hpp"
#include "dscm/tensor.hpp"

namespace dscm {

// Maps parent Values to the flat conditioning vector fed to learned
// mechanisms: continuous parents are standardized, categorical parents are
// one-hot encoded. Standardization statistics are fitted on training data and
// stored with the mechanism parameters.
class ParentCodec {
 public:
  struct Field {
    VarKind kind = VarKind::Continuous;
    int categories = 0;
    double mean = 0.0;
    double stddev = 1.0;
  };

  ParentCodec() = default;
  explicit ParentCodec(const std::vector<VariableSpec>& parent_specs);

  std::size_t dim() const;
  std::size_t field_count() const { return fields_.size(); }

  // Standardization for continuous field `idx` from raw samples.
  void fit_field(std::size_t idx, const std::vector<double>& values);

  std::vector<double> encode(const std::vector<Value>& parents) const;
  Tensor encode_batch(const std::vector<std::vector<Value>>& parents) const;  // [B, dim]

  nlohmann::json to_json() const;
  static ParentCodec from_json(const nlohmann::json& j);

 private:
  std::vector<Field> fields_;
};

}  // namespace dscm
