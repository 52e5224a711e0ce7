#include "dscm/parent_codec.hpp"

#include <cmath>

namespace dscm {

ParentCodec::ParentCodec(const std::vector<VariableSpec>& parent_specs) {
  for (const VariableSpec& spec : parent_specs) {
    if (spec.kind == VarKind::Image) {
      throw ContractError("image-valued parents are not supported as conditioning");
    }
    Field f;
    f.kind = spec.kind;
    f.categories = spec.categories;
    fields_.push_back(f);
  }
}

std::size_t ParentCodec::dim() const {
  std::size_t d = 0;
  for (const Field& f : fields_) d += f.kind == VarKind::Categorical ? f.categories : 1;
  return d;
}

void ParentCodec::fit_field(std::size_t idx, const std::vector<double>& values) {
  Field& f = fields_.at(idx);
  if (f.kind != VarKind::Continuous) throw ContractError("fit_field on a non-continuous field");
  double sum = 0.0, sq = 0.0;
  for (double v : values) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(values.size());
  f.mean = sum / n;
  const double var = sq / n - f.mean * f.mean;
  f.stddev = var > 1e-12 ? std::sqrt(var) : 1.0;
}

std::vector<double> ParentCodec::encode(const std::vector<Value>& parents) const {
  if (parents.size() != fields_.size()) {
    throw ContractError("parent count mismatch: got " + std::to_string(parents.size()) +
                        ", expected " + std::to_string(fields_.size()));
  }
  std::vector<double> out;
  out.reserve(dim());
  for (std::size_t i = 0; i < fields_.size(); ++i) {
    const Field& f = fields_[i];
    if (f.kind == VarKind::Categorical) {
      const int k = parents[i].as_category();
      if (k < 0 || k >= f.categories) throw ContractError("categorical parent out of range");
      for (int c = 0; c < f.categories; ++c) out.push_back(c == k ? 1.0 : 0.0);
    } else {
      out.push_back((parents[i].as_scalar() - f.mean) / f.stddev);
    }
  }
  return out;
}

Tensor ParentCodec::encode_batch(const std::vector<std::vector<Value>>& parents) const {
  const std::size_t d = dim();
  Tensor out = Tensor::zeros({parents.size(), d});
  for (std::size_t b = 0; b < parents.size(); ++b) {
    std::vector<double> row = encode(parents[b]);
    std::copy(row.begin(), row.end(), out.mutable_data() + b * d);
  }
  return out;
}

nlohmann::json ParentCodec::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const Field& f : fields_) {
    arr.push_back({{"kind", f.kind == VarKind::Categorical ? "categorical" : "continuous"},
                   {"categories", f.categories},
                   {"mean", f.mean},
                   {"stddev", f.stddev}});
  }
  return arr;
}

ParentCodec ParentCodec::from_json(const nlohmann::json& j) {
  ParentCodec codec;
  for (const auto& e : j) {
    Field f;
    f.kind = e.at("kind") == "categorical" ? VarKind::Categorical : VarKind::Continuous;
    f.categories = e.at("categories").get<int>();
    f.mean = e.at("mean").get<double>();
    f.stddev = e.at("stddev").get<double>();
    codec.fields_.push_back(f);
  }
  return codec;
}

}  // namespace dscm
