#include "dscm/tensor.hpp"

#include <sstream>

namespace dscm {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  Tensor t;
  t.shape_ = shape;
  t.data_ = std::make_shared<std::vector<double>>(shape_numel(shape), value);
  return t;
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size()) {
    throw ContractError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.shape_ = shape;
  t.data_ = std::make_shared<std::vector<double>>(std::move(data));
  return t;
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::randn(const Shape& shape, RngStream& rng, double stddev) {
  Tensor t = zeros(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t.mutable_data()[i] = stddev * rng.normal();
  return t;
}

double Tensor::item() const {
  if (!defined() || size() != 1) {
    throw ContractError("item() requires a single-element tensor, got shape " +
                        shape_str(shape_));
  }
  return (*data_)[0];
}

Tensor Tensor::to_precision(Precision p) const {
  Tensor t = from_data(shape_, *data_);
  t.precision_ = p;
  t.round_to_storage();
  return t;
}

void Tensor::round_to_storage() {
  if (precision_ == Precision::f32 && data_) {
    for (double& v : *data_) v = static_cast<double>(static_cast<float>(v));
  }
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

}  // namespace dscm
