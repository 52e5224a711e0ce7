#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dscm/rng.hpp"

namespace dscm {

// Violated precondition or interface misuse.
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Input outside the mathematical domain of an operation.
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

enum class Precision { f64, f32 };

// Dense n-dimensional array of reals. Values are immutable by convention once
// an op has produced them; mutation is only for construction and optimizer
// internals. Storage is double; the f32 precision tag rounds stored values
// through float after each producing op (reductions still accumulate in
// double).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from_data(const Shape& shape, std::vector<double> data);
  static Tensor scalar(double value);
  static Tensor randn(const Shape& shape, RngStream& rng, double stddev = 1.0);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  std::size_t ndim() const { return shape_.size(); }

  const double* data() const { return data_->data(); }
  double* mutable_data() { return data_->data(); }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  const std::vector<double>& values() const { return *data_; }

  double item() const;  // requires scalar (numel == 1)

  Precision precision() const { return precision_; }
  Tensor to_precision(Precision p) const;
  void round_to_storage();  // applies the precision tag to stored values

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // Autodiff bookkeeping (managed by Tape).
  std::uint64_t tape_serial = 0;
  int tape_node = -1;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Precision precision_ = Precision::f64;
};

// Flat index helpers for strided broadcasting.
std::vector<std::size_t> row_major_strides(const Shape& shape);

}  // namespace dscm
