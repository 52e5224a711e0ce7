#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dscm/nn.hpp"
#include "dscm/tensor.hpp"

namespace dscm {

// Parameter container: a JSON header (names, shapes, precision, step counter,
// EMA flag, caller metadata) followed by raw little-endian arrays in header
// order.
struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  Precision precision = Precision::f64;
  std::int64_t step_counter = 0;
  bool has_ema = false;
  nlohmann::json meta;  // caller payload (mechanism configs etc.)
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); }
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;

  // Pack/extract a ParamStore under a name prefix.
  void add_store(const std::string& prefix, const ParamStore& ps);
  void load_store(const std::string& prefix, ParamStore& ps) const;
};

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

bool files_identical(const std::string& a, const std::string& b);

}  // namespace dscm
