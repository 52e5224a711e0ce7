#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dscm/autodiff.hpp"
#include "dscm/rng.hpp"
#include "dscm/tensor.hpp"

namespace dscm {

// Named parameter set with stable (insertion) order; the order defines the
// array layout inside checkpoint files.
class ParamStore {
 public:
  Tensor& create(const std::string& name, const Shape& shape);
  Tensor& add(const std::string& name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Tensor*> all();
  std::vector<std::string> names() const;
  std::size_t count() const { return items_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  void watch_all(Tape& tape);

  // Replaces every tensor's values (e.g. to swap in EMA shadows).
  void assign_values(const std::vector<Tensor>& values);
  std::vector<Tensor> snapshot_values() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

// Fully connected stack with leaky-relu activations between layers and a
// linear output layer. Parameters live in a ParamStore under `prefix`.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string prefix, std::vector<std::size_t> dims)
      : prefix_(std::move(prefix)), dims_(std::move(dims)) {}

  void init_params(ParamStore& ps, RngStream& rng, double final_scale = 1.0) const;
  Tensor operator()(const ParamStore& ps, const Tensor& x) const;  // [B,in] -> [B,out]

  std::size_t in_dim() const { return dims_.front(); }
  std::size_t out_dim() const { return dims_.back(); }
  const std::string& prefix() const { return prefix_; }

 private:
  std::string prefix_;
  std::vector<std::size_t> dims_;
};

// y = x W + b for weight [in,out], bias [1,out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace dscm
