#include "dscm/nn.hpp"

#include <cmath>

namespace dscm {

Tensor& ParamStore::create(const std::string& name, const Shape& shape) {
  return add(name, Tensor::zeros(shape));
}

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return items_[it->second].second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return items_[it->second].second;
}

std::vector<Tensor*> ParamStore::all() {
  std::vector<Tensor*> out;
  out.reserve(items_.size());
  for (auto& [name, t] : items_) out.push_back(&t);
  return out;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& [name, t] : items_) out.push_back(name);
  return out;
}

void ParamStore::watch_all(Tape& tape) {
  for (auto& [name, t] : items_) tape.watch(t);
}

void ParamStore::assign_values(const std::vector<Tensor>& values) {
  if (values.size() != items_.size()) {
    throw ContractError("assign_values: count mismatch");
  }
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (!items_[i].second.same_shape(values[i])) {
      throw ContractError("assign_values: shape mismatch at " + items_[i].first);
    }
    items_[i].second = Tensor::from_data(values[i].shape(), values[i].values());
  }
}

std::vector<Tensor> ParamStore::snapshot_values() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& [name, t] : items_) {
    out.push_back(Tensor::from_data(t.shape(), t.values()));
  }
  return out;
}

void Mlp::init_params(ParamStore& ps, RngStream& rng, double final_scale) const {
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    const bool last = (l + 2 == dims_.size());
    const double scale = std::sqrt(2.0 / static_cast<double>(dims_[l])) * (last ? final_scale : 1.0);
    ps.add(prefix_ + ".w" + std::to_string(l), Tensor::randn({dims_[l], dims_[l + 1]}, rng, scale));
    ps.create(prefix_ + ".b" + std::to_string(l), {1, dims_[l + 1]});
  }
}

Tensor Mlp::operator()(const ParamStore& ps, const Tensor& x) const {
  Tensor h = x;
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    h = linear(h, ps.get(prefix_ + ".w" + std::to_string(l)),
               ps.get(prefix_ + ".b" + std::to_string(l)));
    if (l + 2 < dims_.size()) h = leaky_relu(h);
  }
  return h;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

}  // namespace dscm
