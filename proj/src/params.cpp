#include "bevfuse/params.hpp"

#include <cmath>

#include "bevfuse/error.hpp"
#include "bevfuse/rng.hpp"

namespace bevfuse {

Tensor ParameterStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  t.set_requires_grad(true);
  index_[name] = params_.size();
  params_.push_back({name, t, false});
  return t;
}

Tensor ParameterStore::glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Rng rng(seed_, name);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-a, a);
  return add(name, Tensor::from(std::move(shape), std::move(v)));
}

Tensor ParameterStore::zeros(const std::string& name, Shape shape) {
  return add(name, Tensor::zeros(std::move(shape)));
}

Tensor ParameterStore::constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor::full(std::move(shape), value));
}

Tensor ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return params_[it->second].tensor;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::size_t ParameterStore::set_frozen(const std::string& prefix, bool frozen) {
  std::size_t n = 0;
  for (auto& p : params_) {
    if (p.name.compare(0, prefix.size(), prefix) == 0) {
      p.frozen = frozen;
      ++n;
    }
  }
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::step(ParameterStore& store) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& p : store.all()) {
    if (p.frozen || !p.tensor.has_grad()) continue;
    auto& [m, v] = moments_[p.name];
    const auto n = p.tensor.numel();
    if (m.size() != n) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    auto w = p.tensor.mutable_values();
    auto g = p.tensor.grad();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void sgd_step(ParameterStore& store, double lr) {
  for (auto& p : store.all()) {
    if (p.frozen || !p.tensor.has_grad()) continue;
    auto w = p.tensor.mutable_values();
    auto g = p.tensor.grad();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
  }
}

double clip_grad_norm(ParameterStore& store, double max_norm) {
  double sq = 0.0;
  for (auto& p : store.all()) {
    if (p.frozen || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (auto& p : store.all()) {
      if (p.frozen || !p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= f;
    }
  }
  return norm;
}

}  // namespace bevfuse
