#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bevfuse/tensor.hpp"

namespace bevfuse {

struct Parameter {
  std::string name;
  Tensor tensor;
  bool frozen = false;
};

/// Owns every learnable tensor of a model, keyed by a unique dotted name.
///
/// Initial values are a pure function of (seed, name), so two stores built
/// with the same seed and the same creation calls are bit-identical no matter
/// in which order the modules were constructed.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed) : seed_(seed) {}

  /// Uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)).
  Tensor glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out);
  Tensor zeros(const std::string& name, Shape shape);
  Tensor constant(const std::string& name, Shape shape, double value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor get(const std::string& name) const;
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  std::size_t scalar_count() const;
  /// Sets the frozen flag on every parameter whose name starts with `prefix`;
  /// returns how many matched.
  std::size_t set_frozen(const std::string& prefix, bool frozen);
  void zero_grad();

  std::uint64_t seed() const { return seed_; }

 private:
  Tensor add(const std::string& name, Tensor t);

  std::uint64_t seed_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8). Frozen
/// parameters and parameters without a gradient are skipped.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParameterStore& store);
  std::int64_t steps() const { return t_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

void sgd_step(ParameterStore& store, double lr);

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(ParameterStore& store, double max_norm);

}  // namespace bevfuse
