#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "shmamba/error.hpp"
#include "shmamba/ops.hpp"
#include "shmamba/tape.hpp"
#include "shmamba/tensor.hpp"

namespace shmamba {

/// Named learnable tensors in a stable insertion order. Names are dotted
/// paths such as "encoder.audio.weight".
class ParameterSet {
 public:
  void add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& at(const std::string& name) { return entries_[lookup(name)].second; }
  const Tensor& at(const std::string& name) const { return entries_[lookup(name)].second; }

  std::size_t size() const noexcept { return entries_.size(); }

  /// Number of learnable scalars across all tensors.
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  /// Scalars whose name starts with `prefix`.
  std::size_t scalar_count(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) {
      if (name.compare(0, prefix.size(), prefix) == 0) n += t.numel();
    }
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) { return a.entries_ == b.entries_; }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// A ParameterSet placed onto a tape as leaves.
class BoundParameters {
 public:
  BoundParameters(Tape& tape, const ParameterSet& params, bool requires_grad = true) {
    for (const auto& [name, t] : params) {
      index_.emplace(name, vars_.size());
      vars_.emplace_back(name, tape.leaf(t, requires_grad));
    }
  }

  /// Wraps Vars already on a tape, e.g. the inputs handed out by grad_check.
  BoundParameters(const ParameterSet& names_from, std::span<const Var> vars) {
    if (vars.size() != names_from.size()) throw ShapeError("BoundParameters: name and variable counts differ");
    std::size_t i = 0;
    for (const auto& [name, t] : names_from) {
      if (vars[i].shape() != t.shape()) throw ShapeError("BoundParameters: '" + name + "' shape differs");
      index_.emplace(name, vars_.size());
      vars_.emplace_back(name, vars[i++]);
    }
  }

  Var operator()(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return vars_[it->second].second;
  }

  const std::vector<std::pair<std::string, Var>>& vars() const noexcept { return vars_; }

 private:
  std::vector<std::pair<std::string, Var>> vars_;
  std::map<std::string, std::size_t> index_;
};

struct LinearParams {
  Var weight;  ///< (in, out)
  Var bias;    ///< (out)
};

struct LayerNormParams {
  Var gamma;
  Var beta;
};

inline Var apply(const LinearParams& p, const Var& x) { return linear(x, p.weight, p.bias); }

inline LinearParams bind_linear(const BoundParameters& bp, const std::string& prefix) {
  return {bp(prefix + ".weight"), bp(prefix + ".bias")};
}

inline LayerNormParams bind_layer_norm(const BoundParameters& bp, const std::string& prefix) {
  return {bp(prefix + ".weight"), bp(prefix + ".bias")};
}

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = (2.0 * uniform01(rng) - 1.0) * bound;
  return t;
}

/// Weight uniform in +-1/sqrt(in), zero bias.
inline void init_linear(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  ps.add(prefix + ".weight", uniform_tensor(Shape{in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  ps.add(prefix + ".bias", Tensor(Shape{out}));
}

inline void init_layer_norm(ParameterSet& ps, const std::string& prefix, std::size_t width) {
  ps.add(prefix + ".weight", Tensor(Shape{width}, 1.0));
  ps.add(prefix + ".bias", Tensor(Shape{width}));
}

inline constexpr std::size_t linear_param_count(std::size_t in, std::size_t out) { return in * out + out; }

}  // namespace shmamba
