#pragma once

#include <map>
#include <string>

#include "mdt/tape.hpp"
#include "mdt/tensor.hpp"

namespace mdt {

// Named, shaped model parameters. std::map keeps iteration order stable,
// which fixes the reduction order for grad norms and the checkpoint layout.
template <class S>
using ParameterTree = std::map<std::string, Tensor<S>>;

template <class S>
ParameterTree<S> tree_zeros_like(const ParameterTree<S>& t) {
  ParameterTree<S> out;
  for (const auto& [name, v] : t) out.emplace(name, Tensor<S>::zeros(v.shape()));
  return out;
}

template <class S>
ParameterTree<S> tree_clone(const ParameterTree<S>& t) {
  ParameterTree<S> out;
  for (const auto& [name, v] : t) out.emplace(name, v.clone());
  return out;
}

template <class S>
int64_t tree_numel(const ParameterTree<S>& t) {
  int64_t n = 0;
  for (const auto& [name, v] : t) n += v.numel();
  return n;
}

// Binds parameters to tape leaves on first use so a forward pass only
// registers the parameters it touches.
template <class S>
class ParamVars {
 public:
  ParamVars(Tape<S>& tape, const ParameterTree<S>& tree) : tape_(tape), tree_(tree) {}

  Var<S> operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    auto pit = tree_.find(name);
    if (pit == tree_.end()) throw ShapeError("unknown parameter '" + name + "'");
    Var<S> v = tape_.leaf(pit->second, /*requires_grad=*/true);
    vars_.emplace(name, v);
    return v;
  }

  bool bound(const std::string& name) const { return vars_.count(name) > 0; }

  // Gradients for every bound parameter; unbound ones get exact zeros.
  ParameterTree<S> grads() const {
    ParameterTree<S> out;
    for (const auto& [name, v] : tree_) {
      auto it = vars_.find(name);
      if (it != vars_.end()) {
        out.emplace(name, tape_.grad(it->second));
      } else {
        out.emplace(name, Tensor<S>::zeros(v.shape()));
      }
    }
    return out;
  }

 private:
  Tape<S>& tape_;
  const ParameterTree<S>& tree_;
  std::map<std::string, Var<S>> vars_;
};

}  // namespace mdt
