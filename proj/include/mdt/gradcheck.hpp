#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mdt/params.hpp"
#include "mdt/rng.hpp"

namespace mdt {

// A deterministic scalar function of the parameter tree, expressed as a graph
// on a fresh tape. The same draws must be replayed on every call.
template <class S>
using ScalarFn = std::function<Var<S>(Tape<S>&, ParamVars<S>&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  int64_t coords_checked = 0;
};

template <class S>
S eval_scalar(const ScalarFn<S>& f, const ParameterTree<S>& theta) {
  Tape<S> tape;
  ParamVars<S> pv(tape, theta);
  Var<S> loss = f(tape, pv);
  return loss.val()[0];
}

// Max relative error between analytic gradients and central differences over
// sampled coordinates: |analytic - fd| / max(1, |fd|). Coordinates are drawn
// per parameter so every family is covered.
template <class S>
GradCheckReport grad_check(const ScalarFn<S>& f, ParameterTree<S> theta, S h,
                           int coords_per_param, Rng rng) {
  static_assert(sizeof(S) == 8, "grad_check wants 64-bit scalars");
  ParameterTree<S> analytic;
  {
    Tape<S> tape;
    ParamVars<S> pv(tape, theta);
    Var<S> loss = f(tape, pv);
    if (!loss.val().all_finite()) throw NumericError("grad_check: non-finite loss");
    tape.backward(loss);
    analytic = pv.grads();
    for (const auto& [name, g] : analytic)
      if (!g.all_finite())
        throw NumericError("grad_check: non-finite gradient for parameter '" + name + "'");
  }
  GradCheckReport rep;
  for (auto& [name, p] : theta) {
    const Tensor<S>& g = analytic.at(name);
    for (int c = 0; c < coords_per_param; ++c) {
      int64_t i = rng.uniform_int(0, p.numel() - 1);
      S saved = p[i];
      p[i] = saved + h;
      S lp = eval_scalar(f, theta);
      p[i] = saved - h;
      S lm = eval_scalar(f, theta);
      p[i] = saved;
      double fd = double(lp - lm) / (2.0 * double(h));
      double err = std::abs(double(g[i]) - fd) / std::max(1.0, std::abs(fd));
      ++rep.coords_checked;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_param = name;
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

}  // namespace mdt
