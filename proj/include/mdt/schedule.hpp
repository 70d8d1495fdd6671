#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mdt/common.hpp"
#include "mdt/tensor.hpp"

namespace mdt {

// Forward-noising tables. Timesteps are 1-indexed; t=0 is the clean sample.
// Tables are kept in double regardless of the training precision.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // [T], beta[t-1] is step t
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // cumulative product of alpha
  std::vector<double> posterior_beta_tilde;
  std::vector<double> snr;        // alpha_bar / (1 - alpha_bar)
  std::vector<int> timestep_map;  // original timestep for each table row

  double beta_at(int t) const { return beta[size_t(t - 1)]; }
  double alpha_at(int t) const { return alpha[size_t(t - 1)]; }
  double alpha_bar_at(int t) const { return alpha_bar[size_t(t - 1)]; }
  double alpha_bar_prev(int t) const { return t > 1 ? alpha_bar[size_t(t - 2)] : 1.0; }
  double snr_at(int t) const { return snr[size_t(t - 1)]; }
  double beta_tilde_at(int t) const { return posterior_beta_tilde[size_t(t - 1)]; }

  void check_range(int t) const {
    if (t < 1 || t > T)
      throw ConfigError("timestep " + std::to_string(t) + " outside [1," +
                        std::to_string(T) + "]");
  }
};

namespace detail {
inline void fill_derived(NoiseSchedule& s) {
  int T = s.T;
  s.alpha.resize(size_t(T));
  s.alpha_bar.resize(size_t(T));
  s.posterior_beta_tilde.resize(size_t(T));
  s.snr.resize(size_t(T));
  double prod = 1.0;
  for (int t = 1; t <= T; ++t) {
    double b = s.beta[size_t(t - 1)];
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta outside (0,1)");
    double a = 1.0 - b;
    double prev = prod;
    prod *= a;
    s.alpha[size_t(t - 1)] = a;
    s.alpha_bar[size_t(t - 1)] = prod;
    s.posterior_beta_tilde[size_t(t - 1)] = (1.0 - prev) / (1.0 - prod) * b;
    s.snr[size_t(t - 1)] = prod / (1.0 - prod);
  }
}
}  // namespace detail

inline NoiseSchedule build_linear_schedule(int T, double beta_min, double beta_max) {
  if (T < 1) throw ConfigError("schedule: T must be >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
    throw ConfigError("schedule: need 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(size_t(T));
  s.beta[0] = beta_min;
  if (T > 1) {
    for (int t = 2; t < T; ++t)
      s.beta[size_t(t - 1)] =
          beta_min + (beta_max - beta_min) * double(t - 1) / double(T - 1);
    s.beta[size_t(T - 1)] = beta_max;  // endpoint assigned exactly
  }
  s.timestep_map.resize(size_t(T));
  for (int t = 1; t <= T; ++t) s.timestep_map[size_t(t - 1)] = t;
  detail::fill_derived(s);
  return s;
}

// Evenly strided sub-sequence of timesteps, always including the last step:
// t_k = round_half_up((k+1) * T/n).
inline std::vector<int> respace_steps(int T, int n_steps) {
  if (n_steps < 1 || n_steps > T) throw ConfigError("respace: need 1 <= n <= T");
  std::vector<int> out(static_cast<size_t>(n_steps));
  double stride = double(T) / double(n_steps);
  for (int k = 0; k < n_steps; ++k)
    out[size_t(k)] = int(round_half_up(double(k + 1) * stride));
  out[size_t(n_steps - 1)] = T;
  return out;
}

// Rebuild retimed tables over the kept steps. Identity respacing returns the
// original tables unchanged.
inline NoiseSchedule respace(const NoiseSchedule& s, int n_steps) {
  std::vector<int> steps = respace_steps(s.T, n_steps);
  if (n_steps == s.T) return s;
  NoiseSchedule r;
  r.T = n_steps;
  r.beta.resize(size_t(n_steps));
  r.timestep_map = steps;
  double prev_ab = 1.0;
  for (int k = 0; k < n_steps; ++k) {
    double ab = s.alpha_bar_at(steps[size_t(k)]);
    r.beta[size_t(k)] = 1.0 - ab / prev_ab;
    prev_ab = ab;
  }
  detail::fill_derived(r);
  return r;
}

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
template <class S>
Tensor<S> q_sample(const Tensor<S>& x0, int t, const Tensor<S>& eps,
                   const NoiseSchedule& sched) {
  sched.check_range(t);
  if (!x0.same_shape(eps))
    throw ShapeError("q_sample: x0 " + shape_str(x0.shape()) + " vs eps " +
                     shape_str(eps.shape()));
  double ab = sched.alpha_bar_at(t);
  S c0 = S(std::sqrt(ab));
  S c1 = S(std::sqrt(1.0 - ab));
  Tensor<S> out(x0.shape());
  for (int64_t i = 0, n = x0.numel(); i < n; ++i) out[i] = c0 * x0[i] + c1 * eps[i];
  return out;
}

// Ancestral-step coefficients: mu = xt_coeff * x_t - eps_coeff * eps_hat,
// variance = beta_tilde (0 at t=1, so the final step adds no noise).
struct PosteriorCoeffs {
  double xt_coeff;
  double eps_coeff;
  double variance;
};

inline PosteriorCoeffs posterior_step_coeffs(int t, const NoiseSchedule& sched) {
  sched.check_range(t);
  double a = sched.alpha_at(t);
  double b = sched.beta_at(t);
  double ab = sched.alpha_bar_at(t);
  PosteriorCoeffs c;
  c.xt_coeff = 1.0 / std::sqrt(a);
  c.eps_coeff = b / (std::sqrt(1.0 - ab) * std::sqrt(a));
  c.variance = t == 1 ? 0.0 : sched.beta_tilde_at(t);
  return c;
}

// Min-SNR loss weight for epsilon prediction: min(snr_t, gamma) / snr_t.
inline double min_snr_weight(int t, double gamma, const NoiseSchedule& sched) {
  if (!(gamma > 0.0)) throw ConfigError("min_snr: gamma must be > 0");
  sched.check_range(t);
  double s = sched.snr_at(t);
  return std::min(s, gamma) / s;
}

// Power-cosine guidance scale schedule: w_i = (1 - cos(pi (i/t_max)^s))/2 * w.
struct GuidanceSchedule {
  double w_max = 0.0;
  double s = 1.0;
  int t_max = 1;
};

inline double guidance_scale_at(int i, const GuidanceSchedule& gs) {
  if (i < 0 || i > gs.t_max) throw ConfigError("guidance index out of range");
  double ratio = gs.t_max == 0 ? 1.0 : double(i) / double(gs.t_max);
  return (1.0 - std::cos(M_PI * std::pow(ratio, gs.s))) / 2.0 * gs.w_max;
}

}  // namespace mdt
