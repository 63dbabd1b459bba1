#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "dq/optim.hpp"
#include "dq/quantizer.hpp"
#include "dq/rng.hpp"

// Desk-scale quantizer experiments: minimizing the Gaussian quantization MSE
// over the latent parameters, error-surface scans, and max-gradient-norm
// curves. These back the CLI subcommands and the acceptance checks.

namespace dq {

// Shared initial point for the MSE experiments: bitwidth 2 with unit range
// (d = q_max = 1, and the pow2 analog q_min = 0.5, q_max = 1).
inline Quantizer initial_quantizer(Param p) {
  Quantizer q;
  q.param = p;
  q.is_signed = true;
  switch (p) {
    case Param::U1: q.theta = {2.0, 1.0}; break;
    case Param::U2: q.theta = {2.0, 1.0}; break;
    case Param::U3: q.theta = {1.0, 1.0}; break;
    case Param::P1: q.theta = {2.0, 1.0}; break;
    case Param::P2: q.theta = {2.0, 0.5}; break;
    case Param::P3: q.theta = {0.5, 1.0}; break;
  }
  return q;
}

// mean over samples of (1/2)(Q(x) - x)^2 at fixed effective parameters.
inline double quantization_mse(const std::vector<double>& xs, const EffectiveParams& eff,
                               const Quantizer& q) {
  double acc = 0.0;
  for (double x : xs) {
    const double e = quantizer_forward(x, eff, q) - x;
    acc += 0.5 * e * e;
  }
  return acc / static_cast<double>(xs.size());
}

struct MseStep {
  long step = 0;
  double mse = 0.0;
  std::array<double, 2> theta{0.0, 0.0};
  EffectiveParams eff;
};

struct GaussMseConfig {
  Param param = Param::U3;
  bool use_adam = true;
  double lr = 0.01;
  double momentum = 0.9;
  long steps = 500;
  std::uint64_t seed = 1;
  std::size_t samples = 10000;
};

struct GaussMseResult {
  std::vector<MseStep> trace;  // steps + 1 rows; last row is post-update
  Quantizer q;
  bool diverged = false;
};

// dMSE/dtheta = mean (Q(x) - x) * dQ/dtheta.
inline std::array<double, 2> mse_grad(const std::vector<double>& xs,
                                      const EffectiveParams& eff, const Quantizer& q) {
  std::array<double, 2> g{0.0, 0.0};
  for (double x : xs) {
    const double e = quantizer_forward(x, eff, q) - x;
    const QuantGrad qg = quantizer_backward(x, eff, q);
    g[0] += e * qg.grad_theta[0];
    g[1] += e * qg.grad_theta[1];
  }
  g[0] /= static_cast<double>(xs.size());
  g[1] /= static_cast<double>(xs.size());
  return g;
}

inline GaussMseResult run_gauss_mse(const GaussMseConfig& cfg) {
  const std::vector<double> xs = gaussian_vector(cfg.seed, cfg.samples);
  GaussMseResult out;
  out.q = initial_quantizer(cfg.param);
  Quantizer& q = out.q;
  SgdMomentum sgd(cfg.use_adam ? 0 : 2, cfg.momentum);
  Adam adam(cfg.use_adam ? 2 : 0);
  std::vector<double*> params{&q.theta[0], &q.theta[1]};
  for (long step = 0; step <= cfg.steps; ++step) {
    const EffectiveParams eff = project(q);
    const double mse = quantization_mse(xs, eff, q);
    out.trace.push_back({step, mse, q.theta, eff});
    if (!std::isfinite(mse)) {
      out.diverged = true;
      break;
    }
    if (step == cfg.steps) break;
    const std::array<double, 2> g = mse_grad(xs, eff, q);
    const std::vector<double> gv{g[0], g[1]};
    if (cfg.use_adam)
      adam.step(cfg.lr, params, gv);
    else
      sgd.step(cfg.lr, params, gv);
    clip_quantizer_latents(q);
  }
  return out;
}

struct SurfaceConfig {
  Param param = Param::U3;
  double t1_lo = 0.0, t1_hi = 1.0;
  int t1_steps = 2;
  double t2_lo = 0.0, t2_hi = 1.0;
  int t2_steps = 2;
  std::uint64_t seed = 1;
  std::size_t samples = 10000;
  long descent_steps = 200;
  double lr = 0.01;  // plain gradient descent along the recorded path
};

struct SurfacePoint {
  double t1 = 0.0, t2 = 0.0;
  double mse = 0.0;  // NaN where the latent pair projects to a degenerate range
};

struct SurfaceResult {
  std::vector<SurfacePoint> grid;  // t1-major order
  std::vector<MseStep> path;
};

inline SurfaceResult run_surface(const SurfaceConfig& cfg) {
  if (cfg.t1_steps < 2 || cfg.t2_steps < 2)
    throw std::invalid_argument("run_surface: grid needs at least 2 steps per axis");
  const std::vector<double> xs = gaussian_vector(cfg.seed, cfg.samples);
  SurfaceResult out;
  for (int i = 0; i < cfg.t1_steps; ++i) {
    const double t1 = cfg.t1_lo + (cfg.t1_hi - cfg.t1_lo) * i / (cfg.t1_steps - 1);
    for (int j = 0; j < cfg.t2_steps; ++j) {
      const double t2 = cfg.t2_lo + (cfg.t2_hi - cfg.t2_lo) * j / (cfg.t2_steps - 1);
      Quantizer q = initial_quantizer(cfg.param);
      q.theta = {t1, t2};
      SurfacePoint p{t1, t2, std::nan("")};
      try {
        p.mse = quantization_mse(xs, project(q), q);
      } catch (const std::exception&) {
        // degenerate latent pair (e.g. P3 with q_min >= q_max); leave NaN
      }
      out.grid.push_back(p);
    }
  }
  Quantizer q = initial_quantizer(cfg.param);
  for (long step = 0; step <= cfg.descent_steps; ++step) {
    const EffectiveParams eff = project(q);
    out.path.push_back({step, quantization_mse(xs, eff, q), q.theta, eff});
    if (step == cfg.descent_steps) break;
    const std::array<double, 2> g = mse_grad(xs, eff, q);
    q.theta[0] -= cfg.lr * g[0];
    q.theta[1] -= cfg.lr * g[1];
    clip_quantizer_latents(q);
  }
  return out;
}

// Input grid for the max-gradient-norm curves: dense linear coverage plus two
// huge sentinels that keep the clip branch sampled for every bitwidth (clip
// gradients do not depend on |x|).
inline std::vector<double> gradnorm_grid(double span = 130.0, std::size_t n = 64001) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i)
    g[i] = -span + 2.0 * span * static_cast<double>(i) / static_cast<double>(n - 1);
  g.push_back(-1e300);
  g.push_back(1e300);
  return g;
}

// Latent defaults for the norm curves: unit stepsize/range for the uniform
// family, q_min = 2^-6 for the pow2 family.
inline Quantizer gradnorm_quantizer(Param p) {
  Quantizer q;
  q.param = p;
  q.is_signed = true;
  switch (p) {
    case Param::U1: q.theta = {4.0, 1.0}; break;
    case Param::U2: q.theta = {4.0, 1.0}; break;
    case Param::U3: q.theta = {1.0, 1.0}; break;
    case Param::P1: q.theta = {4.0, 1.0}; break;
    case Param::P2: q.theta = {4.0, 0x1.0p-6}; break;
    case Param::P3: q.theta = {0x1.0p-6, 1.0}; break;
  }
  // The b sweep must stay inside the latent bounds, and derived pow2 ranges
  // blow up past n = 7; widen q_max so the curve is limited by the math, not
  // the clip.
  q.bounds.qmax_max = 1e300;
  q.bounds.qmin_min = 1e-300;
  q.bounds.d_min = 1e-300;
  return q;
}

struct GradnormRow {
  Param param;
  int b = 0;
  double max_norm = 0.0;
};

inline std::vector<GradnormRow> run_gradnorm(Family family, int b_lo, int b_hi,
                                             const std::vector<double>& grid) {
  std::vector<GradnormRow> rows;
  const std::array<Param, 3> params = family == Family::Uniform
                                          ? std::array<Param, 3>{Param::U1, Param::U2, Param::U3}
                                          : std::array<Param, 3>{Param::P1, Param::P2, Param::P3};
  for (Param p : params) {
    const Quantizer q = gradnorm_quantizer(p);
    for (const auto& [b, norm] : max_grad_norm_curve(q, b_lo, b_hi, grid))
      rows.push_back({p, b, norm});
  }
  return rows;
}

}  // namespace dq
