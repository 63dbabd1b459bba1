#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

// Uniform and power-of-two quantizers with trainable parameters.
//
// Each quantizer family has three dependent parameters; exactly two are
// stored as latents ("theta"), the third is derived:
//   uniform:  q_max = (2^n - 1) * d          with n = b - 1 if signed else b
//   pow2:     q_max = 2^(2^n - 1) * q_min    with n = b - signed - with_zero
// Parametrization tags name the latent pair in storage order:
//   U1 = (b, d)   U2 = (b, q_max)   U3 = (d, q_max)
//   P1 = (b, q_max)   P2 = (b, q_min)   P3 = (q_min, q_max)
// The forward pass never sees the latents directly; it uses EffectiveParams
// obtained by projecting them onto the hardware-legal set (b integer,
// stepsize and pow2 ranges exact powers of two). Gradients reach the latents
// through the projection by identity STE.

namespace dq {

enum class Family { Uniform, Pow2 };
enum class Param { U1, U2, U3, P1, P2, P3 };

inline Family family_of(Param p) {
  return (p == Param::U1 || p == Param::U2 || p == Param::U3) ? Family::Uniform
                                                              : Family::Pow2;
}

inline const char* param_name(Param p) {
  switch (p) {
    case Param::U1: return "U1";
    case Param::U2: return "U2";
    case Param::U3: return "U3";
    case Param::P1: return "P1";
    case Param::P2: return "P2";
    case Param::P3: return "P3";
  }
  return "?";
}

inline Param param_from_name(const std::string& s) {
  if (s == "U1") return Param::U1;
  if (s == "U2") return Param::U2;
  if (s == "U3") return Param::U3;
  if (s == "P1") return Param::P1;
  if (s == "P2") return Param::P2;
  if (s == "P3") return Param::P3;
  throw std::invalid_argument("unknown parametrization: " + s);
}

// Clipping ranges for the latent parameters. b bounds come from the training
// recipe (2..16 bit); the rest default wide enough for float32-pretrained
// weight scales and are configurable per quantizer.
struct ParamBounds {
  double b_min = 2.0;
  double b_max = 16.0;
  double d_min = 0x1.0p-16;
  double d_max = 0x1.0p4;
  double qmax_min = 0x1.0p-8;
  double qmax_max = 0x1.0p8;
  double qmin_min = 0x1.0p-16;
  double qmin_max = 1.0;

  void validate() const {
    if (b_min < 2.0) throw std::invalid_argument("ParamBounds: b_min must be >= 2");
    if (!(b_min < b_max) || !(d_min < d_max) || !(qmax_min < qmax_max) ||
        !(qmin_min < qmin_max) || d_min <= 0.0 || qmax_min <= 0.0 || qmin_min <= 0.0)
      throw std::invalid_argument("ParamBounds: each min must be positive and < max");
  }
};

struct Quantizer {
  Param param = Param::U3;
  // Latent pair in the parametrization's order, stored unconstrained.
  std::array<double, 2> theta{1.0, 1.0};
  bool is_signed = true;
  bool with_zero = false;  // Pow2 only: reserve a code for exact zero
  ParamBounds bounds;

  Family family() const { return family_of(param); }
};

// Hardware-legal parameters the forward pass runs on. For uniform quantizers
// q_min is unused. b is the integer bitwidth: the rounded latent where b is a
// latent (U1/U2/P1/P2), the inferred bitwidth otherwise (U3/P3, not clamped
// to the latent bounds).
struct EffectiveParams {
  double d = 0.0;
  double q_min = 0.0;
  double q_max = 0.0;
  int b = 0;
};

struct QuantGrad {
  double grad_input = 0.0;
  std::array<double, 2> grad_theta{0.0, 0.0};
};

inline double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

inline double round_half_away(double x) {
  return x >= 0.0 ? std::floor(x + 0.5) : std::ceil(x - 0.5);
}

// 2^round(log2 v); exact for v an exact power of two.
inline double pow2_snap(double v) {
  return std::exp2(round_half_away(std::log2(v)));
}

inline double clip(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

namespace detail {
inline void check_latents(const Quantizer& q) {
  q.bounds.validate();
  if (!std::isfinite(q.theta[0]) || !std::isfinite(q.theta[1]))
    throw std::invalid_argument("quantizer latents must be finite");
}
// Signed quantizers spend one bit on the sign; with_zero spends one more on
// the explicit zero code.
inline int exponent_bits(int b, bool is_signed, bool with_zero) {
  return b - (is_signed ? 1 : 0) - (with_zero ? 1 : 0);
}
}  // namespace detail

// Bits needed to address the codebook:
//   uniform: ceil(log2(q_max/d + 1) + sign_bit)
//   pow2:    ceil(log2(log2(q_max/q_min) + 1) + sign_bit) + with_zero
inline int infer_bitwidth(const EffectiveParams& eff, Family family, bool is_signed,
                          bool with_zero) {
  if (family == Family::Uniform) {
    if (!(eff.d > 0.0)) throw std::invalid_argument("infer_bitwidth: d must be positive");
    return static_cast<int>(
        std::ceil(std::log2(eff.q_max / eff.d + 1.0) + (is_signed ? 1.0 : 0.0)));
  }
  if (!(eff.q_min > 0.0) || !(eff.q_min < eff.q_max))
    throw std::invalid_argument("infer_bitwidth: need 0 < q_min < q_max");
  return static_cast<int>(std::ceil(std::log2(std::log2(eff.q_max / eff.q_min) + 1.0) +
                                    (is_signed ? 1.0 : 0.0))) +
         (with_zero ? 1 : 0);
}

// Same expressions without the outer ceiling; used only to route memory
// gradients. infer_bitwidth == ceil(smooth_bitwidth) always.
inline double smooth_bitwidth(const EffectiveParams& eff, Family family, bool is_signed,
                              bool with_zero) {
  if (family == Family::Uniform) {
    if (!(eff.d > 0.0)) throw std::invalid_argument("smooth_bitwidth: d must be positive");
    return std::log2(eff.q_max / eff.d + 1.0) + (is_signed ? 1.0 : 0.0);
  }
  if (!(eff.q_min > 0.0) || !(eff.q_min < eff.q_max))
    throw std::invalid_argument("smooth_bitwidth: need 0 < q_min < q_max");
  return std::log2(std::log2(eff.q_max / eff.q_min) + 1.0) + (is_signed ? 1.0 : 0.0) +
         (with_zero ? 1.0 : 0.0);
}

inline EffectiveParams project_uniform(const Quantizer& q) {
  detail::check_latents(q);
  if (q.family() != Family::Uniform)
    throw std::invalid_argument("project_uniform: not a uniform quantizer");
  const ParamBounds& pb = q.bounds;
  EffectiveParams eff;
  switch (q.param) {
    case Param::U1: {
      eff.b = static_cast<int>(round_half_away(clip(q.theta[0], pb.b_min, pb.b_max)));
      const int n = detail::exponent_bits(eff.b, q.is_signed, false);
      eff.d = pow2_snap(clip(q.theta[1], pb.d_min, pb.d_max));
      eff.q_max = eff.d * (std::exp2(n) - 1.0);
      break;
    }
    case Param::U2: {
      eff.b = static_cast<int>(round_half_away(clip(q.theta[0], pb.b_min, pb.b_max)));
      const int n = detail::exponent_bits(eff.b, q.is_signed, false);
      eff.q_max = clip(q.theta[1], pb.qmax_min, pb.qmax_max);
      eff.d = pow2_snap(eff.q_max / (std::exp2(n) - 1.0));
      break;
    }
    case Param::U3: {
      eff.d = pow2_snap(clip(q.theta[0], pb.d_min, pb.d_max));
      eff.q_max = clip(q.theta[1], pb.qmax_min, pb.qmax_max);
      eff.b = infer_bitwidth(eff, Family::Uniform, q.is_signed, false);
      break;
    }
    default:
      throw std::invalid_argument("project_uniform: pow2 parametrization");
  }
  return eff;
}

inline EffectiveParams project_pow2(const Quantizer& q) {
  detail::check_latents(q);
  if (q.family() != Family::Pow2)
    throw std::invalid_argument("project_pow2: not a pow2 quantizer");
  const ParamBounds& pb = q.bounds;
  EffectiveParams eff;
  switch (q.param) {
    case Param::P1: {
      eff.b = static_cast<int>(round_half_away(clip(q.theta[0], pb.b_min, pb.b_max)));
      const int n = detail::exponent_bits(eff.b, q.is_signed, q.with_zero);
      eff.q_max = pow2_snap(clip(q.theta[1], pb.qmax_min, pb.qmax_max));
      eff.q_min = std::ldexp(eff.q_max, -((1 << n) - 1));
      break;
    }
    case Param::P2: {
      eff.b = static_cast<int>(round_half_away(clip(q.theta[0], pb.b_min, pb.b_max)));
      const int n = detail::exponent_bits(eff.b, q.is_signed, q.with_zero);
      eff.q_min = pow2_snap(clip(q.theta[1], pb.qmin_min, pb.qmin_max));
      eff.q_max = std::ldexp(eff.q_min, (1 << n) - 1);
      break;
    }
    case Param::P3: {
      eff.q_min = pow2_snap(clip(q.theta[0], pb.qmin_min, pb.qmin_max));
      eff.q_max = pow2_snap(clip(q.theta[1], pb.qmax_min, pb.qmax_max));
      eff.b = eff.q_min < eff.q_max
                  ? infer_bitwidth(eff, Family::Pow2, q.is_signed, q.with_zero)
                  : 0;
      break;
    }
    default:
      throw std::invalid_argument("project_pow2: uniform parametrization");
  }
  if (!(eff.q_min > 0.0) || !(eff.q_min < eff.q_max) || !std::isfinite(eff.q_max))
    throw std::domain_error("project_pow2: degenerate range (q_min must be < q_max)");
  return eff;
}

inline EffectiveParams project(const Quantizer& q) {
  return q.family() == Family::Uniform ? project_uniform(q) : project_pow2(q);
}

// Pulls both latents back inside the box constraints for their role. Gradient
// updates run on unconstrained latents, so this is applied after every step.
inline void clip_quantizer_latents(Quantizer& q) {
  const ParamBounds& pb = q.bounds;
  switch (q.param) {
    case Param::U1:
      q.theta[0] = clip(q.theta[0], pb.b_min, pb.b_max);
      q.theta[1] = clip(q.theta[1], pb.d_min, pb.d_max);
      break;
    case Param::U2:
    case Param::P1:
      q.theta[0] = clip(q.theta[0], pb.b_min, pb.b_max);
      q.theta[1] = clip(q.theta[1], pb.qmax_min, pb.qmax_max);
      break;
    case Param::U3:
      q.theta[0] = clip(q.theta[0], pb.d_min, pb.d_max);
      q.theta[1] = clip(q.theta[1], pb.qmax_min, pb.qmax_max);
      break;
    case Param::P2:
      q.theta[0] = clip(q.theta[0], pb.b_min, pb.b_max);
      q.theta[1] = clip(q.theta[1], pb.qmin_min, pb.qmin_max);
      break;
    case Param::P3:
      q.theta[0] = clip(q.theta[0], pb.qmin_min, pb.qmin_max);
      q.theta[1] = clip(q.theta[1], pb.qmax_min, pb.qmax_max);
      break;
  }
}

// sign(x) * d * floor(min(|x|, q_max)/d + 1/2). Clip-then-round: the output
// lies on {k*d : |k| <= round(q_max/d)} and halves round away from zero.
// Unsigned quantizers treat negative inputs as 0.
inline double uniform_forward(double x, const EffectiveParams& eff, bool is_signed) {
  if (!std::isfinite(x)) throw std::invalid_argument("uniform_forward: non-finite input");
  const double xv = is_signed ? x : (x > 0.0 ? x : 0.0);
  const double ax = std::fabs(xv);
  const double axc = ax < eff.q_max ? ax : eff.q_max;
  return sign0(xv) * eff.d * std::floor(axc / eff.d + 0.5);
}

// sign(x) * { q_min            0 < |x| <= q_min
//             2^floor(0.5+log2|x|)   q_min < |x| <= q_max
//             q_max            |x| > q_max }
// with_zero additionally maps |x| < q_min/sqrt(2) to exact 0.
inline double pow2_forward(double x, const EffectiveParams& eff, bool is_signed,
                           bool with_zero) {
  if (!std::isfinite(x)) throw std::invalid_argument("pow2_forward: non-finite input");
  const double xv = is_signed ? x : (x > 0.0 ? x : 0.0);
  const double ax = std::fabs(xv);
  if (ax == 0.0) return 0.0;
  if (with_zero && ax < eff.q_min / 1.4142135623730951) return 0.0;
  if (ax <= eff.q_min) return sign0(xv) * eff.q_min;
  if (ax <= eff.q_max) return sign0(xv) * std::exp2(std::floor(0.5 + std::log2(ax)));
  return sign0(xv) * eff.q_max;
}

// STE gradients. grad_input is 1 inside |x| <= q_max and 0 beyond; the
// boundary |x| = q_max belongs to the inner region. grad_theta follows the
// latent order of the parametrization.
inline QuantGrad uniform_backward(double x, const EffectiveParams& eff, Param p,
                                  bool is_signed) {
  QuantGrad g;
  const double xv = is_signed ? x : (x > 0.0 ? x : 0.0);
  const double s = sign0(xv);
  const double ax = std::fabs(xv);
  // Level count P - 1 = q_max/d for the exact identity; P depends on the
  // integer bitwidth, which U3 does not use.
  const double P = std::exp2(detail::exponent_bits(eff.b, is_signed, false));
  const double ln2 = 0.6931471805599453;
  if (ax <= eff.q_max) {
    g.grad_input = (is_signed || x >= 0.0) ? 1.0 : 0.0;
    const double r = uniform_forward(xv, eff, is_signed) - xv;  // rounding residual
    switch (p) {
      case Param::U1:
        g.grad_theta = {0.0, r / eff.d};
        break;
      case Param::U2:
        g.grad_theta = {-(P * ln2 / (P - 1.0)) * r, r / eff.q_max};
        break;
      case Param::U3:
        g.grad_theta = {r / eff.d, 0.0};
        break;
      default:
        throw std::invalid_argument("uniform_backward: pow2 parametrization");
    }
  } else {
    g.grad_input = 0.0;
    switch (p) {
      case Param::U1:
        g.grad_theta = {s * eff.d * P * ln2, s * (P - 1.0)};
        break;
      case Param::U2:
        g.grad_theta = {0.0, s};
        break;
      case Param::U3:
        g.grad_theta = {0.0, s};
        break;
      default:
        throw std::invalid_argument("uniform_backward: pow2 parametrization");
    }
  }
  return g;
}

// grad_input = 2^floor(0.5+log2|x|)/|x| on (q_min, q_max], 0 elsewhere.
// The |x| = q_min boundary belongs to the q_min branch; with_zero's pruned
// inputs get zero gradients everywhere (output is the constant 0 there).
inline QuantGrad pow2_backward(double x, const EffectiveParams& eff, Param p,
                               bool is_signed, bool with_zero) {
  QuantGrad g;
  const double xv = is_signed ? x : (x > 0.0 ? x : 0.0);
  const double s = sign0(xv);
  const double ax = std::fabs(xv);
  const double ln2sq = 0.4804530139182014;  // (ln 2)^2
  const double twon = std::exp2(detail::exponent_bits(eff.b, is_signed, with_zero));
  if (ax == 0.0 || (with_zero && ax < eff.q_min / 1.4142135623730951)) return g;
  if (ax <= eff.q_min) {
    switch (p) {
      case Param::P1: g.grad_theta = {-s * ln2sq * twon * eff.q_min, s * eff.q_min / eff.q_max}; break;
      case Param::P2: g.grad_theta = {0.0, s}; break;
      case Param::P3: g.grad_theta = {s, 0.0}; break;
      default: throw std::invalid_argument("pow2_backward: uniform parametrization");
    }
  } else if (ax <= eff.q_max) {
    g.grad_input = std::exp2(std::floor(0.5 + std::log2(ax))) / ax;
  } else {
    switch (p) {
      case Param::P1: g.grad_theta = {0.0, s}; break;
      case Param::P2: g.grad_theta = {s * ln2sq * twon * eff.q_max, s * eff.q_max / eff.q_min}; break;
      case Param::P3: g.grad_theta = {0.0, s}; break;
      default: throw std::invalid_argument("pow2_backward: uniform parametrization");
    }
  }
  return g;
}

inline double quantizer_forward(double x, const EffectiveParams& eff, const Quantizer& q) {
  return q.family() == Family::Uniform ? uniform_forward(x, eff, q.is_signed)
                                       : pow2_forward(x, eff, q.is_signed, q.with_zero);
}

inline QuantGrad quantizer_backward(double x, const EffectiveParams& eff, const Quantizer& q) {
  return q.family() == Family::Uniform
             ? uniform_backward(x, eff, q.param, q.is_signed)
             : pow2_backward(x, eff, q.param, q.is_signed, q.with_zero);
}

// Per-tensor quantization: one shared projection for the whole tensor, and
// the saved per-element gradients needed for the backward pass.
struct TensorQuant {
  std::vector<double> values;
  std::vector<QuantGrad> grads;
  EffectiveParams eff;
};

inline TensorQuant quantize_tensor(const std::vector<double>& xs, const Quantizer& q) {
  TensorQuant out;
  out.eff = project(q);
  out.values.resize(xs.size());
  out.grads.resize(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    out.values[i] = quantizer_forward(xs[i], out.eff, q);
    out.grads[i] = quantizer_backward(xs[i], out.eff, q);
  }
  return out;
}

// Input gradients are elementwise; the shared theta pair accumulates the sum.
inline std::pair<std::vector<double>, std::array<double, 2>> quantize_tensor_backward(
    const std::vector<double>& upstream, const TensorQuant& ctx) {
  if (upstream.size() != ctx.grads.size())
    throw std::invalid_argument("quantize_tensor_backward: shape mismatch");
  std::vector<double> dx(upstream.size());
  std::array<double, 2> dtheta{0.0, 0.0};
  for (std::size_t i = 0; i < upstream.size(); ++i) {
    dx[i] = upstream[i] * ctx.grads[i].grad_input;
    dtheta[0] += upstream[i] * ctx.grads[i].grad_theta[0];
    dtheta[1] += upstream[i] * ctx.grads[i].grad_theta[1];
  }
  return {std::move(dx), dtheta};
}

// Max Euclidean norm of grad_theta over a fixed input grid, swept over
// integer bitwidths. For parametrizations with a b latent the sweep replaces
// it; U3/P3 gradients do not depend on b, so their rows are constant.
inline std::vector<std::pair<int, double>> max_grad_norm_curve(
    const Quantizer& q, int b_lo, int b_hi, const std::vector<double>& x_grid) {
  if (x_grid.empty()) throw std::invalid_argument("max_grad_norm_curve: empty grid");
  if (b_lo > b_hi) throw std::invalid_argument("max_grad_norm_curve: empty bit range");
  std::vector<std::pair<int, double>> curve;
  for (int b = b_lo; b <= b_hi; ++b) {
    Quantizer qb = q;
    if (q.param != Param::U3 && q.param != Param::P3) qb.theta[0] = b;
    const EffectiveParams eff = project(qb);
    double best = 0.0;
    for (double x : x_grid) {
      const QuantGrad g = quantizer_backward(x, eff, qb);
      const double norm = std::hypot(g.grad_theta[0], g.grad_theta[1]);
      if (norm > best) best = norm;
    }
    curve.emplace_back(b, best);
  }
  return curve;
}

// Sample mean of grad_theta * grad_theta^T, row-major 2x2.
inline std::array<double, 4> empirical_hessian(const Quantizer& q,
                                               const std::vector<double>& samples) {
  if (samples.empty()) throw std::invalid_argument("empirical_hessian: empty sample set");
  const EffectiveParams eff = project(q);
  std::array<double, 4> h{0.0, 0.0, 0.0, 0.0};
  for (double x : samples) {
    const QuantGrad g = quantizer_backward(x, eff, q);
    h[0] += g.grad_theta[0] * g.grad_theta[0];
    h[1] += g.grad_theta[0] * g.grad_theta[1];
    h[2] += g.grad_theta[1] * g.grad_theta[0];
    h[3] += g.grad_theta[1] * g.grad_theta[1];
  }
  for (auto& v : h) v /= static_cast<double>(samples.size());
  return h;
}

}  // namespace dq
