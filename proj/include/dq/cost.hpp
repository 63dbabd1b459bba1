#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dq/quantizer.hpp"

// Per-layer cost formulas and the memory-constraint penalty.
//
// Memory model (square feature maps of side N, square kernels of side K,
// M output and M' input channels/units, bitwidths b_w and b_x):
//   dense:  C_mul = M*M'          C_add = M*M'          S_w = M(M'+1)b_w    S_x = M b_x
//   conv:   C_mul = M*M'*N^2*K^2  C_add = M*M'*N^2*K^2  S_w = M(M'K^2+1)b_w S_x = M N^2 b_x
// Power-of-two quantization trades every multiplication for an extra
// addition: C_mul = 0 and C_add doubles. Bias-less layers drop the "+1".

namespace dq {

enum class CostKind { Dense, Conv2d, Elementwise };

struct LayerSpec {
  CostKind kind = CostKind::Dense;
  int m_out = 0;   // output channels or units
  int m_in = 0;    // input channels or units
  int n_out = 0;   // output spatial side (Conv2d/Elementwise)
  int k = 0;       // kernel side (Conv2d)
  bool has_bias = true;
};

struct LayerCost {
  double c_mul = 0.0;
  double c_add = 0.0;
  double s_w_bits = 0.0;
  double s_x_bits = 0.0;
};

constexpr double kKiB = 8.0 * 1024.0;  // bits per KiB
constexpr double kMiB = 8.0 * 1024.0 * 1024.0;

inline LayerCost layer_costs(const LayerSpec& spec, double b_w, double b_x,
                             Family family = Family::Uniform) {
  if (spec.m_out <= 0 || (spec.kind != CostKind::Elementwise && spec.m_in <= 0))
    throw std::invalid_argument("layer_costs: dimensions must be positive");
  LayerCost c;
  const double bias = spec.has_bias ? 1.0 : 0.0;
  switch (spec.kind) {
    case CostKind::Dense: {
      const double macs = static_cast<double>(spec.m_out) * spec.m_in;
      c.c_mul = macs;
      c.c_add = macs;
      c.s_w_bits = spec.m_out * (spec.m_in + bias) * b_w;
      c.s_x_bits = spec.m_out * b_x;
      break;
    }
    case CostKind::Conv2d: {
      if (spec.n_out <= 0 || spec.k <= 0)
        throw std::invalid_argument("layer_costs: Conv2d needs spatial side and kernel");
      const double n2 = static_cast<double>(spec.n_out) * spec.n_out;
      const double k2 = static_cast<double>(spec.k) * spec.k;
      const double macs = static_cast<double>(spec.m_out) * spec.m_in * n2 * k2;
      c.c_mul = macs;
      c.c_add = macs;
      c.s_w_bits = spec.m_out * (spec.m_in * k2 + bias) * b_w;
      c.s_x_bits = spec.m_out * n2 * b_x;
      break;
    }
    case CostKind::Elementwise: {
      const double n2 = spec.n_out > 0 ? static_cast<double>(spec.n_out) * spec.n_out : 1.0;
      c.c_mul = 0.0;
      c.c_add = spec.m_out * n2;
      c.s_w_bits = 0.0;
      c.s_x_bits = spec.m_out * n2 * b_x;
      return c;  // no multiplications to trade regardless of family
    }
  }
  if (family == Family::Pow2) {
    c.c_add += c.c_mul;  // exponent additions replace the multiplications
    c.c_mul = 0.0;
  }
  return c;
}

// Static network description with explicit bitwidths, used by the memory
// calculator and the shipped fixture specs. b_x is the storage width of the
// layer's OUTPUT tensor.
struct NetLayerSpec {
  std::string name;
  LayerSpec spec;
  double b_w = 32.0;
  double b_x = 32.0;
  Family family = Family::Uniform;
};

struct StaticNet {
  std::string name;
  std::vector<NetLayerSpec> layers;
};

struct MemoryReport {
  double s_w_bits = 0.0;
  double s_x_total_bits = 0.0;
  double s_x_max_bits = 0.0;
  std::size_t argmax_layer = 0;  // lowest index on ties
  double c_mul = 0.0;
  double c_add = 0.0;
  std::vector<LayerCost> per_layer;
};

inline MemoryReport network_memory(const StaticNet& net) {
  if (net.layers.empty()) throw std::invalid_argument("network_memory: empty network");
  MemoryReport r;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    const LayerCost c = layer_costs(l.spec, l.b_w, l.b_x, l.family);
    r.per_layer.push_back(c);
    r.s_w_bits += c.s_w_bits;
    r.s_x_total_bits += c.s_x_bits;
    r.c_mul += c.c_mul;
    r.c_add += c.c_add;
    if (c.s_x_bits > r.s_x_max_bits) {
      r.s_x_max_bits = c.s_x_bits;
      r.argmax_layer = i;
    }
  }
  return r;
}

// One billable tensor: memory = coeff_bits * bitwidth. Live quantizers supply
// the bitwidth (integer for reported values, smooth for gradients); a null
// quantizer means a fixed storage width (e.g. unquantized logits).
struct MemoryBill {
  double coeff_bits = 0.0;
  const Quantizer* q = nullptr;
  double fixed_bits = 32.0;
};

// Constraints, all optional:
//   g1 = S_w - s0_w_bits <= 0, g2 = sum S_x - s0_x_bits <= 0,
//   g3 = max S_x - s0_xhat_bits <= 0,
// each reported in units of unit_bits (default KiB) so hand-set lambdas have
// stable meaning. Penalty value = sum_j lambda_j * max(0, g_j)^2.
struct PenaltyConfig {
  bool g1_on = false, g2_on = false, g3_on = false;
  double s0_w_bits = 0.0, s0_x_bits = 0.0, s0_xhat_bits = 0.0;
  std::array<double, 3> lambda{0.0, 0.0, 0.0};
  double unit_bits = kKiB;
};

struct PenaltyResult {
  // Reported values use integer (addressable) bitwidths.
  double value = 0.0;
  std::array<double, 3> g{0.0, 0.0, 0.0};
  // The surrogate the gradient actually descends: smooth bitwidths everywhere.
  double value_smooth = 0.0;
  std::array<double, 3> g_smooth{0.0, 0.0, 0.0};
  std::size_t argmax_bill = 0;
  // d(value_smooth)/d(latent pair), accumulated per quantizer.
  std::map<const Quantizer*, std::array<double, 2>> dtheta;
};

namespace detail {

// Partials of smooth_bitwidth with respect to the latent pair, evaluated at
// the projected parameters (identity STE through the projection). For the
// bitwidth-latent parametrizations the derived parameter cancels and the
// smooth bitwidth is b plus a constant.
inline std::array<double, 2> smooth_bitwidth_dtheta(const Quantizer& q,
                                                    const EffectiveParams& eff) {
  const double ln2 = 0.6931471805599453;
  switch (q.param) {
    case Param::U1:
    case Param::U2:
    case Param::P1:
    case Param::P2:
      return {1.0, 0.0};
    case Param::U3: {
      const double sum = eff.q_max + eff.d;
      return {-eff.q_max / (ln2 * eff.d * sum), 1.0 / (ln2 * sum)};
    }
    case Param::P3: {
      const double m = std::log2(eff.q_max / eff.q_min);
      const double denom = ln2 * ln2 * (m + 1.0);
      return {-1.0 / (denom * eff.q_min), 1.0 / (denom * eff.q_max)};
    }
  }
  return {0.0, 0.0};
}

struct BillEval {
  double mem_int = 0.0;
  double mem_smooth = 0.0;
};

inline BillEval eval_bill(const MemoryBill& b) {
  if (!b.q) return {b.coeff_bits * b.fixed_bits, b.coeff_bits * b.fixed_bits};
  const EffectiveParams eff = project(*b.q);
  const Family fam = b.q->family();
  return {b.coeff_bits * infer_bitwidth(eff, fam, b.q->is_signed, b.q->with_zero),
          b.coeff_bits * smooth_bitwidth(eff, fam, b.q->is_signed, b.q->with_zero)};
}

}  // namespace detail

inline PenaltyResult penalty(const std::vector<MemoryBill>& weight_bills,
                             const std::vector<MemoryBill>& act_bills,
                             const PenaltyConfig& cfg) {
  PenaltyResult r;
  const double u = cfg.unit_bits;
  if (u <= 0.0) throw std::invalid_argument("penalty: unit_bits must be positive");

  double sw_int = 0.0, sw_sm = 0.0;
  for (const auto& b : weight_bills) {
    const auto e = detail::eval_bill(b);
    sw_int += e.mem_int;
    sw_sm += e.mem_smooth;
  }
  double sx_int = 0.0, sx_sm = 0.0, sx_max_int = 0.0, sx_max_sm = 0.0;
  for (std::size_t i = 0; i < act_bills.size(); ++i) {
    const auto e = detail::eval_bill(act_bills[i]);
    sx_int += e.mem_int;
    sx_sm += e.mem_smooth;
    if (e.mem_int > sx_max_int) {
      sx_max_int = e.mem_int;
      sx_max_sm = e.mem_smooth;
      r.argmax_bill = i;
    }
  }

  r.g = {cfg.g1_on ? (sw_int - cfg.s0_w_bits) / u : 0.0,
         cfg.g2_on ? (sx_int - cfg.s0_x_bits) / u : 0.0,
         cfg.g3_on ? (sx_max_int - cfg.s0_xhat_bits) / u : 0.0};
  r.g_smooth = {cfg.g1_on ? (sw_sm - cfg.s0_w_bits) / u : 0.0,
                cfg.g2_on ? (sx_sm - cfg.s0_x_bits) / u : 0.0,
                cfg.g3_on ? (sx_max_sm - cfg.s0_xhat_bits) / u : 0.0};
  const std::array<bool, 3> on{cfg.g1_on, cfg.g2_on, cfg.g3_on};
  for (int j = 0; j < 3; ++j) {
    if (!on[j]) continue;
    r.value += cfg.lambda[j] * std::max(0.0, r.g[j]) * std::max(0.0, r.g[j]);
    r.value_smooth +=
        cfg.lambda[j] * std::max(0.0, r.g_smooth[j]) * std::max(0.0, r.g_smooth[j]);
  }

  // Gradient of the smooth surrogate. Scale for constraint j and bill k:
  // lambda_j * 2 * max(0, g_j) * coeff_k / unit, chained through the smooth
  // bitwidth partials. The max-activation constraint routes only to the
  // argmax bill.
  auto add_grad = [&r](const MemoryBill& b, double scale) {
    if (!b.q || scale == 0.0) return;
    const EffectiveParams eff = project(*b.q);
    const auto ds = detail::smooth_bitwidth_dtheta(*b.q, eff);
    auto& acc = r.dtheta[b.q];
    acc[0] += scale * ds[0];
    acc[1] += scale * ds[1];
  };
  if (cfg.g1_on && r.g_smooth[0] > 0.0)
    for (const auto& b : weight_bills)
      add_grad(b, cfg.lambda[0] * 2.0 * r.g_smooth[0] * b.coeff_bits / u);
  if (cfg.g2_on && r.g_smooth[1] > 0.0)
    for (const auto& b : act_bills)
      add_grad(b, cfg.lambda[1] * 2.0 * r.g_smooth[1] * b.coeff_bits / u);
  if (cfg.g3_on && r.g_smooth[2] > 0.0 && !act_bills.empty())
    add_grad(act_bills[r.argmax_bill],
             cfg.lambda[2] * 2.0 * r.g_smooth[2] * act_bills[r.argmax_bill].coeff_bits / u);
  return r;
}

// Initial-loss heuristic: pick each lambda_j so the violated penalty term
// starts at the magnitude of the task loss; satisfied constraints get 0.
inline std::array<double, 3> auto_lambda(double initial_loss,
                                         const std::array<double, 3>& initial_g) {
  if (!std::isfinite(initial_loss)) throw std::invalid_argument("auto_lambda: non-finite loss");
  std::array<double, 3> lam{0.0, 0.0, 0.0};
  for (int j = 0; j < 3; ++j) {
    if (initial_g[j] > 0.0) {
      const double g = std::max(initial_g[j], 1e-12);
      lam[j] = initial_loss / (g * g);
    }
  }
  return lam;
}

}  // namespace dq
