#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "dq/cost.hpp"
#include "dq/data.hpp"
#include "dq/nn.hpp"
#include "dq/optim.hpp"
#include "dq/rng.hpp"

// End-to-end constrained training: quantizer initialization, the batched
// forward/backward loop with the optional memory penalty, optimizer steps on
// weights and quantizer latents together, and per-step logging.

namespace dq {

enum class OptKind { Sgd, Adam };

struct TrainConfig {
  long steps = 500;
  int batch = 32;
  OptKind optimizer = OptKind::Sgd;
  double momentum = 0.9;
  LrSchedule schedule;  // schedule.base_lr is the learning rate
  std::uint64_t seed = 1;

  bool penalty_on = false;
  PenaltyConfig pcfg;
  bool auto_lambda_at_start = false;

  // Abort when the objective exceeds divergence_loss, or is non-finite for
  // divergence_patience consecutive steps.
  double divergence_loss = 1e6;
  int divergence_patience = 5;

  void validate() const {
    if (steps <= 0 || batch <= 0) throw std::invalid_argument("TrainConfig: positive counts");
    schedule.validate();
  }
};

struct LayerEff {
  std::size_t layer_index = 0;
  EffectiveParams w, x;
};

struct StepRecord {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;           // task loss (cross entropy), batch mean
  double penalty_value = 0.0;  // integer-bitwidth penalty
  std::array<double, 3> g{0.0, 0.0, 0.0};
  double s_w_bits = 0.0, s_x_bits = 0.0, s_x_max_bits = 0.0;
  std::vector<LayerEff> eff;
};

struct TrainLog {
  std::vector<StepRecord> records;
  std::array<double, 3> lambda_used{0.0, 0.0, 0.0};
  bool diverged = false;
  std::string abort_reason;
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();
  double final_train_acc = std::numeric_limits<double>::quiet_NaN();
  double final_val_loss = std::numeric_limits<double>::quiet_NaN();
  double final_val_acc = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

// Latents realizing bitwidth b for the given scale parameter (d for uniform,
// q_min or q_max for pow2).
inline void set_uniform_latents(Quantizer& q, int b, double d) {
  const int n = exponent_bits(b, q.is_signed, false);
  const double q_max = d * (std::exp2(n) - 1.0);
  switch (q.param) {
    case Param::U1: q.theta = {static_cast<double>(b), d}; break;
    case Param::U2: q.theta = {static_cast<double>(b), q_max}; break;
    case Param::U3: q.theta = {d, q_max}; break;
    default: throw std::invalid_argument("set_uniform_latents: pow2 parametrization");
  }
}

inline void set_pow2_latents(Quantizer& q, int b, double q_min) {
  const int n = exponent_bits(b, q.is_signed, q.with_zero);
  const double q_max = std::ldexp(q_min, (1 << n) - 1);
  switch (q.param) {
    case Param::P1: q.theta = {static_cast<double>(b), q_max}; break;
    case Param::P2: q.theta = {static_cast<double>(b), q_min}; break;
    case Param::P3: q.theta = {q_min, q_max}; break;
    default: throw std::invalid_argument("set_pow2_latents: uniform parametrization");
  }
}

}  // namespace detail

// Attaches quantizers to every parametric layer. Weight quantizers are
// signed; activation quantizers are signed only until the first ReLU on the
// path (post-ReLU tensors are nonnegative) and pow2 activation quantizers
// reserve the explicit zero code. With pretrained = true the weight stepsize
// follows the max|W| rule at init_bits; otherwise (and for activations,
// whose statistics are unknown here) the 2^-3 default is used.
inline void init_quantizers(Network& net, Param wparam, Param xparam, bool pretrained,
                            int init_bits = 4) {
  if (family_of(wparam) != family_of(xparam))
    throw std::invalid_argument("init_quantizers: mixed quantizer families");
  bool signed_input = true;
  for (auto& l : net.layers) {
    if (l.kind == Layer::Kind::Relu) {
      signed_input = false;
      continue;
    }
    if (!l.has_params()) continue;
    l.quantized = true;
    l.wq = Quantizer{};
    l.wq.param = wparam;
    l.wq.is_signed = true;
    l.xq = Quantizer{};
    l.xq.param = xparam;
    l.xq.is_signed = signed_input;
    if (family_of(wparam) == Family::Uniform) {
      double d = 0x1.0p-3;
      if (pretrained) {
        const double w = detail::max_abs(l.W);
        const int n = detail::exponent_bits(init_bits, true, false);
        if (w > 0.0) d = std::exp2(std::floor(std::log2(w / (std::exp2(n) - 1.0))));
      }
      detail::set_uniform_latents(l.wq, init_bits, d);
      detail::set_uniform_latents(l.xq, init_bits, 0x1.0p-3);
    } else {
      l.xq.with_zero = true;
      double q_min = 0x1.0p-3;
      if (pretrained) {
        const double w = detail::max_abs(l.W);
        const int n = detail::exponent_bits(init_bits, true, false);
        if (w > 0.0) {
          const double q_max = pow2_snap(w);
          q_min = std::ldexp(q_max, -((1 << n) - 1));
        }
      }
      detail::set_pow2_latents(l.wq, init_bits, q_min);
      detail::set_pow2_latents(l.xq, init_bits, 0x1.0p-3);
    }
    signed_input = true;  // affine outputs can be negative again
  }
}

namespace detail {

// Per-layer tensor sizes discovered by a probe forward pass; fixed topology.
struct BillShape {
  std::vector<std::size_t> in_numel;   // per layer
  std::vector<std::size_t> out_numel;  // per layer
  std::size_t output_numel = 0;
};

inline BillShape probe_shapes(const Network& net, const Tensor& sample) {
  BillShape bs;
  StepCtx sc = quantize_step(net);
  Tensor cur = sample;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    bs.in_numel.push_back(static_cast<std::size_t>(cur.numel()));
    cur = layer_forward(net.layers[i], &sc.weights[i], cur, nullptr);
    bs.out_numel.push_back(static_cast<std::size_t>(cur.numel()));
  }
  bs.output_numel = static_cast<std::size_t>(cur.numel());
  return bs;
}

// Weight bills: every stored scalar (W and c) of each quantized layer at its
// weight bitwidth. Activation bills: each quantized layer's input tensor at
// its input-quantizer bitwidth, except the first one (the raw data tensor is
// dataset storage, not an activation), plus the unquantized network output
// at fixed 32 bit.
inline void build_bills(const Network& net, const BillShape& bs,
                        std::vector<MemoryBill>& wbills, std::vector<MemoryBill>& abills) {
  wbills.clear();
  abills.clear();
  bool first_quantized = true;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    if (!l.has_params() || !l.quantized) continue;
    wbills.push_back({static_cast<double>(l.W.size() + l.c.size()), &l.wq, 0.0});
    if (!first_quantized)
      abills.push_back({static_cast<double>(bs.in_numel[i]), &l.xq, 0.0});
    first_quantized = false;
  }
  abills.push_back({static_cast<double>(bs.output_numel), nullptr, 32.0});
}

}  // namespace detail

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline EvalResult evaluate(const Network& net, const LabeledDataset& ds) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  StepCtx sc = quantize_step(net);
  EvalResult r;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tensor x({ds.dim}, std::vector<double>(ds.sample(i), ds.sample(i) + ds.dim));
    const Tensor logits = forward_sample(net, sc, x, nullptr);
    r.loss += softmax_cross_entropy(logits.v, ds.labels[i]).loss;
    int best = 0;
    for (int j = 1; j < logits.numel(); ++j)
      if (logits.v[j] > logits.v[best]) best = j;
    if (best == ds.labels[i]) ++correct;
  }
  r.loss /= static_cast<double>(ds.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  return r;
}

// Per-layer bitwidth/memory summary of the current quantizers. b_x is the
// layer's input-quantizer bitwidth; s_x_bits bills the layer's OUTPUT at the
// consuming quantizer's width (32 bit for the network output), matching the
// activation accounting used by the penalty.
struct BitwidthRow {
  std::size_t layer_index = 0;
  Layer::Kind kind = Layer::Kind::Dense;
  int b_w = 0, b_x = 0;
  double s_w_bits = 0.0, s_x_bits = 0.0;
};

inline std::vector<BitwidthRow> bitwidth_report(const Network& net, const Tensor& probe) {
  const detail::BillShape bs = detail::probe_shapes(net, probe);
  std::vector<BitwidthRow> rows;
  std::vector<std::size_t> qlayers;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (net.layers[i].has_params() && net.layers[i].quantized) qlayers.push_back(i);
  for (std::size_t k = 0; k < qlayers.size(); ++k) {
    const std::size_t i = qlayers[k];
    const Layer& l = net.layers[i];
    BitwidthRow row;
    row.layer_index = i;
    row.kind = l.kind;
    const EffectiveParams weff = project(l.wq);
    const EffectiveParams xeff = project(l.xq);
    row.b_w = infer_bitwidth(weff, l.wq.family(), l.wq.is_signed, l.wq.with_zero);
    row.b_x = infer_bitwidth(xeff, l.xq.family(), l.xq.is_signed, l.xq.with_zero);
    row.s_w_bits = static_cast<double>(l.W.size() + l.c.size()) * row.b_w;
    double out_bits = 32.0;
    if (k + 1 < qlayers.size()) {
      const Layer& next = net.layers[qlayers[k + 1]];
      const EffectiveParams neff = project(next.xq);
      out_bits = infer_bitwidth(neff, next.xq.family(), next.xq.is_signed, next.xq.with_zero);
    }
    row.s_x_bits = static_cast<double>(bs.out_numel[i]) * out_bits;
    rows.push_back(row);
  }
  return rows;
}

inline TrainLog train(Network& net, const LabeledDataset& train_ds,
                      const LabeledDataset& val_ds, TrainConfig cfg) {
  cfg.validate();
  if (train_ds.size() == 0) throw std::invalid_argument("train: empty dataset");

  // Flat parameter view: weights, biases, then quantizer latents per layer.
  std::vector<double*> params;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    Layer& l = net.layers[i];
    if (!l.has_params()) continue;
    for (auto& w : l.W) params.push_back(&w);
    for (auto& c : l.c) params.push_back(&c);
    if (l.quantized) {
      params.push_back(&l.wq.theta[0]);
      params.push_back(&l.wq.theta[1]);
      params.push_back(&l.xq.theta[0]);
      params.push_back(&l.xq.theta[1]);
    }
  }

  SgdMomentum sgd(cfg.optimizer == OptKind::Sgd ? params.size() : 0, cfg.momentum);
  Adam adam(cfg.optimizer == OptKind::Adam ? params.size() : 0);

  Tensor probe({train_ds.dim},
               std::vector<double>(train_ds.sample(0), train_ds.sample(0) + train_ds.dim));
  const detail::BillShape shapes = detail::probe_shapes(net, probe);
  std::vector<MemoryBill> wbills, abills;

  Xoshiro256pp rng(cfg.seed);
  TrainLog log;
  log.lambda_used = cfg.pcfg.lambda;

  std::vector<double> grads(params.size(), 0.0);
  std::vector<int> batch_idx(cfg.batch);
  std::vector<LayerCtx> tape;
  int nonfinite_streak = 0;

  for (long step = 0; step < cfg.steps; ++step) {
    const double lr = lr_at(cfg.schedule, step);
    for (int b = 0; b < cfg.batch; ++b)
      batch_idx[b] = static_cast<int>(rng.next() % train_ds.size());

    StepCtx sc = quantize_step(net);
    NetGrads ng = NetGrads::zeros_like(net);
    double loss = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      const int idx = batch_idx[b];
      Tensor x({train_ds.dim},
               std::vector<double>(train_ds.sample(idx), train_ds.sample(idx) + train_ds.dim));
      const Tensor logits = forward_sample(net, sc, x, &tape);
      SoftmaxCE ce = softmax_cross_entropy(logits.v, train_ds.labels[idx]);
      loss += ce.loss;
      for (auto& dv : ce.dlogits) dv /= cfg.batch;
      backward_sample(net, sc, tape, ce.dlogits, ng);
    }
    loss /= cfg.batch;

    detail::build_bills(net, shapes, wbills, abills);
    if (cfg.penalty_on && cfg.auto_lambda_at_start && step == 0) {
      PenaltyConfig probe_cfg = cfg.pcfg;
      probe_cfg.lambda = {0.0, 0.0, 0.0};
      const PenaltyResult pr = penalty(wbills, abills, probe_cfg);
      cfg.pcfg.lambda = auto_lambda(loss, pr.g);
      log.lambda_used = cfg.pcfg.lambda;
    }
    PenaltyConfig mcfg = cfg.pcfg;
    if (!cfg.penalty_on) {
      // Memory bookkeeping only: report g_j against the (possibly unset)
      // budgets without adding anything to the objective.
      mcfg.lambda = {0.0, 0.0, 0.0};
      mcfg.g1_on = mcfg.g2_on = mcfg.g3_on = true;
    }
    const PenaltyResult pr = penalty(wbills, abills, mcfg);

    StepRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.loss = loss;
    rec.penalty_value = cfg.penalty_on ? pr.value : 0.0;
    rec.g = pr.g;
    double sw = 0.0, sx = 0.0, sxm = 0.0;
    for (const auto& b : wbills) sw += detail::eval_bill(b).mem_int;
    for (const auto& b : abills) {
      const double m = detail::eval_bill(b).mem_int;
      sx += m;
      sxm = std::max(sxm, m);
    }
    rec.s_w_bits = sw;
    rec.s_x_bits = sx;
    rec.s_x_max_bits = sxm;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      const Layer& l = net.layers[i];
      if (!l.has_params() || !l.quantized) continue;
      rec.eff.push_back({i, project(l.wq), project(l.xq)});
    }
    log.records.push_back(std::move(rec));

    const double objective = loss + (cfg.penalty_on ? pr.value : 0.0);
    if (!std::isfinite(objective)) {
      if (++nonfinite_streak >= cfg.divergence_patience) {
        log.diverged = true;
        log.abort_reason = "objective non-finite for " +
                           std::to_string(nonfinite_streak) + " consecutive steps";
        break;
      }
      continue;  // skip the update, try another batch
    }
    nonfinite_streak = 0;
    if (objective > cfg.divergence_loss) {
      log.diverged = true;
      log.abort_reason = "objective " + std::to_string(objective) + " exceeded " +
                         std::to_string(cfg.divergence_loss);
      break;
    }

    // Flatten gradients in the same order as the parameter view.
    std::size_t gi = 0;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      const Layer& l = net.layers[i];
      if (!l.has_params()) continue;
      const LayerGrads& lg = ng.layers[i];
      for (double v : lg.dW) grads[gi++] = v;
      for (double v : lg.dc) grads[gi++] = v;
      if (l.quantized) {
        std::array<double, 2> dw = lg.dwq;
        std::array<double, 2> dx = lg.dxq;
        if (cfg.penalty_on) {
          auto it = pr.dtheta.find(&l.wq);
          if (it != pr.dtheta.end()) {
            dw[0] += it->second[0];
            dw[1] += it->second[1];
          }
          it = pr.dtheta.find(&l.xq);
          if (it != pr.dtheta.end()) {
            dx[0] += it->second[0];
            dx[1] += it->second[1];
          }
        }
        grads[gi++] = dw[0];
        grads[gi++] = dw[1];
        grads[gi++] = dx[0];
        grads[gi++] = dx[1];
      }
    }

    std::vector<std::array<double, 4>> saved;
    for (const auto& l : net.layers)
      if (l.has_params() && l.quantized)
        saved.push_back({l.wq.theta[0], l.wq.theta[1], l.xq.theta[0], l.xq.theta[1]});

    if (cfg.optimizer == OptKind::Sgd)
      sgd.step(lr, params, grads);
    else
      adam.step(lr, params, grads);

    for (auto& l : net.layers) {
      if (!l.has_params() || !l.quantized) continue;
      clip_quantizer_latents(l.wq);
      clip_quantizer_latents(l.xq);
    }

    // Bound clipping keeps each latent in range but cannot maintain joint
    // constraints (q_min < q_max). If the update left any quantizer
    // unprojectable, restore the pre-update latents so the final evaluation
    // still runs, and abort as diverged.
    std::string diag;
    for (const auto& l : net.layers) {
      if (!l.has_params() || !l.quantized) continue;
      try {
        (void)project(l.wq);
        (void)project(l.xq);
      } catch (const std::exception& e) {
        diag = e.what();
        break;
      }
    }
    if (!diag.empty()) {
      std::size_t k = 0;
      for (auto& l : net.layers) {
        if (!l.has_params() || !l.quantized) continue;
        l.wq.theta = {saved[k][0], saved[k][1]};
        l.xq.theta = {saved[k][2], saved[k][3]};
        ++k;
      }
      log.diverged = true;
      log.abort_reason = "quantizer latents left the valid region: " + diag;
      break;
    }
  }

  const EvalResult tr = evaluate(net, train_ds);
  log.final_train_loss = tr.loss;
  log.final_train_acc = tr.accuracy;
  if (val_ds.size() > 0) {
    const EvalResult va = evaluate(net, val_ds);
    log.final_val_loss = va.loss;
    log.final_val_acc = va.accuracy;
  }
  return log;
}

}  // namespace dq
