#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "dq/quantizer.hpp"

// Minimal dense-tensor reverse-mode layers for desk-scale training.
// A quantized layer computes f(Q(W; wq) * Q(x; xq) + Q(c; wq)): the bias is
// quantized with the weight quantizer, and the activation quantizer is
// applied to the layer's own input. Weight tensors are quantized once per
// step and shared across the batch; the tape stores per-sample contexts.

namespace dq {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<int>(v.size()) != numel())
      throw std::invalid_argument("Tensor: shape/data mismatch");
  }

  int numel() const {
    int n = 1;
    for (int s : shape) n *= s;
    return n;
  }

  static Tensor zeros(std::vector<int> s) {
    Tensor t;
    t.shape = std::move(s);
    t.v.assign(static_cast<std::size_t>(t.numel()), 0.0);
    return t;
  }
};

struct Layer {
  enum class Kind { Dense, Conv2d, Relu, GlobalAvgPool };
  Kind kind = Kind::Dense;

  // Dense: W is out_ch x in_ch (row-major), input flattened to in_ch.
  // Conv2d: W is out_ch x in_ch x k x k, input (in_ch, N, N), square maps.
  int in_ch = 0, out_ch = 0, k = 0, stride = 1, pad = 0;
  std::vector<double> W, c;

  bool quantized = false;
  Quantizer wq, xq;

  bool has_params() const { return kind == Kind::Dense || kind == Kind::Conv2d; }
};

inline Layer make_dense(int in, int out) {
  Layer l;
  l.kind = Layer::Kind::Dense;
  l.in_ch = in;
  l.out_ch = out;
  l.W.assign(static_cast<std::size_t>(in) * out, 0.0);
  l.c.assign(out, 0.0);
  return l;
}

inline Layer make_conv2d(int in_ch, int out_ch, int k, int stride = 1, int pad = 0) {
  Layer l;
  l.kind = Layer::Kind::Conv2d;
  l.in_ch = in_ch;
  l.out_ch = out_ch;
  l.k = k;
  l.stride = stride;
  l.pad = pad;
  l.W.assign(static_cast<std::size_t>(out_ch) * in_ch * k * k, 0.0);
  l.c.assign(out_ch, 0.0);
  return l;
}

inline Layer make_relu() {
  Layer l;
  l.kind = Layer::Kind::Relu;
  return l;
}

inline Layer make_global_avg_pool() {
  Layer l;
  l.kind = Layer::Kind::GlobalAvgPool;
  return l;
}

struct Network {
  std::vector<Layer> layers;
};

// Weight-side quantization contexts, one entry per layer (unused entries stay
// empty). Built once per training step; valid until any weight changes.
struct StepCtx {
  struct Entry {
    TensorQuant w, c;
    bool active = false;
  };
  std::vector<Entry> weights;
};

inline StepCtx quantize_step(const Network& net) {
  StepCtx sc;
  sc.weights.resize(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    if (l.has_params() && l.quantized) {
      sc.weights[i].w = quantize_tensor(l.W, l.wq);
      sc.weights[i].c = quantize_tensor(l.c, l.wq);
      sc.weights[i].active = true;
    }
  }
  return sc;
}

// Per-sample saved state for the backward pass.
struct LayerCtx {
  std::vector<int> in_shape;
  TensorQuant x;                    // quantized input (quantized layers)
  std::vector<double> in;           // raw input (float layers, relu, pool)
};

struct LayerGrads {
  std::vector<double> dW, dc;
  std::array<double, 2> dwq{0.0, 0.0};
  std::array<double, 2> dxq{0.0, 0.0};
};

struct NetGrads {
  std::vector<LayerGrads> layers;

  static NetGrads zeros_like(const Network& net) {
    NetGrads g;
    g.layers.resize(net.layers.size());
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
      g.layers[i].dW.assign(net.layers[i].W.size(), 0.0);
      g.layers[i].dc.assign(net.layers[i].c.size(), 0.0);
    }
    return g;
  }

  void scale(double a) {
    for (auto& l : layers) {
      for (auto& v : l.dW) v *= a;
      for (auto& v : l.dc) v *= a;
      for (auto& v : l.dwq) v *= a;
      for (auto& v : l.dxq) v *= a;
    }
  }
};

namespace detail {

inline int conv_out_side(const Layer& l, int n_in) {
  const int span = n_in + 2 * l.pad - l.k;
  if (span < 0) throw std::invalid_argument("conv2d: kernel larger than padded input");
  return span / l.stride + 1;
}

inline void dense_apply(const Layer& l, const std::vector<double>& w,
                        const std::vector<double>& c, const std::vector<double>& x,
                        std::vector<double>& y) {
  y.assign(l.out_ch, 0.0);
  for (int o = 0; o < l.out_ch; ++o) {
    double acc = c[o];
    const double* row = &w[static_cast<std::size_t>(o) * l.in_ch];
    for (int i = 0; i < l.in_ch; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

inline void conv_apply(const Layer& l, int n_in, const std::vector<double>& w,
                       const std::vector<double>& c, const std::vector<double>& x,
                       std::vector<double>& y) {
  const int n_out = conv_out_side(l, n_in);
  y.assign(static_cast<std::size_t>(l.out_ch) * n_out * n_out, 0.0);
  for (int o = 0; o < l.out_ch; ++o)
    for (int oy = 0; oy < n_out; ++oy)
      for (int ox = 0; ox < n_out; ++ox) {
        double acc = c[o];
        for (int i = 0; i < l.in_ch; ++i)
          for (int r = 0; r < l.k; ++r) {
            const int iy = oy * l.stride + r - l.pad;
            if (iy < 0 || iy >= n_in) continue;
            for (int s = 0; s < l.k; ++s) {
              const int ix = ox * l.stride + s - l.pad;
              if (ix < 0 || ix >= n_in) continue;
              acc += w[((static_cast<std::size_t>(o) * l.in_ch + i) * l.k + r) * l.k + s] *
                     x[(static_cast<std::size_t>(i) * n_in + iy) * n_in + ix];
            }
          }
        y[(static_cast<std::size_t>(o) * n_out + oy) * n_out + ox] = acc;
      }
}

}  // namespace detail

// Forward through one layer. `sc` supplies the shared weight quantization;
// `ctx`, when given, records what backward needs.
inline Tensor layer_forward(const Layer& l, const StepCtx::Entry* sc, const Tensor& x,
                            LayerCtx* ctx) {
  Tensor out;
  switch (l.kind) {
    case Layer::Kind::Dense: {
      if (x.numel() != l.in_ch) throw std::invalid_argument("dense: input size mismatch");
      out.shape = {l.out_ch};
      if (l.quantized) {
        if (!sc || !sc->active) throw std::invalid_argument("dense: missing weight quantization");
        TensorQuant xq = quantize_tensor(x.v, l.xq);
        detail::dense_apply(l, sc->w.values, sc->c.values, xq.values, out.v);
        if (ctx) ctx->x = std::move(xq);
      } else {
        detail::dense_apply(l, l.W, l.c, x.v, out.v);
        if (ctx) ctx->in = x.v;
      }
      break;
    }
    case Layer::Kind::Conv2d: {
      if (x.shape.size() != 3 || x.shape[0] != l.in_ch || x.shape[1] != x.shape[2])
        throw std::invalid_argument("conv2d: expected square (C, N, N) input");
      const int n_in = x.shape[1];
      const int n_out = detail::conv_out_side(l, n_in);
      out.shape = {l.out_ch, n_out, n_out};
      if (l.quantized) {
        if (!sc || !sc->active) throw std::invalid_argument("conv2d: missing weight quantization");
        TensorQuant xq = quantize_tensor(x.v, l.xq);
        detail::conv_apply(l, n_in, sc->w.values, sc->c.values, xq.values, out.v);
        if (ctx) ctx->x = std::move(xq);
      } else {
        detail::conv_apply(l, n_in, l.W, l.c, x.v, out.v);
        if (ctx) ctx->in = x.v;
      }
      break;
    }
    case Layer::Kind::Relu: {
      out.shape = x.shape;
      out.v.resize(x.v.size());
      for (std::size_t i = 0; i < x.v.size(); ++i) out.v[i] = x.v[i] > 0.0 ? x.v[i] : 0.0;
      if (ctx) ctx->in = x.v;
      break;
    }
    case Layer::Kind::GlobalAvgPool: {
      if (x.shape.size() != 3) throw std::invalid_argument("pool: expected (C, N, N) input");
      const int ch = x.shape[0];
      const int hw = x.shape[1] * x.shape[2];
      out.shape = {ch};
      out.v.assign(ch, 0.0);
      for (int cch = 0; cch < ch; ++cch) {
        double acc = 0.0;
        for (int j = 0; j < hw; ++j) acc += x.v[static_cast<std::size_t>(cch) * hw + j];
        out.v[cch] = acc / hw;
      }
      if (ctx) ctx->in = x.v;
      break;
    }
  }
  if (ctx) ctx->in_shape = x.shape;
  return out;
}

inline Tensor forward_sample(const Network& net, const StepCtx& sc, const Tensor& x,
                             std::vector<LayerCtx>* tape) {
  Tensor cur = x;
  if (tape) tape->assign(net.layers.size(), LayerCtx{});
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    cur = layer_forward(net.layers[i], &sc.weights[i], cur, tape ? &(*tape)[i] : nullptr);
  return cur;
}

// Standalone single-layer entry points (fresh contexts, no tape).
inline Tensor dense_forward(const Layer& l, const Tensor& x) {
  StepCtx::Entry e;
  if (l.quantized) {
    e.w = quantize_tensor(l.W, l.wq);
    e.c = quantize_tensor(l.c, l.wq);
    e.active = true;
  }
  return layer_forward(l, &e, x, nullptr);
}

inline Tensor conv2d_forward(const Layer& l, const Tensor& x) { return dense_forward(l, x); }

// Propagates dL/dout back through one layer, accumulating parameter and
// quantizer gradients. Returns dL/din.
inline std::vector<double> layer_backward(const Layer& l, const StepCtx::Entry* sc,
                                          const LayerCtx& ctx, const std::vector<double>& dout,
                                          LayerGrads& g) {
  switch (l.kind) {
    case Layer::Kind::Dense: {
      const std::vector<double>& xin = l.quantized ? ctx.x.values : ctx.in;
      const std::vector<double>& w = l.quantized ? sc->w.values : l.W;
      std::vector<double> dxq(l.in_ch, 0.0);
      std::vector<double> dwq(l.W.size(), 0.0);
      for (int o = 0; o < l.out_ch; ++o) {
        const double go = dout[o];
        if (go == 0.0) {
          continue;
        }
        const std::size_t row = static_cast<std::size_t>(o) * l.in_ch;
        for (int i = 0; i < l.in_ch; ++i) {
          dxq[i] += go * w[row + i];
          dwq[row + i] += go * xin[i];
        }
      }
      if (l.quantized) {
        for (std::size_t j = 0; j < dwq.size(); ++j) {
          g.dW[j] += dwq[j] * sc->w.grads[j].grad_input;
          g.dwq[0] += dwq[j] * sc->w.grads[j].grad_theta[0];
          g.dwq[1] += dwq[j] * sc->w.grads[j].grad_theta[1];
        }
        for (int o = 0; o < l.out_ch; ++o) {
          g.dc[o] += dout[o] * sc->c.grads[o].grad_input;
          g.dwq[0] += dout[o] * sc->c.grads[o].grad_theta[0];
          g.dwq[1] += dout[o] * sc->c.grads[o].grad_theta[1];
        }
        auto [dx, dth] = quantize_tensor_backward(dxq, ctx.x);
        g.dxq[0] += dth[0];
        g.dxq[1] += dth[1];
        return dx;
      }
      for (std::size_t j = 0; j < dwq.size(); ++j) g.dW[j] += dwq[j];
      for (int o = 0; o < l.out_ch; ++o) g.dc[o] += dout[o];
      return dxq;
    }
    case Layer::Kind::Conv2d: {
      const std::vector<double>& xin = l.quantized ? ctx.x.values : ctx.in;
      const std::vector<double>& w = l.quantized ? sc->w.values : l.W;
      const int n_in = ctx.in_shape[1];
      const int n_out = detail::conv_out_side(l, n_in);
      std::vector<double> dxq(xin.size(), 0.0);
      std::vector<double> dwq(l.W.size(), 0.0);
      std::vector<double> dcq(l.out_ch, 0.0);
      for (int o = 0; o < l.out_ch; ++o)
        for (int oy = 0; oy < n_out; ++oy)
          for (int ox = 0; ox < n_out; ++ox) {
            const double go = dout[(static_cast<std::size_t>(o) * n_out + oy) * n_out + ox];
            if (go == 0.0) continue;
            dcq[o] += go;
            for (int i = 0; i < l.in_ch; ++i)
              for (int r = 0; r < l.k; ++r) {
                const int iy = oy * l.stride + r - l.pad;
                if (iy < 0 || iy >= n_in) continue;
                for (int s = 0; s < l.k; ++s) {
                  const int ix = ox * l.stride + s - l.pad;
                  if (ix < 0 || ix >= n_in) continue;
                  const std::size_t wi =
                      ((static_cast<std::size_t>(o) * l.in_ch + i) * l.k + r) * l.k + s;
                  const std::size_t xi = (static_cast<std::size_t>(i) * n_in + iy) * n_in + ix;
                  dwq[wi] += go * xin[xi];
                  dxq[xi] += go * w[wi];
                }
              }
          }
      if (l.quantized) {
        for (std::size_t j = 0; j < dwq.size(); ++j) {
          g.dW[j] += dwq[j] * sc->w.grads[j].grad_input;
          g.dwq[0] += dwq[j] * sc->w.grads[j].grad_theta[0];
          g.dwq[1] += dwq[j] * sc->w.grads[j].grad_theta[1];
        }
        for (int o = 0; o < l.out_ch; ++o) {
          g.dc[o] += dcq[o] * sc->c.grads[o].grad_input;
          g.dwq[0] += dcq[o] * sc->c.grads[o].grad_theta[0];
          g.dwq[1] += dcq[o] * sc->c.grads[o].grad_theta[1];
        }
        auto [dx, dth] = quantize_tensor_backward(dxq, ctx.x);
        g.dxq[0] += dth[0];
        g.dxq[1] += dth[1];
        return dx;
      }
      for (std::size_t j = 0; j < dwq.size(); ++j) g.dW[j] += dwq[j];
      for (int o = 0; o < l.out_ch; ++o) g.dc[o] += dcq[o];
      return dxq;
    }
    case Layer::Kind::Relu: {
      std::vector<double> dx(ctx.in.size());
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = ctx.in[i] > 0.0 ? dout[i] : 0.0;
      return dx;
    }
    case Layer::Kind::GlobalAvgPool: {
      const int ch = ctx.in_shape[0];
      const int hw = ctx.in_shape[1] * ctx.in_shape[2];
      std::vector<double> dx(ctx.in.size());
      for (int cch = 0; cch < ch; ++cch)
        for (int j = 0; j < hw; ++j)
          dx[static_cast<std::size_t>(cch) * hw + j] = dout[cch] / hw;
      return dx;
    }
  }
  throw std::logic_error("layer_backward: unreachable");
}

inline void backward_sample(const Network& net, const StepCtx& sc,
                            const std::vector<LayerCtx>& tape, std::vector<double> dout,
                            NetGrads& grads) {
  if (tape.size() != net.layers.size())
    throw std::invalid_argument("backward_sample: no forward tape");
  for (std::size_t i = net.layers.size(); i-- > 0;)
    dout = layer_backward(net.layers[i], &sc.weights[i], tape[i], dout, grads.layers[i]);
}

struct SoftmaxCE {
  double loss = 0.0;
  std::vector<double> dlogits;  // softmax - onehot
};

inline SoftmaxCE softmax_cross_entropy(const std::vector<double>& logits, int label) {
  if (label < 0 || label >= static_cast<int>(logits.size()))
    throw std::invalid_argument("softmax_cross_entropy: label out of range");
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  SoftmaxCE out;
  out.loss = std::log(z) - (logits[label] - mx);
  out.dlogits.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    out.dlogits[i] = std::exp(logits[i] - mx) / z - (static_cast<int>(i) == label ? 1.0 : 0.0);
  return out;
}

}  // namespace dq
