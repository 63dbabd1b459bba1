#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dq/quantizer.hpp"
#include "dq/rng.hpp"

using namespace dq;
using Catch::Approx;

namespace {

constexpr double kLn2 = 0.6931471805599453;

Quantizer make_q(Param p, double t0, double t1, bool is_signed = true,
                 bool with_zero = false) {
  Quantizer q;
  q.param = p;
  q.theta = {t0, t1};
  q.is_signed = is_signed;
  q.with_zero = with_zero;
  return q;
}

EffectiveParams uniform_eff(double d, double q_max, bool is_signed = true) {
  Quantizer q = make_q(Param::U3, d, q_max, is_signed);
  return project(q);
}

EffectiveParams pow2_eff(double q_min, double q_max, bool is_signed = true,
                         bool with_zero = false) {
  Quantizer q = make_q(Param::P3, q_min, q_max, is_signed, with_zero);
  return project(q);
}

// Nearest codeword over {k*d : |k| <= round(q_max/d)}, ties away from zero.
double codebook_oracle_uniform(double x, const EffectiveParams& eff, bool is_signed) {
  const double xv = is_signed ? x : (x > 0.0 ? x : 0.0);
  const long kmax = std::lround(eff.q_max / eff.d);
  double best = 0.0, best_dist = std::fabs(xv);
  for (long k = -kmax; k <= kmax; ++k) {
    const double cw = k * eff.d;
    const double dist = std::fabs(xv - cw);
    if (dist < best_dist ||
        (dist == best_dist && std::fabs(cw) > std::fabs(best)))
      best = cw, best_dist = dist;
  }
  return best;
}

// Power-of-two codeword nearest to |x| in log2 distance (ties toward the
// larger power), clamped to [q_min, q_max]; the exponent search uses frexp
// and a midpoint comparison rather than the forward pass's floored log2.
double codebook_oracle_pow2(double x, const EffectiveParams& eff, bool is_signed,
                            bool with_zero) {
  const double xv = is_signed ? x : (x > 0.0 ? x : 0.0);
  const double ax = std::fabs(xv);
  if (ax == 0.0) return 0.0;
  if (with_zero && ax < eff.q_min / std::sqrt(2.0)) return 0.0;
  if (ax <= eff.q_min) return sign0(xv) * eff.q_min;
  if (ax > eff.q_max) return sign0(xv) * eff.q_max;
  int e = 0;
  std::frexp(ax, &e);  // ax = m * 2^e with m in [0.5, 1)
  --e;                 // now 2^e <= ax < 2^(e+1)
  const double mid = std::exp2(e + 0.5);
  const int chosen = ax < mid ? e : e + 1;
  return sign0(xv) * std::exp2(chosen);
}

}  // namespace

TEST_CASE("uniform projection snaps latents and derives the range") {
  SECTION("stepsize latents snap to the nearest power of two") {
    const EffectiveParams eff = project(make_q(Param::U3, 0.3, 1.0));
    REQUIRE(eff.d == 0.25);
  }
  SECTION("bitwidth latents round to the nearest integer, halves away from zero") {
    REQUIRE(project(make_q(Param::U1, 3.4, 0.25)).b == 3);
    REQUIRE(project(make_q(Param::U1, 2.5, 0.25)).b == 3);
  }
  SECTION("signed U1 derives q_max = (2^(b-1)-1)*d") {
    const EffectiveParams eff = project(make_q(Param::U1, 3.0, 0.25));
    REQUIRE(eff.q_max == 0.75);
  }
  SECTION("unsigned U1 keeps the sign bit for levels: q_max = (2^b-1)*d") {
    const EffectiveParams eff = project(make_q(Param::U1, 3.0, 0.25, false));
    REQUIRE(eff.q_max == 1.75);
  }
  SECTION("U2 snaps the derived stepsize, not q_max") {
    const EffectiveParams eff = project(make_q(Param::U2, 3.0, 0.8));
    REQUIRE(eff.q_max == 0.8);
    REQUIRE(eff.d == 0.25);  // snap(0.8/3)
  }
  SECTION("U3 infers the bitwidth from the projected pair") {
    const EffectiveParams eff = project(make_q(Param::U3, 0.25, 0.8));
    REQUIRE(eff.q_max == 0.8);
    REQUIRE(eff.b == 4);  // ceil(log2(0.8/0.25 + 1) + 1)
  }
  SECTION("latents are clipped into bounds before snapping") {
    REQUIRE(project(make_q(Param::U1, 99.0, 0.25)).b == 16);
    REQUIRE(project(make_q(Param::U3, 1e-9, 1.0)).d == 0x1.0p-16);
  }
}

TEST_CASE("projection validates latents, bounds, and family") {
  Quantizer q = make_q(Param::U3, 0.25, 1.0);
  SECTION("non-finite latent") {
    q.theta[0] = std::nan("");
    REQUIRE_THROWS_AS(project(q), std::invalid_argument);
  }
  SECTION("bounds with min >= max") {
    q.bounds.d_min = 1.0;
    q.bounds.d_max = 0.5;
    REQUIRE_THROWS_AS(project(q), std::invalid_argument);
  }
  SECTION("family mismatch") {
    REQUIRE_THROWS_AS(project_uniform(make_q(Param::P1, 3.0, 1.0)),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(project_pow2(make_q(Param::U1, 3.0, 1.0)),
                      std::invalid_argument);
  }
}

TEST_CASE("projection is idempotent") {
  Xoshiro256pp rng(7);
  const Param params[] = {Param::U1, Param::U2, Param::U3,
                          Param::P1, Param::P2, Param::P3};
  for (Param p : params) {
    for (int rep = 0; rep < 50; ++rep) {
      Quantizer q = make_q(p, 0.0, 0.0, rep % 2 == 0, false);
      q.theta[0] = rng.uniform(p == Param::U3 ? 0.01 : (p == Param::P3 ? 0.01 : 2.0),
                               p == Param::U3 ? 4.0 : (p == Param::P3 ? 0.9 : 9.0));
      q.theta[1] = rng.uniform(p == Param::P2 ? 0.01 : 0.1,
                               p == Param::P2 ? 0.9 : 8.0);
      EffectiveParams eff1;
      try {
        eff1 = project(q);
      } catch (const std::domain_error&) {
        continue;  // a legitimately degenerate pow2 draw
      }
      Quantizer q2 = q;
      switch (p) {
        case Param::U1: q2.theta = {double(eff1.b), eff1.d}; break;
        case Param::U2: q2.theta = {double(eff1.b), eff1.q_max}; break;
        case Param::U3: q2.theta = {eff1.d, eff1.q_max}; break;
        case Param::P1: q2.theta = {double(eff1.b), eff1.q_max}; break;
        case Param::P2: q2.theta = {double(eff1.b), eff1.q_min}; break;
        case Param::P3: q2.theta = {eff1.q_min, eff1.q_max}; break;
      }
      const EffectiveParams eff2 = project(q2);
      REQUIRE(eff2.d == eff1.d);
      REQUIRE(eff2.q_min == eff1.q_min);
      REQUIRE(eff2.q_max == eff1.q_max);
      REQUIRE(eff2.b == eff1.b);
    }
  }
}

TEST_CASE("uniform forward rounds onto the stepsize grid") {
  const EffectiveParams eff = uniform_eff(0.25, 0.75);
  REQUIRE(uniform_forward(0.3, eff, true) == 0.25);
  REQUIRE(uniform_forward(-0.9, eff, true) == -0.75);   // clip region
  REQUIRE(uniform_forward(0.125, eff, true) == 0.25);   // half rounds away from zero
  REQUIRE(uniform_forward(-0.125, eff, true) == -0.25);
  REQUIRE(uniform_forward(0.0, eff, true) == 0.0);
  REQUIRE(uniform_forward(-0.6, eff, false) == 0.0);    // unsigned: negatives collapse
  REQUIRE_THROWS_AS(uniform_forward(std::nan(""), eff, true), std::invalid_argument);
}

TEST_CASE("uniform forward equals the brute-force nearest codeword") {
  const struct { double d, q_max; bool is_signed; } settings[] = {
      {0.25, 0.75, true}, {0.125, 0.875, true}, {0.5, 3.5, true}, {0.25, 1.75, false}};
  for (const auto& s : settings) {
    const EffectiveParams eff = uniform_eff(s.d, s.q_max, s.is_signed);
    // Quarter-step grid hits every tie point exactly (d is a power of two).
    const double step = s.d / 4.0;
    for (double x = -2.0 * s.q_max; x <= 2.0 * s.q_max; x += step) {
      REQUIRE(uniform_forward(x, eff, s.is_signed) ==
              codebook_oracle_uniform(x, eff, s.is_signed));
    }
  }
}

TEST_CASE("uniform backward per parametrization") {
  const EffectiveParams eff = uniform_eff(0.25, 0.75);
  SECTION("U3 inner: residual flows to d only") {
    const QuantGrad g = uniform_backward(0.3, eff, Param::U3, true);
    REQUIRE(g.grad_input == 1.0);
    REQUIRE(g.grad_theta[0] == Approx(-0.2));
    REQUIRE(g.grad_theta[1] == 0.0);
  }
  SECTION("U3 clip: sign flows to q_max only") {
    const QuantGrad g = uniform_backward(-1.0, eff, Param::U3, true);
    REQUIRE(g.grad_input == 0.0);
    REQUIRE(g.grad_theta[0] == 0.0);
    REQUIRE(g.grad_theta[1] == -1.0);
  }
  SECTION("the |x| = q_max boundary is inner") {
    const QuantGrad g = uniform_backward(0.75, eff, Param::U3, true);
    REQUIRE(g.grad_input == 1.0);
    REQUIRE(g.grad_theta[1] == 0.0);
  }
  SECTION("U1 clip branch") {
    const QuantGrad g = uniform_backward(1.0, eff, Param::U1, true);
    REQUIRE(g.grad_theta[0] == Approx(0.25 * 4.0 * kLn2));  // d * 2^(b-1) * ln2
    REQUIRE(g.grad_theta[1] == 3.0);                        // 2^(b-1) - 1
  }
  SECTION("U2 inner branch") {
    const QuantGrad g = uniform_backward(0.3, eff, Param::U2, true);
    REQUIRE(g.grad_theta[0] == Approx(-(4.0 * kLn2 / 3.0) * -0.05));
    REQUIRE(g.grad_theta[1] == Approx(-0.05 / 0.75));
  }
  SECTION("unsigned quantizers have dead gradients for negative inputs") {
    const QuantGrad g = uniform_backward(-0.3, eff, Param::U3, false);
    REQUIRE(g.grad_input == 0.0);
    REQUIRE(g.grad_theta[0] == 0.0);
    REQUIRE(g.grad_theta[1] == 0.0);
  }
}

TEST_CASE("uniform input gradient matches the clamp derivative") {
  const EffectiveParams eff = uniform_eff(0.25, 0.75);
  const double h = 1e-6;
  for (double x : {0.1, 0.6, -0.4, 1.5, -2.0}) {
    const double fd = (clip(x + h, -0.75, 0.75) - clip(x - h, -0.75, 0.75)) / (2 * h);
    REQUIRE(uniform_backward(x, eff, Param::U3, true).grad_input == Approx(fd));
  }
}

TEST_CASE("clip-region q_max derivative matches grid-commensurate differences") {
  // Perturbing q_max by a full step keeps the saturation value on the grid,
  // so the secant equals the derivative exactly.
  const double d = 0.25;
  const double h = d;
  for (double q_max : {0.75, 1.75}) {
    for (double x : {2.0, -2.0}) {
      const double fp = uniform_forward(x, uniform_eff(d, q_max + h), true);
      const double fm = uniform_forward(x, uniform_eff(d, q_max - h), true);
      const double fd = (fp - fm) / (2.0 * h);
      for (Param p : {Param::U2, Param::U3}) {
        EffectiveParams eff = uniform_eff(d, q_max);
        if (p == Param::U2) eff.b = 3;
        const QuantGrad g = uniform_backward(x, eff, p, true);
        REQUIRE(g.grad_theta[1] == Approx(fd).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("scaling x and the grid together scales the output") {
  for (int k : {-3, 5}) {
    const double s = std::exp2(k);
    const EffectiveParams e1 = uniform_eff(0.25, 0.75);
    const EffectiveParams e2 = uniform_eff(0.25 * s, 0.75 * s);
    for (double x : {0.3, -0.9, 0.125, 0.7}) {
      REQUIRE(uniform_forward(x * s, e2, true) == s * uniform_forward(x, e1, true));
    }
  }
}

TEST_CASE("pow2 projection derives the range identity") {
  SECTION("P2 signed: q_max = 2^(2^(b-1)-1) * q_min") {
    const EffectiveParams eff = project(make_q(Param::P2, 3.0, 0.25));
    REQUIRE(eff.q_max == 2.0);
    REQUIRE(eff.b == 3);
  }
  SECTION("q_max latents snap to powers of two") {
    const EffectiveParams eff = project(make_q(Param::P3, 0.25, 3.0));
    REQUIRE(eff.q_max == 4.0);
  }
  SECTION("P3 infers the bitwidth") {
    const EffectiveParams eff = project(make_q(Param::P3, 0.25, 2.0));
    REQUIRE(eff.b == 3);  // ceil(log2(log2(8)+1)+1)
  }
  SECTION("an equal snapped pair is a degenerate range") {
    Quantizer q = make_q(Param::P3, 2.0, 2.0);
    q.bounds.qmin_max = 4.0;  // default bound would mask the collision
    REQUIRE_THROWS_AS(project(q), std::domain_error);
  }
  SECTION("with_zero consumes one exponent bit") {
    const EffectiveParams plain = project(make_q(Param::P2, 4.0, 0.125));
    const EffectiveParams wz = project(make_q(Param::P2, 4.0, 0.125, true, true));
    REQUIRE(plain.q_max == 0.125 * std::exp2((1 << 3) - 1));
    REQUIRE(wz.q_max == 0.125 * std::exp2((1 << 2) - 1));
  }
}

TEST_CASE("pow2 forward branch structure") {
  const EffectiveParams eff = pow2_eff(0.25, 2.0);
  REQUIRE(pow2_forward(1.3, eff, true, false) == 1.0);
  REQUIRE(pow2_forward(0.1, eff, true, false) == 0.25);
  REQUIRE(pow2_forward(-5.0, eff, true, false) == -2.0);
  REQUIRE(pow2_forward(0.0, eff, true, false) == 0.0);
  REQUIRE(pow2_forward(0.25, eff, true, false) == 0.25);  // |x| = q_min boundary
  REQUIRE(pow2_forward(-0.6, eff, false, false) == 0.0);  // unsigned
  SECTION("with_zero prunes below q_min/sqrt(2)") {
    REQUIRE(pow2_forward(0.15, eff, true, true) == 0.0);
    REQUIRE(pow2_forward(0.18, eff, true, true) == 0.25);  // just above the threshold
  }
}

TEST_CASE("pow2 forward matches the log-distance codebook oracle") {
  const struct { double q_min, q_max; bool wz; } settings[] = {
      {0.25, 2.0, false}, {0.0625, 8.0, false}, {0.25, 2.0, true}};
  for (const auto& s : settings) {
    const EffectiveParams eff = pow2_eff(s.q_min, s.q_max, true, s.wz);
    for (int i = -4000; i <= 4000; ++i) {
      const double x = i * (3.0 * s.q_max / 4000.0);
      REQUIRE(pow2_forward(x, eff, true, s.wz) ==
              codebook_oracle_pow2(x, eff, true, s.wz));
    }
  }
}

TEST_CASE("pow2 backward per parametrization") {
  const EffectiveParams small = pow2_eff(0.25, 2.0);
  SECTION("P3 q_min branch") {
    const QuantGrad g = pow2_backward(0.1, small, Param::P3, true, false);
    REQUIRE(g.grad_input == 0.0);
    REQUIRE(g.grad_theta[0] == 1.0);
    REQUIRE(g.grad_theta[1] == 0.0);
  }
  SECTION("P3 middle branch: theta-free, input grad 2^e/|x|") {
    const QuantGrad g = pow2_backward(1.3, small, Param::P3, true, false);
    REQUIRE(g.grad_theta[0] == 0.0);
    REQUIRE(g.grad_theta[1] == 0.0);
    REQUIRE(g.grad_input == Approx(1.0 / 1.3));
  }
  SECTION("P3 clip branch carries the sign") {
    const QuantGrad g = pow2_backward(-5.0, small, Param::P3, true, false);
    REQUIRE(g.grad_theta[0] == 0.0);
    REQUIRE(g.grad_theta[1] == -1.0);
  }
  SECTION("P1 q_min branch") {
    EffectiveParams eff = small;
    eff.b = 3;
    const QuantGrad g = pow2_backward(0.05, eff, Param::P1, true, false);
    REQUIRE(g.grad_theta[0] == Approx(-kLn2 * kLn2 * 4.0 * 0.25));
    REQUIRE(g.grad_theta[1] == Approx(0.125));
  }
  SECTION("P2 clip branch") {
    EffectiveParams eff = small;
    eff.b = 3;
    const QuantGrad g = pow2_backward(-5.0, eff, Param::P2, true, false);
    REQUIRE(g.grad_theta[0] == Approx(-kLn2 * kLn2 * 4.0 * 2.0));
    REQUIRE(g.grad_theta[1] == Approx(-8.0));
  }
  SECTION("with_zero pruned inputs are gradient-dead") {
    const QuantGrad g = pow2_backward(0.15, small, Param::P3, true, true);
    REQUIRE(g.grad_input == 0.0);
    REQUIRE(g.grad_theta[0] == 0.0);
    REQUIRE(g.grad_theta[1] == 0.0);
  }
}

TEST_CASE("tensor quantization shares one projection and sums theta grads") {
  const Quantizer q = make_q(Param::U3, 0.25, 0.75);
  SECTION("elementwise forward") {
    const TensorQuant t = quantize_tensor({0.3, -0.9, 0.125}, q);
    REQUIRE(t.values == std::vector<double>{0.25, -0.75, 0.25});
  }
  SECTION("empty input") {
    REQUIRE(quantize_tensor({}, q).values.empty());
  }
  SECTION("zero maps to zero even with the explicit-zero code") {
    const Quantizer p = make_q(Param::P3, 0.25, 2.0, true, true);
    REQUIRE(quantize_tensor({0.0}, p).values == std::vector<double>{0.0});
  }
  SECTION("backward: zero upstream kills both outputs") {
    const TensorQuant t = quantize_tensor({0.3, -0.9}, q);
    const auto [dx, dtheta] = quantize_tensor_backward({0.0, 0.0}, t);
    REQUIRE(dx == std::vector<double>{0.0, 0.0});
    REQUIRE(dtheta[0] == 0.0);
    REQUIRE(dtheta[1] == 0.0);
  }
  SECTION("backward scales with upstream") {
    const TensorQuant t = quantize_tensor({0.3}, q);
    const auto [dx, dtheta] = quantize_tensor_backward({2.0}, t);
    REQUIRE(dx[0] == 2.0);
    REQUIRE(dtheta[0] == Approx(-0.4));
    REQUIRE(dtheta[1] == 0.0);
  }
  SECTION("backward accumulates over elements") {
    const TensorQuant t = quantize_tensor({0.3, -1.0}, q);
    const auto [dx, dtheta] = quantize_tensor_backward({1.0, 1.0}, t);
    REQUIRE(dx == std::vector<double>{1.0, 0.0});
    REQUIRE(dtheta[0] == Approx(-0.2));
    REQUIRE(dtheta[1] == -1.0);
  }
  SECTION("backward rejects shape mismatch") {
    const TensorQuant t = quantize_tensor({0.3}, q);
    REQUIRE_THROWS_AS(quantize_tensor_backward({1.0, 1.0}, t), std::invalid_argument);
  }
}

TEST_CASE("max gradient norm over a fixed grid") {
  std::vector<double> grid;
  for (int i = -1300; i <= 1300; ++i) grid.push_back(i * 0.1);
  SECTION("U3 norms are exactly 1 once the grid reaches the clip region") {
    const auto curve = max_grad_norm_curve(make_q(Param::U3, 1.0, 1.0), 2, 8, grid);
    for (const auto& [b, norm] : curve) REQUIRE(norm == 1.0);
  }
  SECTION("U1 norms grow with b and match the closed form at b = 4") {
    const auto curve = max_grad_norm_curve(make_q(Param::U1, 4.0, 1.0), 2, 8, grid);
    for (std::size_t i = 1; i < curve.size(); ++i)
      REQUIRE(curve[i].second > curve[i - 1].second);
    const double expected = std::hypot(7.0, 8.0 * kLn2);  // clip branch at d = 1
    REQUIRE(curve[2].first == 4);
    REQUIRE(curve[2].second == Approx(expected));
  }
  SECTION("empty grid and empty range are rejected") {
    REQUIRE_THROWS_AS(max_grad_norm_curve(make_q(Param::U1, 4.0, 1.0), 2, 8, {}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(max_grad_norm_curve(make_q(Param::U1, 4.0, 1.0), 5, 4, grid),
                      std::invalid_argument);
  }
}

TEST_CASE("empirical hessian structure") {
  const std::vector<double> samples = gaussian_vector(11, 10000);
  SECTION("U3 and P3 are exactly diagonal") {
    const auto hu = empirical_hessian(make_q(Param::U3, 0x1.0p-3, 0.875), samples);
    REQUIRE(hu[1] == 0.0);
    REQUIRE(hu[2] == 0.0);
    REQUIRE(hu[0] > 0.0);
    REQUIRE(hu[3] > 0.0);
    const auto hp = empirical_hessian(make_q(Param::P3, 0x1.0p-3, 1.0), samples);
    REQUIRE(hp[1] == 0.0);
    REQUIRE(hp[2] == 0.0);
  }
  SECTION("U2 couples its latents") {
    const auto h = empirical_hessian(make_q(Param::U2, 3.0, 0.75), samples);
    REQUIRE(std::fabs(h[1]) > 0.0);
    REQUIRE(h[1] == h[2]);
  }
  SECTION("empty sample set is rejected") {
    REQUIRE_THROWS_AS(empirical_hessian(make_q(Param::U3, 0.25, 1.0), {}),
                      std::invalid_argument);
  }
}

TEST_CASE("bitwidth inference and its smooth surrogate") {
  SECTION("uniform signed") {
    REQUIRE(infer_bitwidth(uniform_eff(0x1.0p-3, 0.875), Family::Uniform, true, false) == 4);
    REQUIRE(infer_bitwidth(uniform_eff(0.25, 1.0), Family::Uniform, true, false) == 4);
    REQUIRE(smooth_bitwidth(uniform_eff(0x1.0p-3, 0.875), Family::Uniform, true, false) == 4.0);
    REQUIRE(smooth_bitwidth(uniform_eff(0.25, 1.0), Family::Uniform, true, false) ==
            Approx(std::log2(5.0) + 1.0));
  }
  SECTION("pow2 signed") {
    REQUIRE(infer_bitwidth(pow2_eff(0.25, 2.0), Family::Pow2, true, false) == 3);
  }
  SECTION("invalid ranges are rejected") {
    EffectiveParams bad;
    bad.d = 0.0;
    bad.q_max = 1.0;
    REQUIRE_THROWS_AS(infer_bitwidth(bad, Family::Uniform, true, false),
                      std::invalid_argument);
    bad.d = 0.25;
    bad.q_min = 2.0;
    bad.q_max = 1.0;
    REQUIRE_THROWS_AS(infer_bitwidth(bad, Family::Pow2, true, false),
                      std::invalid_argument);
  }
  SECTION("the ceiling of the surrogate is the integer bitwidth") {
    Xoshiro256pp rng(3);
    for (int rep = 0; rep < 200; ++rep) {
      const bool is_signed = rep % 2 == 0;
      const EffectiveParams ue =
          uniform_eff(std::exp2(-(rep % 8)), rng.uniform(0.1, 8.0), is_signed);
      REQUIRE(infer_bitwidth(ue, Family::Uniform, is_signed, false) ==
              std::ceil(smooth_bitwidth(ue, Family::Uniform, is_signed, false)));
      const bool wz = rep % 3 == 0;
      const double qmin = std::exp2(-2 - (rep % 6));
      const double qmax = qmin * std::exp2(1 + (rep % 7));
      const EffectiveParams pe = pow2_eff(qmin, qmax, is_signed, wz);
      REQUIRE(infer_bitwidth(pe, Family::Pow2, is_signed, wz) ==
              std::ceil(smooth_bitwidth(pe, Family::Pow2, is_signed, wz)));
    }
  }
}
