// Analytic saddle-point laboratory: small min-max problems with known
// saddles and closed-form smoothness constants, the quantized stochastic
// gradient-descent-ascent recursion, the deterministic alternating GDA used
// for the two-sided PL analysis, contraction-factor formulas, and rate
// fitting for the recorded series.
//
// Update order, used everywhere here: with 1-based step k and stepsizes
// alpha_k, beta_k,
//   xhat_{k+1} = xhat_k - alpha_k * g_x(x_k, y_k)
//   x_{k+1}    = Q_Delta(xhat_{k+1})          (Q_0 = identity)
//   y_{k+1}    = y_k + beta_k * g_y(x_{k+1}, y_k)
// g are exact gradients plus N(0, noise_std^2 I) noise when noise_std > 0.
#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dfc/common.hpp"

namespace dfc {

using Vec = std::vector<double>;

namespace detail {

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

inline Vec sub_vec(const Vec& a, const Vec& b) {
  Vec r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

// dense row-major (rows x cols) times vector
inline Vec matvec(const Vec& m, std::size_t rows, std::size_t cols,
                  const Vec& v) {
  Vec r(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) r[i] += m[i * cols + j] * v[j];
  return r;
}

inline Vec matvec_t(const Vec& m, std::size_t rows, std::size_t cols,
                    const Vec& v) {
  Vec r(cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) r[j] += m[i * cols + j] * v[i];
  return r;
}

// Gaussian elimination with partial pivoting; a is n x n row-major, consumed.
inline Vec solve_linear(Vec a, Vec b) {
  std::size_t n = b.size();
  DFC_CHECK(a.size() == n * n, "solve_linear: shape mismatch");
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    DFC_CHECK(std::abs(a[piv * n + col]) > 1e-12, "solve_linear: singular system");
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[col * n + j], a[piv * n + j]);
      std::swap(b[col], b[piv]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      double f = a[r * n + col] / a[col * n + col];
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) a[r * n + j] -= f * a[col * n + j];
      b[r] -= f * b[col];
    }
  }
  Vec x(n, 0.0);
  for (std::size_t ri = n; ri-- > 0;) {
    double s = b[ri];
    for (std::size_t j = ri + 1; j < n; ++j) s -= a[ri * n + j] * x[j];
    x[ri] = s / a[ri * n + ri];
  }
  return x;
}

// Spectral norm via power iteration on M^T M; deterministic start.
inline double spectral_norm(const Vec& m, std::size_t rows, std::size_t cols) {
  Vec v(cols);
  for (std::size_t j = 0; j < cols; ++j) v[j] = 1.0 + 1.0 / static_cast<double>(j + 2);
  double s = 0.0;
  for (int it = 0; it < 500; ++it) {
    Vec w = matvec_t(m, rows, cols, matvec(m, rows, cols, v));
    double n = norm2(w);
    DFC_CHECK(n > 0.0, "spectral_norm: zero iterate");
    for (auto& x : w) x /= n;
    s = n;
    v = std::move(w);
  }
  return std::sqrt(s);
}

}  // namespace detail

// Coordinate-wise nearest-grid quantizer with spacing delta (identity at 0).
inline Vec quantize_nearest_grid(const Vec& x, double delta) {
  if (delta == 0.0) return x;
  Vec q(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    q[i] = delta * std::round(x[i] / delta);
  return q;
}

// ---- problem families ---------------------------------------------------

struct SaddleProblem {
  std::string name;
  int dx = 0, dy = 0;
  std::function<double(const Vec&, const Vec&)> F;
  std::function<Vec(const Vec&, const Vec&)> grad_x, grad_y;
  Vec xstar, ystar;
  double noise_std = 0.0;  // gradient-noise level for stochastic runs

  // smoothness/curvature data, filled per family
  double L = 0;    // Lipschitz constant of the full gradient map
  double Lx = 0;   // Lipschitz constant of grad_x in x
  double Ly = 0;   // Lipschitz constant of grad_y in y
  double p = 0, q = 0, bnorm = 0;  // bilinear-quadratic: curvatures, ||B||

  // two-sided PL data
  double mu1 = 0, mu2 = 0;
  std::function<double(const Vec&)> h;  // h(x) = max_y F(x, y)
  double hstar = 0.0;
};

// F(x,y) = p/2 ||x||^2 + x^T B y - q/2 ||y||^2 + c^T x + d^T y, strongly
// convex in x and concave in y. The saddle solves the linear optimality
// system. B is d x d row-major.
inline SaddleProblem make_bilinear_quadratic_explicit(int d, double p, double q,
                                                      Vec B, Vec c, Vec dd) {
  DFC_CHECK(d >= 1 && p > 0.0 && q > 0.0, "bilinear-quadratic needs d>=1, p,q>0");
  std::size_t n = static_cast<std::size_t>(d);
  DFC_CHECK(B.size() == n * n && c.size() == n && dd.size() == n,
            "bilinear-quadratic: coefficient shape mismatch");
  SaddleProblem P;
  P.name = "bilinear-quadratic";
  P.dx = P.dy = d;
  P.p = p;
  P.q = q;

  P.F = [n, p, q, B, c, dd](const Vec& x, const Vec& y) {
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      f += 0.5 * p * x[i] * x[i] - 0.5 * q * y[i] * y[i] + c[i] * x[i] + dd[i] * y[i];
    Vec By = detail::matvec(B, n, n, y);
    f += detail::dot(x, By);
    return f;
  };
  P.grad_x = [n, p, B, c](const Vec& x, const Vec& y) {
    Vec g = detail::matvec(B, n, n, y);
    for (std::size_t i = 0; i < n; ++i) g[i] += p * x[i] + c[i];
    return g;
  };
  P.grad_y = [n, q, B, dd](const Vec& x, const Vec& y) {
    Vec g = detail::matvec_t(B, n, n, x);
    for (std::size_t i = 0; i < n; ++i) g[i] += -q * y[i] + dd[i];
    return g;
  };

  // optimality system: [pI  B; B^T  -qI] [x; y] = [-c; -d]
  std::size_t m = 2 * n;
  Vec K(m * m, 0.0), rhs(m);
  for (std::size_t i = 0; i < n; ++i) {
    K[i * m + i] = p;
    K[(n + i) * m + (n + i)] = -q;
    for (std::size_t j = 0; j < n; ++j) {
      K[i * m + (n + j)] = B[i * n + j];
      K[(n + i) * m + j] = B[j * n + i];
    }
    rhs[i] = -c[i];
    rhs[n + i] = -dd[i];
  }
  Vec z = detail::solve_linear(K, rhs);
  P.xstar.assign(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(n));
  P.ystar.assign(z.begin() + static_cast<std::ptrdiff_t>(n), z.end());

  P.Lx = p;
  P.Ly = q;
  P.bnorm = detail::spectral_norm(B, n, n);
  // gradient-map Jacobian [pI B; B^T -qI], constant for a quadratic
  P.L = detail::spectral_norm(K, m, m);
  return P;
}

// Seeded random member of the family: B entries ~ 0.5 N(0,1)/sqrt(d),
// offsets ~ N(0,1).
inline SaddleProblem make_bilinear_quadratic(int d, double p, double q,
                                             std::uint64_t seed) {
  std::size_t n = static_cast<std::size_t>(d >= 1 ? d : 1);
  Rng rng(mix_seed(seed, 0xB111));
  Vec B(n * n), c(n), dd(n);
  for (auto& v : B) v = 0.5 * rng.normal() / std::sqrt(static_cast<double>(d));
  for (auto& v : c) v = rng.normal();
  for (auto& v : dd) v = rng.normal();
  return make_bilinear_quadratic_explicit(d, p, q, std::move(B), std::move(c),
                                          std::move(dd));
}

// Separable-block two-sided PL quadratic: per coordinate i,
//   F_i(x_i, y_i) = p_i/2 x_i^2 - q_i/2 y_i^2 + s_i x_i y_i
// h(x) = max_y F = sum_i (p_i + s_i^2 / q_i)/2 x_i^2, so mu1, mu2 and L are
// closed-form. s = 0, p = q = (2) gives the canonical x^2 - y^2 instance.
inline SaddleProblem make_pl_quadratic(const Vec& p, const Vec& q,
                                       const Vec& s) {
  std::size_t n = p.size();
  DFC_CHECK(q.size() == n && s.size() == n && n >= 1, "pl-quadratic shape mismatch");
  SaddleProblem P;
  P.name = "pl-quadratic";
  P.dx = P.dy = static_cast<int>(n);
  P.xstar.assign(n, 0.0);
  P.ystar.assign(n, 0.0);
  P.F = [n, p, q, s](const Vec& x, const Vec& y) {
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      f += 0.5 * p[i] * x[i] * x[i] - 0.5 * q[i] * y[i] * y[i] + s[i] * x[i] * y[i];
    return f;
  };
  P.grad_x = [n, p, s](const Vec& x, const Vec& y) {
    Vec g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = p[i] * x[i] + s[i] * y[i];
    return g;
  };
  P.grad_y = [n, q, s](const Vec& x, const Vec& y) {
    Vec g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = -q[i] * y[i] + s[i] * x[i];
    return g;
  };
  P.h = [n, p, q, s](const Vec& x) {
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      v += 0.5 * (p[i] + s[i] * s[i] / q[i]) * x[i] * x[i];
    return v;
  };
  P.hstar = 0.0;
  // mu1 is the PL-in-x modulus of F itself, which is min_i p_i for this
  // separable family (per-block ratio ||d_x F||^2 / 2(F - min_x F) lands in
  // [min p, max p]); the envelope h then satisfies PL with the larger
  // modulus min_i (p_i + s_i^2/q_i), so every h-side step of the analysis
  // still holds with mu1.
  double mu1 = 1e300, mu2 = 1e300, L = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    DFC_CHECK(q[i] > 0.0 && p[i] > 0.0,
              "pl-quadratic needs positive curvatures");
    mu1 = std::min(mu1, p[i]);
    mu2 = std::min(mu2, q[i]);
    Vec block = {p[i], s[i], s[i], -q[i]};
    L = std::max(L, detail::spectral_norm(block, 2, 2));
  }
  P.mu1 = mu1;
  P.mu2 = mu2;
  P.L = L;
  return P;
}

// Scalar nonquadratic two-sided PL member:
//   F(x,y) = a x^2 + ex sin^2(w x) - c y^2 - ey sin^2(w y)
// h(x) = a x^2 + ex sin^2(w x) with h* = 0 at x* = 0. The PL moduli are
// certified numerically on a grid over [-range, range]; the Lipschitz
// constant of the gradient is closed-form from the second derivatives.
inline SaddleProblem make_pl_perturbed(double a, double c, double ex, double ey,
                                       double w, double range = 2.0) {
  DFC_CHECK(a > 0.0 && c > 0.0 && ex >= 0.0 && ey >= 0.0,
            "pl-perturbed needs a,c > 0 and nonnegative perturbations");
  SaddleProblem P;
  P.name = "pl-perturbed";
  P.dx = P.dy = 1;
  P.xstar = {0.0};
  P.ystar = {0.0};
  P.F = [a, c, ex, ey, w](const Vec& x, const Vec& y) {
    double sx = std::sin(w * x[0]), sy = std::sin(w * y[0]);
    return a * x[0] * x[0] + ex * sx * sx - c * y[0] * y[0] - ey * sy * sy;
  };
  P.grad_x = [a, ex, w](const Vec& x, const Vec&) {
    return Vec{2.0 * a * x[0] + ex * w * std::sin(2.0 * w * x[0])};
  };
  P.grad_y = [c, ey, w](const Vec&, const Vec& y) {
    return Vec{-2.0 * c * y[0] - ey * w * std::sin(2.0 * w * y[0])};
  };
  P.h = [a, ex, w](const Vec& x) {
    double sx = std::sin(w * x[0]);
    return a * x[0] * x[0] + ex * sx * sx;
  };
  P.hstar = 0.0;
  P.L = std::max(2.0 * a + 2.0 * ex * w * w, 2.0 * c + 2.0 * ey * w * w);

  auto pl_modulus = [range](auto&& f, auto&& fprime) {
    double mu = 1e300;
    const int grid = 4001;
    for (int i = 0; i < grid; ++i) {
      double t = -range + 2.0 * range * i / (grid - 1);
      if (std::abs(t) < 1e-9) continue;
      double val = f(t);
      if (val <= 0.0) continue;
      double g = fprime(t);
      mu = std::min(mu, g * g / (2.0 * val));
    }
    return mu;
  };
  // The grid minimum can sit slightly above the continuum minimum between
  // nodes; shave 0.1% so the certificate survives off-grid spot checks.
  P.mu1 = 0.999 * pl_modulus(
      [&](double t) { double s = std::sin(w * t); return a * t * t + ex * s * s; },
      [&](double t) { return 2.0 * a * t + ex * w * std::sin(2.0 * w * t); });
  P.mu2 = 0.999 * pl_modulus(
      [&](double t) { double s = std::sin(w * t); return c * t * t + ey * s * s; },
      [&](double t) { return 2.0 * c * t + ey * w * std::sin(2.0 * w * t); });
  DFC_CHECK(P.mu1 > 0.0 && P.mu2 > 0.0, "pl-perturbed: vanishing PL modulus");
  return P;
}

// F(x, y*) - F(x*, y); nonnegative, zero exactly at the saddle.
inline double duality_gap(const SaddleProblem& P, const Vec& x, const Vec& y) {
  return P.F(x, P.ystar) - P.F(P.xstar, y);
}

// ---- quantized stochastic GDA (decaying steps) --------------------------

struct GdaSeries {
  std::vector<double> steps;        // 1-based l
  std::vector<double> gap_avg;      // duality gap of the running averages
  std::vector<double> gap_raw;      // duality gap of the current iterate
  std::vector<double> gap_ergodic;  // running mean of gap_raw
  std::vector<double> bound;        // averaged-gap bound at l, filled post-run
  double Dx = 0.0;  // max_k ||x_k - x*|| including the unquantized xhat
  double Dy = 0.0;  // max_k ||y_k - y*||
  bool diverged = false;  // raw gap exceeded 1e6; series ends at that step

  std::string to_csv() const {
    std::ostringstream os;
    os << "k,gap_avg,gap_raw,gap_ergodic,bound\n";
    for (std::size_t i = 0; i < steps.size(); ++i) {
      os << static_cast<long long>(steps[i]) << ',' << gap_avg[i] << ','
         << gap_raw[i] << ',' << gap_ergodic[i] << ',';
      if (i < bound.size()) os << bound[i];
      os << '\n';
    }
    return os.str();
  }
};

inline double theorem1_rhs(const SaddleProblem& P, double Dx, double Dy,
                           double c_alpha, double c_beta, double delta, int l);

inline GdaSeries run_quantized_gda(const SaddleProblem& P, double c_alpha,
                                   double c_beta, double delta, int K,
                                   std::uint64_t seed,
                                   const Vec* x0 = nullptr,
                                   const Vec* y0 = nullptr) {
  DFC_CHECK(K >= 1 && c_alpha > 0.0 && c_beta > 0.0 && delta >= 0.0,
            "bad gda configuration");
  Rng rng(mix_seed(seed, 0x6DA));
  std::size_t nx = static_cast<std::size_t>(P.dx);
  std::size_t ny = static_cast<std::size_t>(P.dy);
  Vec x = x0 ? *x0 : Vec(nx, 1.0);
  Vec y = y0 ? *y0 : Vec(ny, 1.0);
  Vec xhat = x;
  x = quantize_nearest_grid(xhat, delta);

  GdaSeries out;
  out.steps.reserve(static_cast<std::size_t>(K));
  Vec xsum(nx, 0.0), ysum(ny, 0.0);
  double gap_sum = 0.0;

  auto noisy = [&](Vec g) {
    if (P.noise_std > 0.0)
      for (auto& v : g) v += P.noise_std * rng.normal();
    return g;
  };

  for (int k = 1; k <= K; ++k) {
    double ak = c_alpha / std::sqrt(static_cast<double>(k));
    double bk = c_beta / std::sqrt(static_cast<double>(k));
    Vec gx = noisy(P.grad_x(x, y));
    for (std::size_t i = 0; i < nx; ++i) xhat[i] -= ak * gx[i];
    x = quantize_nearest_grid(xhat, delta);
    Vec gy = noisy(P.grad_y(x, y));
    for (std::size_t i = 0; i < ny; ++i) y[i] += bk * gy[i];

    out.Dx = std::max(out.Dx, detail::norm2(detail::sub_vec(x, P.xstar)));
    out.Dx = std::max(out.Dx, detail::norm2(detail::sub_vec(xhat, P.xstar)));
    out.Dy = std::max(out.Dy, detail::norm2(detail::sub_vec(y, P.ystar)));

    for (std::size_t i = 0; i < nx; ++i) xsum[i] += x[i];
    for (std::size_t i = 0; i < ny; ++i) ysum[i] += y[i];
    Vec xbar(nx), ybar(ny);
    double inv = 1.0 / static_cast<double>(k);
    for (std::size_t i = 0; i < nx; ++i) xbar[i] = xsum[i] * inv;
    for (std::size_t i = 0; i < ny; ++i) ybar[i] = ysum[i] * inv;

    double raw = duality_gap(P, x, y);
    gap_sum += raw;
    out.steps.push_back(static_cast<double>(k));
    out.gap_avg.push_back(duality_gap(P, xbar, ybar));
    out.gap_raw.push_back(raw);
    out.gap_ergodic.push_back(gap_sum * inv);
    if (raw > 1e6) {
      out.diverged = true;
      break;
    }
  }
  out.bound.reserve(out.steps.size());
  for (double l : out.steps)
    out.bound.push_back(
        theorem1_rhs(P, out.Dx, out.Dy, c_alpha, c_beta, delta,
                     static_cast<int>(l)));
  return out;
}

// Bound on the averaged-iterate duality gap after l steps, assembled from
// the problem's closed-form constants and the measured region radii. The
// gradient bounds fold in the noise second moment; the final term is the
// quantization-error contribution, proportional to sqrt(dx) * Delta.
inline double theorem1_rhs(const SaddleProblem& P, double Dx, double Dy,
                           double c_alpha, double c_beta, double delta, int l) {
  DFC_CHECK(P.p > 0.0 && P.q > 0.0,
            "theorem1_rhs needs the bilinear-quadratic constants");
  double gx2 = std::pow(P.p * Dx + P.bnorm * Dy, 2.0) +
               static_cast<double>(P.dx) * P.noise_std * P.noise_std;
  double gy2 = std::pow(P.q * Dy + P.bnorm * Dx, 2.0) +
               static_cast<double>(P.dy) * P.noise_std * P.noise_std;
  double ll = static_cast<double>(l);
  double term1 = (Dx * Dx / c_alpha + Dy * Dy / c_beta) / (2.0 * std::sqrt(ll));
  double term2 = (std::sqrt(ll + 1.0) / (2.0 * ll)) *
                 (c_alpha * gx2 + c_alpha * P.Ly * gx2 + c_alpha * P.Ly * Dy * Dy +
                  c_beta * gy2);
  double term3 = (P.Lx * Dx + P.L * Dx + 2.0 * P.Ly * Dy) *
                 std::sqrt(static_cast<double>(P.dx)) * delta;
  return term1 + term2 + term3;
}

// ---- deterministic alternating GDA on the PL family ---------------------

struct PlSeries {
  std::vector<double> a;       // h(x_k) - h*
  std::vector<double> b;       // h(x_k) - F(x_k, y_k)
  std::vector<double> gradsq;  // ||grad_x F||^2 + ||grad_y F||^2 at (x_k, y_k)

  double P(std::size_t k, double lambda) const { return a[k] + lambda * b[k]; }

  std::string to_csv(double lambda, double bound0, double rate) const {
    std::ostringstream os;
    os << "k,a,b,P,gradsq,gradsq_bound\n";
    for (std::size_t k = 0; k < a.size(); ++k)
      os << k << ',' << a[k] << ',' << b[k] << ',' << P(k, lambda) << ','
         << gradsq[k] << ',' << bound0 * std::pow(rate, static_cast<double>(k))
         << '\n';
    return os.str();
  }
};

inline PlSeries run_gda_pl(const SaddleProblem& P, Vec x, Vec y, double alpha,
                           double beta, int K) {
  DFC_CHECK(P.h, "run_gda_pl needs a problem with closed-form h");
  PlSeries out;
  auto record = [&] {
    out.a.push_back(P.h(x) - P.hstar);
    out.b.push_back(P.h(x) - P.F(x, y));
    Vec gx = P.grad_x(x, y), gy = P.grad_y(x, y);
    out.gradsq.push_back(detail::dot(gx, gx) + detail::dot(gy, gy));
  };
  record();
  for (int k = 0; k < K; ++k) {
    Vec gx = P.grad_x(x, y);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= alpha * gx[i];
    Vec gy = P.grad_y(x, y);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += beta * gy[i];
    record();
  }
  return out;
}

// Stepsizes and constants prescribed for the two-sided PL analysis.
struct PlSchedule {
  double alpha = 0.0, beta = 0.0;
  double L_h = 0.0;  // L + L^2 / (2 mu2)
  double M = 0.0;    // max{2 L_h^2 / mu1, 40 L^2 / mu2}
  double rate = 0.0; // 1 - mu1 mu2^2 / (36 L^3)
};

inline PlSchedule pl_schedule(const SaddleProblem& P) {
  DFC_CHECK(P.mu1 > 0.0 && P.mu2 > 0.0 && P.L > 0.0,
            "pl_schedule needs PL moduli and L");
  PlSchedule s;
  s.alpha = P.mu2 * P.mu2 / (18.0 * P.L * P.L * P.L);
  s.beta = 1.0 / P.L;
  s.L_h = P.L + P.L * P.L / (2.0 * P.mu2);
  s.M = std::max(2.0 * s.L_h * s.L_h / P.mu1, 40.0 * P.L * P.L / P.mu2);
  s.rate = 1.0 - P.mu1 * P.mu2 * P.mu2 / (36.0 * P.L * P.L * P.L);
  return s;
}

// ---- appendix contraction factors ---------------------------------------

struct ContractionFactors {
  double gamma1 = 0.0, gamma2 = 0.0;
  double side = 0.0;  // side-condition value, nonnegative when valid
};

// Per-step contraction coefficients of the pair (a_k, lambda-weighted b_k)
// for alternating GDA under two-sided PL. Preconditions follow the analysis:
// alpha <= 1/L_h, beta <= 1/L, and the stepsize side condition
// alpha/2 + lambda (1 - mu2 beta) [alpha/2 - (alpha + alpha^2 L/2)(1 + 1/eps)] >= 0;
// violating any of them is an error naming the inequality.
inline ContractionFactors contraction_factors(double L, double mu1, double mu2,
                                              double alpha, double beta,
                                              double lambda, double eps) {
  DFC_CHECK(mu1 > 0 && mu2 > 0 && L > 0 && lambda > 0 && eps > 0,
            "contraction_factors needs positive constants");
  DFC_CHECK(alpha >= 0 && beta >= 0, "contraction_factors needs alpha, beta >= 0");
  double L_h = L + L * L / (2.0 * mu2);
  DFC_CHECK(alpha <= 1.0 / L_h + 1e-12,
            "contraction requires alpha <= 1/L_h, got alpha = "
                << alpha << " with 1/L_h = " << 1.0 / L_h);
  DFC_CHECK(beta <= 1.0 / L + 1e-12,
            "contraction requires beta <= 1/L, got beta = " << beta
                                                            << " with 1/L = " << 1.0 / L);
  double r = 1.0 - mu2 * beta;  // y-side residual factor, in [0, 1)
  double curv = 2.0 * alpha + alpha * alpha * L;
  ContractionFactors f;
  f.side = alpha / 2.0 +
           lambda * r * (alpha / 2.0 - (alpha + alpha * alpha * L / 2.0) *
                                           (1.0 + 1.0 / eps));
  DFC_CHECK(f.side >= 0.0,
            "side condition alpha/2 + lambda(1-mu2 beta)[alpha/2 - (alpha + "
            "alpha^2 L/2)(1+1/eps)] >= 0 violated: value = "
                << f.side);
  f.gamma1 = 1.0 - mu1 * alpha -
             lambda * mu1 * r * (alpha - curv * (1.0 + 1.0 / eps));
  f.gamma2 = 1.0 - mu2 * beta + alpha * L * L / (lambda * mu2) +
             r * (L * L / mu2) * (curv * (1.0 + eps) + alpha);
  return f;
}

// ---- rate fitting --------------------------------------------------------

struct RateFit {
  double exponent = 0.0;  // log-log slope
  double rate = 0.0;      // geometric per-step factor
  double floor = 0.0;     // tail level the series plateaus at
  double residual = 0.0;  // rms residual of the fit, log domain
  std::size_t lo = 0, hi = 0;  // fitted index window [lo, hi)
};

namespace detail {

// plain least-squares slope of log y vs log k over [lo, hi)
inline double loglog_slope(const std::vector<double>& k,
                           const std::vector<double>& y, std::size_t lo,
                           std::size_t hi) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  double m = 0;
  for (std::size_t i = lo; i < hi; ++i) {
    if (y[i] <= 0.0) continue;
    double lx = std::log(k[i]), ly = std::log(y[i]);
    sx += lx; sy += ly; sxx += lx * lx; sxy += lx * ly;
    m += 1.0;
  }
  DFC_CHECK(m >= 2.0, "loglog_slope: empty window");
  double denom = m * sxx - sx * sx;
  DFC_CHECK(std::abs(denom) > 1e-12, "loglog_slope: degenerate abscissa");
  return (m * sxy - sx * sy) / denom;
}

}  // namespace detail

// Least-squares slope of log y against log k over the pre-floor window. A
// plateau (floor) is detected from the slope of the last 20% of the series:
// if that tail is still decaying the whole series past the initial 10%
// transient is fitted; if the tail has flattened, floor = mean of the last
// 10% and every point at or below 3x the floor is dropped. Falls back to
// the plain middle of the series when the floor cut leaves < 8 points.
inline RateFit fit_loglog(const std::vector<double>& k,
                          const std::vector<double>& y) {
  std::size_t n = y.size();
  DFC_CHECK(k.size() == n && n >= 16, "fit_loglog needs >= 16 points");
  RateFit fit;
  std::size_t tail = std::max<std::size_t>(1, n / 10);
  double tail_slope = detail::loglog_slope(k, y, n - n / 5, n);
  bool plateaued = std::abs(tail_slope) < 0.25;
  double fl = 0.0;
  for (std::size_t i = n - tail; i < n; ++i) fl += y[i];
  fl /= static_cast<double>(tail);
  fit.floor = plateaued ? fl : 0.0;

  // The window is contiguous: it ends where a 32-point running mean first
  // dips to 3x the floor. A per-point cut would keep only upward noise
  // outliers near the boundary and flatten the fitted slope.
  std::size_t start = std::max<std::size_t>(16, n / 100);
  std::size_t hi = plateaued ? start : n;
  if (plateaued) {
    double acc = 0.0;
    const std::size_t w = 32;
    for (std::size_t i = 0; i < n; ++i) {
      acc += y[i];
      if (i >= w) acc -= y[i - w];
      double mean = acc / static_cast<double>(std::min(i + 1, w));
      hi = i;
      if (i >= start && mean <= 3.0 * fit.floor) break;
    }
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = start; i < hi; ++i)
    if (y[i] > 1.05 * fit.floor) idx.push_back(i);
  if (idx.size() < 8) {
    fit.floor = 0.0;
    idx.clear();
    for (std::size_t i = start; i < n - tail; ++i)
      if (y[i] > 0.0) idx.push_back(i);
  }
  DFC_CHECK(idx.size() >= 2, "fit_loglog: series has no usable window");
  fit.lo = idx.front();
  fit.hi = idx.back() + 1;

  // fit the decaying part: the floor estimate is subtracted, which the
  // 3x-floor cut keeps strictly positive on every fitted point
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i : idx) {
    double lx = std::log(k[i]), ly = std::log(y[i] - fit.floor);
    sx += lx; sy += ly; sxx += lx * lx; sxy += lx * ly;
  }
  double m = static_cast<double>(idx.size());
  double denom = m * sxx - sx * sx;
  DFC_CHECK(std::abs(denom) > 1e-12, "fit_loglog: degenerate abscissa");
  fit.exponent = (m * sxy - sx * sy) / denom;
  double intercept = (sy - fit.exponent * sx) / m;
  double rss = 0.0;
  for (std::size_t i : idx) {
    double e = std::log(y[i] - fit.floor) -
               (intercept + fit.exponent * std::log(k[i]));
    rss += e * e;
  }
  fit.residual = std::sqrt(rss / m);
  return fit;
}

// Geometric per-step factor of a positive decaying series: slope of ln y.
inline RateFit fit_geometric(const std::vector<double>& y) {
  std::size_t n = y.size();
  DFC_CHECK(n >= 3, "fit_geometric needs >= 3 points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t m = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] <= 0.0) break;  // stop at the first exact zero (e.g. y hits 0)
    double lx = static_cast<double>(i), ly = std::log(y[i]);
    sx += lx; sy += ly; sxx += lx * lx; sxy += lx * ly;
    ++m;
  }
  DFC_CHECK(m >= 3, "fit_geometric: series dies too early");
  double dm = static_cast<double>(m);
  double denom = dm * sxx - sx * sx;
  RateFit fit;
  fit.exponent = (dm * sxy - sx * sy) / denom;
  fit.rate = std::exp(fit.exponent);
  fit.lo = 0;
  fit.hi = m;
  return fit;
}

}  // namespace dfc
