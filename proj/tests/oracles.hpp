// Independent reference computations used only by the tests. None of these
// share code with the library's implementation paths.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <complex>
#include <numbers>
#include <random>
#include <utility>
#include <vector>

namespace oracle {

using cd = std::complex<double>;

/// Direct O(N²) DFT.
inline std::vector<cd> naive_dft(const std::vector<cd>& x) {
  const std::size_t n = x.size();
  std::vector<cd> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    cd acc{};
    for (std::size_t j = 0; j < n; ++j) {
      const double ang = -2.0 * std::numbers::pi * double((k * j) % n) / double(n);
      acc += x[j] * cd(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

/// Standard normal CDF from the Maclaurin series of erf.
inline double phi_series(double x) {
  const double z = x / std::numbers::sqrt2;
  double term = z, sum = z;
  for (int n = 1; n < 200; ++n) {
    term *= -z * z / double(n);
    sum += term / double(2 * n + 1);
  }
  return 0.5 * (1.0 + 2.0 / std::sqrt(std::numbers::pi) * sum);
}

/// y[r, o] = b[o] + Σ_i x[r, i]·W[i, o]
inline std::vector<double> matmul_bias(const std::vector<double>& x, std::size_t rows, std::size_t din,
                                       const std::vector<double>& W, std::size_t dout,
                                       const std::vector<double>& b) {
  std::vector<double> y(rows * dout);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < dout; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < din; ++i) acc += x[r * din + i] * W[i * dout + o];
      y[r * dout + o] = acc;
    }
  return y;
}

/// Nested-loop zero-padded cross-correlation, x: [B, ci, T], K: [co, ci, k].
inline std::vector<double> conv1d(const std::vector<double>& x, std::size_t B, std::size_t ci,
                                  std::size_t T, const std::vector<double>& K, std::size_t co,
                                  std::size_t k, const std::vector<double>& bias, std::size_t pad) {
  const std::size_t To = T + 2 * pad - k + 1;
  std::vector<double> y(B * co * To);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t t = 0; t < To; ++t) {
        double acc = bias[o];
        for (std::size_t i = 0; i < ci; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const long src = long(t) + long(j) - long(pad);
            if (src < 0 || src >= long(T)) continue;
            acc += K[(o * ci + i) * k + j] * x[(b * ci + i) * T + std::size_t(src)];
          }
        y[(b * co + o) * To + t] = acc;
      }
  return y;
}

/// Explicit per-head attention with 4x4-style score matrices materialized.
/// q, k, v: [L, d] for one batch element.
inline std::vector<double> attention(const std::vector<double>& q, const std::vector<double>& k,
                                     const std::vector<double>& v, std::size_t L, std::size_t d,
                                     std::size_t heads) {
  const std::size_t hd = d / heads;
  std::vector<double> out(L * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<std::vector<double>> S(L, std::vector<double>(L));
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < hd; ++c) s += q[i * d + h * hd + c] * k[j * d + h * hd + c];
        S[i][j] = s / std::sqrt(double(hd));
      }
    for (std::size_t i = 0; i < L; ++i) {
      double z = 0;
      for (std::size_t j = 0; j < L; ++j) z += std::exp(S[i][j]);
      for (std::size_t j = 0; j < L; ++j) {
        const double p = std::exp(S[i][j]) / z;
        for (std::size_t c = 0; c < hd; ++c) out[i * d + h * hd + c] += p * v[j * d + h * hd + c];
      }
    }
  }
  return out;
}

/// Cyclic Jacobi eigen-decomposition of a real symmetric matrix (row-major).
/// Returns eigenvalues and column eigenvectors (row-major n×n).
inline std::pair<std::vector<double>, std::vector<double>> jacobi(std::vector<double> A, std::size_t n) {
  std::vector<double> V(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) V[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += A[p * n + q] * A[p * n + q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = A[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (A[q * n + q] - A[p * n + p]) / (2 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t r = 0; r < n; ++r) {
          const double arp = A[r * n + p], arq = A[r * n + q];
          A[r * n + p] = c * arp - s * arq;
          A[r * n + q] = s * arp + c * arq;
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double apr = A[p * n + r], aqr = A[q * n + r];
          A[p * n + r] = c * apr - s * aqr;
          A[q * n + r] = s * apr + c * aqr;
        }
        for (std::size_t r = 0; r < n; ++r) {
          const double vrp = V[r * n + p], vrq = V[r * n + q];
          V[r * n + p] = c * vrp - s * vrq;
          V[r * n + q] = s * vrp + c * vrq;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = A[i * n + i];
  return {ev, V};
}

/// Hermitian eigenvalues via the real 2n×2n embedding [[Re, -Im], [Im, Re]];
/// every eigenvalue appears twice there. Returned descending, one copy each.
inline std::vector<double> hermitian_eigenvalues(const std::vector<cd>& H, std::size_t n) {
  std::vector<double> R(4 * n * n);
  const std::size_t m = 2 * n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const cd h = H[i * n + j];
      R[i * m + j] = h.real();
      R[i * m + j + n] = -h.imag();
      R[(i + n) * m + j] = h.imag();
      R[(i + n) * m + j + n] = h.real();
    }
  auto [ev, vecs] = jacobi(R, m);
  std::sort(ev.begin(), ev.end(), std::greater<>());
  std::vector<double> out;
  for (std::size_t i = 0; i < m; i += 2) out.push_back(0.5 * (ev[i] + ev[i + 1]));
  return out;
}

/// Scalar AdamW on f(θ) = θ² with decoupled decay.
inline std::vector<double> adamw_quadratic(double theta, int steps, double lr, double wd, double b1,
                                           double b2, double eps) {
  double m = 0, v = 0;
  std::vector<double> traj;
  for (int t = 1; t <= steps; ++t) {
    const double g = 2 * theta;
    theta = theta * (1 - lr * wd);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    theta = theta - lr * mh / (std::sqrt(vh) + eps);
    traj.push_back(theta);
  }
  return traj;
}

/// Softmax then log, no stabilization (inputs kept small by the caller).
inline double naive_cross_entropy(const std::vector<double>& logits, std::size_t C,
                                  const std::vector<int>& labels) {
  double total = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    double z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(logits[b * C + c]);
    total += -std::log(std::exp(logits[b * C + std::size_t(labels[b])]) / z);
  }
  return total / double(labels.size());
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& gen, double lo = -1.0,
                                         double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(gen);
  return v;
}

}  // namespace oracle
