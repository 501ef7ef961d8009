#include "wiflex/ops.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include "wiflex/parallel.hpp"

namespace wiflex {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

template <class T>
std::size_t last_dim(const Tensor<T>& t) {
  require(t.rank() >= 1, "tensor must have rank >= 1");
  return t.shape().back();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <class T>
T gelu_value(T x) {
  return x * T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

// ---------------------------------------------------------------------------
// linear / add

template <class T>
Var<T> linear(Var<T> x, Var<T> W, Var<T> b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& Wv = W.value();
  const Tensor<T>& bv = b.value();
  require(Wv.rank() == 2, "linear: W must be [d_in, d_out]");
  const std::size_t din = Wv.dim(0), dout = Wv.dim(1);
  require(last_dim(xv) == din, "linear: x last axis " + std::to_string(last_dim(xv)) +
                                   " != d_in " + std::to_string(din));
  require(bv.rank() == 1 && bv.dim(0) == dout, "linear: b must be [d_out]");
  const std::size_t rows = xv.size() / din;

  Shape out_shape = xv.shape();
  out_shape.back() = dout;
  Tensor<T> y(out_shape);
  for (std::size_t n = 0; n < rows; ++n) {
    T* yr = y.data() + n * dout;
    const T* xr = xv.data() + n * din;
    for (std::size_t o = 0; o < dout; ++o) yr[o] = bv[o];
    for (std::size_t i = 0; i < din; ++i) {
      const T xi = xr[i];
      const T* wr = Wv.data() + i * dout;
      for (std::size_t o = 0; o < dout; ++o) yr[o] += xi * wr[o];
    }
  }

  return x.tape->record(std::move(y), {x, W, b}, [=](GradTape<T>& t, std::size_t self) {
    const T* gy = t.grad(self).data();
    const T* xd = t.value(x).data();
    const T* wd = t.value(W).data();
    if (T* gx = t.grad_sink(x)) {
      for (std::size_t n = 0; n < rows; ++n) {
        const T* g = gy + n * dout;
        for (std::size_t i = 0; i < din; ++i) {
          const T* wr = wd + i * dout;
          T acc{};
          for (std::size_t o = 0; o < dout; ++o) acc += g[o] * wr[o];
          gx[n * din + i] += acc;
        }
      }
    }
    if (T* gW = t.grad_sink(W)) {
      for (std::size_t n = 0; n < rows; ++n) {
        const T* g = gy + n * dout;
        for (std::size_t i = 0; i < din; ++i) {
          const T xi = xd[n * din + i];
          T* gr = gW + i * dout;
          for (std::size_t o = 0; o < dout; ++o) gr[o] += xi * g[o];
        }
      }
    }
    if (T* gb = t.grad_sink(b)) {
      for (std::size_t n = 0; n < rows; ++n)
        for (std::size_t o = 0; o < dout; ++o) gb[o] += gy[n * dout + o];
    }
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require(av.shape() == bv.shape(), "add: shape mismatch " + shape_string(av.shape()) + " vs " +
                                        shape_string(bv.shape()));
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  const std::size_t n = y.size();
  return a.tape->record(std::move(y), {a, b}, [=](GradTape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    if (T* ga = t.grad_sink(a))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    if (T* gb = t.grad_sink(b))
      for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// elementwise / normalization

template <class T>
Var<T> gelu(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  const std::size_t n = y.size();
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const Eigen::Map<const Arr> xa(xv.data(), Eigen::Index(n));
  Eigen::Map<Arr>(y.data(), Eigen::Index(n)) =
      xa * T(0.5) * (T(1) + (xa * (T(1) / std::numbers::sqrt2_v<T>)).erf());
  return x.tape->record(std::move(y), {x}, [=](GradTape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    const T* xd = t.value(x).data();
    T* gx = t.grad_sink(x);
    const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
    for (std::size_t i = 0; i < n; ++i) {
      const T xi = xd[i];
      const T cdf = T(0.5) * (T(1) + std::erf(xi / std::numbers::sqrt2_v<T>));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * xi * xi);
      gx[i] += g[i] * (cdf + xi * pdf);
    }
  });
}

template <class T>
Var<T> softmax(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = last_dim(xv);
  const std::size_t rows = xv.size() / n;
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * n;
    T* yr = y.data() + r * n;
    T mx = xr[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xr[i]);
    T sum{};
    for (std::size_t i = 0; i < n; ++i) sum += (yr[i] = std::exp(xr[i] - mx));
    for (std::size_t i = 0; i < n; ++i) yr[i] /= sum;
  }
  return x.tape->record(std::move(y), {x}, [=](GradTape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    const T* yd = t.value(self).data();
    T* gx = t.grad_sink(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g + r * n;
      const T* yr = yd + r * n;
      T dot{};
      for (std::size_t i = 0; i < n; ++i) dot += gr[i] * yr[i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += yr[i] * (gr[i] - dot);
    }
  });
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Tensor<T>& xv = x.value();
  const std::size_t d = last_dim(xv);
  require(gamma.value().size() == d && beta.value().size() == d,
          "layer_norm: gamma/beta must match the last axis");
  const std::size_t rows = xv.size() / d;
  Tensor<T> y(xv.shape());
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(rows);
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mean{};
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= T(d);
    T var{};
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= T(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (xr[i] - mean) * rstd[r];
      xhat[r * d + i] = h;
      y[r * d + i] = h * gm[i] + bt[i];
    }
  }
  return x.tape->record(
      std::move(y), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](GradTape<T>& t, std::size_t self) {
        const T* g = t.grad(self).data();
        const T* gmv = t.value(gamma).data();
        T* gx = t.grad_sink(x);
        T* gg = t.grad_sink(gamma);
        T* gb = t.grad_sink(beta);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g + r * d;
          const T* hr = xhat.data() + r * d;
          if (gg)
            for (std::size_t i = 0; i < d; ++i) gg[i] += gr[i] * hr[i];
          if (gb)
            for (std::size_t i = 0; i < d; ++i) gb[i] += gr[i];
          if (gx) {
            T mean_g{}, mean_gh{};
            for (std::size_t i = 0; i < d; ++i) {
              const T gh = gr[i] * gmv[i];
              mean_g += gh;
              mean_gh += gh * hr[i];
            }
            mean_g /= T(d);
            mean_gh /= T(d);
            for (std::size_t i = 0; i < d; ++i)
              gx[r * d + i] += rstd[r] * (gr[i] * gmv[i] - mean_g - hr[i] * mean_gh);
          }
        }
      });
}

template <class T>
Var<T> batch_norm_1d(Var<T> x, Var<T> gamma, Var<T> beta, RunningStats<T> stats, Mode mode,
                     T momentum, T eps) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "batch_norm_1d: x must be [B, ch, T]");
  const std::size_t B = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
  require(gamma.value().size() == C && beta.value().size() == C,
          "batch_norm_1d: gamma/beta must be [ch]");
  require(stats.mean && stats.var && stats.mean->size() == C && stats.var->size() == C,
          "batch_norm_1d: running stats must be [ch]");
  const std::size_t M = B * L;
  if (mode == Mode::train) require(M >= 2, "batch_norm_1d: train mode needs B*T >= 2");

  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  std::vector<T> mean(C), rstd(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (mode == Mode::train) {
      T m{};
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l) m += xv[(b * C + c) * L + l];
      m /= T(M);
      T v{};
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l) {
          const T dlt = xv[(b * C + c) * L + l] - m;
          v += dlt * dlt;
        }
      v /= T(M);
      mean[c] = m;
      rstd[c] = T(1) / std::sqrt(v + eps);
      (*stats.mean)[c] = (T(1) - momentum) * (*stats.mean)[c] + momentum * m;
      (*stats.var)[c] = (T(1) - momentum) * (*stats.var)[c] + momentum * v;
    } else {
      mean[c] = (*stats.mean)[c];
      rstd[c] = T(1) / std::sqrt((*stats.var)[c] + eps);
    }
  }

  Tensor<T> y(xv.shape());
  std::vector<T> xhat(xv.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t i = (b * C + c) * L + l;
        xhat[i] = (xv[i] - mean[c]) * rstd[c];
        y[i] = xhat[i] * gm[c] + bt[c];
      }

  const bool train = mode == Mode::train;
  return x.tape->record(
      std::move(y), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](GradTape<T>& t, std::size_t self) {
        const T* g = t.grad(self).data();
        const T* gmv = t.value(gamma).data();
        T* gx = t.grad_sink(x);
        T* gg = t.grad_sink(gamma);
        T* gb = t.grad_sink(beta);
        for (std::size_t c = 0; c < C; ++c) {
          T sum_g{}, sum_gh{};
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < L; ++l) {
              const std::size_t i = (b * C + c) * L + l;
              sum_g += g[i];
              sum_gh += g[i] * xhat[i];
            }
          if (gg) gg[c] += sum_gh;
          if (gb) gb[c] += sum_g;
          if (!gx) continue;
          const T scale = gmv[c] * rstd[c];
          const T mg = sum_g / T(M), mgh = sum_gh / T(M);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < L; ++l) {
              const std::size_t i = (b * C + c) * L + l;
              gx[i] += train ? scale * (g[i] - mg - xhat[i] * mgh) : scale * g[i];
            }
        }
      });
}

// ---------------------------------------------------------------------------
// convolutions

namespace {

// out_j[t] += w_j0·in[t-1] + w_j1·in[t] + w_j2·in[t+1] for N output rows of
// length n sharing one input row, zero outside the row. w holds N tap triples.
template <std::size_t N, class T>
inline void taps3_rows(T* const* out, const T* in, std::size_t n, const T* const* w) {
  if (n == 1) {
    for (std::size_t j = 0; j < N; ++j) out[j][0] += w[j][1] * in[0];
    return;
  }
  T w0[N], w1[N], w2[N];
  for (std::size_t j = 0; j < N; ++j) {
    w0[j] = w[j][0];
    w1[j] = w[j][1];
    w2[j] = w[j][2];
    out[j][0] += w1[j] * in[0] + w2[j] * in[1];
  }
  for (std::size_t t = 1; t + 1 < n; ++t) {
    const T a = in[t - 1], b = in[t], c = in[t + 1];
    for (std::size_t j = 0; j < N; ++j) out[j][t] += w0[j] * a + w1[j] * b + w2[j] * c;
  }
  for (std::size_t j = 0; j < N; ++j) out[j][n - 1] += w0[j] * in[n - 2] + w1[j] * in[n - 1];
}

template <class T>
inline void taps3_row(T* out, const T* in, std::size_t n, T w0, T w1, T w2) {
  const T taps[3] = {w0, w1, w2};
  const T* w = taps;
  taps3_rows<1>(&out, in, n, &w);
}

}  // namespace

template <class T>
Var<T> conv1d(Var<T> x, Var<T> K, Var<T> b, std::size_t pad) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& Kv = K.value();
  require(xv.rank() == 3, "conv1d: x must be [B, ch_in, T]");
  require(Kv.rank() == 3, "conv1d: K must be [ch_out, ch_in, k]");
  const std::size_t B = xv.dim(0), ci = xv.dim(1), L = xv.dim(2);
  const std::size_t co = Kv.dim(0), k = Kv.dim(2);
  require(Kv.dim(1) == ci, "conv1d: kernel ch_in " + std::to_string(Kv.dim(1)) +
                               " != input channels " + std::to_string(ci));
  require(b.value().rank() == 1 && b.value().dim(0) == co, "conv1d: b must be [ch_out]");
  require(L + 2 * pad >= k, "conv1d: kernel longer than padded input");
  const std::size_t Lo = L + 2 * pad - k + 1;

  // Input index of output t under tap j is t + j - pad; valid t range per tap.
  auto t_range = [=](std::size_t j) {
    const std::ptrdiff_t off = std::ptrdiff_t(j) - std::ptrdiff_t(pad);
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -off);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(std::ptrdiff_t(Lo), std::ptrdiff_t(L) - off);
    return std::tuple{off, lo, hi};
  };

  Tensor<T> y({B, co, Lo});
  const T* xd = xv.data();
  const T* kd = Kv.data();
  const T* bd = b.value().data();
  parallel_for(B * co, [&](std::size_t bo) {
    const std::size_t bi = bo / co, o = bo % co;
    T* yr = y.data() + bo * Lo;
    for (std::size_t t = 0; t < Lo; ++t) yr[t] = bd[o];
    for (std::size_t i = 0; i < ci; ++i) {
      const T* xr = xd + (bi * ci + i) * L;
      if (k == 3 && pad == 1) {
        const T* w = kd + (o * ci + i) * 3;
        taps3_row(yr, xr, L, w[0], w[1], w[2]);
        continue;
      }
      for (std::size_t j = 0; j < k; ++j) {
        const T w = kd[(o * ci + i) * k + j];
        auto [off, lo, hi] = t_range(j);
        for (std::ptrdiff_t t = lo; t < hi; ++t) yr[t] += w * xr[t + off];
      }
    }
  });

  return x.tape->record(std::move(y), {x, K, b}, [=](GradTape<T>& tp, std::size_t self) {
    const T* gy = tp.grad(self).data();
    const T* xd2 = tp.value(x).data();
    const T* kd2 = tp.value(K).data();
    if (T* gx = tp.grad_sink(x)) {
      parallel_for(B * ci, [&](std::size_t bi_i) {
        const std::size_t bi = bi_i / ci, i = bi_i % ci;
        T* gr = gx + bi_i * L;
        for (std::size_t o = 0; o < co; ++o) {
          const T* g = gy + (bi * co + o) * Lo;
          for (std::size_t j = 0; j < k; ++j) {
            const T w = kd2[(o * ci + i) * k + j];
            auto [off, lo, hi] = t_range(j);
            for (std::ptrdiff_t t = lo; t < hi; ++t) gr[t + off] += w * g[t];
          }
        }
      });
    }
    if (T* gK = tp.grad_sink(K)) {
      parallel_for(co, [&](std::size_t o) {
        for (std::size_t bi = 0; bi < B; ++bi) {
          const T* g = gy + (bi * co + o) * Lo;
          for (std::size_t i = 0; i < ci; ++i) {
            const T* xr = xd2 + (bi * ci + i) * L;
            for (std::size_t j = 0; j < k; ++j) {
              auto [off, lo, hi] = t_range(j);
              T acc{};
              for (std::ptrdiff_t t = lo; t < hi; ++t) acc += g[t] * xr[t + off];
              gK[(o * ci + i) * k + j] += acc;
            }
          }
        }
      });
    }
    if (T* gb = tp.grad_sink(b)) {
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t o = 0; o < co; ++o) {
          const T* g = gy + (bi * co + o) * Lo;
          T acc{};
          for (std::size_t t = 0; t < Lo; ++t) acc += g[t];
          gb[o] += acc;
        }
    }
  });
}


template <class T>
Var<T> conv2d_1x3(Var<T> x, Var<T> K, Var<T> b) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& Kv = K.value();
  require(xv.rank() == 4, "conv2d_1x3: x must be [B, ch_in, F, T]");
  require(Kv.rank() == 4 && Kv.dim(2) == 1 && Kv.dim(3) == 3,
          "conv2d_1x3: K must be [ch_out, ch_in, 1, 3]");
  const std::size_t B = xv.dim(0), ci = xv.dim(1), F = xv.dim(2), L = xv.dim(3);
  const std::size_t co = Kv.dim(0);
  require(Kv.dim(1) == ci, "conv2d_1x3: kernel ch_in " + std::to_string(Kv.dim(1)) +
                               " != input channels " + std::to_string(ci));
  require(b.value().rank() == 1 && b.value().dim(0) == co, "conv2d_1x3: b must be [ch_out]");
  const std::size_t plane = F * L;

  Tensor<T> y({B, co, F, L});
  const T* xd = xv.data();
  const T* kd = Kv.data();
  const T* bd = b.value().data();
  // Blocks of output channels share each input row while it is in cache; the
  // per-element accumulation order (bias, then inputs in order) is unchanged.
  constexpr std::size_t kBlock = 4;
  const std::size_t blocks = (co + kBlock - 1) / kBlock;
  parallel_for(B * blocks, [&](std::size_t bb) {
    const std::size_t bi = bb / blocks, o0 = (bb % blocks) * kBlock, o1 = std::min(co, o0 + kBlock);
    for (std::size_t o = o0; o < o1; ++o) {
      T* yp = y.data() + (bi * co + o) * plane;
      for (std::size_t p = 0; p < plane; ++p) yp[p] = bd[o];
    }
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < ci; ++i) {
        const T* xr = xd + (bi * ci + i) * plane + f * L;
        T* rows[kBlock];
        const T* taps[kBlock];
        for (std::size_t o = o0; o < o1; ++o) {
          rows[o - o0] = y.data() + (bi * co + o) * plane + f * L;
          taps[o - o0] = kd + (o * ci + i) * 3;
        }
        if (o1 - o0 == kBlock) {
          taps3_rows<kBlock>(rows, xr, L, taps);
        } else {
          for (std::size_t j = 0; j < o1 - o0; ++j) taps3_rows<1>(rows + j, xr, L, taps + j);
        }
      }
  });

  return x.tape->record(std::move(y), {x, K, b}, [=](GradTape<T>& tp, std::size_t self) {
    const T* gy = tp.grad(self).data();
    const T* xd2 = tp.value(x).data();
    const T* kd2 = tp.value(K).data();
    if (T* gx = tp.grad_sink(x)) {
      // Adjoint of a correlation is the correlation with reversed taps.
      parallel_for(B * ci, [&](std::size_t bi_i) {
        const std::size_t bi = bi_i / ci, i = bi_i % ci;
        T* gp = gx + bi_i * plane;
        for (std::size_t o = 0; o < co; ++o) {
          const T* w = kd2 + (o * ci + i) * 3;
          const T* g = gy + (bi * co + o) * plane;
          for (std::size_t f = 0; f < F; ++f) taps3_row(gp + f * L, g + f * L, L, w[2], w[1], w[0]);
        }
      });
    }
    if (T* gK = tp.grad_sink(K)) {
      parallel_for(co, [&](std::size_t o) {
        for (std::size_t bi = 0; bi < B; ++bi) {
          const T* g = gy + (bi * co + o) * plane;
          for (std::size_t i = 0; i < ci; ++i) {
            const T* xp = xd2 + (bi * ci + i) * plane;
            T a0{}, a1{}, a2{};
            for (std::size_t f = 0; f < F; ++f) {
              const T* gr = g + f * L;
              const T* xr = xp + f * L;
              for (std::size_t t = 0; t < L; ++t) {
                a1 += gr[t] * xr[t];
                if (t >= 1) a0 += gr[t] * xr[t - 1];
                if (t + 1 < L) a2 += gr[t] * xr[t + 1];
              }
            }
            T* gk = gK + (o * ci + i) * 3;
            gk[0] += a0;
            gk[1] += a1;
            gk[2] += a2;
          }
        }
      });
    }
    if (T* gb = tp.grad_sink(b)) {
      for (std::size_t bi = 0; bi < B; ++bi)
        for (std::size_t o = 0; o < co; ++o) {
          const T* g = gy + (bi * co + o) * plane;
          T acc{};
          for (std::size_t p = 0; p < plane; ++p) acc += g[p];
          gb[o] += acc;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// attention

namespace {

// Dropout keep-scale for position (l, m) of one (batch, head) score matrix,
// regenerated identically in forward and backward.
template <class T>
void attention_dropout_mask(std::vector<T>& mask, std::uint64_t seed, std::size_t bh, T rate) {
  std::mt19937_64 gen(mix_seed(seed, bh, 0x5A5A));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep = T(1) / (T(1) - rate);
  for (T& m : mask) m = u(gen) < double(rate) ? T(0) : keep;
}

}  // namespace

template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, T dropout_rate, Mode mode) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  using Head = Eigen::Map<const Mat, 0, Stride>;
  using HeadOut = Eigen::Map<Mat, 0, Stride>;
  const Tensor<T>& qv = q.value();
  require(qv.rank() == 3, "attention: q must be [B, L, d]");
  require(k.value().shape() == qv.shape() && v.value().shape() == qv.shape(),
          "attention: q, k, v shapes differ");
  const std::size_t B = qv.dim(0), L = qv.dim(1), d = qv.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: d_model " + std::to_string(d) + " not divisible by heads " +
                      std::to_string(heads));
  }
  require(dropout_rate >= T(0) && dropout_rate < T(1), "attention: dropout rate must be in [0, 1)");
  const std::size_t hd = d / heads;
  const T scale = T(1) / std::sqrt(T(hd));
  const bool drop = mode == Mode::train && dropout_rate > T(0);
  const std::uint64_t seed = drop ? q.tape->rng()() : 0;
  const auto Li = Eigen::Index(L), Hi = Eigen::Index(hd);
  // Strided [L, hd] view of one head within a [B, L, d] buffer.
  auto head = [=](const T* base, std::size_t bi, std::size_t h) {
    return Head(base + bi * L * d + h * hd, Li, Hi, Stride(Eigen::Index(d)));
  };
  auto head_out = [=](T* base, std::size_t bi, std::size_t h) {
    return HeadOut(base + bi * L * d + h * hd, Li, Hi, Stride(Eigen::Index(d)));
  };
  // P = row-softmax(scale · q kᵀ) for one (batch, head).
  auto scores = [=](const T* qd, const T* kd, std::size_t bi, std::size_t h, Mat& P) {
    P.noalias() = (head(qd, bi, h) * scale) * head(kd, bi, h).transpose();
    P.colwise() -= P.rowwise().maxCoeff();
    P.array() = P.array().exp();
    P.array().colwise() /= P.rowwise().sum().array();
  };
  auto dropout_mask = [=](std::size_t bh) {
    std::vector<T> mask(L * L);
    attention_dropout_mask(mask, seed, bh, dropout_rate);
    return mask;
  };

  Tensor<T> out(qv.shape());
  {
    const T* qd = qv.data();
    const T* kd = k.value().data();
    const T* vd = v.value().data();
    parallel_for(B * heads, [&](std::size_t bh) {
      const std::size_t bi = bh / heads, h = bh % heads;
      Mat P(Li, Li);
      scores(qd, kd, bi, h, P);
      if (drop) P.array() *= Eigen::Map<const Mat>(dropout_mask(bh).data(), Li, Li).array();
      head_out(out.data(), bi, h).noalias() = P * head(vd, bi, h);
    });
  }

  return q.tape->record(std::move(out), {q, k, v}, [=](GradTape<T>& t, std::size_t self) {
    const T* go = t.grad(self).data();
    const T* qd = t.value(q).data();
    const T* kd = t.value(k).data();
    const T* vd = t.value(v).data();
    T* gq = t.grad_sink(q);
    T* gk = t.grad_sink(k);
    T* gv = t.grad_sink(v);
    // Each (batch, head) owns a disjoint slice of gq/gk/gv.
    parallel_for(B * heads, [&](std::size_t bh) {
      const std::size_t bi = bh / heads, h = bh % heads;
      Mat P(Li, Li);
      scores(qd, kd, bi, h, P);
      const auto gO = head(go, bi, h);
      // gP = (gO vᵀ) ⊙ mask; the dropped weights P ⊙ mask feed gv.
      Mat gP = gO * head(vd, bi, h).transpose();
      if (drop) {
        const auto mask = dropout_mask(bh);
        const Eigen::Map<const Mat> M(mask.data(), Li, Li);
        gP.array() *= M.array();
        if (gv) head_out(gv, bi, h).noalias() += (P.array() * M.array()).matrix().transpose() * gO;
      } else if (gv) {
        head_out(gv, bi, h).noalias() += P.transpose() * gO;
      }
      // Softmax backward: gS = P ⊙ (gP - rowsum(gP ⊙ P)), then the scale.
      const auto dot = (gP.array() * P.array()).rowwise().sum().eval();
      gP = ((gP.array().colwise() - dot) * P.array() * scale).matrix();
      if (gq) head_out(gq, bi, h).noalias() += gP * head(kd, bi, h);
      if (gk) head_out(gk, bi, h).noalias() += gP.transpose() * head(qd, bi, h);
    });
  });
}

namespace {

// Column slice [offset, offset + width) of the last axis.
template <class T>
Var<T> slice_last(Var<T> x, std::size_t offset, std::size_t width) {
  const Tensor<T>& xv = x.value();
  const std::size_t n = last_dim(xv);
  const std::size_t rows = xv.size() / n;
  Shape s = xv.shape();
  s.back() = width;
  Tensor<T> y(s);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < width; ++c) y[r * width + c] = xv[r * n + offset + c];
  return x.tape->record(std::move(y), {x}, [=](GradTape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    T* gx = t.grad_sink(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < width; ++c) gx[r * n + offset + c] += g[r * width + c];
  });
}

}  // namespace

template <class T>
Var<T> multi_head_attention(Var<T> x, const AttentionParams<T>& p, std::size_t heads,
                            T dropout_rate, Mode mode) {
  require(x.value().rank() == 3, "multi_head_attention: x must be [B, L, d]");
  const std::size_t d = x.value().dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("multi_head_attention: d_model " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(heads));
  }
  require(p.qkv_W.value().rank() == 2 && p.qkv_W.value().dim(1) == 3 * d,
          "multi_head_attention: qkv projection must be [d, 3d]");
  Var<T> qkv = linear(x, p.qkv_W, p.qkv_b);
  Var<T> q = slice_last(qkv, 0, d);
  Var<T> k = slice_last(qkv, d, d);
  Var<T> v = slice_last(qkv, 2 * d, d);
  Var<T> ctx = attention(q, k, v, heads, dropout_rate, mode);
  return linear(ctx, p.out_W, p.out_b);
}

template <class T>
Var<T> dropout(Var<T> x, T rate, Mode mode) {
  if (!(rate >= T(0) && rate < T(1))) throw ValidationError("dropout: rate must be in [0, 1)");
  if (mode == Mode::eval || rate == T(0)) return x;
  const Tensor<T>& xv = x.value();
  std::vector<T> mask(xv.size());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto& gen = x.tape->rng();
  const T keep = T(1) / (T(1) - rate);
  for (T& m : mask) m = u(gen) < double(rate) ? T(0) : keep;
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * mask[i];
  return x.tape->record(std::move(y), {x},
                        [=, mask = std::move(mask)](GradTape<T>& t, std::size_t self) {
                          const T* g = t.grad(self).data();
                          T* gx = t.grad_sink(x);
                          for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += g[i] * mask[i];
                        });
}

// ---------------------------------------------------------------------------
// layout

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  const std::size_t n = y.size();
  return x.tape->record(std::move(y), {x}, [=](GradTape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    T* gx = t.grad_sink(x);
    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
  });
}

template <class T>
Var<T> transpose_last2(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "transpose_last2: x must be rank 3");
  const std::size_t B = xv.dim(0), R = xv.dim(1), C = xv.dim(2);
  Tensor<T> y({B, C, R});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) y[(b * C + c) * R + r] = xv[(b * R + r) * C + c];
  return x.tape->record(std::move(y), {x}, [=](GradTape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    T* gx = t.grad_sink(x);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) gx[(b * R + r) * C + c] += g[(b * C + c) * R + r];
  });
}

template <class T>
Var<T> prepend_token(Var<T> x, Var<T> token) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "prepend_token: x must be [B, L, d]");
  const std::size_t B = xv.dim(0), L = xv.dim(1), d = xv.dim(2);
  require(token.value().size() == d, "prepend_token: token must be [d]");
  Tensor<T> y({B, L + 1, d});
  for (std::size_t b = 0; b < B; ++b) {
    T* yb = y.data() + b * (L + 1) * d;
    std::copy_n(token.value().data(), d, yb);
    std::copy_n(xv.data() + b * L * d, L * d, yb + d);
  }
  return x.tape->record(std::move(y), {x, token}, [=](GradTape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    T* gx = t.grad_sink(x);
    T* gt = t.grad_sink(token);
    for (std::size_t b = 0; b < B; ++b) {
      const T* gb = g + b * (L + 1) * d;
      if (gt)
        for (std::size_t c = 0; c < d; ++c) gt[c] += gb[c];
      if (gx)
        for (std::size_t i = 0; i < L * d; ++i) gx[b * L * d + i] += gb[d + i];
    }
  });
}

template <class T>
std::vector<T> gaussian_mixture_weights(std::span<const T> mu, std::span<const T> sigma,
                                        std::size_t length) {
  const std::size_t K = mu.size();
  std::vector<T> p(length * K);
  std::vector<T> logit(K);
  for (std::size_t t = 0; t < length; ++t) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      const T s = std::max(sigma[k], T(kMinSigma));
      const T z = (T(t) - mu[k]) / s;
      logit[k] = T(-0.5) * z * z - std::log(s);
      mx = std::max(mx, logit[k]);
    }
    T sum{};
    for (std::size_t k = 0; k < K; ++k) sum += (p[t * K + k] = std::exp(logit[k] - mx));
    for (std::size_t k = 0; k < K; ++k) p[t * K + k] /= sum;
  }
  return p;
}

template <class T>
Var<T> gaussian_positional_encoding(Var<T> x, Var<T> mu, Var<T> sigma, Var<T> E) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "gaussian_positional_encoding: x must be [B, L, d]");
  const std::size_t B = xv.dim(0), L = xv.dim(1), d = xv.dim(2);
  const std::size_t K = mu.value().size();
  require(K >= 1 && sigma.value().size() == K, "gaussian_positional_encoding: mu/sigma must be [K]");
  require(E.value().rank() == 2 && E.value().dim(0) == K && E.value().dim(1) == d,
          "gaussian_positional_encoding: E must be [K, d]");

  std::vector<T> p = gaussian_mixture_weights<T>(mu.value().values(), sigma.value().values(), L);
  const T* Ed = E.value().data();
  std::vector<T> pe(L * d, T{});
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t k = 0; k < K; ++k) {
      const T w = p[t * K + k];
      for (std::size_t c = 0; c < d; ++c) pe[t * d + c] += w * Ed[k * d + c];
    }
  Tensor<T> y(xv.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L * d; ++i) y[b * L * d + i] = xv[b * L * d + i] + pe[i];

  return x.tape->record(
      std::move(y), {x, mu, sigma, E}, [=, p = std::move(p)](GradTape<T>& t, std::size_t self) {
        const T* g = t.grad(self).data();
        if (T* gx = t.grad_sink(x))
          for (std::size_t i = 0; i < B * L * d; ++i) gx[i] += g[i];
        T* gmu = t.grad_sink(mu);
        T* gsig = t.grad_sink(sigma);
        T* gE = t.grad_sink(E);
        if (!gmu && !gsig && !gE) return;
        const T* Ev = t.value(E).data();
        const T* muv = t.value(mu).data();
        const T* sv = t.value(sigma).data();
        std::vector<T> gpe(L * d, T{});
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < L * d; ++i) gpe[i] += g[b * L * d + i];
        std::vector<T> gp(K);
        for (std::size_t tt = 0; tt < L; ++tt) {
          const T* gr = gpe.data() + tt * d;
          const T* pr = p.data() + tt * K;
          T dot{};
          for (std::size_t k = 0; k < K; ++k) {
            T s{};
            for (std::size_t c = 0; c < d; ++c) s += gr[c] * Ev[k * d + c];
            gp[k] = s;
            dot += s * pr[k];
            if (gE)
              for (std::size_t c = 0; c < d; ++c) gE[k * d + c] += pr[k] * gr[c];
          }
          for (std::size_t k = 0; k < K; ++k) {
            // d(loss)/d(logit_k) through the normalizing softmax
            const T gl = pr[k] * (gp[k] - dot);
            const bool clamped = sv[k] < T(kMinSigma);
            const T s = clamped ? T(kMinSigma) : sv[k];
            const T diff = T(tt) - muv[k];
            if (gmu) gmu[k] += gl * diff / (s * s);
            if (gsig && !clamped) gsig[k] += gl * (diff * diff / (s * s * s) - T(1) / s);
          }
        }
      });
}

template <class T>
Var<T> select_position(Var<T> x, std::size_t position) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 3, "select_position: x must be [B, L, d]");
  const std::size_t B = xv.dim(0), L = xv.dim(1), d = xv.dim(2);
  require(position < L, "select_position: position out of range");
  Tensor<T> y({B, d});
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(xv.data() + (b * L + position) * d, d, y.data() + b * d);
  return x.tape->record(std::move(y), {x}, [=](GradTape<T>& t, std::size_t self) {
    const T* g = t.grad(self).data();
    T* gx = t.grad_sink(x);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < d; ++c) gx[(b * L + position) * d + c] += g[b * d + c];
  });
}

// ---------------------------------------------------------------------------
// losses

template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  const Tensor<T>& z = logits.value();
  require(z.rank() == 2, "cross_entropy: logits must be [B, c]");
  const std::size_t B = z.dim(0), C = z.dim(1);
  require(labels.size() == B, "cross_entropy: label count != batch size");
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab) {
    if (l < 0 || std::size_t(l) >= C)
      throw ValidationError("cross_entropy: label " + std::to_string(l) + " out of range for " +
                            std::to_string(C) + " classes");
  }
  std::vector<T> prob(B * C);
  T loss{};
  for (std::size_t b = 0; b < B; ++b) {
    const T* zr = z.data() + b * C;
    T mx = zr[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, zr[c]);
    T sum{};
    for (std::size_t c = 0; c < C; ++c) sum += (prob[b * C + c] = std::exp(zr[c] - mx));
    for (std::size_t c = 0; c < C; ++c) prob[b * C + c] /= sum;
    loss += (mx + std::log(sum)) - zr[lab[b]];
  }
  loss /= T(B);
  return logits.tape->record(
      Tensor<T>({1}, loss), {logits},
      [=, prob = std::move(prob), lab = std::move(lab)](GradTape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] / T(B);
        T* gz = t.grad_sink(logits);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c)
            gz[b * C + c] += g * (prob[b * C + c] - (std::size_t(lab[b]) == c ? T(1) : T(0)));
      });
}

template <class T>
Var<T> sum_squares(Var<T> x) {
  T s{};
  for (T v : x.value().values()) s += v * v;
  return x.tape->record(Tensor<T>({1}, s), {x}, [=](GradTape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    const T* xd = t.value(x).data();
    T* gx = t.grad_sink(x);
    for (std::size_t i = 0; i < t.value(x).size(); ++i) gx[i] += T(2) * g * xd[i];
  });
}

#define WIFLEX_INSTANTIATE_OPS(T)                                                              \
  template T gelu_value<T>(T);                                                                 \
  template std::vector<T> gaussian_mixture_weights<T>(std::span<const T>, std::span<const T>,  \
                                                      std::size_t);                            \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                           \
  template Var<T> add<T>(Var<T>, Var<T>);                                                      \
  template Var<T> gelu<T>(Var<T>);                                                             \
  template Var<T> softmax<T>(Var<T>);                                                          \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                    \
  template Var<T> batch_norm_1d<T>(Var<T>, Var<T>, Var<T>, RunningStats<T>, Mode, T, T);       \
  template Var<T> conv1d<T>(Var<T>, Var<T>, Var<T>, std::size_t);                              \
  template Var<T> conv2d_1x3<T>(Var<T>, Var<T>, Var<T>);                                       \
  template Var<T> attention<T>(Var<T>, Var<T>, Var<T>, std::size_t, T, Mode);                  \
  template Var<T> multi_head_attention<T>(Var<T>, const AttentionParams<T>&, std::size_t, T,   \
                                          Mode);                                               \
  template Var<T> dropout<T>(Var<T>, T, Mode);                                                 \
  template Var<T> reshape<T>(Var<T>, Shape);                                                   \
  template Var<T> transpose_last2<T>(Var<T>);                                                  \
  template Var<T> prepend_token<T>(Var<T>, Var<T>);                                            \
  template Var<T> gaussian_positional_encoding<T>(Var<T>, Var<T>, Var<T>, Var<T>);             \
  template Var<T> select_position<T>(Var<T>, std::size_t);                                     \
  template Var<T> cross_entropy<T>(Var<T>, std::span<const int>);                              \
  template Var<T> sum_squares<T>(Var<T>);

WIFLEX_INSTANTIATE_OPS(float)
WIFLEX_INSTANTIATE_OPS(double)

}  // namespace wiflex
