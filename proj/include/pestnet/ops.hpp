/*
 * Copyright 2026 The pestnet Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "pestnet/error.hpp"
#include "pestnet/tensor.hpp"

namespace pestnet {

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t d = s.size(); d-- > 1;) st[d - 1] = st[d] * s[d];
  return st;
}

/// Walks `shape` in row-major order, calling f(linear_index, source_offset)
/// where the source offset advances by `src_strides` (0 for broadcast dims).
template <typename F>
void strided_walk(const Shape& shape, const std::vector<std::size_t>& src_strides, F&& f) {
  const std::size_t total = numel_of(shape);
  const std::size_t r = shape.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t lin = 0; lin < total; ++lin) {
    f(lin, off);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += src_strides[d];
      if (idx[d] < shape[d]) break;
      off -= src_strides[d] * shape[d];
      idx[d] = 0;
    }
  }
}

/// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t d = 0; d < axis; ++d) a.outer *= s[d];
  a.len = s[axis];
  for (std::size_t d = axis + 1; d < s.size(); ++d) a.inner *= s[d];
  return a;
}

inline std::size_t check_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError(op, "axis " + std::to_string(axis) + " invalid for shape " + shape_str(x.shape()));
  }
  return axis;
}

/// Views [C,H,W] as [1,C,H,W]; passes 4-D through.
struct Spatial {
  std::size_t n, c, h, w;
  bool batched;
};

inline Spatial spatial_dims(const char* op, const Tensor& x) {
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
  throw ShapeError(op, "expected [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
}

inline Shape spatial_shape(const Spatial& s, std::size_t c, std::size_t h, std::size_t w) {
  return s.batched ? Shape{s.n, c, h, w} : Shape{c, h, w};
}

template <typename F, typename DF>
Tensor unary(const Tensor& x, const char* op, F f, DF df) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result(
      x.shape(), std::move(out), {x},
      [df](Node& self) {
        double* gx = grad_sink(self.parents[0]);
        if (!gx) return;
        const auto& xin = self.parents[0]->data;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          gx[i] += self.grad[i] * df(xin[i], self.data[i]);
        }
      },
      op);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        for (int k = 0; k < 2; ++k) {
          if (double* g = grad_sink(self.parents[k])) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
          }
        }
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        if (double* g = grad_sink(self.parents[0])) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (double* g = grad_sink(self.parents[1])) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
      },
      "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        if (double* g = grad_sink(self.parents[0])) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (double* g = grad_sink(self.parents[1])) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
        }
      },
      "mul");
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("div", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b[i] == 0.0) throw DomainError("div: division by zero at element " + std::to_string(i));
    out[i] = a[i] / b[i];
  }
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        const auto& bv = self.parents[1]->data;
        if (double* g = grad_sink(self.parents[0])) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / bv[i];
        }
        if (double* g = grad_sink(self.parents[1])) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) {
            g[i] -= self.grad[i] * self.data[i] / bv[i];
          }
        }
      },
      "div");
}

inline Tensor add(const Tensor& a, double s) {
  return detail::unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Tensor mul(const Tensor& a, double s) {
  return detail::unary(a, "mul_scalar", [s](double x) { return x * s; }, [s](double, double) { return s; });
}

inline Tensor sub(const Tensor& a, double s) { return add(a, -s); }

inline Tensor div(const Tensor& a, double s) {
  if (s == 0.0) throw DomainError("div: division by scalar zero");
  return detail::unary(a, "div_scalar", [s](double x) { return x / s; }, [s](double, double) { return 1.0 / s; });
}

inline Tensor neg(const Tensor& x) { return mul(x, -1.0); }

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// Exact GELU: x * Phi(x) with the Gaussian CDF.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  return detail::unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi * inv_sqrt2;
        return cdf + v * pdf;
      });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, "sigmoid", sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (!(x[i] > 0.0)) {
      throw DomainError("log: non-positive value " + std::to_string(x[i]) + " at element " + std::to_string(i));
    }
  }
  return detail::unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// --------------------------------------------------------------------- matmul

/// [m,k] x [k,n] -> [m,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_result(
      {m, n}, std::move(out), {a, b},
      [m, k, n](detail::Node& self) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        const auto& g = self.grad;
        if (double* ga = grad_sink(self.parents[0])) {
          // dA = dC * B^T
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
              ga[i * k + p] += s;
            }
          }
        }
        if (double* gb = grad_sink(self.parents[1])) {
          // dB = A^T * dC
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = av[i * k + p];
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
          }
        }
      },
      "matmul");
}

// ------------------------------------------------------------------- conv2d

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Cross-correlation (no kernel flip) of x [C_in,H,W] or [N,C_in,H,W] with
/// w [C_out, C_in/groups, kh, kw], plus optional bias [C_out].
inline Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, Conv2dOptions opt = {}) {
  const auto s = detail::spatial_dims("conv2d", x);
  if (w.rank() != 4) throw ShapeError("conv2d", "kernel must be [C_out,C_in/g,kh,kw], got " + shape_str(w.shape()));
  const std::size_t g = opt.groups;
  const std::size_t co = w.dim(0), cig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (g == 0 || opt.stride == 0) throw ConfigError("conv2d: stride and groups must be positive");
  if (s.c != cig * g || co % g != 0) throw ShapeError("conv2d", x.shape(), w.shape());
  if (bias && (bias->rank() != 1 || bias->dim(0) != co)) throw ShapeError("conv2d(bias)", bias->shape(), Shape{co});
  const std::size_t ph = s.h + 2 * opt.padding, pw = s.w + 2 * opt.padding;
  if (kh > ph || kw > pw) {
    throw ConfigError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " larger than padded input " +
                      std::to_string(ph) + "x" + std::to_string(pw));
  }
  if ((ph - kh) % opt.stride != 0 || (pw - kw) % opt.stride != 0) {
    throw ConfigError("conv2d: non-integral output size for input " + shape_str(x.shape()) + ", kernel " +
                      std::to_string(kh) + "x" + std::to_string(kw) + ", stride " + std::to_string(opt.stride) +
                      ", padding " + std::to_string(opt.padding));
  }
  const std::size_t ho = (ph - kh) / opt.stride + 1, wo = (pw - kw) / opt.stride + 1;
  const std::size_t cog = co / g;
  const std::size_t st = opt.stride, pad = opt.padding;
  const std::size_t H = s.h, W = s.w, N = s.n, C = s.c;

  // Valid output range along one axis for kernel tap k: in = out*st + k - pad in [0, len).
  auto range = [st, pad](std::size_t k, std::size_t len, std::size_t out_len) {
    std::size_t lo = 0;
    while (lo < out_len && lo * st + k < pad) ++lo;
    std::size_t hi = lo;
    while (hi < out_len && hi * st + k - pad < len) ++hi;
    return std::pair{lo, hi};
  };
  std::vector<std::pair<std::size_t, std::size_t>> ry(kh), rx(kw);
  for (std::size_t k = 0; k < kh; ++k) ry[k] = range(k, H, ho);
  for (std::size_t k = 0; k < kw; ++k) rx[k] = range(k, W, wo);

  std::vector<double> out(N * co * ho * wo, 0.0);
  const auto& xv = x.values();
  const auto& wv = w.values();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t oc = 0; oc < co; ++oc) {
      const std::size_t grp = oc / cog;
      double* op = &out[(n * co + oc) * ho * wo];
      if (bias) std::fill(op, op + ho * wo, (*bias)[oc]);
      for (std::size_t icg = 0; icg < cig; ++icg) {
        const std::size_t ic = grp * cig + icg;
        const double* xp = &xv[(n * C + ic) * H * W];
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const double wt = wv[((oc * cig + icg) * kh + ky) * kw + kx];
            for (std::size_t oy = ry[ky].first; oy < ry[ky].second; ++oy) {
              const double* xr = xp + (oy * st + ky - pad) * W;
              double* orow = op + oy * wo;
              for (std::size_t ox = rx[kx].first; ox < rx[kx].second; ++ox) orow[ox] += wt * xr[ox * st + kx - pad];
            }
          }
        }
      }
    }
  }
  std::vector<Tensor> parents{x, w};
  if (bias) parents.push_back(*bias);
  const bool has_bias = bias.has_value();
  return make_result(
      detail::spatial_shape(s, co, ho, wo), std::move(out), std::move(parents),
      [=](detail::Node& self) {
        const auto& xv = self.parents[0]->data;
        const auto& wv = self.parents[1]->data;
        const auto& gv = self.grad;
        double* gx = grad_sink(self.parents[0]);
        double* gw = grad_sink(self.parents[1]);
        double* gb = has_bias ? grad_sink(self.parents[2]) : nullptr;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t oc = 0; oc < co; ++oc) {
            const std::size_t grp = oc / cog;
            const double* gp = &gv[(n * co + oc) * ho * wo];
            if (gb) {
              double sacc = 0.0;
              for (std::size_t i = 0; i < ho * wo; ++i) sacc += gp[i];
              gb[oc] += sacc;
            }
            for (std::size_t icg = 0; icg < cig; ++icg) {
              const std::size_t ic = grp * cig + icg;
              const std::size_t xoff = (n * C + ic) * H * W;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::size_t widx = ((oc * cig + icg) * kh + ky) * kw + kx;
                  const double wt = wv[widx];
                  double wacc = 0.0;
                  for (std::size_t oy = ry[ky].first; oy < ry[ky].second; ++oy) {
                    const std::size_t row = xoff + (oy * st + ky - pad) * W;
                    const double* grow = gp + oy * wo;
                    for (std::size_t ox = rx[kx].first; ox < rx[kx].second; ++ox) {
                      const std::size_t xi = row + ox * st + kx - pad;
                      if (gx) gx[xi] += wt * grow[ox];
                      wacc += xv[xi] * grow[ox];
                    }
                  }
                  if (gw) gw[widx] += wacc;
                }
              }
            }
          }
        }
      },
      "conv2d");
}

// ------------------------------------------------------------------ pooling

enum class PoolKind { Avg, Max };

/// Windowed pooling without padding; output extent floor((H-kh)/stride)+1.
/// Max-pool gradient goes to the first maximal element in row-major order.
inline Tensor pool2d(PoolKind kind, const Tensor& x, std::size_t kh, std::size_t kw, std::size_t stride) {
  const auto s = detail::spatial_dims("pool2d", x);
  if (kh == 0 || kw == 0 || stride == 0) throw ConfigError("pool2d: window and stride must be positive");
  if (kh > s.h || kw > s.w) {
    throw ConfigError("pool2d: window " + std::to_string(kh) + "x" + std::to_string(kw) + " larger than input " +
                      shape_str(x.shape()));
  }
  const std::size_t ho = (s.h - kh) / stride + 1, wo = (s.w - kw) / stride + 1;
  const std::size_t planes = s.n * s.c, H = s.h, W = s.w;
  std::vector<double> out(planes * ho * wo);
  std::vector<std::size_t> argmax(kind == PoolKind::Max ? out.size() : 0);
  const auto& xv = x.values();
  const double inv = 1.0 / static_cast<double>(kh * kw);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t o = (p * ho + oy) * wo + ox;
        if (kind == PoolKind::Max) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t bi = 0;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::size_t xi = (p * H + oy * stride + ky) * W + ox * stride + kx;
              if (xv[xi] > best) {
                best = xv[xi];
                bi = xi;
              }
            }
          }
          out[o] = best;
          argmax[o] = bi;
        } else {
          double acc = 0.0;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) acc += xv[(p * H + oy * stride + ky) * W + ox * stride + kx];
          }
          out[o] = acc * inv;
        }
      }
    }
  }
  return make_result(
      detail::spatial_shape(s, s.c, ho, wo), std::move(out), {x},
      [=, argmax = std::move(argmax)](detail::Node& self) {
        double* gx = grad_sink(self.parents[0]);
        if (!gx) return;
        if (kind == PoolKind::Max) {
          for (std::size_t o = 0; o < self.grad.size(); ++o) gx[argmax[o]] += self.grad[o];
          return;
        }
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const double g = self.grad[(p * ho + oy) * wo + ox] * inv;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) gx[(p * H + oy * stride + ky) * W + ox * stride + kx] += g;
              }
            }
          }
        }
      },
      kind == PoolKind::Max ? "max_pool2d" : "avg_pool2d");
}

/// [C,H,W] -> [C] or [N,C,H,W] -> [N,C].
inline Tensor global_pool(PoolKind kind, const Tensor& x) {
  const auto s = detail::spatial_dims("global_pool", x);
  const std::size_t planes = s.n * s.c, area = s.h * s.w;
  std::vector<double> out(planes);
  std::vector<std::size_t> argmax(kind == PoolKind::Max ? planes : 0);
  const auto& xv = x.values();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* xp = &xv[p * area];
    if (kind == PoolKind::Max) {
      std::size_t bi = 0;
      for (std::size_t i = 1; i < area; ++i) {
        if (xp[i] > xp[bi]) bi = i;
      }
      out[p] = xp[bi];
      argmax[p] = p * area + bi;
    } else {
      double acc = 0.0;
      for (std::size_t i = 0; i < area; ++i) acc += xp[i];
      out[p] = acc / static_cast<double>(area);
    }
  }
  Shape shape = s.batched ? Shape{s.n, s.c} : Shape{s.c};
  return make_result(
      std::move(shape), std::move(out), {x},
      [=, argmax = std::move(argmax)](detail::Node& self) {
        double* gx = grad_sink(self.parents[0]);
        if (!gx) return;
        for (std::size_t p = 0; p < planes; ++p) {
          if (kind == PoolKind::Max) {
            gx[argmax[p]] += self.grad[p];
          } else {
            const double g = self.grad[p] / static_cast<double>(area);
            for (std::size_t i = 0; i < area; ++i) gx[p * area + i] += g;
          }
        }
      },
      kind == PoolKind::Max ? "global_max_pool" : "global_avg_pool");
}

// ------------------------------------------------------------------ softmax

/// Max-subtracted softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  detail::check_axis("softmax", x, axis);
  const auto sp = detail::split_at(x.shape(), axis);
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, xv[base + l * sp.inner]);
      double sum = 0.0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const double e = std::exp(xv[base + l * sp.inner] - mx);
        out[base + l * sp.inner] = e;
        sum += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= sum;
    }
  }
  return make_result(
      x.shape(), std::move(out), {x},
      [sp](detail::Node& self) {
        double* gx = grad_sink(self.parents[0]);
        if (!gx) return;
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.len * sp.inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) {
              dot += self.grad[base + l * sp.inner] * self.data[base + l * sp.inner];
            }
            for (std::size_t l = 0; l < sp.len; ++l) {
              const std::size_t j = base + l * sp.inner;
              gx[j] += self.data[j] * (self.grad[j] - dot);
            }
          }
        }
      },
      "softmax");
}

/// Mean over rows of -log softmax(logits)[i, labels[i]] for logits [n,K].
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy", "logits must be [n,K], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw ShapeError("cross_entropy", logits.shape(), Shape{labels.size()});
  std::vector<double> probs(n * k);
  double loss = 0.0;
  const auto& lv = logits.values();
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw DomainError("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0," + std::to_string(k) +
                        ")");
    }
    const double* row = &lv[i * k];
    const double mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
    loss -= row[labels[i]] - lse;
  }
  loss /= static_cast<double>(n);
  return make_result(
      {}, {loss}, {logits},
      [n, k, labels, probs = std::move(probs)](detail::Node& self) {
        double* gl = grad_sink(self.parents[0]);
        if (!gl) return;
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const double t = (j == labels[i]) ? 1.0 : 0.0;
            gl[i * k + j] += g * (probs[i * k + j] - t);
          }
        }
      },
      "cross_entropy");
}

// --------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return make_result(
      {}, {acc}, {x},
      [](detail::Node& self) {
        if (double* g = grad_sink(self.parents[0])) {
          for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += self.grad[0];
        }
      },
      "sum");
}

inline Tensor mean(const Tensor& x) { return div(sum(x), static_cast<double>(x.numel())); }

enum class ReduceKind { Sum, Mean, Max };

/// Reduction along one axis. keepdim retains the axis with extent 1.
/// Max routes its gradient to the first maximum.
inline Tensor reduce(ReduceKind kind, const Tensor& x, std::size_t axis, bool keepdim = false) {
  detail::check_axis("reduce", x, axis);
  const auto sp = detail::split_at(x.shape(), axis);
  Shape shape = x.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  std::vector<double> out(sp.outer * sp.inner);
  std::vector<std::size_t> argmax(kind == ReduceKind::Max ? out.size() : 0);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      const std::size_t r = o * sp.inner + i;
      if (kind == ReduceKind::Max) {
        std::size_t bi = base;
        for (std::size_t l = 1; l < sp.len; ++l) {
          if (xv[base + l * sp.inner] > xv[bi]) bi = base + l * sp.inner;
        }
        out[r] = xv[bi];
        argmax[r] = bi;
      } else {
        double acc = 0.0;
        for (std::size_t l = 0; l < sp.len; ++l) acc += xv[base + l * sp.inner];
        out[r] = kind == ReduceKind::Mean ? acc / static_cast<double>(sp.len) : acc;
      }
    }
  }
  const char* name = kind == ReduceKind::Max ? "reduce_max" : (kind == ReduceKind::Mean ? "reduce_mean" : "reduce_sum");
  return make_result(
      std::move(shape), std::move(out), {x},
      [kind, sp, argmax = std::move(argmax)](detail::Node& self) {
        double* gx = grad_sink(self.parents[0]);
        if (!gx) return;
        const double scale = kind == ReduceKind::Mean ? 1.0 / static_cast<double>(sp.len) : 1.0;
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t r = o * sp.inner + i;
            if (kind == ReduceKind::Max) {
              gx[argmax[r]] += self.grad[r];
              continue;
            }
            const std::size_t base = o * sp.len * sp.inner + i;
            for (std::size_t l = 0; l < sp.len; ++l) gx[base + l * sp.inner] += self.grad[r] * scale;
          }
        }
      },
      name);
}

// --------------------------------------------------------------- structural

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) throw ShapeError("reshape", x.shape(), shape);
  return make_result(
      std::move(shape), x.values(), {x},
      [](detail::Node& self) {
        if (double* g = grad_sink(self.parents[0])) {
          for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
      },
      "reshape");
}

/// Output dim d is input dim perm[d].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  if (perm.size() != x.rank()) throw ShapeError("permute", "permutation rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> used(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || used[p]) throw ShapeError("permute", "invalid permutation");
    used[p] = true;
  }
  const auto in_strides = detail::row_major_strides(x.shape());
  Shape shape(perm.size());
  std::vector<std::size_t> strides(perm.size());
  for (std::size_t d = 0; d < perm.size(); ++d) {
    shape[d] = x.dim(perm[d]);
    strides[d] = in_strides[perm[d]];
  }
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  detail::strided_walk(shape, strides, [&](std::size_t lin, std::size_t off) { out[lin] = xv[off]; });
  return make_result(
      shape, std::move(out), {x},
      [shape, strides](detail::Node& self) {
        double* g = grad_sink(self.parents[0]);
        if (!g) return;
        detail::strided_walk(shape, strides, [&](std::size_t lin, std::size_t off) { g[off] += self.grad[lin]; });
      },
      "permute");
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose", "expected a matrix, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no operands");
  detail::check_axis("concat", parts[0], axis);
  Shape shape = parts[0].shape();
  shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != shape.size()) throw ShapeError("concat", parts[0].shape(), p.shape());
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (d != axis && p.dim(d) != parts[0].dim(d)) throw ShapeError("concat", parts[0].shape(), p.shape());
    }
    shape[axis] += p.dim(axis);
  }
  const auto sp = detail::split_at(shape, axis);
  std::vector<std::size_t> lens;
  std::vector<double> out(numel_of(shape));
  std::size_t start = 0;
  for (const Tensor& p : parts) {
    const std::size_t len = p.dim(axis);
    const auto& pv = p.values();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(&pv[o * len * sp.inner], len * sp.inner, &out[(o * sp.len + start) * sp.inner]);
    }
    lens.push_back(len);
    start += len;
  }
  return make_result(
      shape, std::move(out), parts,
      [sp, lens](detail::Node& self) {
        std::size_t start = 0;
        for (std::size_t k = 0; k < lens.size(); ++k) {
          const std::size_t len = lens[k];
          if (double* g = grad_sink(self.parents[k])) {
            for (std::size_t o = 0; o < sp.outer; ++o) {
              const double* src = &self.grad[(o * sp.len + start) * sp.inner];
              double* dst = g + o * len * sp.inner;
              for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
            }
          }
          start += len;
        }
      },
      "concat");
}

/// Slice [start, start+length) along `axis`.
inline Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  detail::check_axis("narrow", x, axis);
  if (length == 0 || start + length > x.dim(axis)) {
    throw ShapeError("narrow", "range [" + std::to_string(start) + "," + std::to_string(start + length) +
                                   ") outside axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const auto sp = detail::split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<double> out(numel_of(shape));
  const auto& xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(&xv[(o * sp.len + start) * sp.inner], length * sp.inner, &out[o * length * sp.inner]);
  }
  return make_result(
      std::move(shape), std::move(out), {x},
      [sp, start, length](detail::Node& self) {
        double* g = grad_sink(self.parents[0]);
        if (!g) return;
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* src = &self.grad[o * length * sp.inner];
          double* dst = g + (o * sp.len + start) * sp.inner;
          for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
        }
      },
      "narrow");
}

/// Nearest-neighbour upsampling of the last two dims by an integer factor.
inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (x.rank() < 2) throw ShapeError("upsample_nearest", "need at least 2 dims, got " + shape_str(x.shape()));
  if (factor == 0) throw ConfigError("upsample_nearest: factor must be positive");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (H * W);
  const std::size_t Ho = H * factor, Wo = W * factor;
  Shape shape = x.shape();
  shape[shape.size() - 2] = Ho;
  shape[shape.size() - 1] = Wo;
  std::vector<double> out(planes * Ho * Wo);
  const auto& xv = x.values();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t xx = 0; xx < Wo; ++xx) out[(p * Ho + y) * Wo + xx] = xv[(p * H + y / factor) * W + xx / factor];
    }
  }
  return make_result(
      std::move(shape), std::move(out), {x},
      [=](detail::Node& self) {
        double* g = grad_sink(self.parents[0]);
        if (!g) return;
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t y = 0; y < Ho; ++y) {
            for (std::size_t xx = 0; xx < Wo; ++xx) {
              g[(p * H + y / factor) * W + xx / factor] += self.grad[(p * Ho + y) * Wo + xx];
            }
          }
        }
      },
      "upsample_nearest");
}

/// Explicit broadcast: every dim of x equals the target's or is 1. Same rank.
inline Tensor broadcast_to(const Tensor& x, const Shape& target) {
  if (x.rank() != target.size()) throw ShapeError("broadcast_to", x.shape(), target);
  auto strides = detail::row_major_strides(x.shape());
  for (std::size_t d = 0; d < target.size(); ++d) {
    if (x.dim(d) == target[d]) continue;
    if (x.dim(d) != 1) throw ShapeError("broadcast_to", x.shape(), target);
    strides[d] = 0;
  }
  std::vector<double> out(numel_of(target));
  const auto& xv = x.values();
  detail::strided_walk(target, strides, [&](std::size_t lin, std::size_t off) { out[lin] = xv[off]; });
  return make_result(
      target, std::move(out), {x},
      [target, strides](detail::Node& self) {
        double* g = grad_sink(self.parents[0]);
        if (!g) return;
        detail::strided_walk(target, strides, [&](std::size_t lin, std::size_t off) { g[off] += self.grad[lin]; });
      },
      "broadcast_to");
}

/// x * broadcast_to(m, x.shape()).
inline Tensor broadcast_mul(const Tensor& x, const Tensor& m) { return mul(x, broadcast_to(m, x.shape())); }

/// x + broadcast_to(b, x.shape()).
inline Tensor broadcast_add(const Tensor& x, const Tensor& b) { return add(x, broadcast_to(b, x.shape())); }

// ------------------------------------------------------------ normalization

/// Per-channel statistics of a batch-norm forward in training mode.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased
  std::size_t count = 0;    // elements per channel
};

namespace detail {

inline AxisSplit channel_split(const char* op, const Tensor& x, std::size_t channels) {
  if (x.rank() < 2 || x.dim(1) != channels) {
    throw ShapeError(op, "channel dim of " + shape_str(x.shape()) + " must equal " + std::to_string(channels));
  }
  return split_at(x.shape(), 1);
}

}  // namespace detail

/// Batch normalization over axis 1 of [N,F] or [N,C,H,W]. With `stats`
/// present, normalizes by the given running mean/var; otherwise by batch
/// statistics, which are written to `batch_out`.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                         const std::vector<double>* running_mean, const std::vector<double>* running_var,
                         BatchStats* batch_out) {
  const std::size_t C = gamma.numel();
  const auto sp = detail::channel_split("batch_norm", x, C);
  if (beta.numel() != C) throw ShapeError("batch_norm", gamma.shape(), beta.shape());
  const bool training = running_mean == nullptr;
  const std::size_t m = sp.outer * sp.inner;
  if (training && sp.outer < 2) throw ContractError("batch_norm: training mode requires batch size >= 2");
  std::vector<double> mu(C), inv_std(C), var(C);
  const auto& xv = x.values();
  for (std::size_t c = 0; c < C; ++c) {
    if (training) {
      double s = 0.0;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) s += xv[(o * C + c) * sp.inner + i];
      }
      mu[c] = s / static_cast<double>(m);
      double v = 0.0;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const double d = xv[(o * C + c) * sp.inner + i] - mu[c];
          v += d * d;
        }
      }
      var[c] = v / static_cast<double>(m);
    } else {
      mu[c] = (*running_mean)[c];
      var[c] = (*running_var)[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  }
  if (batch_out) *batch_out = {mu, var, m};
  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t j = (o * C + c) * sp.inner + i;
        xhat[j] = (xv[j] - mu[c]) * inv_std[c];
        out[j] = gamma[c] * xhat[j] + beta[c];
      }
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& gam = self.parents[1]->data;
        double* gx = grad_sink(self.parents[0]);
        double* gg = grad_sink(self.parents[1]);
        double* gb = grad_sink(self.parents[2]);
        const auto& g = self.grad;
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
              const std::size_t j = (o * C + c) * sp.inner + i;
              sum_g += g[j];
              sum_gx += g[j] * xhat[j];
            }
          }
          if (gg) gg[c] += sum_gx;
          if (gb) gb[c] += sum_g;
          if (!gx) continue;
          const double k = gam[c] * inv_std[c];
          const double mm = static_cast<double>(m);
          for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
              const std::size_t j = (o * C + c) * sp.inner + i;
              gx[j] += training ? k * (g[j] - sum_g / mm - xhat[j] * sum_gx / mm) : k * g[j];
            }
          }
        }
      },
      "batch_norm");
}

/// Normalizes over the last dimension, then applies gamma/beta of that size.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm", "scalar input");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<double> xhat(x.numel()), out(x.numel()), inv_std(rows);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = &xv[r * d];
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * inv_std[r];
      out[r * d + j] = gamma[j] * xhat[r * d + j] + beta[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& gam = self.parents[1]->data;
        double* gx = grad_sink(self.parents[0]);
        double* gg = grad_sink(self.parents[1]);
        double* gb = grad_sink(self.parents[2]);
        const auto& g = self.grad;
        const double dd = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_dx = 0.0, sum_dxx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t i = r * d + j;
            if (gg) gg[j] += g[i] * xhat[i];
            if (gb) gb[j] += g[i];
            const double dxh = g[i] * gam[j];
            sum_dx += dxh;
            sum_dxx += dxh * xhat[i];
          }
          if (!gx) continue;
          for (std::size_t j = 0; j < d; ++j) {
            const std::size_t i = r * d + j;
            gx[i] += inv_std[r] * (g[i] * gam[j] - sum_dx / dd - xhat[i] * sum_dxx / dd);
          }
        }
      },
      "layer_norm");
}

}  // namespace pestnet
