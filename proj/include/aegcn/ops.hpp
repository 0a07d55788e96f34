#pragma once

// Differentiable tensor operations recorded on a Tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aegcn/autodiff.hpp"
#include "aegcn/gemm.hpp"
#include "aegcn/tensor.hpp"

namespace aegcn {

enum class PoolKind { max, avg };

struct Activation {
  enum class Kind { identity, relu, leaky_relu, sigmoid };
  Kind kind = Kind::identity;
  double alpha = 0.01;  // leaky_relu slope

  static Activation identity() { return {Kind::identity, 0.0}; }
  static Activation relu() { return {Kind::relu, 0.0}; }
  static Activation leaky_relu(double a = 0.01) { return {Kind::leaky_relu, a}; }
  static Activation sigmoid() { return {Kind::sigmoid, 0.0}; }
};

inline constexpr double kProbClamp = 1e-12;

namespace detail {

template <typename T>
void require_rank(const Var<T>& v, std::size_t rank, const char* op) {
  if (v.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " input, got " + shape_str(v.shape()));
  }
}

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw UsageError("operands recorded on different tapes");
  return a.tape();
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.raw();
  const T* s = src.raw();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

// Unfolds a C x H x W image into a (C*kh*kw) x (Ho*Wo) column matrix.
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho,
            std::size_t Wo, T* col) {
  const long h = static_cast<long>(H), w = static_cast<long>(W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          T* out = row + oy * Wo;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + Wo, T{0});
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            out[ox] = (ix < 0 || ix >= w) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t pad, std::size_t Ho,
                std::size_t Wo, T* x) {
  const long h = static_cast<long>(H), w = static_cast<long>(W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= h) continue;
          T* dst = x + (c * H + static_cast<std::size_t>(iy)) * W;
          const T* in = row + oy * Wo;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            if (ix >= 0 && ix < w) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// a [m x k] * b [k x n]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor<T> out({m, n});
  kernels::gemm(a.value().raw(), false, b.value().raw(), false, out.raw(), m, k, n, false);
  const bool rg = a.requires_grad() || b.requires_grad();
  return tape.record(std::move(out), rg, [a, b, m, k, n](Tape<T>& t, const Tensor<T>& g) {
    if (a.requires_grad()) {
      kernels::gemm(g.raw(), false, b.value().raw(), true, t.grad_buffer(a.id()).raw(), m, n, k,
                    true);
    }
    if (b.requires_grad()) {
      kernels::gemm(a.value().raw(), true, g.raw(), false, t.grad_buffer(b.id()).raw(), k, m, n,
                    true);
    }
  });
}

// x [n x in] * w^T + b, with w [out x in] and b [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  auto& tape = detail::same_tape(x, w);
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  const std::size_t n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  if (w.shape()[1] != in || b.size() != out_dim) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " weight " +
                         shape_str(w.shape()) + " bias " + shape_str(b.shape()));
  }
  Tensor<T> out({n, out_dim});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(b.value().raw(), b.value().raw() + out_dim, out.raw() + i * out_dim);
  }
  kernels::gemm(x.value().raw(), false, w.value().raw(), true, out.raw(), n, in, out_dim, true);
  const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
  return tape.record(std::move(out), rg,
                     [x, w, b, n, in, out_dim](Tape<T>& t, const Tensor<T>& g) {
                       if (x.requires_grad()) {
                         kernels::gemm(g.raw(), false, w.value().raw(), false,
                                       t.grad_buffer(x.id()).raw(), n, out_dim, in, true);
                       }
                       if (w.requires_grad()) {
                         kernels::gemm(g.raw(), true, x.value().raw(), false,
                                       t.grad_buffer(w.id()).raw(), out_dim, n, in, true);
                       }
                       if (b.requires_grad()) {
                         auto& gb = t.grad_buffer(b.id());
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
                       }
                     });
}

// Cross-correlation (no kernel flip) of x [C x H x W] with k [O x C x kh x kw],
// zero padding. bias, when valid, has O entries.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, const Var<T>& bias, std::size_t stride,
              std::size_t pad) {
  auto& tape = detail::same_tape(x, k);
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(k, 4, "conv2d");
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  const std::size_t O = k.shape()[0], kh = k.shape()[2], kw = k.shape()[3];
  if (k.shape()[1] != C) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " does not match kernel " +
                         shape_str(k.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  if (kh > H + 2 * pad || kw > W + 2 * pad) {
    throw DimensionError("conv2d: kernel " + shape_str(k.shape()) +
                         " larger than padded input " + shape_str(x.shape()) + " (pad " +
                         std::to_string(pad) + ")");
  }
  const bool has_bias = bias.valid();
  if (has_bias && bias.size() != O) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " +
                         std::to_string(O) + " output channels");
  }
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  const std::size_t ckk = C * kh * kw, hw = Ho * Wo;

  std::vector<T> col(ckk * hw);
  detail::im2col(x.value().raw(), C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
  Tensor<T> out({O, Ho, Wo});
  if (has_bias) {
    for (std::size_t o = 0; o < O; ++o) std::fill_n(out.raw() + o * hw, hw, bias.value()[o]);
  }
  kernels::gemm(k.value().raw(), false, col.data(), false, out.raw(), O, ckk, hw, has_bias);

  const bool rg = x.requires_grad() || k.requires_grad() || (has_bias && bias.requires_grad());
  if (!k.requires_grad()) col.clear();
  return tape.record(
      std::move(out), rg,
      [x, k, bias, has_bias, col = std::move(col), C, H, W, O, kh, kw, stride, pad, Ho, Wo, ckk,
       hw](Tape<T>& t, const Tensor<T>& g) {
        if (k.requires_grad()) {
          kernels::gemm(g.raw(), false, col.data(), true, t.grad_buffer(k.id()).raw(), O, hw, ckk,
                        true);
        }
        if (has_bias && bias.requires_grad()) {
          auto& gb = t.grad_buffer(bias.id());
          for (std::size_t o = 0; o < O; ++o) {
            T s{0};
            for (std::size_t i = 0; i < hw; ++i) s += g[o * hw + i];
            gb[o] += s;
          }
        }
        if (x.requires_grad()) {
          std::vector<T> gcol(ckk * hw);
          kernels::gemm(k.value().raw(), true, g.raw(), false, gcol.data(), ckk, O, hw, false);
          detail::col2im_add(gcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                             t.grad_buffer(x.id()).raw());
        }
      });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, std::size_t stride, std::size_t pad) {
  return conv2d(x, k, Var<T>{}, stride, pad);
}

// Non-overlapping window pooling over [C x H x W]; trailing remainder dropped.
template <typename T>
Var<T> pool2d(const Var<T>& x, PoolKind kind, std::size_t window) {
  detail::require_rank(x, 3, "pool2d");
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
  if (window == 0 || window > H || window > W) {
    throw DimensionError("pool2d: window " + std::to_string(window) + " invalid for input " +
                         shape_str(x.shape()) + " (use global_pool)");
  }
  const std::size_t Ho = H / window, Wo = W / window;
  Tensor<T> out({C, Ho, Wo});
  std::vector<std::size_t> argmax;
  const auto& in = x.value();
  if (kind == PoolKind::max) argmax.resize(out.size());
  const T inv = T{1} / static_cast<T>(window * window);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const std::size_t o = (c * Ho + oy) * Wo + ox;
        if (kind == PoolKind::max) {
          std::size_t best = (c * H + oy * window) * W + ox * window;
          for (std::size_t i = 0; i < window; ++i) {
            for (std::size_t j = 0; j < window; ++j) {
              const std::size_t idx = (c * H + oy * window + i) * W + ox * window + j;
              if (in[idx] > in[best]) best = idx;
            }
          }
          argmax[o] = best;
          out[o] = in[best];
        } else {
          T s{0};
          for (std::size_t i = 0; i < window; ++i)
            for (std::size_t j = 0; j < window; ++j)
              s += in[(c * H + oy * window + i) * W + ox * window + j];
          out[o] = s * inv;
        }
      }
    }
  }
  return x.tape().record(
      std::move(out), x.requires_grad(),
      [x, kind, window, argmax = std::move(argmax), C, H, W, Ho, Wo, inv](Tape<T>& t,
                                                                         const Tensor<T>& g) {
        auto& gx = t.grad_buffer(x.id());
        if (kind == PoolKind::max) {
          for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
          return;
        }
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const T v = g[(c * Ho + oy) * Wo + ox] * inv;
              for (std::size_t i = 0; i < window; ++i)
                for (std::size_t j = 0; j < window; ++j)
                  gx[(c * H + oy * window + i) * W + ox * window + j] += v;
            }
      });
}

// [C x H x W] -> [C], pooling over the full spatial extent.
template <typename T>
Var<T> global_pool(const Var<T>& x, PoolKind kind) {
  detail::require_rank(x, 3, "global_pool");
  const std::size_t C = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  const auto& in = x.value();
  Tensor<T> out({C});
  std::vector<std::size_t> argmax(kind == PoolKind::max ? C : 0);
  for (std::size_t c = 0; c < C; ++c) {
    const T* p = in.raw() + c * hw;
    if (kind == PoolKind::max) {
      const auto it = std::max_element(p, p + hw);
      argmax[c] = c * hw + static_cast<std::size_t>(it - p);
      out[c] = *it;
    } else {
      T s{0};
      for (std::size_t i = 0; i < hw; ++i) s += p[i];
      out[c] = s / static_cast<T>(hw);
    }
  }
  return x.tape().record(std::move(out), x.requires_grad(),
                         [x, kind, C, hw, argmax = std::move(argmax)](Tape<T>& t,
                                                                      const Tensor<T>& g) {
                           auto& gx = t.grad_buffer(x.id());
                           for (std::size_t c = 0; c < C; ++c) {
                             if (kind == PoolKind::max) {
                               gx[argmax[c]] += g[c];
                             } else {
                               const T v = g[c] / static_cast<T>(hw);
                               for (std::size_t i = 0; i < hw; ++i) gx[c * hw + i] += v;
                             }
                           }
                         });
}

// [C x H x W] -> [1 x H x W], pooling across channels at each pixel.
template <typename T>
Var<T> channel_pool(const Var<T>& x, PoolKind kind) {
  detail::require_rank(x, 3, "channel_pool");
  const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2], hw = H * W;
  const auto& in = x.value();
  Tensor<T> out({1, H, W});
  std::vector<std::size_t> argmax(kind == PoolKind::max ? hw : 0);
  for (std::size_t i = 0; i < hw; ++i) {
    if (kind == PoolKind::max) {
      std::size_t best = i;
      for (std::size_t c = 1; c < C; ++c)
        if (in[c * hw + i] > in[best]) best = c * hw + i;
      argmax[i] = best;
      out[i] = in[best];
    } else {
      T s{0};
      for (std::size_t c = 0; c < C; ++c) s += in[c * hw + i];
      out[i] = s / static_cast<T>(C);
    }
  }
  return x.tape().record(std::move(out), x.requires_grad(),
                         [x, kind, C, hw, argmax = std::move(argmax)](Tape<T>& t,
                                                                      const Tensor<T>& g) {
                           auto& gx = t.grad_buffer(x.id());
                           for (std::size_t i = 0; i < hw; ++i) {
                             if (kind == PoolKind::max) {
                               gx[argmax[i]] += g[i];
                             } else {
                               const T v = g[i] / static_cast<T>(C);
                               for (std::size_t c = 0; c < C; ++c) gx[c * hw + i] += v;
                             }
                           }
                         });
}

// Concatenation along axis 0; trailing dimensions must agree.
template <typename T>
Var<T> concat(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  auto& tape = parts.front().tape();
  Shape tail(parts.front().shape().begin() + 1, parts.front().shape().end());
  std::size_t rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail || &p.tape() != &tape) {
      throw DimensionError("concat: incompatible shapes " + shape_str(parts.front().shape()) +
                           " and " + shape_str(p.shape()));
    }
    rows += p.shape()[0];
    rg = rg || p.requires_grad();
  }
  Shape shape = parts.front().shape();
  shape[0] = rows;
  Tensor<T> out(shape);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().raw(), p.value().raw() + p.size(), out.raw() + off);
    off += p.size();
  }
  std::vector<Var<T>> saved(parts.begin(), parts.end());
  return tape.record(std::move(out), rg, [saved](Tape<T>& t, const Tensor<T>& g) {
    std::size_t off = 0;
    for (const auto& p : saved) {
      if (p.requires_grad()) {
        auto& gp = t.grad_buffer(p.id());
        for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[off + i];
      }
      off += p.size();
    }
  });
}

template <typename T>
Var<T> concat(std::initializer_list<Var<T>> parts) {
  std::vector<Var<T>> v(parts);
  return concat(std::span<const Var<T>>(v));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), x.requires_grad(), [x](Tape<T>& t, const Tensor<T>& g) {
    auto& gx = t.grad_buffer(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// Stacks equally sized tensors as the rows of an [n x size] matrix.
template <typename T>
Var<T> stack_rows(std::span<const Var<T>> rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no inputs");
  std::vector<Var<T>> flat;
  flat.reserve(rows.size());
  const std::size_t d = rows.front().size();
  for (const auto& r : rows) {
    if (r.size() != d) {
      throw DimensionError("stack_rows: row sizes differ: " + shape_str(rows.front().shape()) +
                           " vs " + shape_str(r.shape()));
    }
    flat.push_back(reshape(r, Shape{1, d}));
  }
  return concat(std::span<const Var<T>>(flat));
}

// Rows [begin, end) of a rank-2 tensor.
template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_rows");
  const std::size_t cols = x.shape()[1];
  if (begin >= end || end > x.shape()[0]) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") outside " + shape_str(x.shape()));
  }
  Tensor<T> out({end - begin, cols});
  std::copy(x.value().raw() + begin * cols, x.value().raw() + end * cols, out.raw());
  return x.tape().record(std::move(out), x.requires_grad(),
                         [x, begin, cols](Tape<T>& t, const Tensor<T>& g) {
                           auto& gx = t.grad_buffer(x.id());
                           for (std::size_t i = 0; i < g.size(); ++i) gx[begin * cols + i] += g[i];
                         });
}

template <typename T>
Var<T> activation(const Var<T>& x, Activation act) {
  const auto& in = x.value();
  Tensor<T> out(in.shape());
  const T alpha = static_cast<T>(act.alpha);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T v = in[i];
    switch (act.kind) {
      case Activation::Kind::identity: out[i] = v; break;
      case Activation::Kind::relu: out[i] = v >= T{0} ? v : T{0}; break;
      case Activation::Kind::leaky_relu: out[i] = v >= T{0} ? v : alpha * v; break;
      case Activation::Kind::sigmoid: out[i] = detail::sigmoid(v); break;
    }
  }
  // sigmoid' is taken from the output; the relu family uses the input sign
  // with subgradient 1 at exactly 0.
  Tensor<T> saved;
  if (x.requires_grad() && act.kind == Activation::Kind::sigmoid) saved = out;
  return x.tape().record(
      std::move(out), x.requires_grad(),
      [x, act, alpha, saved = std::move(saved)](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad_buffer(x.id());
        const auto& in = x.value();
        for (std::size_t i = 0; i < g.size(); ++i) {
          switch (act.kind) {
            case Activation::Kind::identity: gx[i] += g[i]; break;
            case Activation::Kind::relu: gx[i] += in[i] >= T{0} ? g[i] : T{0}; break;
            case Activation::Kind::leaky_relu: gx[i] += in[i] >= T{0} ? g[i] : alpha * g[i]; break;
            case Activation::Kind::sigmoid: gx[i] += g[i] * saved[i] * (T{1} - saved[i]); break;
          }
        }
      });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return activation(x, Activation::relu());
}
template <typename T>
Var<T> leaky_relu(const Var<T>& x, double alpha = 0.01) {
  return activation(x, Activation::leaky_relu(alpha));
}
template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return activation(x, Activation::sigmoid());
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor<T> out(a.value());
  detail::add_into(out, b.value());
  return tape.record(std::move(out), a.requires_grad() || b.requires_grad(),
                     [a, b](Tape<T>& t, const Tensor<T>& g) {
                       if (a.requires_grad()) detail::add_into(t.grad_buffer(a.id()), g);
                       if (b.requires_grad()) detail::add_into(t.grad_buffer(b.id()), g);
                     });
}

// out[c,h,w] = w[c] * f[c,h,w]
template <typename T>
Var<T> scale_channels(const Var<T>& f, const Var<T>& w) {
  auto& tape = detail::same_tape(f, w);
  detail::require_rank(f, 3, "scale_channels");
  const std::size_t C = f.shape()[0], hw = f.shape()[1] * f.shape()[2];
  if (w.size() != C) {
    throw DimensionError("scale_channels: weights " + shape_str(w.shape()) + " for input " +
                         shape_str(f.shape()));
  }
  Tensor<T> out(f.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] = w.value()[c] * f.value()[c * hw + i];
  return tape.record(std::move(out), f.requires_grad() || w.requires_grad(),
                     [f, w, C, hw](Tape<T>& t, const Tensor<T>& g) {
                       if (f.requires_grad()) {
                         auto& gf = t.grad_buffer(f.id());
                         for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t i = 0; i < hw; ++i)
                             gf[c * hw + i] += w.value()[c] * g[c * hw + i];
                       }
                       if (w.requires_grad()) {
                         auto& gw = t.grad_buffer(w.id());
                         for (std::size_t c = 0; c < C; ++c) {
                           T s{0};
                           for (std::size_t i = 0; i < hw; ++i)
                             s += g[c * hw + i] * f.value()[c * hw + i];
                           gw[c] += s;
                         }
                       }
                     });
}

// out[c,h,w] = w[h,w] * f[c,h,w]; w holds H*W entries in any shape.
template <typename T>
Var<T> scale_spatial(const Var<T>& f, const Var<T>& w) {
  auto& tape = detail::same_tape(f, w);
  detail::require_rank(f, 3, "scale_spatial");
  const std::size_t C = f.shape()[0], hw = f.shape()[1] * f.shape()[2];
  if (w.size() != hw) {
    throw DimensionError("scale_spatial: weights " + shape_str(w.shape()) + " for input " +
                         shape_str(f.shape()));
  }
  Tensor<T> out(f.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] = w.value()[i] * f.value()[c * hw + i];
  return tape.record(std::move(out), f.requires_grad() || w.requires_grad(),
                     [f, w, C, hw](Tape<T>& t, const Tensor<T>& g) {
                       if (f.requires_grad()) {
                         auto& gf = t.grad_buffer(f.id());
                         for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t i = 0; i < hw; ++i)
                             gf[c * hw + i] += w.value()[i] * g[c * hw + i];
                       }
                       if (w.requires_grad()) {
                         auto& gw = t.grad_buffer(w.id());
                         for (std::size_t c = 0; c < C; ++c)
                           for (std::size_t i = 0; i < hw; ++i)
                             gw[i] += g[c * hw + i] * f.value()[c * hw + i];
                       }
                     });
}

// Row-wise softmax with max subtraction.
template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
  detail::require_rank(x, 2, "softmax_rows");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const auto& in = x.value();
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = in.raw() + i * c;
    T* o = out.raw() + i * c;
    const T mx = *std::max_element(row, row + c);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= s;
  }
  Tensor<T> p = x.requires_grad() ? out : Tensor<T>{};
  return x.tape().record(std::move(out), x.requires_grad(),
                         [x, p = std::move(p), n, c](Tape<T>& t, const Tensor<T>& g) {
                           auto& gx = t.grad_buffer(x.id());
                           for (std::size_t i = 0; i < n; ++i) {
                             T dot{0};
                             for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * p[i * c + j];
                             for (std::size_t j = 0; j < c; ++j)
                               gx[i * c + j] += p[i * c + j] * (g[i * c + j] - dot);
                           }
                         });
}

namespace detail {
inline void check_labels(std::span<const int> labels, std::size_t n, std::size_t c,
                         const char* op) {
  if (labels.size() != n) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c || y > 1) {
      throw ValidationError(std::string(op) + ": label " + std::to_string(y) +
                            " outside {0,1}");
    }
  }
}
}  // namespace detail

// Mean of -ln p[i, y_i] over rows of a probability matrix, p clamped to [1e-12, 1].
template <typename T>
Var<T> cross_entropy(const Var<T>& p, std::span<const int> labels) {
  detail::require_rank(p, 2, "cross_entropy");
  const std::size_t n = p.shape()[0], c = p.shape()[1];
  detail::check_labels(labels, n, c, "cross_entropy");
  const T lo = static_cast<T>(kProbClamp);
  T loss{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T v = std::clamp(p.value()[i * c + labels[i]], lo, T{1});
    loss -= std::log(v);
  }
  loss /= static_cast<T>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return p.tape().record(Tensor<T>::scalar(loss), p.requires_grad(),
                         [p, ys, n, c, lo](Tape<T>& t, const Tensor<T>& g) {
                           auto& gp = t.grad_buffer(p.id());
                           for (std::size_t i = 0; i < n; ++i) {
                             const T v = p.value()[i * c + ys[i]];
                             if (v < lo || v > T{1}) continue;  // clamp is flat there
                             gp[i * c + ys[i]] -= g[0] / (static_cast<T>(n) * v);
                           }
                         });
}

// Fused softmax + cross-entropy on logits; gradient is (p - onehot(y)) / n.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  detail::check_labels(labels, n, c, "softmax_cross_entropy");
  const auto& in = logits.value();
  Tensor<T> prob({n, c});
  T loss{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = in.raw() + i * c;
    T* o = prob.raw() + i * c;
    const T mx = *std::max_element(row, row + c);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= s;
    loss -= std::log(std::max(o[labels[i]], static_cast<T>(kProbClamp)));
  }
  loss /= static_cast<T>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor<T>::scalar(loss), logits.requires_grad(),
      [logits, prob = std::move(prob), ys, n, c](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad_buffer(logits.id());
        const T scale = g[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gx[i * c + j] +=
                scale * (prob[i * c + j] - (static_cast<int>(j) == ys[i] ? T{1} : T{0}));
      });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (auto v : x.value().data()) s += v;
  return x.tape().record(Tensor<T>::scalar(s), x.requires_grad(),
                         [x](Tape<T>& t, const Tensor<T>& g) {
                           auto& gx = t.grad_buffer(x.id());
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
                         });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  T s{0};
  for (auto v : x.value().data()) s += v;
  const T n = static_cast<T>(x.size());
  return x.tape().record(Tensor<T>::scalar(s / n), x.requires_grad(),
                         [x, n](Tape<T>& t, const Tensor<T>& g) {
                           auto& gx = t.grad_buffer(x.id());
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] / n;
                         });
}

// Inverted dropout: kept entries scaled by 1/(1-rate). rate 0 returns x unchanged.
template <typename T, typename Rng>
Var<T> dropout(const Var<T>& x, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ValidationError("dropout: rate " + std::to_string(rate) + " outside [0,1)");
  }
  if (rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> mask(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? scale : T{0};
  Tensor<T> out(x.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape().record(std::move(out), x.requires_grad(),
                         [x, mask = std::move(mask)](Tape<T>& t, const Tensor<T>& g) {
                           auto& gx = t.grad_buffer(x.id());
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                         });
}

}  // namespace aegcn
