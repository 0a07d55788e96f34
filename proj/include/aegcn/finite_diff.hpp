#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "aegcn/tensor.hpp"

namespace aegcn {

// Central differences (f(x+eps) - f(x-eps)) / 2eps for every coordinate of
// every tensor in params. f reads params by reference; each coordinate is
// restored after probing.
template <typename T, typename F>
std::vector<Tensor<T>> finite_diff_grad(F&& f, std::vector<Tensor<T>*> params, T eps = T(1e-5)) {
  std::vector<Tensor<T>> grads;
  grads.reserve(params.size());
  for (Tensor<T>* p : params) {
    Tensor<T> g(p->shape());
    for (std::size_t i = 0; i < p->size(); ++i) {
      const T orig = (*p)[i];
      (*p)[i] = orig + eps;
      const T up = static_cast<T>(f());
      (*p)[i] = orig - eps;
      const T down = static_cast<T>(f());
      (*p)[i] = orig;
      g[i] = (up - down) / (T{2} * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
// gradient is ~0 from dominating with roundoff noise.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <typename T>
double max_relative_error(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, relative_error(static_cast<double>(a[i]), static_cast<double>(b[i]), floor));
  }
  return worst;
}

}  // namespace aegcn
