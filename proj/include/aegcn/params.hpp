#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "aegcn/autodiff.hpp"
#include "aegcn/tensor.hpp"

namespace aegcn {

// Maps parameter tensors to tape leaves for one forward pass. Each tensor is
// bound once (keyed by address) so shared weights accumulate one gradient.
template <typename T>
class Binding {
 public:
  Binding(Tape<T>& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}

  Var<T> operator()(const Tensor<T>& p) {
    auto it = vars_.find(&p);
    if (it != vars_.end()) return it->second;
    auto v = tape_->leaf(p, trainable_);
    vars_.emplace(&p, v);
    return v;
  }

  Tape<T>& tape() const { return *tape_; }
  bool trainable() const noexcept { return trainable_; }

  // Zero when the tensor was never bound or did not reach the loss.
  Tensor<T> grad(const Tensor<T>& p) const {
    auto it = vars_.find(&p);
    if (it == vars_.end()) return Tensor<T>(p.shape());
    return tape_->grad(it->second);
  }

 private:
  Tape<T>* tape_;
  bool trainable_;
  std::unordered_map<const Tensor<T>*, Var<T>> vars_;
};

// A named parameter reference, as produced by the visit() of a params struct.
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
};

template <typename P>
auto named_params(P& params, const std::string& prefix = "") {
  using T = typename P::scalar_type;
  std::vector<NamedParam<T>> out;
  params.visit([&](const std::string& name, Tensor<T>& t) { out.push_back({prefix + name, &t}); });
  return out;
}

template <typename T>
std::vector<Tensor<T>*> tensors_of(const std::vector<NamedParam<T>>& named) {
  std::vector<Tensor<T>*> out;
  out.reserve(named.size());
  for (const auto& p : named) out.push_back(p.tensor);
  return out;
}

// Uniform(-bound, bound) with bound = sqrt(gain / fan_in).
template <typename T, typename Rng>
void init_uniform_fan_in(Tensor<T>& t, std::size_t fan_in, double gain, Rng& rng) {
  const double bound = std::sqrt(gain / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

inline constexpr double kReluGain = 6.0;    // He-uniform for relu-family layers
inline constexpr double kLinearGain = 3.0;  // variance preserving for linear outputs

// Copies every tensor of src into the matching tensor of dst, converting the
// scalar type. Both structs must visit the same names and shapes.
template <typename P, typename Q>
void copy_params(P& src, Q& dst) {
  auto a = named_params(src);
  auto b = named_params(dst);
  if (a.size() != b.size()) throw DimensionError("copy_params: parameter count mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor->shape() != b[i].tensor->shape()) {
      throw DimensionError("copy_params: mismatch at " + a[i].name);
    }
    *b[i].tensor = a[i].tensor->template cast<typename Q::scalar_type>();
  }
}

}  // namespace aegcn
