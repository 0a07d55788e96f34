#pragma once

// Two-layer graph convolutional classifier over slice features and the
// slice-to-nodule probability average.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aegcn/graph.hpp"
#include "aegcn/ops.hpp"
#include "aegcn/params.hpp"

namespace aegcn {

inline constexpr std::size_t kGcnHidden = 32;
inline constexpr std::size_t kGcnClasses = 2;

template <typename T>
struct GCNParams {
  using scalar_type = T;

  Tensor<T> w0;  // [in x 32]
  Tensor<T> w1;  // [32 x 2]
  double dropout_rate = 0.3;
  Activation hidden_activation = Activation::leaky_relu(0.01);

  static GCNParams zeros(std::size_t in_dim = 512) {
    GCNParams p;
    p.w0 = Tensor<T>({in_dim, kGcnHidden});
    p.w1 = Tensor<T>({kGcnHidden, kGcnClasses});
    return p;
  }

  template <typename Rng>
  static GCNParams init(Rng& rng, std::size_t in_dim = 512) {
    auto p = zeros(in_dim);
    init_uniform_fan_in(p.w0, in_dim, kReluGain, rng);
    init_uniform_fan_in(p.w1, kGcnHidden, kLinearGain, rng);
    return p;
  }

  template <typename F>
  void visit(F&& f) {
    f("w0", w0);
    f("w1", w1);
  }
};

// act(A h w), no bias. Adj is a NormalizedAdjacency or a BlockAdjacency.
template <typename T, typename Adj>
Var<T> gcn_layer(const Adj& adj, const Var<T>& h, const Var<T>& w, Activation act) {
  if (h.shape().size() != 2 || h.shape()[0] != adj.rows()) {
    throw DimensionError("gcn_layer: " + std::to_string(adj.rows()) + "-node graph with features " +
                         shape_str(h.shape()));
  }
  return activation(adj.propagate(h.tape(), matmul(h, w)), act);
}

// dropout -> layer (hidden activation) -> dropout -> layer (linear) -> softmax.
// Dropout masks come from `seed` and are drawn only in train mode.
template <typename T, typename Adj>
Var<T> gcn_forward(const Adj& adj, const Var<T>& x, const GCNParams<T>& p, Binding<T>& bind,
                   bool train_mode, std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  const double rate = train_mode ? p.dropout_rate : 0.0;
  auto h = gcn_layer(adj, dropout(x, rate, rng), bind(p.w0), p.hidden_activation);
  auto logits = gcn_layer(adj, dropout(h, rate, rng), bind(p.w1), Activation::identity());
  return softmax_rows(logits);
}

// Eval-mode class probabilities [n x 2] for one graph.
template <typename T, typename Adj>
Tensor<T> gcn_predict(const Adj& adj, const Tensor<T>& x, const GCNParams<T>& p) {
  Tape<T> tape;
  Binding<T> bind(tape, false);
  return gcn_forward(adj, tape.constant(x), p, bind, false).value();
}

struct NodulePrediction {
  double prob = 0.0;  // mean class-1 probability over the nodule's slices
  int label = 0;      // 1 iff prob >= 0.5
};

inline constexpr double kDecisionThreshold = 0.5;

template <typename T>
std::vector<NodulePrediction> slice_to_nodule(const Tensor<T>& probs, std::span<const RowSpan> spans) {
  if (probs.rank() != 2 || probs.dim(1) != kGcnClasses) {
    throw DimensionError("slice_to_nodule: expected [n x 2] probabilities, got " + shape_str(probs.shape()));
  }
  std::vector<NodulePrediction> out;
  out.reserve(spans.size());
  for (const auto& s : spans) {
    if (s.size() == 0) throw ValidationError("slice_to_nodule: empty span at row " + std::to_string(s.begin));
    if (s.end > probs.dim(0)) throw ValidationError("slice_to_nodule: span past the last row");
    double total = 0.0;
    for (std::size_t i = s.begin; i < s.end; ++i) total += static_cast<double>(probs.at(i, 1));
    const double mean = total / static_cast<double>(s.size());
    out.push_back({mean, mean >= kDecisionThreshold ? 1 : 0});
  }
  return out;
}

}  // namespace aegcn
