#pragma once

// Convolutional block attention: channel attention followed by spatial
// attention over a [C x H x W] feature map.

#include <cstddef>
#include <string>

#include "aegcn/ops.hpp"
#include "aegcn/params.hpp"

namespace aegcn {

struct CBAMConfig {
  bool channel = true;
  bool spatial = true;
  std::size_t reduction = 8;
  std::size_t spatial_kernel = 7;
};

template <typename T>
struct CBAMParams {
  using scalar_type = T;

  std::size_t channels = 0;
  std::size_t reduction = 8;
  Tensor<T> mlp_w0;          // [C/r x C]
  Tensor<T> mlp_b0;          // [C/r]
  Tensor<T> mlp_w1;          // [C x C/r]
  Tensor<T> mlp_b1;          // [C]
  Tensor<T> spatial_kernel;  // [1 x 2 x k x k]
  Tensor<T> spatial_bias;    // [1]

  // Zero-initialised parameters for C channels.
  static CBAMParams zeros(std::size_t channels, const CBAMConfig& cfg) {
    if (cfg.reduction == 0 || channels % cfg.reduction != 0) {
      throw ConfigError("cbam: reduction ratio " + std::to_string(cfg.reduction) +
                        " does not divide " + std::to_string(channels) + " channels");
    }
    if (cfg.spatial_kernel % 2 == 0) {
      throw ConfigError("cbam: spatial kernel size must be odd, got " +
                        std::to_string(cfg.spatial_kernel));
    }
    const std::size_t hidden = channels / cfg.reduction, k = cfg.spatial_kernel;
    CBAMParams p;
    p.channels = channels;
    p.reduction = cfg.reduction;
    p.mlp_w0 = Tensor<T>({hidden, channels});
    p.mlp_b0 = Tensor<T>({hidden});
    p.mlp_w1 = Tensor<T>({channels, hidden});
    p.mlp_b1 = Tensor<T>({channels});
    p.spatial_kernel = Tensor<T>({1, 2, k, k});
    p.spatial_bias = Tensor<T>({1});
    return p;
  }

  template <typename Rng>
  static CBAMParams init(std::size_t channels, const CBAMConfig& cfg, Rng& rng) {
    auto p = zeros(channels, cfg);
    init_uniform_fan_in(p.mlp_w0, channels, kReluGain, rng);
    init_uniform_fan_in(p.mlp_w1, channels / cfg.reduction, kLinearGain, rng);
    init_uniform_fan_in(p.spatial_kernel, 2 * cfg.spatial_kernel * cfg.spatial_kernel, kLinearGain, rng);
    return p;
  }

  template <typename F>
  void visit(F&& f) {
    f("mlp_w0", mlp_w0);
    f("mlp_b0", mlp_b0);
    f("mlp_w1", mlp_w1);
    f("mlp_b1", mlp_b1);
    f("spatial_kernel", spatial_kernel);
    f("spatial_bias", spatial_bias);
  }
};

template <typename T>
struct AttentionResult {
  Var<T> weights;
  Var<T> refined;
};

namespace detail {
template <typename T>
void check_cbam_input(const Var<T>& f, const CBAMParams<T>& p) {
  if (f.shape().size() != 3 || f.shape()[0] != p.channels) {
    throw DimensionError("cbam: feature map " + shape_str(f.shape()) + " for " +
                         std::to_string(p.channels) + "-channel attention");
  }
}
}  // namespace detail

// weights = sigmoid(MLP(avgpool f) + MLP(maxpool f)), MLP = W1 relu(W0 x + b0) + b1.
template <typename T>
AttentionResult<T> channel_attention(const Var<T>& f, const CBAMParams<T>& p, Binding<T>& bind) {
  detail::check_cbam_input(f, p);
  const std::size_t C = p.channels;
  auto w0 = bind(p.mlp_w0), b0 = bind(p.mlp_b0), w1 = bind(p.mlp_w1), b1 = bind(p.mlp_b1);
  auto mlp = [&](const Var<T>& pooled) {
    return linear(relu(linear(reshape(pooled, Shape{1, C}), w0, b0)), w1, b1);
  };
  auto avg = mlp(global_pool(f, PoolKind::avg));
  auto mx = mlp(global_pool(f, PoolKind::max));
  auto weights = reshape(sigmoid(add(avg, mx)), Shape{C});
  return {weights, scale_channels(f, weights)};
}

// weights = sigmoid(conv([avg_c f ; max_c f])), same spatial size as f.
template <typename T>
AttentionResult<T> spatial_attention(const Var<T>& f, const CBAMParams<T>& p, Binding<T>& bind) {
  detail::check_cbam_input(f, p);
  const std::size_t pad = p.spatial_kernel.dim(2) / 2;
  auto pooled = concat({channel_pool(f, PoolKind::avg), channel_pool(f, PoolKind::max)});
  auto logits = conv2d(pooled, bind(p.spatial_kernel), bind(p.spatial_bias), 1, pad);
  auto weights = reshape(sigmoid(logits), Shape{f.shape()[1], f.shape()[2]});
  return {weights, scale_spatial(f, weights)};
}

// Channel attention then spatial attention; either stage can be switched off.
template <typename T>
Var<T> cbam(const Var<T>& f, const CBAMParams<T>& p, Binding<T>& bind,
            const CBAMConfig& cfg = {}) {
  auto out = f;
  if (cfg.channel) out = channel_attention(out, p, bind).refined;
  if (cfg.spatial) out = spatial_attention(out, p, bind).refined;
  return out;
}

}  // namespace aegcn
