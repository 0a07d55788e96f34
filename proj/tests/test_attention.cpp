#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "aegcn/attention.hpp"
#include "aegcn/finite_diff.hpp"
#include "test_helpers.hpp"

using namespace aegcn;
using aegcn::testing::random_tensor;

namespace {

CBAMParams<double> random_params(std::size_t C, std::mt19937_64& rng, double scale = 1.0) {
  CBAMConfig cfg;
  cfg.reduction = C >= 4 ? 4 : 1;
  auto p = CBAMParams<double>::zeros(C, cfg);
  p.visit([&](const std::string&, Tensor<double>& t) { t = random_tensor(t.shape(), rng, -scale, scale); });
  return p;
}

}  // namespace

TEST(ChannelAttention, ZeroMlpGivesHalfWeights) {
  std::mt19937_64 rng(1);
  auto p = CBAMParams<double>::zeros(16, CBAMConfig{});
  auto f = random_tensor(Shape{16, 5, 5}, rng);
  Tape<double> tape;
  Binding<double> bind(tape, false);
  auto r = channel_attention(tape.constant(f), p, bind);
  for (auto w : r.weights.value().data()) EXPECT_EQ(w, 0.5);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(r.refined.value()[i], 0.5 * f[i]);
}

TEST(ChannelAttention, ConstantChannelsMakeAvgAndMaxPathsEqual) {
  std::mt19937_64 rng(2);
  Tensor<double> f({4, 4, 4});
  const double levels[] = {0.5, -0.25, 1.75, 0.125};
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 16; ++i) f[c * 16 + i] = levels[c];
  auto p = random_params(4, rng);
  Tape<double> tape;
  Binding<double> bind(tape, false);
  auto x = tape.constant(f);
  EXPECT_EQ(global_pool(x, PoolKind::avg).value(), global_pool(x, PoolKind::max).value());
  auto mlp = [&](PoolKind k) {
    return linear(relu(linear(reshape(global_pool(x, k), Shape{1, 4}), bind(p.mlp_w0), bind(p.mlp_b0))),
                  bind(p.mlp_w1), bind(p.mlp_b1))
        .value();
  };
  EXPECT_EQ(mlp(PoolKind::avg), mlp(PoolKind::max));
}

TEST(ChannelAttention, WeightsInOpenIntervalAndShrinkInput) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = random_params(8, rng);
    auto f = random_tensor(Shape{8, 6, 5}, rng, -3, 3);
    Tape<double> tape;
    Binding<double> bind(tape, false);
    auto r = channel_attention(tape.constant(f), p, bind);
    for (auto w : r.weights.value().data()) {
      EXPECT_GT(w, 0.0);
      EXPECT_LT(w, 1.0);
    }
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_LE(std::abs(r.refined.value()[i]), std::abs(f[i]));
  }
}

TEST(ChannelAttention, ReductionMustDivideChannels) {
  CBAMConfig cfg;
  cfg.reduction = 8;
  EXPECT_THROW(CBAMParams<double>::zeros(12, cfg), ConfigError);
  cfg.reduction = 0;
  EXPECT_THROW(CBAMParams<double>::zeros(12, cfg), ConfigError);
}

TEST(SpatialAttention, ZeroKernelGivesHalfWeights) {
  std::mt19937_64 rng(4);
  auto p = CBAMParams<double>::zeros(8, CBAMConfig{});
  Tape<double> tape;
  Binding<double> bind(tape, false);
  auto r = spatial_attention(tape.constant(random_tensor(Shape{8, 7, 9}, rng)), p, bind);
  EXPECT_EQ(r.weights.shape(), (Shape{7, 9}));
  for (auto w : r.weights.value().data()) EXPECT_EQ(w, 0.5);
}

TEST(SpatialAttention, EqualChannelsMakeAvgAndMaxMapsEqual) {
  std::mt19937_64 rng(5);
  auto plane = random_tensor(Shape{1, 6, 6}, rng);
  for (std::size_t C : {2u, 8u}) {
    Tensor<double> f({C, 6, 6});
    for (std::size_t c = 0; c < C; ++c)
      std::copy(plane.raw(), plane.raw() + 36, f.raw() + c * 36);
    Tape<double> tape;
    auto x = tape.constant(f);
    auto avg = channel_pool(x, PoolKind::avg).value();
    auto mx = channel_pool(x, PoolKind::max).value();
    if (C == 2) {
      EXPECT_EQ(avg, mx);
    } else {
      for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(avg[i], mx[i], 1e-15);
    }
  }
}

TEST(SpatialAttention, PreservesSpatialShape) {
  std::mt19937_64 rng(6);
  auto p = random_params(4, rng);
  for (std::size_t h = 1; h <= 9; ++h)
    for (std::size_t w = 1; w <= 9; w += 2) {
      Tape<double> tape;
      Binding<double> bind(tape, false);
      auto r = spatial_attention(tape.constant(random_tensor(Shape{4, h, w}, rng)), p, bind);
      EXPECT_EQ(r.weights.shape(), (Shape{h, w}));
      EXPECT_EQ(r.refined.shape(), (Shape{4, h, w}));
    }
}

TEST(Cbam, ZeroParamsGiveQuarterOfInput) {
  std::mt19937_64 rng(7);
  auto p = CBAMParams<double>::zeros(16, CBAMConfig{});
  auto f = random_tensor(Shape{16, 6, 6}, rng);
  Tape<double> tape;
  Binding<double> bind(tape, false);
  auto out = cbam(tape.constant(f), p, bind);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(out.value()[i], 0.25 * f[i]);
}

TEST(Cbam, PreservesSignShapeAndShrinks) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    auto p = random_params(8, rng, 2.0);
    auto f = random_tensor(Shape{8, 5, 7}, rng, -2, 2);
    Tape<double> tape;
    Binding<double> bind(tape, false);
    auto out = cbam(tape.constant(f), p, bind).value();
    ASSERT_EQ(out.shape(), f.shape());
    for (std::size_t i = 0; i < f.size(); ++i) {
      EXPECT_EQ(std::signbit(out[i]), std::signbit(f[i]));
      EXPECT_LE(std::abs(out[i]), std::abs(f[i]));
    }
  }
}

TEST(Cbam, StageTogglesSkipStages) {
  std::mt19937_64 rng(9);
  auto p = CBAMParams<double>::zeros(8, CBAMConfig{});
  auto f = random_tensor(Shape{8, 4, 4}, rng);
  for (auto [ch, sp, factor] : {std::tuple{true, false, 0.5}, {false, true, 0.5}, {false, false, 1.0}}) {
    Tape<double> tape;
    Binding<double> bind(tape, false);
    CBAMConfig cfg;
    cfg.channel = ch;
    cfg.spatial = sp;
    auto out = cbam(tape.constant(f), p, bind, cfg).value();
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(out[i], factor * f[i]);
  }
}

TEST(Cbam, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(10);
  auto p = random_params(8, rng, 0.8);
  auto f = random_tensor(Shape{8, 5, 6}, rng);

  Tape<double> tape;
  Binding<double> bind(tape, true);
  auto x = tape.leaf(f);
  tape.backward(sum(cbam(x, p, bind)));

  auto named = named_params(p);
  auto ptrs = tensors_of(named);
  ptrs.push_back(&f);
  auto numeric = finite_diff_grad<double>(
      [&] {
        Tape<double> t;
        Binding<double> b(t, false);
        return sum(cbam(t.constant(f), p, b)).value()[0];
      },
      ptrs);
  for (std::size_t i = 0; i < named.size(); ++i) {
    EXPECT_LT(max_relative_error(bind.grad(*named[i].tensor), numeric[i]), 1e-4) << named[i].name;
  }
  EXPECT_LT(max_relative_error(tape.grad(x), numeric.back()), 1e-4);
}
