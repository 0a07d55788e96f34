#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "aegcn/finite_diff.hpp"
#include "aegcn/gcn.hpp"
#include "test_helpers.hpp"

using namespace aegcn;
using aegcn::testing::random_tensor;

namespace {

constexpr Topology kAll[] = {Topology::star, Topology::chain, Topology::full};

GCNParams<double> random_params(std::mt19937_64& rng, std::size_t in_dim = 512) {
  return GCNParams<double>::init(rng, in_dim);
}

Tensor<double> forward_eval(const NormalizedAdjacency& a, const Tensor<double>& x, const GCNParams<double>& p) {
  return gcn_predict(a, x, p);
}

}  // namespace

TEST(GcnLayer, IsolatedNodeIdentityWeightReturnsInput) {
  std::mt19937_64 rng(1);
  auto a = normalized_graph(1, Topology::star);
  auto h = random_tensor<double>(Shape{1, 6}, rng);
  Tensor<double> w({6, 6});
  for (std::size_t i = 0; i < 6; ++i) w.at(i, i) = 1.0;
  Tape<double> tape;
  auto out = gcn_layer(a, tape.constant(h), tape.constant(w), Activation::identity());
  EXPECT_EQ(out.value(), h);
}

TEST(GcnLayer, FullGraphOnConstantRowsReducesToDense) {
  std::mt19937_64 rng(2);
  for (std::size_t n = 1; n <= 8; ++n) {
    auto row = random_tensor<double>(Shape{1, 5}, rng);
    Tensor<double> h({n, 5});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 5; ++j) h.at(i, j) = row.at(0, j);
    auto w = random_tensor<double>(Shape{5, 3}, rng);
    Tape<double> tape;
    auto out = gcn_layer(normalized_graph(n, Topology::full), tape.constant(h), tape.constant(w),
                         Activation::leaky_relu(0.01))
                   .value();
    auto ref = activation(matmul(tape.constant(h), tape.constant(w)), Activation::leaky_relu(0.01)).value();
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
  }
}

TEST(GcnLayer, MatchesTripleLoopOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = normalized_graph(4, kAll[trial % 3]);
    auto h = random_tensor<double>(Shape{4, 7}, rng);
    auto w = random_tensor<double>(Shape{7, 3}, rng);
    Tape<double> tape;
    auto out = gcn_layer(a, tape.constant(h), tape.constant(w), Activation::identity()).value();
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t c = 0; c < 3; ++c) {
        double ref = 0.0;
        for (std::size_t j = 0; j < 4; ++j)
          for (std::size_t k = 0; k < 7; ++k) ref += a.at(i, j) * h.at(j, k) * w.at(k, c);
        EXPECT_NEAR(out.at(i, c), ref, 1e-6);
      }
  }
}

TEST(GcnLayer, RowMismatchThrows) {
  Tape<double> tape;
  auto h = tape.constant(Tensor<double>({3, 4}));
  auto w = tape.constant(Tensor<double>({4, 2}));
  EXPECT_THROW(gcn_layer(normalized_graph(4, Topology::chain), h, w, Activation::identity()), DimensionError);
  EXPECT_THROW(gcn_layer(normalized_graph(3, Topology::chain), h, tape.constant(Tensor<double>({5, 2})),
                         Activation::identity()),
               DimensionError);
}

TEST(GcnForward, ZeroWeightsGiveHalfProbabilities) {
  auto p = GCNParams<double>::zeros();
  std::mt19937_64 rng(4);
  auto x = random_tensor<double>(Shape{5, 512}, rng);
  auto probs = forward_eval(normalized_graph(5, Topology::star), x, p);
  for (double v : probs.data()) EXPECT_EQ(v, 0.5);
}

TEST(GcnForward, ZeroDropoutTrainModeEqualsEval) {
  std::mt19937_64 rng(5);
  auto p = random_params(rng);
  p.dropout_rate = 0.0;
  auto x = random_tensor<double>(Shape{6, 512}, rng);
  auto a = normalized_graph(6, Topology::chain);
  Tape<double> tape;
  Binding<double> bind(tape, false);
  auto train = gcn_forward(a, tape.constant(x), p, bind, true, 123).value();
  EXPECT_EQ(train, forward_eval(a, x, p));
}

TEST(GcnForward, RowsSumToOneInAllModes) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    auto p = random_params(rng);
    const std::size_t n = 1 + trial % 9;
    auto x = random_tensor<double>(Shape{n, 512}, rng, 0, 2);
    auto a = normalized_graph(n, kAll[trial % 3]);
    for (bool train : {false, true}) {
      Tape<double> tape;
      Binding<double> bind(tape, false);
      auto probs = gcn_forward(a, tape.constant(x), p, bind, train, trial).value();
      for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(probs.at(i, 0) + probs.at(i, 1), 1.0, 1e-6);
    }
  }
}

TEST(GcnForward, DropoutMasksFollowSeed) {
  std::mt19937_64 rng(7);
  auto p = random_params(rng);
  auto x = random_tensor<double>(Shape{5, 512}, rng, 0, 1);
  auto a = normalized_graph(5, Topology::full);
  auto run = [&](std::uint64_t seed) {
    Tape<double> tape;
    Binding<double> bind(tape, false);
    return gcn_forward(a, tape.constant(x), p, bind, true, seed).value();
  };
  EXPECT_EQ(run(11), run(11));
  EXPECT_NE(run(11), run(12));
  EXPECT_NE(run(11), forward_eval(a, x, p));
}

TEST(GcnForward, ActivationSwitch) {
  std::mt19937_64 rng(8);
  auto p = random_params(rng);
  auto x = random_tensor<double>(Shape{4, 512}, rng, -1, 1);
  auto a = normalized_graph(4, Topology::chain);
  auto leaky = forward_eval(a, x, p);
  p.hidden_activation = Activation::relu();
  auto relu = forward_eval(a, x, p);
  EXPECT_NE(leaky, relu);
  // oracle for the relu reading
  Tape<double> tape;
  auto c = [&](const Tensor<double>& t) { return tape.constant(t); };
  auto h = activation(matmul(c(a.tensor<double>()), matmul(c(x), c(p.w0))), Activation::relu());
  auto ref = softmax_rows(matmul(c(a.tensor<double>()), matmul(h, c(p.w1)))).value();
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(relu[i], ref[i], 1e-12);
}

TEST(GcnForward, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  auto p = random_params(rng);
  auto x = random_tensor<double>(Shape{5, 512}, rng, 0, 1);
  auto a = normalized_graph(5, Topology::star);
  const std::vector<int> labels{1, 0, 1, 1, 0};
  for (bool train : {false, true}) {
    auto loss_of = [&](Binding<double>& bind) {
      return cross_entropy(gcn_forward(a, bind.tape().constant(x), p, bind, train, 77),
                           std::span<const int>(labels));
    };
    Tape<double> tape;
    Binding<double> bind(tape, true);
    tape.backward(loss_of(bind));
    auto numeric = finite_diff_grad<double>(
        [&] {
          Tape<double> t;
          Binding<double> b(t, false);
          return loss_of(b).value()[0];
        },
        {&p.w0, &p.w1});
    EXPECT_LT(max_relative_error(bind.grad(p.w0), numeric[0]), 1e-4) << "train=" << train;
    EXPECT_LT(max_relative_error(bind.grad(p.w1), numeric[1]), 1e-4) << "train=" << train;
  }
}

TEST(GcnForward, BlockDiagonalBatchEqualsPerNodule) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = random_params(rng);
    std::vector<NormalizedAdjacency> graphs;
    std::vector<std::size_t> sizes;
    const int blocks = 1 + static_cast<int>(rng() % 6);
    for (int b = 0; b < blocks; ++b) {
      sizes.push_back(1 + rng() % 8);
      graphs.push_back(normalized_graph(sizes.back(), kAll[rng() % 3]));
    }
    auto batch = block_diag(graphs, spans_for(sizes));
    auto x = random_tensor<double>(Shape{batch.n, 512}, rng, 0, 1);
    auto dense = gcn_predict(batch.dense(), x, p);
    auto blockwise = gcn_predict(batch, x, p);
    for (std::size_t b = 0; b < graphs.size(); ++b) {
      const auto s = batch.spans[b];
      Tensor<double> xb({s.size(), 512});
      std::copy(x.raw() + s.begin * 512, x.raw() + s.end * 512, xb.raw());
      auto single = gcn_predict(graphs[b], xb, p);
      for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t c = 0; c < 2; ++c) {
          EXPECT_NEAR(dense.at(s.begin + i, c), single.at(i, c), 1e-6);
          EXPECT_NEAR(blockwise.at(s.begin + i, c), single.at(i, c), 1e-6);
        }
    }
  }
}

TEST(GcnForward, PermutationEquivariance) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_params(rng);
    const std::size_t n = 2 + trial % 7;
    auto a = normalized_graph(n, kAll[trial % 3]);
    auto x = random_tensor<double>(Shape{n, 512}, rng, 0, 1);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    NormalizedAdjacency pa{n, std::vector<double>(n * n)};
    Tensor<double> px({n, 512});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) pa.values[i * n + j] = a.at(perm[i], perm[j]);
      std::copy(x.raw() + perm[i] * 512, x.raw() + (perm[i] + 1) * 512, px.raw() + i * 512);
    }
    auto out = forward_eval(a, x, p), pout = forward_eval(pa, px, p);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(pout.at(i, c), out.at(perm[i], c), 1e-12);
  }
}

TEST(SliceToNodule, AveragesWithInclusiveThreshold) {
  Tensor<double> probs({3, 2}, {0.8, 0.2, 0.6, 0.4, 0.1, 0.9});
  const RowSpan one[] = {{0, 3}};
  auto r = slice_to_nodule(probs, one);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_NEAR(r[0].prob, 0.5, 1e-15);
  EXPECT_EQ(r[0].label, 1);
  Tensor<double> exact({2, 2}, {0.5, 0.5, 0.5, 0.5});
  const RowSpan all[] = {{0, 2}};
  EXPECT_EQ(slice_to_nodule(exact, all)[0].label, 1);
}

TEST(SliceToNodule, SingleSliceAndIndependentSpans) {
  Tensor<double> probs({5, 2}, {0.7, 0.3, 0.9, 0.1, 0.2, 0.8, 0.4, 0.6, 0.0, 1.0});
  const RowSpan single[] = {{2, 3}};
  EXPECT_EQ(slice_to_nodule(probs, single)[0].prob, 0.8);
  const RowSpan two[] = {{0, 2}, {2, 5}};
  auto r = slice_to_nodule(probs, two);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_NEAR(r[0].prob, 0.2, 1e-15);
  EXPECT_EQ(r[0].label, 0);
  EXPECT_NEAR(r[1].prob, 0.8, 1e-15);
  EXPECT_EQ(r[1].label, 1);
}

TEST(SliceToNodule, EmptySpanThrows) {
  Tensor<double> probs({2, 2}, {0.5, 0.5, 0.5, 0.5});
  const RowSpan bad[] = {{0, 2}, {2, 2}};
  EXPECT_THROW(slice_to_nodule(probs, bad), ValidationError);
}
