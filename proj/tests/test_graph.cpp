#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "aegcn/graph.hpp"
#include "test_helpers.hpp"

using namespace aegcn;
using aegcn::testing::random_tensor;

namespace {

constexpr Topology kAll[] = {Topology::star, Topology::chain, Topology::full};

using Matrix = std::vector<std::vector<double>>;

// Explicit products D^-1/2 * (A + I) * D^-1/2 with dense diagonal matrices.
Matrix naive_normalized(const NoduleGraph& g) {
  const std::size_t n = g.n;
  Matrix a(n, std::vector<double>(n, 0.0)), d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) a[i][i] = 1.0;
  for (auto [i, j] : g.edges) a[i][j] = a[j][i] = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += a[i][j];
    d[i][i] = 1.0 / std::sqrt(deg);
  }
  Matrix out(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t l = 0; l < n; ++l) out[i][j] += d[i][k] * a[k][l] * d[l][j];
  return out;
}

NoduleGraph random_graph(std::size_t n, std::mt19937_64& rng) {
  NoduleGraph g{n, {}, Topology::full};
  std::bernoulli_distribution coin(0.4);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (coin(rng)) g.edges.emplace_back(i, j);
  return g;
}

double spectral_radius(const NormalizedAdjacency& a, std::mt19937_64& rng) {
  std::vector<double> v(a.n);
  std::uniform_real_distribution<double> u(0.1, 1.0);
  for (auto& x : v) x = u(rng);
  double lambda = 0.0;
  for (int it = 0; it < 2000; ++it) {
    std::vector<double> w(a.n, 0.0);
    for (std::size_t i = 0; i < a.n; ++i)
      for (std::size_t j = 0; j < a.n; ++j) w[i] += a.at(i, j) * v[j];
    double norm = 0.0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    lambda = norm;
    for (std::size_t i = 0; i < a.n; ++i) v[i] = w[i] / norm;
  }
  return lambda;
}

std::set<std::pair<std::size_t, std::size_t>> edge_set(const NoduleGraph& g) {
  std::set<std::pair<std::size_t, std::size_t>> s;
  for (auto [i, j] : g.edges) s.emplace(std::min(i, j), std::max(i, j));
  return s;
}

}  // namespace

TEST(BuildGraph, StarOfFiveCentersOnMiddleSlice) {
  auto g = build_graph(5, Topology::star);
  std::set<std::pair<std::size_t, std::size_t>> expect{{0, 2}, {1, 2}, {2, 3}, {2, 4}};
  EXPECT_EQ(edge_set(g), expect);
  EXPECT_EQ(g.edges.size(), 4u);
}

TEST(BuildGraph, EdgeCounts) {
  for (long long n = 1; n <= 12; ++n) {
    const auto N = static_cast<std::size_t>(n);
    EXPECT_EQ(build_graph(n, Topology::star).edges.size(), N - 1);
    EXPECT_EQ(build_graph(n, Topology::chain).edges.size(), N - 1);
    EXPECT_EQ(build_graph(n, Topology::full).edges.size(), N * (N - 1) / 2);
    for (auto t : kAll) {
      auto g = build_graph(n, t);
      EXPECT_EQ(edge_set(g).size(), g.edges.size());
      for (auto [i, j] : g.edges) {
        EXPECT_NE(i, j);
        EXPECT_LT(std::max(i, j), N);
      }
    }
  }
  auto chain = edge_set(build_graph(5, Topology::chain));
  EXPECT_EQ(chain, (std::set<std::pair<std::size_t, std::size_t>>{{0, 1}, {1, 2}, {2, 3}, {3, 4}}));
}

TEST(BuildGraph, SingleNodeHasNoEdgesAndZeroIsRejected) {
  for (auto t : kAll) {
    EXPECT_TRUE(build_graph(1, t).edges.empty());
    EXPECT_THROW(build_graph(0, t), ValidationError);
    EXPECT_THROW(build_graph(-3, t), ValidationError);
  }
}

TEST(BuildGraph, TopologyNames) {
  for (auto t : kAll) EXPECT_EQ(parse_topology(to_string(t)), t);
  EXPECT_THROW(parse_topology("ring"), ConfigError);
}

TEST(Normalize, MatchesNaiveOracleOnAllTopologies) {
  for (std::size_t n = 1; n <= 12; ++n)
    for (auto t : kAll) {
      auto g = build_graph(static_cast<long long>(n), t);
      auto a = normalize(g);
      auto oracle = naive_normalized(g);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(a.at(i, j), oracle[i][j], 1e-12);
    }
}

TEST(Normalize, ClosedForms) {
  for (std::size_t n = 1; n <= 12; ++n) {
    auto a = normalized_graph(n, Topology::full);
    for (double v : a.values) EXPECT_NEAR(v, 1.0 / static_cast<double>(n), 1e-12);
  }
  auto c = normalized_graph(3, Topology::chain);
  EXPECT_NEAR(c.at(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(c.at(1, 1), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(c.at(2, 2), 0.5, 1e-12);
  EXPECT_NEAR(c.at(0, 1), 1.0 / std::sqrt(6.0), 1e-12);
  EXPECT_NEAR(c.at(1, 2), 1.0 / std::sqrt(6.0), 1e-12);
  EXPECT_EQ(c.at(0, 2), 0.0);
  auto s = normalized_graph(5, Topology::star);
  EXPECT_NEAR(s.at(2, 2), 0.2, 1e-12);
  for (std::size_t leaf : {0u, 1u, 3u, 4u}) {
    EXPECT_NEAR(s.at(leaf, leaf), 0.5, 1e-12);
    EXPECT_NEAR(s.at(2, leaf), 1.0 / std::sqrt(10.0), 1e-12);
  }
  EXPECT_EQ(s.at(0, 1), 0.0);
}

TEST(Normalize, SymmetricNonnegativeWithPositiveDiagonal) {
  std::mt19937_64 rng(1);
  for (std::size_t n = 1; n <= 12; ++n) {
    std::vector<NoduleGraph> graphs{random_graph(n, rng)};
    for (auto t : kAll) graphs.push_back(build_graph(static_cast<long long>(n), t));
    for (const auto& g : graphs) {
      auto a = normalize(g);
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_GT(a.at(i, i), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
          EXPECT_GE(a.at(i, j), 0.0);
          EXPECT_NEAR(a.at(i, j), a.at(j, i), 1e-12);
        }
      }
    }
  }
}

TEST(Normalize, RowSumsMatchNeighbourLoop) {
  for (std::size_t n = 1; n <= 12; ++n)
    for (auto t : kAll) {
      auto g = build_graph(static_cast<long long>(n), t);
      std::vector<std::set<std::size_t>> nbrs(n);
      for (std::size_t i = 0; i < n; ++i) nbrs[i].insert(i);
      for (auto [i, j] : g.edges) {
        nbrs[i].insert(j);
        nbrs[j].insert(i);
      }
      auto a = normalize(g);
      for (std::size_t i = 0; i < n; ++i) {
        double expect = 0.0;
        for (auto j : nbrs[i]) expect += 1.0 / std::sqrt(double(nbrs[i].size()) * double(nbrs[j].size()));
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += a.at(i, j);
        EXPECT_NEAR(row, expect, 1e-12);
        if (t == Topology::full) {
          EXPECT_NEAR(row, 1.0, 1e-12);
        }
      }
    }
}

TEST(Normalize, SpectralRadiusAtMostOne) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 1 + trial % 12;
    auto g = trial % 2 ? random_graph(n, rng) : build_graph(static_cast<long long>(n), kAll[trial % 3]);
    EXPECT_LE(spectral_radius(normalize(g), rng), 1.0 + 1e-9);
  }
}

TEST(Normalize, RejectsInvalidEdges) {
  EXPECT_THROW(normalize(NoduleGraph{3, {{0, 3}}, Topology::chain}), ValidationError);
  EXPECT_THROW(normalize(NoduleGraph{3, {{1, 1}}, Topology::chain}), ValidationError);
}

TEST(BlockDiag, TwoSingletonsGiveIdentity) {
  auto b = block_diag({normalized_graph(1, Topology::star), normalized_graph(1, Topology::chain)},
                      spans_for({1, 1}));
  auto d = b.dense();
  EXPECT_EQ(d.values, (std::vector<double>{1, 0, 0, 1}));
}

TEST(BlockDiag, BlocksOnDiagonalZerosElsewhere) {
  auto a2 = normalized_graph(2, Topology::chain), a3 = normalized_graph(3, Topology::star);
  auto d = block_diag({a2, a3}, spans_for({2, 3})).dense();
  ASSERT_EQ(d.n, 5u);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double expect = 0.0;
      if (i < 2 && j < 2) expect = a2.at(i, j);
      if (i >= 2 && j >= 2) expect = a3.at(i - 2, j - 2);
      EXPECT_EQ(d.at(i, j), expect);
    }
}

TEST(BlockDiag, RowSumsConcatenate) {
  std::mt19937_64 rng(3);
  std::vector<NormalizedAdjacency> graphs;
  std::vector<std::size_t> sizes;
  std::vector<double> expect;
  for (int b = 0; b < 6; ++b) {
    const std::size_t n = 1 + rng() % 7;
    graphs.push_back(normalized_graph(n, kAll[b % 3]));
    sizes.push_back(n);
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) row += graphs.back().at(i, j);
      expect.push_back(row);
    }
  }
  auto d = block_diag(graphs, spans_for(sizes)).dense();
  for (std::size_t i = 0; i < d.n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < d.n; ++j) row += d.at(i, j);
    EXPECT_EQ(row, expect[i]);
  }
}

TEST(BlockDiag, RejectsBadSpans) {
  auto a2 = normalized_graph(2, Topology::full);
  EXPECT_THROW(block_diag({a2, a2}, {{0, 2}, {1, 3}}), ValidationError);
  EXPECT_THROW(block_diag({a2, a2}, {{0, 2}, {3, 5}}), ValidationError);
  EXPECT_THROW(block_diag({a2, a2}, {{0, 2}, {2, 5}}), ValidationError);
  EXPECT_THROW(block_diag({a2}, {{0, 2}, {2, 4}}), ValidationError);
  EXPECT_THROW(block_diag({}, {}), ValidationError);
}

TEST(BlockDiag, BlockwisePropagationEqualsDense) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<NormalizedAdjacency> graphs;
    std::vector<std::size_t> sizes;
    for (int b = 0; b < 1 + trial % 5; ++b) {
      sizes.push_back(1 + rng() % 6);
      graphs.push_back(normalized_graph(sizes.back(), kAll[rng() % 3]));
    }
    auto batch = block_diag(graphs, spans_for(sizes));
    auto h = random_tensor<double>(Shape{batch.n, 4}, rng);
    Tape<double> tape;
    auto x = tape.constant(h);
    auto blockwise = batch.propagate(tape, x).value();
    auto dense = batch.dense().propagate(tape, x).value();
    for (std::size_t i = 0; i < blockwise.size(); ++i) EXPECT_NEAR(blockwise[i], dense[i], 1e-12);
  }
}
