#pragma once

// Intra-nodule slice graphs: star, chain and fully connected topologies,
// symmetric normalisation with self-loops, and block-diagonal batching.

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "aegcn/ops.hpp"

namespace aegcn {

enum class Topology { star, chain, full };

inline std::string to_string(Topology t) {
  switch (t) {
    case Topology::star: return "star";
    case Topology::chain: return "chain";
    case Topology::full: return "full";
  }
  return "?";
}

inline Topology parse_topology(const std::string& s) {
  if (s == "star") return Topology::star;
  if (s == "chain") return Topology::chain;
  if (s == "full" || s == "fully_connected") return Topology::full;
  throw ConfigError("unknown graph topology '" + s + "' (expected star, chain or full)");
}

// Nodes are slices in ascending slice order; edges are unordered pairs
// without self-loops.
struct NoduleGraph {
  std::size_t n = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  Topology topology = Topology::full;
};

inline NoduleGraph build_graph(long long n, Topology topology) {
  if (n < 1) throw ValidationError("build_graph: node count must be >= 1, got " + std::to_string(n));
  NoduleGraph g{static_cast<std::size_t>(n), {}, topology};
  switch (topology) {
    case Topology::star: {
      const std::size_t m = g.n / 2;
      for (std::size_t j = 0; j < g.n; ++j)
        if (j != m) g.edges.emplace_back(m, j);
      break;
    }
    case Topology::chain:
      for (std::size_t i = 0; i + 1 < g.n; ++i) g.edges.emplace_back(i, i + 1);
      break;
    case Topology::full:
      for (std::size_t i = 0; i < g.n; ++i)
        for (std::size_t j = i + 1; j < g.n; ++j) g.edges.emplace_back(i, j);
      break;
  }
  return g;
}

// Dense symmetric n x n propagation matrix, row-major, in double.
struct NormalizedAdjacency {
  std::size_t n = 0;
  std::vector<double> values;

  double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
  std::size_t rows() const { return n; }

  template <typename T>
  Tensor<T> tensor() const {
    std::vector<T> v(values.begin(), values.end());
    return Tensor<T>({n, n}, std::move(v));
  }

  template <typename T>
  Var<T> propagate(Tape<T>& tape, const Var<T>& h) const {
    return matmul(tape.constant(tensor<T>()), h);
  }
};

// D^-1/2 (A + I) D^-1/2 where D holds the row sums of A + I.
inline NormalizedAdjacency normalize(const NoduleGraph& g) {
  const std::size_t n = g.n;
  std::vector<double> a(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) a[i * n + i] = 1.0;
  for (auto [i, j] : g.edges) {
    if (i >= n || j >= n || i == j) {
      throw ValidationError("normalize: invalid edge (" + std::to_string(i) + "," + std::to_string(j) + ")");
    }
    a[i * n + j] = a[j * n + i] = 1.0;
  }
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += a[i * n + j];
    inv_sqrt[i] = 1.0 / std::sqrt(d);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
  return {n, std::move(a)};
}

inline NormalizedAdjacency normalized_graph(std::size_t n, Topology t) {
  return normalize(build_graph(static_cast<long long>(n), t));
}

struct RowSpan {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
};

// Block-diagonal batch kept as blocks plus row spans. propagate() multiplies
// block by block, so the N x N matrix is never formed.
struct BlockAdjacency {
  std::vector<NormalizedAdjacency> blocks;
  std::vector<RowSpan> spans;
  std::size_t n = 0;

  std::size_t rows() const { return n; }

  NormalizedAdjacency dense() const {
    NormalizedAdjacency out{n, std::vector<double>(n * n, 0.0)};
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& s = spans[b];
      for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
          out.values[(s.begin + i) * n + s.begin + j] = blocks[b].at(i, j);
    }
    return out;
  }

  template <typename T>
  Var<T> propagate(Tape<T>& tape, const Var<T>& h) const {
    std::vector<Var<T>> parts;
    parts.reserve(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      parts.push_back(blocks[b].propagate(tape, slice_rows(h, spans[b].begin, spans[b].end)));
    }
    return concat(std::span<const Var<T>>(parts));
  }
};

// Spans must tile [0, N) in order without overlap; block b occupies spans[b].
inline BlockAdjacency block_diag(std::vector<NormalizedAdjacency> graphs, std::vector<RowSpan> spans) {
  if (graphs.size() != spans.size()) {
    throw ValidationError("block_diag: " + std::to_string(graphs.size()) + " graphs for " +
                          std::to_string(spans.size()) + " spans");
  }
  if (graphs.empty()) throw ValidationError("block_diag: no graphs");
  std::size_t next = 0;
  for (std::size_t b = 0; b < spans.size(); ++b) {
    const auto& s = spans[b];
    const std::string where = "block_diag: span " + std::to_string(b) + " [" + std::to_string(s.begin) +
                              "," + std::to_string(s.end) + ")";
    if (s.begin < next) throw ValidationError(where + " overlaps the previous span");
    if (s.begin > next) throw ValidationError(where + " leaves rows uncovered");
    if (s.size() != graphs[b].n) {
      throw ValidationError(where + " does not match a " + std::to_string(graphs[b].n) + "-node graph");
    }
    next = s.end;
  }
  return {std::move(graphs), std::move(spans), next};
}

// Consecutive spans for the given block sizes.
inline std::vector<RowSpan> spans_for(const std::vector<std::size_t>& sizes) {
  std::vector<RowSpan> out;
  std::size_t at = 0;
  for (auto s : sizes) {
    out.push_back({at, at + s});
    at += s;
  }
  return out;
}

}  // namespace aegcn
