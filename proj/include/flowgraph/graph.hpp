#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "flowgraph/error.hpp"

namespace flowgraph {

inline constexpr int kDefaultMaxNodes = 64;

/// Variable-size labeled graph with categorical node and edge types.
///
/// Edge category 0 means "no edge". The edge matrix is kept symmetric with a
/// zero diagonal; every mutator preserves that.
class Graph {
 public:
  Graph() = default;
  explicit Graph(int n_nodes) : n_(n_nodes), nodes_(n_nodes, 0), edges_(static_cast<std::size_t>(n_nodes) * n_nodes, 0) {
    require(n_nodes >= 0, "Graph: negative node count");
  }
  Graph(std::vector<int> node_types, int n_nodes_check) : Graph(n_nodes_check) {
    require(static_cast<int>(node_types.size()) == n_nodes_check, "Graph: node list length mismatch");
    nodes_ = std::move(node_types);
  }

  int size() const noexcept { return n_; }
  int node(int i) const { return nodes_[i]; }
  int edge(int i, int j) const { return edges_[static_cast<std::size_t>(i) * n_ + j]; }
  void set_node(int i, int type) { nodes_[i] = type; }
  void set_edge(int i, int j, int type) {
    require(i != j || type == 0, "Graph: diagonal entries must be 0");
    edges_[static_cast<std::size_t>(i) * n_ + j] = type;
    edges_[static_cast<std::size_t>(j) * n_ + i] = type;
  }

  const std::vector<int>& node_types() const noexcept { return nodes_; }
  const std::vector<int>& edge_types() const noexcept { return edges_; }

  // Number of unordered pairs with a non-zero edge category.
  int edge_count() const {
    int c = 0;
    for (int i = 0; i < n_; ++i)
      for (int j = i + 1; j < n_; ++j) c += edge(i, j) != 0;
    return c;
  }

  int degree(int i) const {
    int d = 0;
    for (int j = 0; j < n_; ++j) d += edge(i, j) != 0;
    return d;
  }

  // Throws PreconditionError naming the first violated invariant.
  void validate(int n_node_types, int n_edge_types) const {
    for (int i = 0; i < n_; ++i) {
      if (nodes_[i] < 0 || nodes_[i] >= n_node_types)
        throw PreconditionError("Graph: node " + std::to_string(i) + " type " + std::to_string(nodes_[i]) +
                                " outside [0, " + std::to_string(n_node_types) + ")");
      if (edge(i, i) != 0) throw PreconditionError("Graph: nonzero diagonal at " + std::to_string(i));
      for (int j = 0; j < n_; ++j) {
        const int e = edge(i, j);
        if (e != edge(j, i))
          throw PreconditionError("Graph: asymmetric edge (" + std::to_string(i) + "," + std::to_string(j) + ")");
        if (e < 0 || e >= n_edge_types)
          throw PreconditionError("Graph: edge type " + std::to_string(e) + " outside [0, " +
                                  std::to_string(n_edge_types) + ")");
      }
    }
  }

  friend bool operator==(const Graph&, const Graph&) = default;

 private:
  int n_ = 0;
  std::vector<int> nodes_;
  std::vector<int> edges_;
};

/// Bijection on {0..n-1}; checked on construction.
class Permutation {
 public:
  Permutation() = default;
  explicit Permutation(std::vector<int> mapping) : map_(std::move(mapping)) {
    std::vector<char> seen(map_.size(), 0);
    for (int v : map_) {
      if (v < 0 || v >= static_cast<int>(map_.size()) || seen[v])
        throw PreconditionError("Permutation: mapping is not a bijection");
      seen[v] = 1;
    }
  }

  static Permutation identity(int n) {
    std::vector<int> m(n);
    std::iota(m.begin(), m.end(), 0);
    return Permutation(std::move(m));
  }

  int size() const noexcept { return static_cast<int>(map_.size()); }
  int operator()(int i) const { return map_[i]; }
  const std::vector<int>& mapping() const noexcept { return map_; }

  Permutation inverse() const {
    std::vector<int> inv(map_.size());
    for (int i = 0; i < size(); ++i) inv[map_[i]] = i;
    return Permutation(std::move(inv));
  }

  friend bool operator==(const Permutation&, const Permutation&) = default;

 private:
  std::vector<int> map_;
};

// node_types'[p(i)] = node_types[i]; edge_types'[p(i)][p(j)] = edge_types[i][j].
inline Graph permute(const Graph& g, const Permutation& p) {
  require(p.size() == g.size(), "permute: permutation size " + std::to_string(p.size()) +
                                    " does not match graph size " + std::to_string(g.size()));
  Graph out(g.size());
  for (int i = 0; i < g.size(); ++i) {
    out.set_node(p(i), g.node(i));
    for (int j = i + 1; j < g.size(); ++j) out.set_edge(p(i), p(j), g.edge(i, j));
  }
  return out;
}

// Degree sequence, sorted ascending.
inline std::vector<int> degree_sequence(const Graph& g) {
  std::vector<int> d(g.size());
  for (int i = 0; i < g.size(); ++i) d[i] = g.degree(i);
  std::sort(d.begin(), d.end());
  return d;
}

}  // namespace flowgraph
