#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "flowgraph/error.hpp"
#include "flowgraph/graph.hpp"
#include "flowgraph/rng.hpp"

namespace flowgraph {

inline void check_distribution(std::span<const double> p, const std::string& what, double tol = 1e-9) {
  require(!p.empty(), what + ": empty probability vector");
  double s = 0.0;
  for (double v : p) {
    require(v >= 0.0 && std::isfinite(v), what + ": negative or non-finite probability");
    s += v;
  }
  require(std::abs(s - 1.0) <= tol, what + ": probabilities sum to " + std::to_string(s));
}

/// Product-of-categoricals reference distribution plus the node-count law.
struct Prior {
  std::vector<double> node_marginal;      // length n (node categories)
  std::vector<double> edge_marginal;      // length m (edge categories, 0 = no edge)
  std::vector<double> size_distribution;  // index = node count

  int node_types() const noexcept { return static_cast<int>(node_marginal.size()); }
  int edge_types() const noexcept { return static_cast<int>(edge_marginal.size()); }
  int max_nodes() const noexcept { return static_cast<int>(size_distribution.size()) - 1; }

  void validate() const {
    check_distribution(node_marginal, "Prior.node_marginal");
    check_distribution(edge_marginal, "Prior.edge_marginal");
    check_distribution(size_distribution, "Prior.size_distribution");
  }

  int sample_size(Rng& rng) const { return rng.categorical(size_distribution); }

  // Draws each node and each unordered edge pair independently from the marginals.
  Graph sample_graph(int n_nodes, Rng& rng) const {
    Graph g(n_nodes);
    for (int i = 0; i < n_nodes; ++i) g.set_node(i, rng.categorical(node_marginal));
    for (int i = 0; i < n_nodes; ++i)
      for (int j = i + 1; j < n_nodes; ++j) g.set_edge(i, j, rng.categorical(edge_marginal));
    return g;
  }

  friend bool operator==(const Prior&, const Prior&) = default;
};

/// Frequency-count prior: node categories over all nodes, edge categories over
/// all unordered pairs i<j (category 0 included), node counts over graphs.
inline Prior empirical_prior(std::span<const Graph> dataset, int n_node_types, int n_edge_types) {
  require(!dataset.empty(), "empirical_prior: dataset is empty");
  require(n_node_types >= 1 && n_edge_types >= 1, "empirical_prior: category counts must be positive");
  std::vector<double> nodes(n_node_types, 0.0), edges(n_edge_types, 0.0);
  int max_n = 0;
  for (const Graph& g : dataset) max_n = std::max(max_n, g.size());
  std::vector<double> sizes(max_n + 1, 0.0);
  double n_nodes = 0.0, n_pairs = 0.0;
  for (const Graph& g : dataset) {
    g.validate(n_node_types, n_edge_types);
    sizes[g.size()] += 1.0;
    for (int i = 0; i < g.size(); ++i) {
      nodes[g.node(i)] += 1.0;
      n_nodes += 1.0;
      for (int j = i + 1; j < g.size(); ++j) {
        edges[g.edge(i, j)] += 1.0;
        n_pairs += 1.0;
      }
    }
  }
  Prior p;
  // Degenerate datasets (all single-node graphs, or no nodes at all) fall back to
  // uniform marginals so the prior stays a valid distribution.
  if (n_nodes > 0.0)
    for (double& v : nodes) v /= n_nodes;
  else
    nodes.assign(n_node_types, 1.0 / n_node_types);
  if (n_pairs > 0.0)
    for (double& v : edges) v /= n_pairs;
  else
    edges.assign(n_edge_types, 1.0 / n_edge_types);
  for (double& v : sizes) v /= static_cast<double>(dataset.size());
  p.node_marginal = std::move(nodes);
  p.edge_marginal = std::move(edges);
  p.size_distribution = std::move(sizes);
  return p;
}

}  // namespace flowgraph
