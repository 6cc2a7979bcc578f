#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "flowgraph/error.hpp"
#include "flowgraph/graph.hpp"

namespace flowgraph {

inline constexpr int kTimeEmbeddingDim = 16;
inline constexpr int kNodeFeatureDim = 4;    // c3, c4, c5, in a largest component
inline constexpr int kGlobalStructDim = 7;   // C3..C6, components, mean valency, total weight

/// Per-category valence limits and weights; empty means "not configured".
struct ValenceTable {
  std::vector<int> max_valence;     // indexed by node category
  std::vector<double> atom_weight;  // indexed by node category
  bool configured() const noexcept { return !max_valence.empty(); }
};

struct StructuralFeatures {
  // Row-major n x kNodeFeatureDim.
  std::vector<double> node_features;
  // C3, C4, C5, C6 totals, component count, mean valency, total weight, then
  // kTimeEmbeddingDim sinusoidal time features.
  std::vector<double> global_features;
};

namespace detail {

using Mat = std::vector<double>;

inline Mat matmul(const Mat& a, const Mat& b, int n) {
  Mat c(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) {
      const double v = a[static_cast<std::size_t>(i) * n + k];
      if (v == 0.0) continue;
      for (int j = 0; j < n; ++j) c[static_cast<std::size_t>(i) * n + j] += v * b[static_cast<std::size_t>(k) * n + j];
    }
  return c;
}

inline double trace(const Mat& a, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[static_cast<std::size_t>(i) * n + i];
  return s;
}

}  // namespace detail

/// Binary adjacency (any category >= 1 counts as an edge).
inline std::vector<double> binary_adjacency(const Graph& g) {
  const int n = g.size();
  std::vector<double> a(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a[static_cast<std::size_t>(i) * n + j] = g.edge(i, j) != 0 ? 1.0 : 0.0;
  return a;
}

struct CycleCounts {
  std::vector<double> node3, node4, node5;  // simple k-cycles through each node
  double total3 = 0, total4 = 0, total5 = 0, total6 = 0;
};

/// k-cycle counts from closed-walk identities on adjacency powers.
inline CycleCounts cycle_counts(const Graph& g) {
  using detail::Mat;
  const int n = g.size();
  CycleCounts out;
  out.node3.assign(n, 0.0);
  out.node4.assign(n, 0.0);
  out.node5.assign(n, 0.0);
  if (n == 0) return out;
  const Mat A = binary_adjacency(g);
  const Mat A2 = detail::matmul(A, A, n);
  const Mat A3 = detail::matmul(A2, A, n);
  const Mat A4 = detail::matmul(A3, A, n);
  const Mat A5 = detail::matmul(A4, A, n);
  const Mat A6 = detail::matmul(A5, A, n);
  auto at = [n](const Mat& m, int i, int j) { return m[static_cast<std::size_t>(i) * n + j]; };

  std::vector<double> d(n), tri(n), c4(n);
  for (int i = 0; i < n; ++i) {
    d[i] = at(A2, i, i);
    tri[i] = at(A3, i, i);
  }
  for (int i = 0; i < n; ++i) {
    double ad = 0.0, atri = 0.0, tri_deg = 0.0;
    for (int j = 0; j < n; ++j) {
      ad += at(A, i, j) * d[j];
      atri += at(A, i, j) * tri[j];
      tri_deg += at(A, i, j) * at(A2, i, j) * d[j];
    }
    c4[i] = at(A4, i, i) - d[i] * (d[i] - 1.0) - ad;
    out.node3[i] = tri[i] / 2.0;
    out.node4[i] = c4[i] / 2.0;
    // Closed 5-walks minus those made of a triangle plus a back-and-forth step.
    out.node5[i] = 0.5 * at(A5, i, i) - tri[i] * d[i] - 0.5 * atri + 2.5 * tri[i] - tri_deg;
  }
  out.total3 = detail::trace(A3, n) / 6.0;
  out.total4 = std::accumulate(c4.begin(), c4.end(), 0.0) / 8.0;
  out.total5 = std::accumulate(out.node5.begin(), out.node5.end(), 0.0) / 5.0;

  double sum_tri_sq = 0.0, s_a_a2sq = 0.0, s_d_a4 = 0.0, s_d3 = 0.0, s_d2 = 0.0, sum_a3 = 0.0;
  for (int i = 0; i < n; ++i) {
    sum_tri_sq += tri[i] * tri[i];
    s_d_a4 += d[i] * at(A4, i, i);
    s_d3 += d[i] * d[i] * d[i];
    s_d2 += d[i] * d[i];
    for (int j = 0; j < n; ++j) {
      s_a_a2sq += at(A, i, j) * at(A2, i, j) * at(A2, i, j);
      sum_a3 += at(A3, i, j);
    }
  }
  out.total6 = (detail::trace(A6, n) - 3.0 * sum_tri_sq + 9.0 * s_a_a2sq - 6.0 * s_d_a4 + 6.0 * detail::trace(A4, n) -
                4.0 * detail::trace(A3, n) + 4.0 * s_d3 + 3.0 * sum_a3 - 12.0 * s_d2 + 4.0 * detail::trace(A2, n)) /
               12.0;
  return out;
}

/// Connected-component label per node (union-find over edges with category >= 1).
inline std::vector<int> component_labels(const Graph& g) {
  const int n = g.size();
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (g.edge(i, j) != 0) {
        const int a = find(i), b = find(j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
  std::vector<int> label(n);
  for (int i = 0; i < n; ++i) label[i] = find(i);
  return label;
}

inline int component_count(const Graph& g) {
  const std::vector<int> label = component_labels(g);
  int c = 0;
  for (int i = 0; i < g.size(); ++i) c += label[i] == i;
  return c;
}

// sin/cos pairs of t at frequencies pi * 2^k, k = 0..7.
inline std::vector<double> time_embedding(double t) {
  std::vector<double> e(kTimeEmbeddingDim);
  for (int k = 0; k < kTimeEmbeddingDim / 2; ++k) {
    const double w = M_PI * std::ldexp(1.0, k);
    e[2 * k] = std::sin(w * t);
    e[2 * k + 1] = std::cos(w * t);
  }
  return e;
}

inline StructuralFeatures structural_features(const Graph& g, double t, const ValenceTable& valence = {}) {
  require(t >= 0.0 && t <= 1.0, "structural_features: t outside [0,1]");
  const int n = g.size();
  const CycleCounts cc = cycle_counts(g);
  const std::vector<int> label = component_labels(g);

  std::map<int, int> comp_size;
  for (int v : label) ++comp_size[v];
  int largest = 0;
  for (const auto& [l, s] : comp_size) largest = std::max(largest, s);

  StructuralFeatures f;
  f.node_features.assign(static_cast<std::size_t>(n) * kNodeFeatureDim, 0.0);
  for (int i = 0; i < n; ++i) {
    double* row = f.node_features.data() + static_cast<std::size_t>(i) * kNodeFeatureDim;
    row[0] = cc.node3[i];
    row[1] = cc.node4[i];
    row[2] = cc.node5[i];
    row[3] = comp_size[label[i]] == largest ? 1.0 : 0.0;
  }

  double mean_valency = 0.0, weight = 0.0;
  if (valence.configured() && n > 0) {
    // Bond order = edge category index.
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) mean_valency += g.edge(i, j);
      if (g.node(i) < static_cast<int>(valence.atom_weight.size())) weight += valence.atom_weight[g.node(i)];
    }
    mean_valency /= n;
  }
  f.global_features = {cc.total3, cc.total4, cc.total5, cc.total6, static_cast<double>(comp_size.size()),
                       mean_valency, weight};
  const std::vector<double> te = time_embedding(t);
  f.global_features.insert(f.global_features.end(), te.begin(), te.end());
  return f;
}

}  // namespace flowgraph
