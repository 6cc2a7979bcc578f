#pragma once

// Distribution-level evaluation of generated graphs: statistic histograms,
// kernel MMD, validity, uniqueness/novelty and an exact TV for tiny spaces.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "flowgraph/error.hpp"
#include "flowgraph/graph.hpp"
#include "flowgraph/io.hpp"
#include "flowgraph/oracle.hpp"
#include "flowgraph/parallel.hpp"

namespace flowgraph {

inline constexpr int kClusteringBins = 100;
inline constexpr int kOrbitCount = 11;  // orbits 4..14 of the connected 4-node graphlets
inline constexpr int kExactIsomorphismMaxNodes = 16;

struct GraphStats {
  std::vector<double> degree_histogram;      // index = degree, sums to 1
  std::vector<double> clustering_histogram;  // kClusteringBins bins on [0, 1], sums to 1
  std::array<double, kOrbitCount> orbit_counts{};  // mean per-node count of each orbit
};

inline std::vector<std::vector<char>> binary_adjacency_matrix(const Graph& g) {
  const int n = g.size();
  std::vector<std::vector<char>> a(n, std::vector<char>(n, 0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a[i][j] = g.edge(i, j) != 0;
  return a;
}

/// Local clustering coefficient per node; 0 for degree < 2.
inline std::vector<double> clustering_coefficients(const Graph& g) {
  const auto a = binary_adjacency_matrix(g);
  const int n = g.size();
  std::vector<double> c(n, 0.0);
  for (int v = 0; v < n; ++v) {
    std::vector<int> nb;
    for (int u = 0; u < n; ++u)
      if (a[v][u]) nb.push_back(u);
    const int k = static_cast<int>(nb.size());
    if (k < 2) continue;
    int links = 0;
    for (int x = 0; x < k; ++x)
      for (int y = x + 1; y < k; ++y) links += a[nb[x]][nb[y]];
    c[v] = 2.0 * links / (static_cast<double>(k) * (k - 1));
  }
  return c;
}

/// Per-node orbit counts for connected induced 4-node subgraphs. Columns:
/// 0 path end, 1 path middle, 2 star leaf, 3 star centre, 4 cycle,
/// 5 paw tail, 6 paw triangle side, 7 paw centre, 8 diamond degree-2,
/// 9 diamond degree-3, 10 clique.
inline std::vector<std::array<long, kOrbitCount>> node_orbit_counts(const Graph& g) {
  const auto a = binary_adjacency_matrix(g);
  const int n = g.size();
  std::vector<std::array<long, kOrbitCount>> out(n);
  for (auto& r : out) r.fill(0);
  for (int p = 0; p < n; ++p)
    for (int q = p + 1; q < n; ++q)
      for (int r = q + 1; r < n; ++r)
        for (int s = r + 1; s < n; ++s) {
          const int v[4] = {p, q, r, s};
          int deg[4] = {0, 0, 0, 0}, m = 0;
          for (int x = 0; x < 4; ++x)
            for (int y = x + 1; y < 4; ++y)
              if (a[v[x]][v[y]]) {
                ++deg[x];
                ++deg[y];
                ++m;
              }
          if (m < 3) continue;
          bool isolated = false;
          for (int d : deg) isolated |= d == 0;
          if (isolated) continue;  // with m >= 3 and no isolated vertex the subgraph is connected
          const int maxdeg = *std::max_element(deg, deg + 4);
          for (int x = 0; x < 4; ++x) {
            int o;
            switch (m) {
              case 3:
                o = maxdeg == 3 ? (deg[x] == 3 ? 3 : 2) : (deg[x] == 1 ? 0 : 1);
                break;
              case 4:
                o = maxdeg == 2 ? 4 : (deg[x] == 1 ? 5 : deg[x] == 2 ? 6 : 7);
                break;
              case 5:
                o = deg[x] == 2 ? 8 : 9;
                break;
              default:
                o = 10;
            }
            ++out[v[x]][o];
          }
        }
  return out;
}

inline GraphStats graph_stats(const Graph& g) {
  GraphStats s;
  const int n = g.size();
  const std::vector<int> deg = degree_sequence(g);
  const int maxd = deg.empty() ? 0 : *std::max_element(deg.begin(), deg.end());
  s.degree_histogram.assign(maxd + 1, 0.0);
  s.clustering_histogram.assign(kClusteringBins, 0.0);
  if (n == 0) {
    s.degree_histogram[0] = 1.0;
    s.clustering_histogram[0] = 1.0;
    return s;
  }
  for (int d : deg) s.degree_histogram[d] += 1.0 / n;
  for (double c : clustering_coefficients(g)) {
    const int b = std::min(kClusteringBins - 1, static_cast<int>(c * kClusteringBins));
    s.clustering_histogram[b] += 1.0 / n;
  }
  std::array<long, kOrbitCount> tot{};
  for (const auto& row : node_orbit_counts(g))
    for (int o = 0; o < kOrbitCount; ++o) tot[o] += row[o];
  for (int o = 0; o < kOrbitCount; ++o) s.orbit_counts[o] = static_cast<double>(tot[o]) / n;
  return s;
}

enum class KernelKind { gaussian_emd, gaussian, gaussian_tv };

inline const char* to_string(KernelKind k) {
  switch (k) {
    case KernelKind::gaussian_emd:
      return "gaussian_emd";
    case KernelKind::gaussian:
      return "gaussian";
    default:
      return "gaussian_tv";
  }
}

struct MmdKernel {
  KernelKind kind = KernelKind::gaussian_emd;
  double sigma = 1.0;
  // Multiplies the raw distance before the Gaussian: for EMD the ground
  // distance between adjacent bins, otherwise a factor on the vector distance.
  double distance_scale = 1.0;

  json to_json() const { return {{"kind", to_string(kind)}, {"sigma", sigma}, {"distance_scale", distance_scale}}; }
};

/// 1-D earth mover's distance between two histograms of equal mass over
/// equally spaced bins (shorter one padded with zeros).
inline double emd_1d(const std::vector<double>& x, const std::vector<double>& y, double bin_width = 1.0) {
  const std::size_t L = std::max(x.size(), y.size());
  double cx = 0.0, cy = 0.0, d = 0.0;
  for (std::size_t i = 0; i < L; ++i) {
    cx += i < x.size() ? x[i] : 0.0;
    cy += i < y.size() ? y[i] : 0.0;
    d += std::abs(cx - cy);
  }
  return d * bin_width;
}

inline double kernel_value(const std::vector<double>& x, const std::vector<double>& y, const MmdKernel& k) {
  const std::size_t L = std::max(x.size(), y.size());
  auto at = [](const std::vector<double>& v, std::size_t i) { return i < v.size() ? v[i] : 0.0; };
  double dist;
  switch (k.kind) {
    case KernelKind::gaussian_emd:
      dist = emd_1d(x, y, k.distance_scale);
      break;
    case KernelKind::gaussian: {
      double s = 0.0;
      for (std::size_t i = 0; i < L; ++i) s += (at(x, i) - at(y, i)) * (at(x, i) - at(y, i));
      dist = std::sqrt(s) * k.distance_scale;
      break;
    }
    default: {
      double s = 0.0;
      for (std::size_t i = 0; i < L; ++i) s += std::abs(at(x, i) - at(y, i));
      dist = 0.5 * s * k.distance_scale;
    }
  }
  return std::exp(-dist * dist / (2.0 * k.sigma * k.sigma));
}

/// Unbiased squared MMD (within-set sums over i != j, full cross term),
/// clamped at 0.
inline double mmd2(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                   const MmdKernel& k, int threads = 1) {
  require(a.size() >= 2 && b.size() >= 2, "mmd2: each set needs at least 2 elements");
  require(k.sigma > 0.0, "mmd2: sigma must be > 0");
  const int m = static_cast<int>(a.size()), n = static_cast<int>(b.size());
  // Row sums computed in parallel, reduced in row order.
  std::vector<double> aa(m, 0.0), bb(n, 0.0), ab(m, 0.0);
  parallel_for(m, threads, [&](int i) {
    for (int j = 0; j < m; ++j)
      if (j != i) aa[i] += kernel_value(a[i], a[j], k);
    for (int j = 0; j < n; ++j) ab[i] += kernel_value(a[i], b[j], k);
  });
  parallel_for(n, threads, [&](int i) {
    for (int j = 0; j < n; ++j)
      if (j != i) bb[i] += kernel_value(b[i], b[j], k);
  });
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (double v : aa) saa += v;
  for (double v : bb) sbb += v;
  for (double v : ab) sab += v;
  const double r = saa / (static_cast<double>(m) * (m - 1)) + sbb / (static_cast<double>(n) * (n - 1)) -
                   2.0 * sab / (static_cast<double>(m) * n);
  return std::max(0.0, r);
}

/// True iff every node's summed bond orders (edge category = order) are
/// within its category's maximum.
inline bool validity_no_correction(const Graph& g, const std::map<int, int>& valence) {
  for (int i = 0; i < g.size(); ++i) {
    auto it = valence.find(g.node(i));
    if (it == valence.end())
      throw PreconditionError("validity_no_correction: node category " + std::to_string(g.node(i)) +
                              " missing from valence table");
    int s = 0;
    for (int j = 0; j < g.size(); ++j) s += g.edge(i, j);
    if (s > it->second) return false;
  }
  return true;
}

/// Half the L1 distance between the empirical distribution of `samples` and
/// `target` over every graph of `space`.
inline double tv_distance_enumerated(const std::vector<Graph>& samples, const GraphSpace& space,
                                     const std::vector<double>& target) {
  require(!samples.empty(), "tv_distance_enumerated: no samples");
  require(static_cast<std::int64_t>(target.size()) == space.size(), "tv_distance_enumerated: target size mismatch");
  std::vector<double> h(space.size(), 0.0);
  for (const Graph& g : samples) {
    if (g.size() != space.dims().n) throw CapacityError("tv_distance_enumerated: sample outside the enumerated space");
    h[space.index(g)] += 1.0;
  }
  for (double& v : h) v /= samples.size();
  return total_variation(h, target);
}

// ---------------------------------------------------------------------------
// Isomorphism.

/// Colour refinement over node and edge categories. Returns the stable colour
/// of every node, as ranks that are invariant under relabelling.
inline std::vector<int> refined_colors(const Graph& g) {
  const int n = g.size();
  std::vector<int> col(n);
  for (int i = 0; i < n; ++i) col[i] = g.node(i);
  for (int round = 0; round <= n; ++round) {
    std::vector<std::vector<int>> sig(n);
    for (int i = 0; i < n; ++i) {
      std::vector<int> nb;
      for (int j = 0; j < n; ++j)
        if (g.edge(i, j) != 0) nb.push_back(col[j] * 64 + g.edge(i, j));
      std::sort(nb.begin(), nb.end());
      sig[i].push_back(col[i]);
      sig[i].insert(sig[i].end(), nb.begin(), nb.end());
    }
    std::vector<std::vector<int>> uniq = sig;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    std::vector<int> next(n);
    for (int i = 0; i < n; ++i) next[i] = static_cast<int>(std::lower_bound(uniq.begin(), uniq.end(), sig[i]) - uniq.begin());
    const int before = static_cast<int>(std::set<int>(col.begin(), col.end()).size());
    col = std::move(next);
    if (static_cast<int>(uniq.size()) == before) break;
  }
  return col;
}

/// Isomorphism-invariant hash: size, edge multiset and the refined colour
/// signature multiset.
inline std::string graph_invariant_key(const Graph& g) {
  const int n = g.size();
  std::vector<int> col = refined_colors(g);
  // Colours are ranks of signatures, so the sorted colour list plus sorted
  // per-node signatures is invariant.
  std::vector<std::vector<int>> sig(n);
  for (int i = 0; i < n; ++i) {
    sig[i] = {col[i], g.node(i)};
    std::vector<int> nb;
    for (int j = 0; j < n; ++j)
      if (g.edge(i, j) != 0) nb.push_back(col[j] * 64 + g.edge(i, j));
    std::sort(nb.begin(), nb.end());
    sig[i].insert(sig[i].end(), nb.begin(), nb.end());
  }
  std::sort(sig.begin(), sig.end());
  std::string key = std::to_string(n) + ":";
  for (const auto& s : sig) {
    for (int v : s) key += std::to_string(v) + ",";
    key += ";";
  }
  return key;
}

namespace detail {

inline bool extend_isomorphism(const Graph& a, const Graph& b, const std::vector<int>& ca, const std::vector<int>& cb,
                               std::vector<int>& map, std::vector<char>& used, int i) {
  const int n = a.size();
  if (i == n) return true;
  for (int j = 0; j < n; ++j) {
    if (used[j] || ca[i] != cb[j] || a.node(i) != b.node(j)) continue;
    bool ok = true;
    for (int k = 0; k < i && ok; ++k) ok = a.edge(i, k) == b.edge(j, map[k]);
    if (!ok) continue;
    map[i] = j;
    used[j] = 1;
    if (extend_isomorphism(a, b, ca, cb, map, used, i + 1)) return true;
    used[j] = 0;
  }
  return false;
}

}  // namespace detail

/// Exact isomorphism test (node and edge categories must match) by
/// backtracking over colour-compatible assignments.
inline bool isomorphic(const Graph& a, const Graph& b) {
  if (a.size() != b.size()) return false;
  if (graph_invariant_key(a) != graph_invariant_key(b)) return false;
  const int n = a.size();
  if (n > kExactIsomorphismMaxNodes) return true;  // hash equality above the exact limit
  const std::vector<int> ca = refined_colors(a), cb = refined_colors(b);
  std::vector<int> map(n, -1);
  std::vector<char> used(n, 0);
  return detail::extend_isomorphism(a, b, ca, cb, map, used, 0);
}

/// Representative index of each graph's isomorphism class (first occurrence).
inline std::vector<int> isomorphism_classes(const std::vector<Graph>& gs) {
  std::map<std::string, std::vector<int>> buckets;
  std::vector<int> cls(gs.size());
  for (int i = 0; i < static_cast<int>(gs.size()); ++i) {
    auto& reps = buckets[graph_invariant_key(gs[i])];
    cls[i] = i;
    for (int r : reps)
      if (isomorphic(gs[r], gs[i])) {
        cls[i] = r;
        break;
      }
    if (cls[i] == i) reps.push_back(i);
  }
  return cls;
}

/// Number of isomorphism classes divided by the number of samples.
inline double uniqueness(const std::vector<Graph>& samples) {
  require(!samples.empty(), "uniqueness: no samples");
  const std::vector<int> cls = isomorphism_classes(samples);
  int distinct = 0;
  for (int i = 0; i < static_cast<int>(cls.size()); ++i) distinct += cls[i] == i;
  return static_cast<double>(distinct) / samples.size();
}

/// Fraction of samples not isomorphic to any training graph.
inline double novelty(const std::vector<Graph>& samples, const std::vector<Graph>& train) {
  require(!samples.empty(), "novelty: no samples");
  std::map<std::string, std::vector<int>> buckets;
  for (int i = 0; i < static_cast<int>(train.size()); ++i) buckets[graph_invariant_key(train[i])].push_back(i);
  int novel = 0;
  for (const Graph& g : samples) {
    auto it = buckets.find(graph_invariant_key(g));
    bool seen = false;
    if (it != buckets.end())
      for (int r : it->second)
        if ((seen = isomorphic(train[r], g))) break;
    novel += !seen;
  }
  return static_cast<double>(novel) / samples.size();
}

// ---------------------------------------------------------------------------
// Reports.

struct EvalConfig {
  // sigma = 1 throughout; the distance scales put clustering EMD in units of
  // 0.1 on [0, 1] and orbit distances in units of 30 counts.
  MmdKernel degree_kernel{KernelKind::gaussian_emd, 1.0, 1.0};
  MmdKernel clustering_kernel{KernelKind::gaussian_emd, 1.0, 10.0 / kClusteringBins};
  MmdKernel orbit_kernel{KernelKind::gaussian, 1.0, 1.0 / 30.0};
  std::map<int, int> valence;  // empty = validity not reported
  int threads = 1;

  json to_json() const {
    json v = json::object();
    for (const auto& [c, m] : valence) v[std::to_string(c)] = m;
    return {{"degree_kernel", degree_kernel.to_json()},
            {"clustering_kernel", clustering_kernel.to_json()},
            {"orbit_kernel", orbit_kernel.to_json()},
            {"valence", v}};
  }
};

inline std::vector<GraphStats> all_stats(const std::vector<Graph>& gs, int threads = 1) {
  std::vector<GraphStats> out(gs.size());
  parallel_for(static_cast<int>(gs.size()), threads, [&](int i) { out[i] = graph_stats(gs[i]); });
  return out;
}

struct MmdTriple {
  double degree = 0.0, clustering = 0.0, orbit = 0.0;
  double average() const { return (degree + clustering + orbit) / 3.0; }
};

inline MmdTriple stat_mmds(const std::vector<GraphStats>& a, const std::vector<GraphStats>& b, const EvalConfig& cfg) {
  auto col = [](const std::vector<GraphStats>& s, int which) {
    std::vector<std::vector<double>> v;
    v.reserve(s.size());
    for (const GraphStats& g : s) {
      if (which == 0) v.push_back(g.degree_histogram);
      else if (which == 1) v.push_back(g.clustering_histogram);
      else v.emplace_back(g.orbit_counts.begin(), g.orbit_counts.end());
    }
    return v;
  };
  MmdTriple m;
  m.degree = mmd2(col(a, 0), col(b, 0), cfg.degree_kernel, cfg.threads);
  m.clustering = mmd2(col(a, 1), col(b, 1), cfg.clustering_kernel, cfg.threads);
  m.orbit = mmd2(col(a, 2), col(b, 2), cfg.orbit_kernel, cfg.threads);
  return m;
}

/// Metric report comparing `samples` with `reference`; `train` (optional)
/// enables novelty.
inline json evaluate(const std::vector<Graph>& samples, const std::vector<Graph>& reference, const EvalConfig& cfg,
                     const std::vector<Graph>* train = nullptr) {
  const MmdTriple m = stat_mmds(all_stats(samples, cfg.threads), all_stats(reference, cfg.threads), cfg);
  json r = {{"degree_mmd", m.degree},
            {"clustering_mmd", m.clustering},
            {"orbit_mmd", m.orbit},
            {"average_mmd", m.average()},
            {"uniqueness", uniqueness(samples)},
            {"n_samples", samples.size()},
            {"n_reference", reference.size()},
            {"kernels", cfg.to_json()},
            {"note", "MMD values depend on kernel choice and bandwidth; compare only under identical kernels"}};
  if (!cfg.valence.empty()) {
    int ok = 0;
    for (const Graph& g : samples) ok += validity_no_correction(g, cfg.valence);
    r["validity"] = static_cast<double>(ok) / samples.size();
  }
  if (train) r["novelty"] = novelty(samples, *train);
  return r;
}

}  // namespace flowgraph
