#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "flowgraph/error.hpp"
#include "flowgraph/graph.hpp"
#include "flowgraph/rng.hpp"

namespace flowgraph {

struct CommunitySmallOptions {
  int min_nodes = 12;
  int max_nodes = 20;
  double p_within = 0.7;
  double inter_fraction = 0.05;  // ceil(inter_fraction * n) cross-community edges
};

/// Two equal-size Erdos-Renyi communities joined by a few random cross edges.
/// Node counts are uniform over the even values in [min_nodes, max_nodes].
inline std::vector<Graph> gen_community_small(int count, std::uint64_t seed,
                                              const CommunitySmallOptions& opt = {}) {
  require(count > 0, "gen_community_small: count must be positive");
  require(opt.min_nodes >= 2 && opt.min_nodes <= opt.max_nodes, "gen_community_small: bad size range");
  require(opt.p_within >= 0.0 && opt.p_within <= 1.0, "gen_community_small: p_within outside [0,1]");
  const int lo = (opt.min_nodes + 1) / 2, hi = opt.max_nodes / 2;
  require(lo <= hi, "gen_community_small: no even size in range");

  std::vector<Graph> out;
  out.reserve(count);
  for (int g = 0; g < count; ++g) {
    Rng rng = Rng::keyed(seed, 0xC0AA, g);
    const int half = static_cast<int>(rng.between(lo, hi));
    const int n = 2 * half;
    Graph graph(n);
    for (int c = 0; c < 2; ++c) {
      const int base = c * half;
      for (int i = 0; i < half; ++i)
        for (int j = i + 1; j < half; ++j)
          if (rng.bernoulli(opt.p_within)) graph.set_edge(base + i, base + j, 1);
    }
    const int cross = std::min(static_cast<int>(std::ceil(opt.inter_fraction * n - 1e-12)), half * half);
    int added = 0;
    while (added < cross) {
      const int i = static_cast<int>(rng.below(half));
      const int j = half + static_cast<int>(rng.below(half));
      if (graph.edge(i, j) != 0) continue;
      graph.set_edge(i, j, 1);
      ++added;
    }
    out.push_back(std::move(graph));
  }
  return out;
}

// rows x cols lattice; node r*cols+c.
inline Graph grid_graph(int rows, int cols) {
  require(rows >= 1 && cols >= 1, "grid_graph: sides must be positive");
  Graph g(rows * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const int v = r * cols + c;
      if (c + 1 < cols) g.set_edge(v, v + 1, 1);
      if (r + 1 < rows) g.set_edge(v, v + cols, 1);
    }
  return g;
}

inline std::vector<Graph> gen_grid(int count, int min_side, int max_side, std::uint64_t seed) {
  require(count > 0, "gen_grid: count must be positive");
  require(2 <= min_side && min_side <= max_side, "gen_grid: need 2 <= min_side <= max_side");
  std::vector<Graph> out;
  out.reserve(count);
  for (int g = 0; g < count; ++g) {
    Rng rng = Rng::keyed(seed, 0x6121D, g);
    const int r = static_cast<int>(rng.between(min_side, max_side));
    const int c = static_cast<int>(rng.between(min_side, max_side));
    out.push_back(grid_graph(r, c));
  }
  return out;
}

// Deterministic train/test split: shuffles with `seed` and puts `train_fraction` first.
inline std::pair<std::vector<Graph>, std::vector<Graph>> split_dataset(std::vector<Graph> data, double train_fraction,
                                                                       std::uint64_t seed) {
  Rng rng = Rng::keyed(seed, 0x5B117);
  rng.shuffle(data);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(data.size())));
  std::vector<Graph> train(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<Graph> test(data.begin() + static_cast<std::ptrdiff_t>(n_train), data.end());
  return {std::move(train), std::move(test)};
}

}  // namespace flowgraph
