#pragma once

// Built-in oracle suite behind the `check` subcommand.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "flowgraph/graphevo.hpp"
#include "flowgraph/oracle.hpp"
#include "flowgraph/ot_coupling.hpp"
#include "flowgraph/training.hpp"

namespace flowgraph {

struct CheckResult {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool passed = false;
};

inline ModelConfig check_model_config() {
  ModelConfig c;
  c.node_types = 2;
  c.edge_types = 3;
  c.layers = 2;
  c.heads = 2;
  c.dx = 8;
  c.de = 8;
  c.dy = 8;
  c.max_nodes = 8;
  c.dropout = 0.0;
  return c;
}

inline Graph check_random_graph(int n, int nt, int et, Rng& rng) {
  Graph g(n);
  for (int i = 0; i < n; ++i) g.set_node(i, static_cast<int>(rng.below(nt)));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (rng.bernoulli(0.5)) g.set_edge(i, j, static_cast<int>(rng.below(et)));
  return g;
}

/// Reverse-mode gradients of an L = 2 model on a 4-node graph against central
/// differences.
inline CheckResult check_gradients(std::uint64_t seed = 0) {
  const ModelParams mp = init_model(check_model_config(), seed);
  Rng rng = Rng::keyed(seed, 0xC1);
  const Graph g = check_random_graph(4, 2, 3, rng);
  const Graph target = check_random_graph(4, 2, 3, rng);
  const GradCheckResult r = grad_check(mp, g, 0.37, 1e-5, 300, seed, &target);
  return {"grad_check", r.max_rel_error, 1e-4, r.max_rel_error < 1e-4 && r.checked > 0};
}

/// Largest deviation between permuted outputs and outputs on permuted inputs.
inline CheckResult check_equivariance(int pairs = 100, std::uint64_t seed = 0) {
  const ModelConfig cfg = check_model_config();
  double worst = 0.0;
  for (int trial = 0; trial < pairs; ++trial) {
    const ModelParams mp = init_model(cfg, seed * 1000 + trial);
    Rng rng = Rng::keyed(seed, 0xC2, trial);
    const int n = 2 + static_cast<int>(rng.below(6));
    const Graph g = check_random_graph(n, cfg.node_types, cfg.edge_types, rng);
    std::vector<int> m(n);
    std::iota(m.begin(), m.end(), 0);
    rng.shuffle(m);
    const Permutation p(m);
    const double t = rng.uniform();
    const PosteriorLogits a = forward(mp, g, t), b = forward(mp, permute(g, p), t);
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < cfg.node_types; ++c)
        worst = std::max(worst, std::abs(a.node_row(i)[c] - b.node_row(p(i))[c]));
      for (int j = 0; j < n; ++j)
        for (int c = 0; c < cfg.edge_types; ++c)
          worst = std::max(worst, std::abs(a.edge_row(i, j)[c] - b.edge_row(p(i), p(j))[c]));
    }
  }
  return {"equivariance", worst, 1e-6, worst < 1e-6};
}

/// Two-node space, random joint target, independent coupling with a product
/// prior: worst forward-equation residual over 11 interior times, both path
/// variants.
inline CheckResult check_kolmogorov(std::uint64_t seed = 0) {
  const GraphSpace space(2, 2, 2);
  Rng rng = Rng::keyed(seed, 0xC3);
  std::vector<double> target(space.size());
  double z = 0.0;
  for (double& v : target) z += (v = rng.uniform() + 0.05);
  for (double& v : target) v /= z;
  Prior prior;
  prior.node_marginal = {0.3, 0.7};
  prior.edge_marginal = {0.6, 0.4};
  prior.size_distribution = {0, 0, 1};
  const auto coupling =
      independent_coupling(space, product_distribution(space, prior.node_marginal, prior.edge_marginal), target);
  double worst = 0.0;
  for (QMode m : {QMode::point_mass, QMode::prior}) {
    const PathSpec spec{m, prior};
    for (int k = 0; k <= 10; ++k) worst = std::max(worst, kolmogorov_residual(space, 0.05 + 0.09 * k, coupling, spec));
  }
  return {"kolmogorov", worst, 1e-6, worst < 1e-6};
}

/// Hungarian assignment against exhaustive search on random integer costs.
inline CheckResult check_assignment(std::uint64_t seed = 0) {
  double worst = 0.0;
  for (int trial = 0; trial < 60; ++trial) {
    Rng rng = Rng::keyed(seed, 0xC4, trial);
    const int B = 1 + trial % 6;
    CostMatrix c(B, B);
    for (int i = 0; i < B; ++i)
      for (int j = 0; j < B; ++j) c.set(i, j, static_cast<double>(rng.below(20)));
    std::vector<int> p(B);
    std::iota(p.begin(), p.end(), 0);
    double best = 1e300;
    do best = std::min(best, plan_cost(c, p));
    while (std::next_permutation(p.begin(), p.end()));
    worst = std::max(worst, std::abs(solve_assignment(c).total_cost - best));
  }
  return {"assignment", worst, 0.0, worst == 0.0};
}

inline std::vector<CheckResult> run_self_checks(std::uint64_t seed = 0) {
  return {check_gradients(seed), check_equivariance(100, seed), check_kolmogorov(seed), check_assignment(seed)};
}

}  // namespace flowgraph
