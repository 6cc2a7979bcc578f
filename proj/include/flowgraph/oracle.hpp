#pragma once

// Exhaustive-enumeration oracles over tiny graph spaces. Used by tests and by
// the `check` subcommand; never on the training or sampling path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "flowgraph/error.hpp"
#include "flowgraph/flow_path.hpp"
#include "flowgraph/graph.hpp"
#include "flowgraph/prior.hpp"
#include "flowgraph/rng.hpp"

namespace flowgraph {

inline constexpr int kOracleMaxNodes = 3;
inline constexpr std::int64_t kOracleMaxStates = 1 << 16;

/// All labeled graphs with exactly n nodes, n_node_types node and
/// n_edge_types edge categories, in mixed-radix order over GraphDims.
class GraphSpace {
 public:
  GraphSpace(int n_nodes, int n_node_types, int n_edge_types)
      : dims_{n_nodes}, node_types_(n_node_types), edge_types_(n_edge_types) {
    require(n_nodes >= 1 && n_node_types >= 1 && n_edge_types >= 1, "GraphSpace: bad arguments");
    if (n_nodes > kOracleMaxNodes)
      throw CapacityError("GraphSpace: enumeration limited to " + std::to_string(kOracleMaxNodes) + " nodes");
    std::int64_t s = 1;
    for (int d = 0; d < dims_.count(); ++d) {
      s *= radix(d);
      if (s > kOracleMaxStates) throw CapacityError("GraphSpace: state space too large to enumerate");
    }
    size_ = s;
  }

  std::int64_t size() const noexcept { return size_; }
  const GraphDims& dims() const noexcept { return dims_; }
  int node_types() const noexcept { return node_types_; }
  int edge_types() const noexcept { return edge_types_; }
  int radix(int d) const noexcept { return dims_.is_node(d) ? node_types_ : edge_types_; }

  Graph at(std::int64_t index) const {
    Graph g(dims_.n);
    for (int d = 0; d < dims_.count(); ++d) {
      set_graph_value(g, dims_, d, static_cast<int>(index % radix(d)));
      index /= radix(d);
    }
    return g;
  }

  std::int64_t index(const Graph& g) const {
    require(g.size() == dims_.n, "GraphSpace::index: size mismatch");
    std::int64_t idx = 0, mult = 1;
    for (int d = 0; d < dims_.count(); ++d) {
      idx += mult * graph_value(g, dims_, d);
      mult *= radix(d);
    }
    return idx;
  }

 private:
  GraphDims dims_;
  int node_types_;
  int edge_types_;
  std::int64_t size_ = 0;
};

struct CouplingEntry {
  Graph g0;
  Graph g1;
  double weight = 0.0;
};

/// Path variant plus the prior used when mode == QMode::prior.
struct PathSpec {
  QMode mode = QMode::point_mass;
  Prior prior;
};

inline PathParams dimension_params(const PathSpec& spec, const Graph& g0, const GraphDims& dims, int d, double t,
                                   int K) {
  return PathParams(t, dimension_q(spec.mode, spec.prior, g0, dims, d, K));
}

inline int dimension_cardinality(const GraphSpace& space, int d) { return space.radix(d); }

// p_t(G | G0, G1) as a product over dimensions.
inline double conditional_graph_prob(const GraphSpace& space, const Graph& g, const CouplingEntry& c, double t,
                                     const PathSpec& spec) {
  const GraphDims& dims = space.dims();
  double p = 1.0;
  for (int d = 0; d < dims.count(); ++d) {
    const int K = space.radix(d);
    const PathParams pp = dimension_params(spec, c.g0, dims, d, t, space.radix(d));
    p *= path_prob(CategoricalState(graph_value(c.g1, dims, d), K), pp)[graph_value(g, dims, d)];
    if (p == 0.0) break;
  }
  return p;
}

// d/dt p_t(G | G0, G1) by the product rule.
inline double conditional_graph_prob_dt(const GraphSpace& space, const Graph& g, const CouplingEntry& c, double t,
                                        const PathSpec& spec) {
  const GraphDims& dims = space.dims();
  const int D = dims.count();
  std::vector<double> p(D), dp(D);
  for (int d = 0; d < D; ++d) {
    const int K = space.radix(d);
    const PathParams pp = dimension_params(spec, c.g0, dims, d, t, space.radix(d));
    const CategoricalState x1(graph_value(c.g1, dims, d), K);
    p[d] = path_prob(x1, pp)[graph_value(g, dims, d)];
    dp[d] = path_prob_dt(x1, pp)[graph_value(g, dims, d)];
  }
  double total = 0.0;
  for (int d = 0; d < D; ++d) {
    double term = dp[d];
    for (int e = 0; e < D; ++e)
      if (e != d) term *= p[e];
    total += term;
  }
  return total;
}

inline std::vector<CouplingEntry> normalized(std::vector<CouplingEntry> coupling) {
  require(!coupling.empty(), "coupling is empty");
  double s = 0.0;
  for (const auto& c : coupling) {
    require(c.weight >= 0.0, "coupling weight must be non-negative");
    s += c.weight;
  }
  require(s > 0.0, "coupling has zero total weight");
  for (auto& c : coupling) c.weight /= s;
  return coupling;
}

/// Marginal rates u_t(. , Gt) = sum over (G0,G1) of conditional rates weighted by
/// the exact Bayes posterior p(G0,G1 | Gt) ∝ p_t(Gt | G0,G1) pi(G0,G1).
/// Returns one RateVector per graph dimension (GraphDims order).
inline std::vector<RateVector> marginal_velocity_oracle(const GraphSpace& space, const Graph& gt, double t,
                                                        const std::vector<CouplingEntry>& coupling,
                                                        const PathSpec& spec = {}) {
  if (t >= 1.0) throw DomainError("marginal_velocity_oracle: t must be < 1");
  const GraphDims& dims = space.dims();
  const int D = dims.count();
  std::vector<RateVector> out(D);
  for (int d = 0; d < D; ++d) out[d] = RateVector{std::vector<double>(space.radix(d), 0.0), graph_value(gt, dims, d)};

  double norm = 0.0;
  for (const CouplingEntry& c : coupling) {
    const double w = c.weight * conditional_graph_prob(space, gt, c, t, spec);
    if (w == 0.0) continue;
    norm += w;
    for (int d = 0; d < D; ++d) {
      const int K = space.radix(d);
      const RateVector u = conditional_velocity(CategoricalState(graph_value(gt, dims, d), K),
                                                CategoricalState(graph_value(c.g1, dims, d), K),
                                                dimension_params(spec, c.g0, dims, d, t, space.radix(d)));
      for (int k = 0; k < K; ++k)
        if (k != out[d].current) out[d].rates[k] += w * u.rates[k];
    }
  }
  for (auto& rv : out) {
    double s = 0.0;
    for (int k = 0; k < static_cast<int>(rv.rates.size()); ++k) {
      if (k == rv.current) continue;
      if (norm > 0.0) rv.rates[k] /= norm;
      s += rv.rates[k];
    }
    rv.rates[rv.current] = -s;
  }
  return out;
}

// Analytic marginal p_t over the enumerated space.
inline std::vector<double> marginal_path(const GraphSpace& space, double t, const std::vector<CouplingEntry>& coupling,
                                         const PathSpec& spec = {}) {
  std::vector<double> p(space.size(), 0.0);
  for (std::int64_t s = 0; s < space.size(); ++s) {
    const Graph g = space.at(s);
    for (const auto& c : coupling) p[s] += c.weight * conditional_graph_prob(space, g, c, t, spec);
  }
  return p;
}

/// max_G | d/dt p_t(G) - sum_G' p_t(G') u_t(G' -> G) |, with the diagonal of u
/// carrying the outflow.
inline double kolmogorov_residual(const GraphSpace& space, double t, const std::vector<CouplingEntry>& coupling,
                                  const PathSpec& spec = {}) {
  const GraphDims& dims = space.dims();
  const int D = dims.count();
  const std::int64_t S = space.size();
  std::vector<double> p = marginal_path(space, t, coupling, spec);
  std::vector<double> dp(S, 0.0), applied(S, 0.0);
  for (std::int64_t s = 0; s < S; ++s) {
    const Graph g = space.at(s);
    for (const auto& c : coupling) dp[s] += c.weight * conditional_graph_prob_dt(space, g, c, t, spec);
  }
  for (std::int64_t s = 0; s < S; ++s) {
    if (p[s] == 0.0) continue;
    const Graph g = space.at(s);
    const std::vector<RateVector> u = marginal_velocity_oracle(space, g, t, coupling, spec);
    for (int d = 0; d < D; ++d) {
      applied[s] += p[s] * u[d].rates[u[d].current];
      for (int k = 0; k < space.radix(d); ++k) {
        if (k == u[d].current || u[d].rates[k] == 0.0) continue;
        Graph h = g;
        set_graph_value(h, dims, d, k);
        applied[space.index(h)] += p[s] * u[d].rates[k];
      }
    }
  }
  double worst = 0.0;
  for (std::int64_t s = 0; s < S; ++s) worst = std::max(worst, std::abs(dp[s] - applied[s]));
  return worst;
}

/// Exact posterior over coupling entries given the current state (and, for the
/// point-mass path, the chain's own source graph). Returned weights sum to 1, or
/// are all zero if no entry explains gt.
inline std::vector<double> exact_posterior(const GraphSpace& space, const Graph& gt, const Graph& g0, double t,
                                           const std::vector<CouplingEntry>& coupling, const PathSpec& spec) {
  std::vector<double> w(coupling.size(), 0.0);
  double s = 0.0;
  for (std::size_t c = 0; c < coupling.size(); ++c) {
    if (spec.mode == QMode::point_mass && !(coupling[c].g0 == g0)) continue;
    w[c] = coupling[c].weight * conditional_graph_prob(space, gt, coupling[c], t, spec);
    s += w[c];
  }
  if (s > 0.0)
    for (double& v : w) v /= s;
  return w;
}

struct ExactSamplerConfig {
  int n_steps = 500;
  int n_runs = 100000;
  std::uint64_t seed = 0;
  std::vector<int> record_steps;  // step indices s (time s/n_steps) whose state histogram is returned
};

struct ExactSamplerResult {
  std::vector<double> terminal;                  // empirical distribution over space indices
  std::map<int, std::vector<double>> recorded;   // step -> empirical distribution
};

/// Euler-discretized CTMC driven by the exact posterior in place of a network:
/// each step draws G1-hat from p(G1 | Gt[, G0]) and moves every dimension by
/// euler_kernel. G0 is drawn from the coupling's source marginal (point-mass
/// path) or from the product prior (prior path).
///
/// The per-step transition law (mixture over G1-hat of product kernels) is
/// tabulated per (step, G0, Gt) on first use, so each step is a single draw.
inline ExactSamplerResult exact_sampler_oracle(const GraphSpace& space, const std::vector<CouplingEntry>& coupling_in,
                                               const PathSpec& spec, const ExactSamplerConfig& cfg) {
  require(cfg.n_steps >= 1 && cfg.n_runs >= 1, "exact_sampler_oracle: n_steps and n_runs must be positive");
  const std::vector<CouplingEntry> coupling = normalized(coupling_in);
  const GraphDims& dims = space.dims();
  const int D = dims.count();
  const std::int64_t S = space.size();
  const double dt = 1.0 / cfg.n_steps;
  std::vector<double> source_w(coupling.size());
  for (std::size_t c = 0; c < coupling.size(); ++c) source_w[c] = coupling[c].weight;

  std::unordered_map<std::int64_t, std::vector<double>> cache;
  auto transition = [&](int step, const Graph& g0, std::int64_t g0_idx, std::int64_t gt_idx) -> const std::vector<double>& {
    const std::int64_t key = (static_cast<std::int64_t>(step) * S + g0_idx) * S + gt_idx;
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    const double t = step * dt;
    const Graph gt = space.at(gt_idx);
    const std::vector<double> post = exact_posterior(space, gt, g0, t, coupling, spec);
    std::vector<double> next(S, 0.0);
    std::vector<std::vector<double>> kern(D);
    for (std::size_t c = 0; c < coupling.size(); ++c) {
      if (post[c] == 0.0) continue;
      for (int d = 0; d < D; ++d) {
        const int K = space.radix(d);
        kern[d] = euler_kernel(CategoricalState(graph_value(gt, dims, d), K),
                               CategoricalState(graph_value(coupling[c].g1, dims, d), K),
                               dimension_params(spec, g0, dims, d, t, K), dt);
      }
      for (std::int64_t s2 = 0; s2 < S; ++s2) {
        // Mixed-radix digits of s2 follow GraphDims order.
        double p = post[c];
        std::int64_t rest = s2;
        for (int d = 0; d < D && p != 0.0; ++d) {
          const int K = space.radix(d);
          p *= kern[d][rest % K];
          rest /= K;
        }
        next[s2] += p;
      }
    }
    return cache.emplace(key, std::move(next)).first->second;
  };

  ExactSamplerResult res;
  res.terminal.assign(S, 0.0);
  for (int s : cfg.record_steps) res.recorded[s].assign(S, 0.0);

  for (int run = 0; run < cfg.n_runs; ++run) {
    Rng rng = Rng::keyed(cfg.seed, 0xE7AC7, run);
    const Graph g0 = spec.mode == QMode::point_mass ? coupling[rng.categorical(source_w)].g0
                                                    : spec.prior.sample_graph(dims.n, rng);
    const std::int64_t g0_idx = spec.mode == QMode::point_mass ? space.index(g0) : 0;
    std::int64_t gt = space.index(g0);
    for (int step = 0; step < cfg.n_steps; ++step) {
      if (auto it = res.recorded.find(step); it != res.recorded.end()) it->second[gt] += 1.0;
      gt = rng.categorical(transition(step, g0, g0_idx, gt));
    }
    if (auto it = res.recorded.find(cfg.n_steps); it != res.recorded.end()) it->second[gt] += 1.0;
    res.terminal[gt] += 1.0;
  }
  for (double& v : res.terminal) v /= cfg.n_runs;
  for (auto& [_, h] : res.recorded)
    for (double& v : h) v /= cfg.n_runs;
  return res;
}

inline double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "total_variation: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

// Independent coupling pi = p_source x p_target over two enumerated distributions.
inline std::vector<CouplingEntry> independent_coupling(const GraphSpace& space, const std::vector<double>& source,
                                                       const std::vector<double>& target) {
  std::vector<CouplingEntry> out;
  for (std::int64_t a = 0; a < space.size(); ++a) {
    if (source[a] == 0.0) continue;
    for (std::int64_t b = 0; b < space.size(); ++b) {
      if (target[b] == 0.0) continue;
      out.push_back({space.at(a), space.at(b), source[a] * target[b]});
    }
  }
  return out;
}

// Product prior evaluated on every graph of the space.
inline std::vector<double> product_distribution(const GraphSpace& space, const std::vector<double>& node_marginal,
                                                const std::vector<double>& edge_marginal) {
  std::vector<double> p(space.size(), 1.0);
  const GraphDims& dims = space.dims();
  for (std::int64_t s = 0; s < space.size(); ++s) {
    const Graph g = space.at(s);
    for (int d = 0; d < dims.count(); ++d)
      p[s] *= dims.is_node(d) ? node_marginal[graph_value(g, dims, d)] : edge_marginal[graph_value(g, dims, d)];
  }
  return p;
}

}  // namespace flowgraph
