#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowgraph/error.hpp"
#include "flowgraph/graph.hpp"
#include "flowgraph/prior.hpp"
#include "flowgraph/rng.hpp"

namespace flowgraph {

// Final Euler step: when t + dt reaches 1 - kAbsorbTolerance the state jumps to x1-hat.
inline constexpr double kAbsorbTolerance = 1e-6;

struct CategoricalState {
  int value = 0;
  int cardinality = 1;

  CategoricalState() = default;
  CategoricalState(int v, int k) : value(v), cardinality(k) {
    require(k >= 1 && v >= 0 && v < k, "CategoricalState: value " + std::to_string(v) + " outside [0, " +
                                           std::to_string(k) + ")");
  }
  friend bool operator==(const CategoricalState&, const CategoricalState&) = default;
};

/// Time plus the per-dimension reference distribution q. q is either a prior
/// marginal (mixture path) or onehot(x0) (point-mass path).
struct PathParams {
  double t = 0.0;
  std::vector<double> q;

  PathParams() = default;
  PathParams(double time, std::vector<double> ref) : t(time), q(std::move(ref)) { validate(); }

  static PathParams point_mass(double time, const CategoricalState& x0) {
    std::vector<double> q(x0.cardinality, 0.0);
    q[x0.value] = 1.0;
    return PathParams(time, std::move(q));
  }

  int cardinality() const noexcept { return static_cast<int>(q.size()); }

  void validate() const {
    require(t >= 0.0 && t <= 1.0, "PathParams: t outside [0,1]");
    check_distribution(q, "PathParams.q");
  }
};

/// Jump rates out of `current`; rates[current] is minus the off-diagonal sum.
struct RateVector {
  std::vector<double> rates;
  int current = 0;

  double off_diagonal_sum() const {
    double s = 0.0;
    for (int k = 0; k < static_cast<int>(rates.size()); ++k)
      if (k != current) s += rates[k];
    return s;
  }
};

// p_t(. | x1) = t * onehot(x1) + (1 - t) * q
inline std::vector<double> path_prob(const CategoricalState& x1, const PathParams& params) {
  require(x1.cardinality == params.cardinality(), "path_prob: cardinality mismatch");
  std::vector<double> p(params.q.size());
  for (int k = 0; k < params.cardinality(); ++k) p[k] = (1.0 - params.t) * params.q[k];
  p[x1.value] += params.t;
  return p;
}

// d/dt p_t(. | x1) = onehot(x1) - q
inline std::vector<double> path_prob_dt(const CategoricalState& x1, const PathParams& params) {
  std::vector<double> d(params.q.size());
  for (int k = 0; k < params.cardinality(); ++k) d[k] = -params.q[k];
  d[x1.value] += 1.0;
  return d;
}

// Point-mass form of the conditional path: x1 with probability t, else x0.
inline CategoricalState sample_xt(const CategoricalState& x0, const CategoricalState& x1, double t, Rng& rng) {
  require(x0.cardinality == x1.cardinality, "sample_xt: cardinality mismatch");
  require(t >= 0.0 && t <= 1.0, "sample_xt: t outside [0,1]");
  return rng.uniform() < t ? x1 : x0;
}

/// Conditional rate u(xt -> x) = ReLU(dp(x) - dp(xt)) / (Z_t * p_t(xt)), where
/// dp = d/dt p_t, Z_t = |{x : p_t(x) > 0}|. Rates into states with p_t(x) = 0
/// are zero, and p_t(xt) = 0 yields an all-zero vector.
inline RateVector conditional_velocity(const CategoricalState& xt, const CategoricalState& x1,
                                       const PathParams& params) {
  require(xt.cardinality == params.cardinality() && x1.cardinality == params.cardinality(),
          "conditional_velocity: cardinality mismatch");
  if (params.t >= 1.0) throw DomainError("conditional_velocity: t must be < 1");
  const int K = params.cardinality();
  RateVector r{std::vector<double>(K, 0.0), xt.value};
  const std::vector<double> p = path_prob(x1, params);
  const std::vector<double> dp = path_prob_dt(x1, params);
  if (p[xt.value] <= 0.0) return r;
  int z = 0;
  for (double v : p) z += v > 0.0;
  const double denom = static_cast<double>(z) * p[xt.value];
  double out = 0.0;
  for (int k = 0; k < K; ++k) {
    if (k == xt.value || p[k] <= 0.0) continue;
    const double diff = dp[k] - dp[xt.value];
    if (diff > 0.0) {
      r.rates[k] = diff / denom;
      out += r.rates[k];
    }
  }
  r.rates[xt.value] = -out;
  return r;
}

inline void clamp_renormalize(std::vector<double>& p) {
  double s = 0.0;
  for (double& v : p) {
    if (!(v > 0.0)) v = 0.0;
    s += v;
  }
  if (s > 0.0)
    for (double& v : p) v /= s;
}

/// One Euler step of the conditional CTMC: onehot(xt) + u * dt, clamped at 0 and
/// renormalized. When t + dt >= 1 - 1e-6 the kernel is onehot(x1-hat).
inline std::vector<double> euler_kernel(const CategoricalState& xt, const CategoricalState& x1hat,
                                        const PathParams& params, double dt) {
  require(dt > 0.0, "euler_kernel: dt must be positive");
  const int K = params.cardinality();
  std::vector<double> k(K, 0.0);
  if (params.t + dt >= 1.0 - kAbsorbTolerance) {
    k[x1hat.value] = 1.0;
    return k;
  }
  const RateVector u = conditional_velocity(xt, x1hat, params);
  for (int j = 0; j < K; ++j) k[j] = u.rates[j] * dt;
  k[xt.value] += 1.0;
  clamp_renormalize(k);
  return k;
}

enum class QMode { prior, point_mass };

inline const char* to_string(QMode m) { return m == QMode::prior ? "prior" : "point_mass"; }

inline QMode qmode_from_string(const std::string& s) {
  if (s == "prior") return QMode::prior;
  if (s == "point_mass") return QMode::point_mass;
  throw PreconditionError("unknown q_mode '" + s + "' (expected prior or point_mass)");
}

/// Flat indexing of a graph's categorical dimensions: nodes 0..n-1, then the
/// unordered pairs (i<j) in row-major order.
struct GraphDims {
  int n = 0;

  int count() const noexcept { return n + n * (n - 1) / 2; }
  int pair_index(int i, int j) const noexcept {
    if (i > j) std::swap(i, j);
    return n + i * n - i * (i + 1) / 2 + (j - i - 1);
  }
  bool is_node(int d) const noexcept { return d < n; }
  // Endpoints of edge dimension d.
  std::pair<int, int> pair_of(int d) const noexcept {
    int k = d - n;
    for (int i = 0; i < n; ++i) {
      const int row = n - i - 1;
      if (k < row) return {i, i + 1 + k};
      k -= row;
    }
    return {-1, -1};
  }
};

inline int graph_value(const Graph& g, const GraphDims& dims, int d) {
  if (dims.is_node(d)) return g.node(d);
  const auto [i, j] = dims.pair_of(d);
  return g.edge(i, j);
}

inline void set_graph_value(Graph& g, const GraphDims& dims, int d, int v) {
  if (dims.is_node(d)) {
    g.set_node(d, v);
  } else {
    const auto [i, j] = dims.pair_of(d);
    g.set_edge(i, j, v);
  }
}

// Reference distribution for one dimension under the chosen path variant.
// K is the dimension's cardinality.
inline std::vector<double> dimension_q(QMode mode, const Prior& prior, const Graph& g0, const GraphDims& dims, int d,
                                       int K) {
  const bool node = dims.is_node(d);
  if (mode == QMode::prior) {
    const std::vector<double>& q = node ? prior.node_marginal : prior.edge_marginal;
    require(static_cast<int>(q.size()) == K, "dimension_q: prior marginal has wrong cardinality");
    return q;
  }
  std::vector<double> q(K, 0.0);
  q[graph_value(g0, dims, d)] = 1.0;
  return q;
}

}  // namespace flowgraph
