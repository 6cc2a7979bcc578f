#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowgraph/error.hpp"
#include "flowgraph/graph.hpp"

namespace flowgraph {

// Cost assigned to pairs whose node counts differ.
inline constexpr double kCrossSizePenalty = 1e9;

enum class CouplingMode { independent, ot };

inline const char* to_string(CouplingMode m) { return m == CouplingMode::ot ? "ot" : "independent"; }

inline CouplingMode coupling_mode_from_string(const std::string& s) {
  if (s == "ot") return CouplingMode::ot;
  if (s == "independent") return CouplingMode::independent;
  throw PreconditionError("unknown coupling mode '" + s + "' (expected independent or ot)");
}

/// Node-label mismatches plus lambda times edge-label mismatches over unordered pairs.
inline double hamming(const Graph& g0, const Graph& g1, double lambda = 1.0) {
  require(g0.size() == g1.size(), "hamming: graphs must have equal node counts (" + std::to_string(g0.size()) +
                                      " vs " + std::to_string(g1.size()) + ")");
  int nodes = 0, edges = 0;
  const int n = g0.size();
  for (int i = 0; i < n; ++i) {
    nodes += g0.node(i) != g1.node(i);
    for (int j = i + 1; j < n; ++j) edges += g0.edge(i, j) != g1.edge(i, j);
  }
  return nodes + lambda * edges;
}

/// Square B x B matrix; row = noise sample, column = data sample.
class CostMatrix {
 public:
  CostMatrix(int rows, int cols) : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, 0.0) {
    require(rows > 0 && cols > 0, "CostMatrix: empty matrix");
  }
  CostMatrix(std::initializer_list<std::initializer_list<double>> rows)
      : CostMatrix(static_cast<int>(rows.size()), static_cast<int>(rows.begin()->size())) {
    int i = 0;
    for (const auto& r : rows) {
      require(static_cast<int>(r.size()) == cols_, "CostMatrix: ragged rows");
      int j = 0;
      for (double v : r) set(i, j++, v);
      ++i;
    }
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  double operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
  void set(int i, int j, double v) {
    require(v >= 0.0 && std::isfinite(v), "CostMatrix: entries must be finite and non-negative");
    data_[static_cast<std::size_t>(i) * cols_ + j] = v;
  }

 private:
  int rows_, cols_;
  std::vector<double> data_;
};

struct CouplingPlan {
  std::vector<int> assignment;  // noise i -> data assignment[i]
  double total_cost = 0.0;
  CouplingMode mode = CouplingMode::ot;
};

inline CostMatrix batch_cost_matrix(std::span<const Graph> noise, std::span<const Graph> data, double lambda = 1.0) {
  require(!noise.empty(), "batch_cost_matrix: empty batch");
  require(noise.size() == data.size(), "batch_cost_matrix: batch sizes differ");
  const int B = static_cast<int>(noise.size());
  CostMatrix c(B, B);
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < B; ++j)
      c.set(i, j, noise[i].size() == data[j].size() ? hamming(noise[i], data[j], lambda) : kCrossSizePenalty);
  return c;
}

/// Exact minimum-cost perfect assignment (Hungarian method with potentials, O(B^3)).
inline CouplingPlan solve_assignment(const CostMatrix& c) {
  require(c.rows() == c.cols(), "solve_assignment: cost matrix must be square (" + std::to_string(c.rows()) + "x" +
                                     std::to_string(c.cols()) + ")");
  const int n = c.rows();
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is the virtual start.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  CouplingPlan plan;
  plan.assignment.assign(n, -1);
  for (int j = 1; j <= n; ++j) plan.assignment[p[j] - 1] = j - 1;
  for (int i = 0; i < n; ++i) plan.total_cost += c(i, plan.assignment[i]);
  plan.mode = CouplingMode::ot;
  return plan;
}

inline double plan_cost(const CostMatrix& c, const std::vector<int>& assignment) {
  double s = 0.0;
  for (int i = 0; i < static_cast<int>(assignment.size()); ++i) s += c(i, assignment[i]);
  return s;
}

/// Pairs noise with data: index-aligned (independent) or by exact minibatch OT.
inline std::vector<std::pair<Graph, Graph>> couple(std::span<const Graph> noise, std::span<const Graph> data,
                                                   double lambda, CouplingMode mode, CouplingPlan* plan_out = nullptr) {
  require(noise.size() == data.size(), "couple: batch sizes differ");
  require(!noise.empty(), "couple: empty batch");
  const int B = static_cast<int>(noise.size());
  CouplingPlan plan;
  if (mode == CouplingMode::ot) {
    plan = solve_assignment(batch_cost_matrix(noise, data, lambda));
  } else {
    plan.mode = CouplingMode::independent;
    plan.assignment.resize(B);
    for (int i = 0; i < B; ++i) {
      plan.assignment[i] = i;
      plan.total_cost += noise[i].size() == data[i].size() ? hamming(noise[i], data[i], lambda) : kCrossSizePenalty;
    }
  }
  std::vector<std::pair<Graph, Graph>> pairs;
  pairs.reserve(B);
  for (int i = 0; i < B; ++i) pairs.emplace_back(noise[i], data[plan.assignment[i]]);
  if (plan_out) *plan_out = std::move(plan);
  return pairs;
}

}  // namespace flowgraph
