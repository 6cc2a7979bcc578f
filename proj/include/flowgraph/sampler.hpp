#pragma once

// Euler-discretized CTMC sampling driven by a factorized posterior over clean
// graphs.

#include <cmath>
#include <functional>
#include <unordered_map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "flowgraph/checkpoint.hpp"
#include "flowgraph/flow_path.hpp"
#include "flowgraph/graphevo.hpp"
#include "flowgraph/oracle.hpp"
#include "flowgraph/parallel.hpp"
#include "flowgraph/prior.hpp"

namespace flowgraph {

struct SampleConfig {
  int n_steps = 500;
  int n_samples = 1;
  std::uint64_t seed = 0;
  QMode q_mode = QMode::point_mass;
  bool record_trajectory = false;
  double temperature = 1.0;
  bool literal_temperature = false;
  int threads = 1;
  int fixed_size = 0;  // > 0 overrides draws from the size distribution

  void validate() const {
    require(n_steps >= 1, "SampleConfig.n_steps must be >= 1");
    require(n_samples >= 0, "SampleConfig.n_samples must be >= 0");
    require(temperature > 0.0, "SampleConfig.temperature must be > 0");
    require(threads >= 1, "SampleConfig.threads must be >= 1");
    require(fixed_size >= 0, "SampleConfig.fixed_size must be >= 0");
  }
};

struct Trajectory {
  std::vector<double> times;  // n_steps + 1 values from 0 to 1
  std::vector<Graph> states;  // n_steps + 1 graphs, states[0] = G0
  // log p(G1 | G^t_s) of the realized terminal graph under the posterior used
  // at step s (n_steps entries).
  std::vector<double> log_probs;
  std::optional<double> terminal_reward;
  std::vector<double> rewards;  // optional R(G^t) per state; empty unless filled
};

/// Posterior callback: per-dimension probabilities over clean categories for
/// the current state, in GraphDims order.
using PosteriorFn = std::function<FactorizedPosterior(const Graph& gt, double t, const Graph& g0)>;

inline PosteriorFn model_posterior(const ModelParams& mp) {
  return [&mp](const Graph& gt, double t, const Graph& g0) {
    return posterior_probs(forward(mp, gt, t, mp.config.condition_on_source ? &g0 : nullptr));
  };
}

/// Applies temperature T to a transition distribution: p^(1/T) renormalized.
/// The literal variant divides p by T and renormalizes, which leaves p
/// unchanged; it exists to compare against the tempered form.
inline void apply_temperature(std::vector<double>& p, double T, bool literal) {
  if (T == 1.0) return;
  require(T > 0.0, "apply_temperature: T must be positive");
  double s = 0.0;
  for (double& v : p) {
    v = literal ? v / T : (v > 0.0 ? std::pow(v, 1.0 / T) : 0.0);
    s += v;
  }
  for (double& v : p) v /= s;
}

/// Reference distribution of one dimension for the sampling kernel. In
/// point-mass mode an unconditioned model uses the current state, which makes
/// the averaged kernel generate the marginal path; a G0-conditioned model uses
/// the chain's own G0.
inline std::vector<double> sampler_reference(QMode mode, bool conditioned, const Prior& prior, const Graph& gt,
                                             const Graph& g0, const GraphDims& dims, int d, int K) {
  if (mode == QMode::prior) return dimension_q(mode, prior, g0, dims, d, K);
  return dimension_q(mode, prior, conditioned ? g0 : gt, dims, d, K);
}

struct StepContext {
  QMode q_mode = QMode::point_mass;
  bool conditioned = false;
  const Prior* prior = nullptr;
  double temperature = 1.0;
  bool literal_temperature = false;
};

/// Distribution of the next value of every dimension, averaging the Euler
/// kernel over the posterior draw of the clean category.
inline std::vector<std::vector<double>> step_transition(const FactorizedPosterior& post, const Graph& gt,
                                                        const Graph& g0, double t, double dt, const StepContext& ctx) {
  const GraphDims dims{gt.size()};
  std::vector<std::vector<double>> out(dims.count());
  for (int d = 0; d < dims.count(); ++d) {
    const int K = static_cast<int>(post.dims[d].size());
    const CategoricalState xt(graph_value(gt, dims, d), K);
    const PathParams pp(t, sampler_reference(ctx.q_mode, ctx.conditioned, *ctx.prior, gt, g0, dims, d, K));
    std::vector<double> mix(K, 0.0);
    for (int x1 = 0; x1 < K; ++x1) {
      if (post.dims[d][x1] == 0.0) continue;
      std::vector<double> k = euler_kernel(xt, CategoricalState(x1, K), pp, dt);
      apply_temperature(k, ctx.temperature, ctx.literal_temperature);
      for (int j = 0; j < K; ++j) mix[j] += post.dims[d][x1] * k[j];
    }
    out[d] = std::move(mix);
  }
  return out;
}

/// One Euler step of chain `chain`: draws G1-hat per dimension from the
/// posterior, then the next value from the (tempered) kernel. Randomness is
/// keyed on (seed, chain, step, dimension).
inline Graph sample_step(const FactorizedPosterior& post, const Graph& gt, const Graph& g0, double t, double dt,
                         const StepContext& ctx, std::uint64_t seed, std::uint64_t chain, int step) {
  const GraphDims dims{gt.size()};
  require(static_cast<int>(post.dims.size()) == dims.count(), "sample_step: posterior has wrong dimension count");
  Graph next = gt;
  for (int d = 0; d < dims.count(); ++d) {
    Rng rng = Rng::keyed(seed, 0x5A, chain, step, d);
    const int K = static_cast<int>(post.dims[d].size());
    const int x1 = rng.categorical(post.dims[d]);
    const CategoricalState xt(graph_value(gt, dims, d), K);
    const PathParams pp(t, sampler_reference(ctx.q_mode, ctx.conditioned, *ctx.prior, gt, g0, dims, d, K));
    std::vector<double> k = euler_kernel(xt, CategoricalState(x1, K), pp, dt);
    apply_temperature(k, ctx.temperature, ctx.literal_temperature);
    set_graph_value(next, dims, d, rng.categorical(k));
  }
  return next;
}

inline double log_prob_of(const FactorizedPosterior& post, const Graph& g) {
  const GraphDims dims{g.size()};
  double s = 0.0;
  for (int d = 0; d < dims.count(); ++d) s += std::log(post.dims[d][graph_value(g, dims, d)]);
  return s;
}

struct ChainResult {
  Graph graph;
  std::optional<Trajectory> trajectory;
};

/// Runs one chain from its own G0. Sizes and G0 come from the prior unless
/// cfg.fixed_size is set.
inline ChainResult run_chain(const PosteriorFn& posterior, const Prior& prior, const SampleConfig& cfg,
                             bool conditioned, std::uint64_t chain) {
  Rng init = Rng::keyed(cfg.seed, 0x5B, chain);
  const int n = cfg.fixed_size > 0 ? cfg.fixed_size : prior.sample_size(init);
  require(n >= 1, "sample: drew an empty graph size");
  const Graph g0 = prior.sample_graph(n, init);
  const StepContext ctx{cfg.q_mode, conditioned, &prior, cfg.temperature, cfg.literal_temperature};
  const double dt = 1.0 / cfg.n_steps;
  Graph gt = g0;
  ChainResult res;
  std::vector<FactorizedPosterior> posts;
  if (cfg.record_trajectory) {
    res.trajectory.emplace();
    res.trajectory->times.push_back(0.0);
    res.trajectory->states.push_back(g0);
  }
  for (int s = 0; s < cfg.n_steps; ++s) {
    const double t = s * dt;
    FactorizedPosterior post = posterior(gt, t, g0);
    gt = sample_step(post, gt, g0, t, dt, ctx, cfg.seed, chain, s);
    if (cfg.record_trajectory) {
      res.trajectory->times.push_back(s + 1 == cfg.n_steps ? 1.0 : (s + 1) * dt);
      res.trajectory->states.push_back(gt);
      posts.push_back(std::move(post));
    }
  }
  if (cfg.record_trajectory)
    for (const FactorizedPosterior& p : posts) res.trajectory->log_probs.push_back(log_prob_of(p, gt));
  res.graph = std::move(gt);
  return res;
}

struct SampleResult {
  std::vector<Graph> graphs;
  std::vector<Trajectory> trajectories;  // filled when cfg.record_trajectory
};

/// Generates cfg.n_samples independent chains in parallel. Output order and
/// content depend only on cfg.seed.
inline SampleResult sample_with(const PosteriorFn& posterior, const Prior& prior, const SampleConfig& cfg,
                                bool conditioned = false, std::uint64_t first_chain = 0) {
  cfg.validate();
  prior.validate();
  std::vector<ChainResult> chains(cfg.n_samples);
  parallel_for(cfg.n_samples, cfg.threads,
               [&](int c) { chains[c] = run_chain(posterior, prior, cfg, conditioned, first_chain + c); });
  SampleResult out;
  out.graphs.reserve(cfg.n_samples);
  for (ChainResult& c : chains) {
    out.graphs.push_back(std::move(c.graph));
    if (c.trajectory) out.trajectories.push_back(std::move(*c.trajectory));
  }
  return out;
}

inline SampleResult sample(const ModelParams& mp, const Prior& prior, const SampleConfig& cfg) {
  require(prior.node_types() == mp.config.node_types && prior.edge_types() == mp.config.edge_types,
          "sample: prior and model disagree on category counts");
  require(prior.max_nodes() <= mp.config.max_nodes || cfg.fixed_size > 0,
          "sample: prior size distribution exceeds the model's max_nodes");
  return sample_with(model_posterior(mp), prior, cfg, mp.config.condition_on_source);
}

/// Per-dimension marginals of the exact clean-graph posterior p(G1 | Gt) on an
/// enumerated space, averaging over the coupling's sources (G0 is ignored).
/// Driving the unconditioned sampler with it generates the coupling's marginal
/// path.
inline PosteriorFn exact_marginal_posterior(const GraphSpace& space, std::vector<CouplingEntry> coupling,
                                            PathSpec spec) {
  return [space, coupling = normalized(std::move(coupling)), spec](const Graph& gt, double t, const Graph&) {
    const GraphDims& dims = space.dims();
    FactorizedPosterior fp;
    fp.dims.resize(dims.count());
    for (int d = 0; d < dims.count(); ++d) fp.dims[d].assign(space.radix(d), 0.0);
    double z = 0.0;
    for (const CouplingEntry& c : coupling) {
      const double w = c.weight * conditional_graph_prob(space, gt, c, t, spec);
      if (w == 0.0) continue;
      z += w;
      for (int d = 0; d < dims.count(); ++d) fp.dims[d][graph_value(c.g1, dims, d)] += w;
    }
    require(z > 0.0, "exact_marginal_posterior: state has zero probability under the path");
    for (auto& v : fp.dims)
      for (double& x : v) x /= z;
    return fp;
  };
}

/// Thread-safe memo of posterior evaluations keyed by (graph, step), for
/// posteriors that ignore G0. Useful when many chains revisit the same states
/// of a small space.
class MemoizedPosterior {
 public:
  MemoizedPosterior(PosteriorFn inner, int n_steps) : inner_(std::move(inner)), n_steps_(n_steps) {}

  FactorizedPosterior operator()(const Graph& gt, double t, const Graph& g0) {
    const long step = std::lround(t * n_steps_);
    std::string key = serialize_graph_record(gt) + '#' + std::to_string(step);
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = cache_.find(key);
      if (it != cache_.end()) return it->second;
    }
    FactorizedPosterior p = inner_(gt, t, g0);
    std::lock_guard<std::mutex> lock(mu_);
    return cache_.emplace(std::move(key), std::move(p)).first->second;
  }

  std::size_t size() const { return cache_.size(); }

 private:
  PosteriorFn inner_;
  int n_steps_;
  std::mutex mu_;
  std::unordered_map<std::string, FactorizedPosterior> cache_;
};

/// Run manifest: everything needed to reproduce a sample file.
inline json sample_manifest(const SampleConfig& cfg, const std::string& checkpoint_hash_hex,
                            const std::string& prior_hash_hex) {
  return {{"command", "sample"},
          {"seed", cfg.seed},
          {"n_steps", cfg.n_steps},
          {"n_samples", cfg.n_samples},
          {"q_mode", to_string(cfg.q_mode)},
          {"temperature", cfg.temperature},
          {"literal_temperature", cfg.literal_temperature},
          {"fixed_size", cfg.fixed_size},
          {"checkpoint_hash", checkpoint_hash_hex},
          {"prior_hash", prior_hash_hex}};
}

}  // namespace flowgraph
