#pragma once

// Reward-guided fine-tuning of a trained posterior network: tempered
// trajectory collection, a reward-weighted likelihood term and a KL anchor to
// the frozen reference model.

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "flowgraph/autodiff.hpp"
#include "flowgraph/graphevo.hpp"
#include "flowgraph/io.hpp"
#include "flowgraph/parallel.hpp"
#include "flowgraph/sampler.hpp"
#include "flowgraph/training.hpp"

namespace flowgraph {

struct RLConfig {
  double alpha = 0.999;
  double beta = 0.001;
  double temperature = 1.0;
  int n_train = 500;
  int trajectories = 16;  // per iteration
  int n_steps = 50;
  std::uint64_t seed = 0;
  double learning_rate = 1e-4;
  double grad_clip_norm = 1.0;
  double kl_ceiling = 1.0;         // mean KL per dimension per step; exceeded = abort
  bool include_final_step = true;  // log-prob and KL of the absorbing step
  bool reward_baseline = false;    // subtract the batch mean reward
  bool record_intermediate_rewards = false;
  int threads = 1;

  void validate() const {
    require(alpha >= 0.0 && beta >= 0.0, "RLConfig: alpha and beta must be >= 0");
    require(temperature > 0.0, "RLConfig.temperature must be > 0");
    require(n_train >= 0, "RLConfig.n_train must be >= 0");
    require(trajectories >= 1, "RLConfig.trajectories must be >= 1");
    require(n_steps >= 1, "RLConfig.n_steps must be >= 1");
    require(learning_rate >= 0.0, "RLConfig.learning_rate must be >= 0");
    require(grad_clip_norm > 0.0, "RLConfig.grad_clip_norm must be > 0");
    require(kl_ceiling > 0.0, "RLConfig.kl_ceiling must be > 0");
    require(threads >= 1, "RLConfig.threads must be >= 1");
  }
};

struct RewardFn {
  std::string name;
  json params;
  std::function<double(const Graph&)> fn;

  double operator()(const Graph& g) const { return fn(g); }
};

inline int binary_edge_count(const Graph& g) {
  int m = 0;
  for (int i = 0; i < g.size(); ++i)
    for (int j = i + 1; j < g.size(); ++j) m += g.edge(i, j) != 0;
  return m;
}

inline long triangle_count(const Graph& g) {
  long c = 0;
  const int n = g.size();
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      if (g.edge(i, j) == 0) continue;
      for (int k = j + 1; k < n; ++k) c += g.edge(i, k) != 0 && g.edge(j, k) != 0;
    }
  return c;
}

/// Built-in rewards, all in [0, 1]:
///   edge_count_target {target, sigma}: exp(-(|E| - target)^2 / (2 sigma^2))
///   triangle_density {}: triangles / C(n, 3)
///   valence_validity {valences: [max per node category]}: fraction of nodes
///     whose summed bond orders (edge category = order) fit the table.
inline RewardFn reward_builtin(const std::string& name, const json& params = json::object()) {
  RewardFn r;
  r.name = name;
  r.params = params;
  if (name == "edge_count_target") {
    require(params.contains("target"), "edge_count_target: missing 'target'");
    const double target = params.at("target").get<double>();
    const double sigma = params.value("sigma", 2.0);
    require(sigma > 0.0, "edge_count_target: sigma must be > 0");
    r.params["sigma"] = sigma;
    r.fn = [target, sigma](const Graph& g) {
      const double d = binary_edge_count(g) - target;
      return std::exp(-d * d / (2.0 * sigma * sigma));
    };
  } else if (name == "triangle_density") {
    r.fn = [](const Graph& g) {
      const double n = g.size();
      if (n < 3) return 0.0;
      return triangle_count(g) / (n * (n - 1) * (n - 2) / 6.0);
    };
  } else if (name == "valence_validity") {
    require(params.contains("valences"), "valence_validity: missing 'valences'");
    const std::vector<int> val = params.at("valences").get<std::vector<int>>();
    r.fn = [val](const Graph& g) {
      if (g.size() == 0) return 1.0;
      int ok = 0;
      for (int i = 0; i < g.size(); ++i) {
        require(g.node(i) < static_cast<int>(val.size()), "valence_validity: node category missing from table");
        int s = 0;
        for (int j = 0; j < g.size(); ++j) s += g.edge(i, j);
        ok += s <= val[g.node(i)];
      }
      return static_cast<double>(ok) / g.size();
    };
  } else {
    throw PreconditionError("unknown reward '" + name +
                            "' (expected edge_count_target, triangle_density or valence_validity)");
  }
  return r;
}

inline RewardFn reward_from_json(const json& j) {
  require(j.is_object() && j.contains("name"), "reward spec must be an object with a 'name'");
  return reward_builtin(j.at("name").get<std::string>(), j.value("params", json::object()));
}

/// Tempered sampling with recorded trajectories and terminal rewards.
inline std::vector<Trajectory> policy_sample(const ModelParams& mp, const Prior& prior, double T, int count,
                                             int n_steps, std::uint64_t seed, const RewardFn* reward = nullptr,
                                             bool intermediate_rewards = false, int threads = 1) {
  require(T > 0.0, "policy_sample: temperature must be > 0");
  SampleConfig sc;
  sc.n_steps = n_steps;
  sc.n_samples = count;
  sc.seed = seed;
  sc.temperature = T;
  sc.record_trajectory = true;
  sc.threads = threads;
  std::vector<Trajectory> trajs = sample(mp, prior, sc).trajectories;
  if (reward)
    for (Trajectory& tr : trajs) {
      tr.terminal_reward = (*reward)(tr.states.back());
      if (intermediate_rewards)
        for (const Graph& g : tr.states) tr.rewards.push_back((*reward)(g));
    }
  return trajs;
}

struct RLLoss {
  double loss = 0.0;
  double mean_reward = 0.0;
  double log_prob = 0.0;  // mean over trajectories of sum_t log p(G1 | Gt)
  double kl = 0.0;        // mean over trajectories of sum_t KL
  double kl_per_dim = 0.0;
  std::vector<double> grad;
};

namespace detail {

struct DimWeights {
  std::vector<int> node_target, edge_target;
  std::vector<double> node_w, edge_w;
};

// Unit weight on every node and on each unordered pair once.
inline DimWeights dim_weights(const Graph& g1, int N) {
  const int n = g1.size();
  DimWeights w;
  w.node_target.assign(N, 0);
  w.node_w.assign(N, 0.0);
  w.edge_target.assign(static_cast<std::size_t>(N) * N, 0);
  w.edge_w.assign(static_cast<std::size_t>(N) * N, 0.0);
  for (int i = 0; i < n; ++i) {
    w.node_target[i] = g1.node(i);
    w.node_w[i] = 1.0;
    for (int j = i + 1; j < n; ++j) {
      w.edge_target[static_cast<std::size_t>(i) * N + j] = g1.edge(i, j);
      w.edge_w[static_cast<std::size_t>(i) * N + j] = 1.0;
    }
  }
  return w;
}

}  // namespace detail

/// -mean over trajectories of [alpha R(G1) sum_t log p(G1|Gt) - beta sum_t
/// KL(p(.|Gt) || p_ref(.|Gt))], with gradients for `model` only.
inline RLLoss rl_loss(const std::vector<Trajectory>& trajs, const ModelParams& model, const ModelParams& ref,
                      const RLConfig& cfg, bool with_grad = true) {
  require(!trajs.empty(), "rl_loss: no trajectories");
  const int B = static_cast<int>(trajs.size());
  double baseline = 0.0;
  for (const Trajectory& tr : trajs) {
    if (!tr.terminal_reward) throw PreconditionError("rl_loss: trajectory has no terminal reward");
    baseline += *tr.terminal_reward / B;
  }
  const bool cond = model.config.condition_on_source;
  struct Part {
    double ll = 0.0, kl = 0.0, loss = 0.0;
    long dims = 0;
    std::vector<double> grad;
  };
  std::vector<Part> parts(B);
  parallel_for(B, cfg.threads, [&](int b) {
    const Trajectory& tr = trajs[b];
    const int S = static_cast<int>(tr.states.size()) - 1;
    require(S >= 1 && tr.times.size() == tr.states.size(), "rl_loss: malformed trajectory");
    const Graph& g1 = tr.states.back();
    const Graph* g0 = cond ? &tr.states.front() : nullptr;
    const double adv = *tr.terminal_reward - (cfg.reward_baseline ? baseline : 0.0);
    Part& p = parts[b];
    if (with_grad) p.grad.assign(model.params.total_size(), 0.0);
    const int steps = cfg.include_final_step ? S : S - 1;
    for (int s = 0; s < steps; ++s) {
      const Graph& gt = tr.states[s];
      const double t = tr.times[s];
      const EncodedInput in = encode_input(model.config, gt, t, g0);
      ad::Tape tape(with_grad);
      const BoundParams P = bind_params(tape, model.params, with_grad);
      const ForwardVars fv = forward_on_tape(model, P, in);
      const PosteriorLogits rl = forward(ref, gt, t, g0);
      const detail::DimWeights w = detail::dim_weights(g1, in.N);
      ad::Var node_ll = ad::weighted_log_likelihood(fv.node_logits, w.node_target, w.node_w);
      ad::Var edge_ll = ad::weighted_log_likelihood(fv.edge_logits, w.edge_target, w.edge_w);
      ad::Var node_kl = ad::weighted_kl(fv.node_logits, rl.node_logits, w.node_w);
      ad::Var edge_kl = ad::weighted_kl(fv.edge_logits, rl.edge_logits, w.edge_w);
      const double sc = 1.0 / B;
      ad::Var ll = ad::combine_scalars(node_ll, 1.0, edge_ll, 1.0);
      ad::Var kl = ad::combine_scalars(node_kl, 1.0, edge_kl, 1.0);
      ad::Var loss = ad::combine_scalars(ll, -cfg.alpha * adv * sc, kl, cfg.beta * sc);
      p.ll += tape.scalar(ll);
      p.kl += tape.scalar(kl);
      p.loss += tape.scalar(loss);
      p.dims += gt.size() + gt.size() * (gt.size() - 1) / 2;
      if (with_grad) {
        tape.backward(loss);
        std::size_t off = 0;
        for (const ad::Var v : P.vars) {
          const std::vector<double>& g = tape.node(v).grad;
          if (!g.empty())
            for (std::size_t k = 0; k < g.size(); ++k) p.grad[off + k] += g[k];
          off += tape.value(v).size();
        }
      }
    }
  });
  RLLoss out;
  long dims = 0;
  if (with_grad) out.grad.assign(model.params.total_size(), 0.0);
  for (int b = 0; b < B; ++b) {
    out.loss += parts[b].loss;
    out.log_prob += parts[b].ll / B;
    out.kl += parts[b].kl / B;
    out.mean_reward += *trajs[b].terminal_reward / B;
    dims += parts[b].dims;
    if (with_grad)
      for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += parts[b].grad[k];
  }
  out.kl_per_dim = dims > 0 ? out.kl * B / dims : 0.0;
  return out;
}

struct RLIterationLog {
  int iteration = 0;
  double mean_reward = 0.0;
  double kl = 0.0;
  double kl_per_dim = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

inline json rl_log_to_json(const RLIterationLog& r) {
  return {{"iteration", r.iteration}, {"mean_reward", r.mean_reward}, {"kl", r.kl},
          {"kl_per_dim", r.kl_per_dim}, {"loss", r.loss},           {"grad_norm", r.grad_norm}};
}

struct FinetuneOptions {
  std::string log_path;  // JSON Lines, one record per iteration; empty = none
  std::function<void(const RLIterationLog&)> on_iteration;
  // Called after each update with the current parameters; returning true
  // ends fine-tuning early.
  std::function<bool(const RLIterationLog&, const ModelParams&)> stop_after;
};

/// Iterates: collect trajectories from the current model at temperature T,
/// score them, take one Adam step on rl_loss. The reference model is the
/// starting point, frozen. Throws NumericalError if the mean KL per dimension
/// exceeds cfg.kl_ceiling.
inline ModelParams finetune(const ModelParams& pretrained, const Prior& prior, const RewardFn& reward,
                            const RLConfig& cfg, const FinetuneOptions& opt = {}) {
  cfg.validate();
  const ModelParams ref = pretrained;
  ModelParams mp = pretrained;
  AdamState adam;
  std::ofstream log;
  if (!opt.log_path.empty()) {
    log.open(opt.log_path, std::ios::app);
    if (!log) throw std::runtime_error("finetune: cannot open log '" + opt.log_path + "'");
  }
  for (int it = 0; it < cfg.n_train; ++it) {
    const std::uint64_t seed = Rng::keyed(cfg.seed, 0xA1, it).next_u64();
    const std::vector<Trajectory> trajs = policy_sample(mp, prior, cfg.temperature, cfg.trajectories, cfg.n_steps,
                                                        seed, &reward, cfg.record_intermediate_rewards, cfg.threads);
    RLLoss L = rl_loss(trajs, mp, ref, cfg);
    if (!std::isfinite(L.loss)) throw NumericalError("finetune iteration " + std::to_string(it) + ": non-finite loss");
    if (L.kl_per_dim > cfg.kl_ceiling)
      throw NumericalError("finetune iteration " + std::to_string(it) + ": mean KL per dimension " +
                           std::to_string(L.kl_per_dim) + " exceeds ceiling " + std::to_string(cfg.kl_ceiling));
    AdamOptions o;
    o.lr = cfg.learning_rate;
    o.clip_norm = cfg.grad_clip_norm;
    RLIterationLog rec{it, L.mean_reward, L.kl, L.kl_per_dim, L.loss, 0.0};
    rec.grad_norm = adam_update(mp.params, std::move(L.grad), adam, o);
    if (log) log << rl_log_to_json(rec).dump() << '\n';
    if (opt.on_iteration) opt.on_iteration(rec);
    if (opt.stop_after && opt.stop_after(rec, mp)) break;
  }
  return mp;
}

inline double mean_reward(const std::vector<Graph>& gs, const RewardFn& r) {
  require(!gs.empty(), "mean_reward: no graphs");
  double s = 0.0;
  for (const Graph& g : gs) s += r(g);
  return s / gs.size();
}

// ---------------------------------------------------------------------------
// Two-dimensional toy: a 32 x 32 categorical grid standing in for a graph with
// two dimensions. The pretrained posterior is a frozen table of exact logits
// per (time bin, current cell, dimension) for a two-blob target; fine-tuning
// learns a shared logit offset per (dimension, category) on top of it.

struct GridToyConfig {
  int K = 32;
  int time_bins = 10;
  int n_steps = 20;
  int chains = 256;  // per iteration
  int iterations = 200;
  double alpha = 0.999, beta = 0.001, temperature = 1.0;
  double learning_rate = 0.2;
  std::uint64_t seed = 0;
  double reward_x = 24, reward_y = 24, reward_sigma = 2;
};

class GridToy {
 public:
  explicit GridToy(GridToyConfig cfg) : cfg_(cfg), K_(cfg.K) {
    require(K_ >= 2 && cfg_.time_bins >= 1 && cfg_.n_steps >= 1, "GridToy: bad configuration");
    target_.assign(K_ * K_, 0.0);
    double z = 0.0;
    const double c1 = K_ / 4.0, c2 = 3.0 * K_ / 4.0, s = K_ / 10.0;
    for (int x = 0; x < K_; ++x)
      for (int y = 0; y < K_; ++y) {
        auto blob = [&](double cx, double cy) {
          return std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2 * s * s));
        };
        target_[x * K_ + y] = blob(c1, c1) + blob(c2, c2);
        z += target_[x * K_ + y];
      }
    for (double& v : target_) v /= z;
    table_.assign(static_cast<std::size_t>(cfg_.time_bins) * K_ * K_ * 2 * K_, 0.0);
    for (int b = 0; b < cfg_.time_bins; ++b) {
      const double t = (b + 0.5) / cfg_.time_bins;
      for (int cell = 0; cell < K_ * K_; ++cell) {
        const int cx = cell / K_, cy = cell % K_;
        std::vector<double> mx(K_, 0.0), my(K_, 0.0);
        for (int x = 0; x < K_; ++x)
          for (int y = 0; y < K_; ++y) {
            // p_t(current | x1) under a uniform source and point-mass path.
            const double lx = t * (x == cx) + (1 - t) / K_, ly = t * (y == cy) + (1 - t) / K_;
            const double w = target_[x * K_ + y] * lx * ly;
            mx[x] += w;
            my[y] += w;
          }
        for (int k = 0; k < K_; ++k) {
          table_[index(b, cell, 0) + k] = std::log(mx[k] + 1e-300);
          table_[index(b, cell, 1) + k] = std::log(my[k] + 1e-300);
        }
      }
    }
    bias_.assign(2 * K_, 0.0);
  }

  const std::vector<double>& target() const { return target_; }
  const std::vector<double>& bias() const { return bias_; }

  double reward(int cell) const {
    const double dx = cell / K_ - cfg_.reward_x, dy = cell % K_ - cfg_.reward_y;
    return std::exp(-(dx * dx + dy * dy) / (2 * cfg_.reward_sigma * cfg_.reward_sigma));
  }

  std::vector<double> posterior(double t, int cell, int d, bool tuned = true) const {
    std::vector<double> z(table_.begin() + index(bin(t), cell, d), table_.begin() + index(bin(t), cell, d) + K_);
    if (tuned)
      for (int k = 0; k < K_; ++k) z[k] += bias_[d * K_ + k];
    return softmax(z);
  }

  /// Terminal cell and visited cells (n_steps + 1) of one chain at temperature T.
  std::vector<int> run(double T, std::uint64_t seed, std::uint64_t chain) const {
    Rng rng = Rng::keyed(seed, 0x70, chain);
    int cur[2] = {static_cast<int>(rng.below(K_)), static_cast<int>(rng.below(K_))};
    std::vector<int> cells{cur[0] * K_ + cur[1]};
    const double dt = 1.0 / cfg_.n_steps;
    for (int s = 0; s < cfg_.n_steps; ++s) {
      const double t = s * dt;
      const int cell = cells.back();
      for (int d = 0; d < 2; ++d) {
        const int x1 = rng.categorical(posterior(t, cell, d));
        std::vector<double> q(K_, 0.0);
        q[cur[d]] = 1.0;
        std::vector<double> k =
            euler_kernel(CategoricalState(cur[d], K_), CategoricalState(x1, K_), PathParams(t, q), dt);
        apply_temperature(k, T, false);
        cur[d] = rng.categorical(k);
      }
      cells.push_back(cur[0] * K_ + cur[1]);
    }
    return cells;
  }

  std::vector<double> histogram(double T, int chains, std::uint64_t seed) const {
    std::vector<double> h(K_ * K_, 0.0);
    for (int c = 0; c < chains; ++c) h[run(T, seed, c).back()] += 1.0 / chains;
    return h;
  }

  double expected_reward(const std::vector<double>& h) const {
    double s = 0.0;
    for (int c = 0; c < K_ * K_; ++c) s += h[c] * reward(c);
    return s;
  }

  /// Policy-gradient fine-tuning of the offsets; returns mean terminal reward
  /// per iteration.
  std::vector<double> finetune() {
    std::vector<double> curve;
    for (int it = 0; it < cfg_.iterations; ++it) {
      const std::uint64_t seed = Rng::keyed(cfg_.seed, 0x71, it).next_u64();
      std::vector<double> grad(bias_.size(), 0.0);
      double mr = 0.0;
      for (int c = 0; c < cfg_.chains; ++c) {
        const std::vector<int> cells = run(cfg_.temperature, seed, c);
        const int end = cells.back();
        const double R = reward(end);
        mr += R / cfg_.chains;
        for (int s = 0; s < cfg_.n_steps; ++s) {
          const double t = s * (1.0 / cfg_.n_steps);
          for (int d = 0; d < 2; ++d) {
            const std::vector<double> pr = posterior(t, cells[s], d, true);
            const std::vector<double> pq = posterior(t, cells[s], d, false);
            const int x1 = d == 0 ? end / K_ : end % K_;
            double kl = 0.0;
            for (int k = 0; k < K_; ++k)
              if (pr[k] > 0.0) kl += pr[k] * (std::log(pr[k]) - std::log(pq[k]));
            for (int k = 0; k < K_; ++k) {
              const double dll = (k == x1) - pr[k];
              const double dkl = pr[k] > 0.0 ? pr[k] * ((std::log(pr[k]) - std::log(pq[k])) - kl) : 0.0;
              grad[d * K_ + k] += (-cfg_.alpha * R * dll + cfg_.beta * dkl) / cfg_.chains;
            }
          }
        }
      }
      curve.push_back(mr);
      for (std::size_t i = 0; i < bias_.size(); ++i) bias_[i] -= cfg_.learning_rate * grad[i];
    }
    return curve;
  }

 private:
  int bin(double t) const { return std::min(cfg_.time_bins - 1, static_cast<int>(t * cfg_.time_bins)); }
  std::size_t index(int b, int cell, int d) const {
    return ((static_cast<std::size_t>(b) * K_ * K_ + cell) * 2 + d) * K_;
  }

  GridToyConfig cfg_;
  int K_;
  std::vector<double> target_;
  std::vector<double> table_, bias_;
};

}  // namespace flowgraph
