#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flowgraph/checkpoint.hpp"
#include "flowgraph/flow_path.hpp"
#include "flowgraph/graphevo.hpp"
#include "flowgraph/ot_coupling.hpp"
#include "flowgraph/parallel.hpp"
#include "flowgraph/prior.hpp"

namespace flowgraph {

struct TrainConfig {
  int batch_size = 32;
  long steps = 1000;
  double learning_rate = 5e-4;
  double edge_loss_weight = 5.0;
  CouplingMode coupling_mode = CouplingMode::ot;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  long checkpoint_interval = 0;  // 0 = final checkpoint only
  double grad_clip_norm = 1.0;
  int threads = 1;

  void validate() const {
    require(batch_size >= 1, "TrainConfig.batch_size must be >= 1");
    require(steps >= 0, "TrainConfig.steps must be >= 0");
    require(learning_rate >= 0.0, "TrainConfig.learning_rate must be >= 0");
    require(edge_loss_weight > 0.0, "TrainConfig.edge_loss_weight must be > 0");
    require(lambda >= 0.0, "TrainConfig.lambda must be >= 0");
    require(grad_clip_norm > 0.0, "TrainConfig.grad_clip_norm must be > 0");
    require(checkpoint_interval >= 0, "TrainConfig.checkpoint_interval must be >= 0");
    require(threads >= 1, "TrainConfig.threads must be >= 1");
  }
};

struct LossReport {
  double total = 0.0;
  double node_term = 0.0;
  double edge_term = 0.0;
  long step = 0;
  double pair_cost = 0.0;  // mean Hamming cost of the coupled (G0, G1) pairs
  friend bool operator==(const LossReport&, const LossReport&) = default;
};

inline json loss_report_to_json(const LossReport& r) {
  return {{"step", r.step}, {"total", r.total}, {"node_term", r.node_term}, {"edge_term", r.edge_term},
          {"pair_cost", r.pair_cost}};
}

namespace detail {

// Per-row targets and weights: nodes averaged over n, edges over the n(n-1)/2
// unordered pairs (only i<j rows carry weight).
struct LossTargets {
  std::vector<int> node_target, edge_target;
  std::vector<double> node_weight, edge_weight;
};

inline LossTargets loss_targets(const Graph& target, int N) {
  const int n = target.size();
  LossTargets lt;
  lt.node_target.assign(N, 0);
  lt.node_weight.assign(N, 0.0);
  lt.edge_target.assign(static_cast<std::size_t>(N) * N, 0);
  lt.edge_weight.assign(static_cast<std::size_t>(N) * N, 0.0);
  for (int i = 0; i < n; ++i) {
    lt.node_target[i] = target.node(i);
    lt.node_weight[i] = 1.0 / n;
  }
  const int pairs = n * (n - 1) / 2;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      lt.edge_target[static_cast<std::size_t>(i) * N + j] = target.edge(i, j);
      lt.edge_weight[static_cast<std::size_t>(i) * N + j] = 1.0 / pairs;
    }
  return lt;
}

}  // namespace detail

/// Cross-entropy of the target categories: mean over nodes plus w_edge times
/// mean over unordered pairs.
inline LossReport ce_loss(const PosteriorLogits& lg, const Graph& target, double w_edge) {
  require(lg.n == target.size(), "ce_loss: logits describe " + std::to_string(lg.n) + " nodes, target has " +
                                     std::to_string(target.size()));
  target.validate(lg.node_types, lg.edge_types);
  const int n = lg.n;
  LossReport r;
  for (int i = 0; i < n; ++i) {
    const std::vector<double> ls = ad::log_softmax_rows({lg.node_row(i), static_cast<std::size_t>(lg.node_types)}, 1,
                                                        lg.node_types);
    r.node_term -= ls[target.node(i)] / n;
  }
  const int pairs = n * (n - 1) / 2;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const std::vector<double> ls =
          ad::log_softmax_rows({lg.edge_row(i, j), static_cast<std::size_t>(lg.edge_types)}, 1, lg.edge_types);
      r.edge_term -= ls[target.edge(i, j)] / pairs;
    }
  r.total = r.node_term + w_edge * r.edge_term;
  return r;
}

struct LossAndGrad {
  LossReport report;
  std::vector<double> grad;  // flattened in ParamSet order
};

/// Loss of forward(gt, t) against `target` with reverse-mode gradients.
/// Dropout is active only when `dropout_rng` is given.
inline LossAndGrad loss_and_grad(const ModelParams& mp, const Graph& gt, double t, const Graph& target,
                                 double w_edge, const Graph* g0 = nullptr, Rng* dropout_rng = nullptr) {
  require(gt.size() == target.size(), "loss_and_grad: noisy and target graphs differ in size");
  const EncodedInput in = encode_input(mp.config, gt, t, g0);
  ad::Tape tape(true);
  const BoundParams P = bind_params(tape, mp.params, true);
  const ForwardVars fv = forward_on_tape(mp, P, in, dropout_rng);
  target.validate(mp.config.node_types, mp.config.edge_types);
  const detail::LossTargets lt = detail::loss_targets(target, in.N);
  ad::Var node_ll = ad::weighted_log_likelihood(fv.node_logits, lt.node_target, lt.node_weight);
  ad::Var edge_ll = ad::weighted_log_likelihood(fv.edge_logits, lt.edge_target, lt.edge_weight);
  ad::Var total = ad::combine_scalars(node_ll, -1.0, edge_ll, -w_edge);
  tape.backward(total);
  LossAndGrad out;
  out.report.node_term = -tape.scalar(node_ll);
  out.report.edge_term = -tape.scalar(edge_ll);
  out.report.total = tape.scalar(total);
  out.grad.reserve(mp.params.total_size());
  for (const ad::Var v : P.vars) {
    const std::vector<double>& g = tape.node(v).grad;
    if (g.empty())
      out.grad.insert(out.grad.end(), tape.value(v).size(), 0.0);
    else
      out.grad.insert(out.grad.end(), g.begin(), g.end());
  }
  return out;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped = 0;  // parameters whose finite difference straddles a ReLU/max kink
  std::map<std::string, double> per_tensor;
};

/// Compares reverse-mode gradients of ce_loss(forward(g, t), target) against
/// central differences. Every tensor contributes at least min(size, 2)
/// coordinates; the rest of the `count` coordinates are drawn at random.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6).
inline GradCheckResult grad_check(const ModelParams& mp, const Graph& g, double t, double eps = 1e-5, int count = 200,
                                  std::uint64_t seed = 1, const Graph* target = nullptr, double w_edge = 5.0) {
  const Graph& tgt = target ? *target : g;
  const LossAndGrad lg = loss_and_grad(mp, g, t, tgt, w_edge);
  std::vector<std::pair<int, int>> coords;  // (tensor, index)
  Rng rng = Rng::keyed(seed, 0x6C);
  std::vector<std::size_t> offset(mp.params.count() + 1, 0);
  for (std::size_t k = 0; k < mp.params.count(); ++k) {
    const int sz = static_cast<int>(mp.params[k].values.size());
    offset[k + 1] = offset[k] + sz;
    for (int r = 0; r < std::min(sz, 2); ++r) coords.emplace_back(static_cast<int>(k), static_cast<int>(rng.below(sz)));
  }
  const std::size_t total = offset.back();
  while (static_cast<int>(coords.size()) < count) {
    const std::size_t f = rng.below(total);
    const int k = static_cast<int>(std::upper_bound(offset.begin(), offset.end(), f) - offset.begin()) - 1;
    coords.emplace_back(k, static_cast<int>(f - offset[k]));
  }
  ModelParams work = mp;
  auto loss_at = [&](int k, int i, double x) {
    work.params[k].values[i] = x;
    return ce_loss(forward(work, g, t), tgt, w_edge).total;
  };
  GradCheckResult res;
  for (const auto& [k, i] : coords) {
    const double x0 = mp.params[k].values[i];
    const double fp = loss_at(k, i, x0 + eps), fm = loss_at(k, i, x0 - eps);
    const double fph = loss_at(k, i, x0 + eps / 2), fmh = loss_at(k, i, x0 - eps / 2);
    work.params[k].values[i] = x0;
    const double num = (fp - fm) / (2 * eps), num_half = (fph - fmh) / eps;
    const double ana = lg.grad[offset[k] + i];
    // Away from kinks the two estimates differ by O(eps^2); a kink inside the
    // stencil changes them at first order.
    if (std::abs(num - num_half) > 1e-4 * std::max(1.0, std::abs(num))) {
      ++res.skipped;
      continue;
    }
    const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6});
    ++res.checked;
    res.max_rel_error = std::max(res.max_rel_error, rel);
    double& pt = res.per_tensor[mp.params[k].name];
    pt = std::max(pt, rel);
  }
  return res;
}

/// Adaptive-moment optimizer state with global gradient-norm clipping.
struct AdamState {
  std::vector<double> m, v;
  long t = 0;
};

struct AdamOptions {
  double lr = 5e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, clip_norm = 1.0;
};

/// Returns the pre-clipping gradient norm.
inline double adam_update(ParamSet& ps, std::vector<double> grad, AdamState& st, const AdamOptions& o) {
  const std::size_t P = ps.total_size();
  require(grad.size() == P, "adam_update: gradient size mismatch");
  if (st.m.empty()) {
    st.m.assign(P, 0.0);
    st.v.assign(P, 0.0);
  }
  double norm = 0.0;
  for (double g : grad) norm += g * g;
  norm = std::sqrt(norm);
  if (!std::isfinite(norm)) throw NumericalError("adam_update: non-finite gradient norm");
  if (norm > o.clip_norm)
    for (double& g : grad) g *= o.clip_norm / norm;
  ++st.t;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(st.t));
  std::size_t idx = 0;
  for (std::size_t k = 0; k < ps.count(); ++k)
    for (double& w : ps[k].values) {
      st.m[idx] = o.beta1 * st.m[idx] + (1.0 - o.beta1) * grad[idx];
      st.v[idx] = o.beta2 * st.v[idx] + (1.0 - o.beta2) * grad[idx] * grad[idx];
      const double mhat = st.m[idx] / c1, vhat = st.v[idx] / c2;
      w -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
      ++idx;
    }
  return norm;
}

/// One noisy training example built per the conditional path.
struct TrainingExample {
  Graph g0, gt, g1;
  double t = 0.0;
};

/// Draws t and G0 per graph, pairs G0 with the data batch, and builds Gt by
/// keeping each G1 category with probability t and the G0 category otherwise.
/// All randomness is keyed on (seed, step, slot).
inline std::vector<TrainingExample> make_examples(const std::vector<Graph>& batch, const Prior& prior,
                                                  const TrainConfig& cfg, long step, double* pair_cost = nullptr) {
  require(!batch.empty(), "train_step: empty batch");
  const int B = static_cast<int>(batch.size());
  std::vector<Graph> noise;
  noise.reserve(B);
  for (int k = 0; k < B; ++k) {
    Rng r = Rng::keyed(cfg.seed, 0x7A, step, k, 0);
    noise.push_back(prior.sample_graph(batch[k].size(), r));
  }
  CouplingPlan plan;
  const auto pairs = couple(noise, batch, cfg.lambda, cfg.coupling_mode, &plan);
  if (pair_cost) *pair_cost = plan.total_cost / B;
  std::vector<TrainingExample> ex(B);
  for (int k = 0; k < B; ++k) {
    Rng r = Rng::keyed(cfg.seed, 0x7A, step, k, 1);
    TrainingExample& e = ex[k];
    e.g0 = pairs[k].first;
    e.g1 = pairs[k].second;
    e.t = r.uniform();
    const GraphDims dims{e.g1.size()};
    e.gt = e.g0;
    for (int d = 0; d < dims.count(); ++d) {
      const int K = dims.is_node(d) ? prior.node_types() : prior.edge_types();
      const CategoricalState x0(graph_value(e.g0, dims, d), K), x1(graph_value(e.g1, dims, d), K);
      set_graph_value(e.gt, dims, d, sample_xt(x0, x1, e.t, r).value);
    }
  }
  return ex;
}

/// One optimizer step on a size-homogeneous batch. Per-example gradients are
/// computed in parallel and summed in slot order.
inline LossReport train_step(ModelParams& mp, const std::vector<Graph>& batch, const Prior& prior,
                             const TrainConfig& cfg, AdamState& adam, long step) {
  require(prior.node_types() == mp.config.node_types && prior.edge_types() == mp.config.edge_types,
          "train_step: prior and model disagree on category counts");
  double pair_cost = 0.0;
  const std::vector<TrainingExample> ex = make_examples(batch, prior, cfg, step, &pair_cost);
  const int B = static_cast<int>(ex.size());
  std::vector<LossAndGrad> res(B);
  parallel_for(B, cfg.threads, [&](int k) {
    Rng drop = Rng::keyed(cfg.seed, 0x7A, step, k, 2);
    const Graph* g0 = mp.config.condition_on_source ? &ex[k].g0 : nullptr;
    res[k] = loss_and_grad(mp, ex[k].gt, ex[k].t, ex[k].g1, cfg.edge_loss_weight, g0,
                           mp.config.dropout > 0.0 ? &drop : nullptr);
  });
  LossReport rep;
  rep.step = step;
  rep.pair_cost = pair_cost;
  std::vector<double> grad(mp.params.total_size(), 0.0);
  for (int k = 0; k < B; ++k) {
    rep.total += res[k].report.total / B;
    rep.node_term += res[k].report.node_term / B;
    rep.edge_term += res[k].report.edge_term / B;
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += res[k].grad[i] / B;
  }
  if (!std::isfinite(rep.total))
    throw NumericalError("train_step " + std::to_string(step) + ": non-finite loss (node " +
                         std::to_string(rep.node_term) + ", edge " + std::to_string(rep.edge_term) + ")");
  AdamOptions o;
  o.lr = cfg.learning_rate;
  o.clip_norm = cfg.grad_clip_norm;
  adam_update(mp.params, std::move(grad), adam, o);
  return rep;
}

/// Endless per-size streams of reshuffled graphs. Each step picks a size with
/// probability proportional to its share of the dataset and takes the next
/// batch_size graphs from that size's stream.
class SizeBuckets {
 public:
  SizeBuckets(const std::vector<Graph>& data, std::uint64_t seed) : seed_(seed) {
    require(!data.empty(), "train_loop: dataset is empty");
    for (int i = 0; i < static_cast<int>(data.size()); ++i) by_size_[data[i].size()].push_back(i);
    for (auto& [n, idx] : by_size_) {
      sizes_.push_back(n);
      weights_.push_back(static_cast<double>(idx.size()));
      streams_.push_back({idx, 0, 0});
    }
  }

  std::vector<int> next(int batch_size, long step) {
    Rng r = Rng::keyed(seed_, 0xB0C, step);
    const int b = r.categorical(weights_);
    Stream& s = streams_[b];
    std::vector<int> out;
    out.reserve(batch_size);
    while (static_cast<int>(out.size()) < batch_size) {
      if (s.pos == 0) {
        Rng sr = Rng::keyed(seed_, 0xB0D, b, s.epoch);
        sr.shuffle(s.order);
      }
      out.push_back(s.order[s.pos]);
      if (++s.pos == static_cast<int>(s.order.size())) {
        s.pos = 0;
        ++s.epoch;
      }
    }
    return out;
  }

 private:
  struct Stream {
    std::vector<int> order;
    int pos = 0;
    long epoch = 0;
  };
  std::uint64_t seed_;
  std::map<int, std::vector<int>> by_size_;
  std::vector<int> sizes_;
  std::vector<double> weights_;
  std::vector<Stream> streams_;
};

struct TrainLoopOptions {
  std::string checkpoint_dir;  // empty = no checkpoint files
  std::string log_path;        // empty = no JSON Lines log
  std::function<void(const LossReport&)> on_step;
};

/// Runs cfg.steps optimizer steps from `init`. Deterministic given cfg.seed;
/// the result does not depend on cfg.threads.
inline ModelParams train_loop(const std::vector<Graph>& dataset, const Prior& prior, ModelParams init,
                              const TrainConfig& cfg, const TrainLoopOptions& opt = {}) {
  cfg.validate();
  require(!dataset.empty(), "train_loop: dataset is empty");
  for (const Graph& g : dataset) {
    g.validate(init.config.node_types, init.config.edge_types);
    if (g.size() > init.config.max_nodes)
      throw CapacityError("train_loop: dataset graph with " + std::to_string(g.size()) + " nodes exceeds max_nodes");
  }
  std::ofstream log;
  if (!opt.log_path.empty()) {
    log.open(opt.log_path, std::ios::app);
    if (!log) throw std::runtime_error("train_loop: cannot open log '" + opt.log_path + "'");
  }
  if (!opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);
  auto checkpoint = [&](long step) {
    if (opt.checkpoint_dir.empty()) return;
    const std::string path = opt.checkpoint_dir + "/step_" + std::to_string(step) + ".json";
    try {
      save_checkpoint(path, init);
    } catch (const std::exception& e) {
      throw std::runtime_error("train_loop: writing checkpoint '" + path + "': " + e.what());
    }
  };
  SizeBuckets buckets(dataset, cfg.seed);
  AdamState adam;
  for (long step = 0; step < cfg.steps; ++step) {
    const std::vector<int> idx = buckets.next(cfg.batch_size, step);
    std::vector<Graph> batch;
    batch.reserve(idx.size());
    for (int i : idx) batch.push_back(dataset[i]);
    const LossReport rep = train_step(init, batch, prior, cfg, adam, step);
    if (log) log << loss_report_to_json(rep).dump() << '\n';
    if (opt.on_step) opt.on_step(rep);
    if (cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0) checkpoint(step + 1);
  }
  checkpoint(cfg.steps);
  return init;
}

}  // namespace flowgraph
