#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "flowgraph/rl_guidance.hpp"

using namespace flowgraph;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.node_types = 2;
  c.edge_types = 2;
  c.layers = 1;
  c.heads = 2;
  c.dx = 8;
  c.de = 8;
  c.dy = 8;
  c.max_nodes = 8;
  c.dropout = 0.0;
  return c;
}

Prior tiny_prior() {
  Prior p;
  p.node_marginal = {0.6, 0.4};
  p.edge_marginal = {0.7, 0.3};
  p.size_distribution = {0, 0, 0, 0.5, 0.5};
  return p;
}

Graph complete(int n) {
  Graph g(n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) g.set_edge(i, j, 1);
  return g;
}

// Scalar re-derivation of the objective from posterior probabilities.
double hand_loss(const std::vector<Trajectory>& trajs, const ModelParams& m, const ModelParams& r, double alpha,
                 double beta, bool final_step) {
  double total = 0.0;
  for (const Trajectory& tr : trajs) {
    const Graph& g1 = tr.states.back();
    const GraphDims dims{g1.size()};
    const int S = static_cast<int>(tr.states.size()) - 1;
    double ll = 0.0, kl = 0.0;
    for (int s = 0; s < (final_step ? S : S - 1); ++s) {
      const FactorizedPosterior p = posterior_probs(forward(m, tr.states[s], tr.times[s]));
      const FactorizedPosterior q = posterior_probs(forward(r, tr.states[s], tr.times[s]));
      for (int d = 0; d < dims.count(); ++d) {
        ll += std::log(p.dims[d][graph_value(g1, dims, d)]);
        for (std::size_t k = 0; k < p.dims[d].size(); ++k)
          kl += p.dims[d][k] * std::log(p.dims[d][k] / q.dims[d][k]);
      }
    }
    total += -(alpha * *tr.terminal_reward * ll - beta * kl);
  }
  return total / trajs.size();
}

}  // namespace

TEST(RLGuidance, DefaultWeights) {
  const RLConfig c;
  EXPECT_EQ(c.alpha, 0.999);
  EXPECT_EQ(c.beta, 0.001);
  EXPECT_TRUE(c.include_final_step);
}

TEST(RLGuidance, BuiltinRewards) {
  const RewardFn ec = reward_builtin("edge_count_target", {{"target", 6}, {"sigma", 1.5}});
  EXPECT_EQ(ec(complete(4)), 1.0);
  EXPECT_NEAR(ec(complete(3)), std::exp(-9.0 / (2 * 2.25)), 1e-15);
  const RewardFn tri = reward_builtin("triangle_density");
  EXPECT_EQ(tri(complete(4)), 1.0);
  Graph path(4);
  path.set_edge(0, 1, 1);
  path.set_edge(1, 2, 1);
  EXPECT_EQ(tri(path), 0.0);
  Graph one_tri = path;
  one_tri.set_edge(0, 2, 1);
  EXPECT_DOUBLE_EQ(tri(one_tri), 0.25);
  const RewardFn val = reward_builtin("valence_validity", {{"valences", {0, 0}}});
  EXPECT_EQ(val(Graph(5)), 1.0);
  const RewardFn val1 = reward_builtin("valence_validity", {{"valences", {1, 4}}});
  Graph g(3);
  g.set_node(2, 1);
  g.set_edge(0, 1, 1);
  g.set_edge(0, 2, 1);
  // Node 0 (valence 1) carries two bonds.
  EXPECT_DOUBLE_EQ(val1(g), 2.0 / 3.0);
}

TEST(RLGuidance, RewardsArePermutationInvariant) {
  const std::vector<RewardFn> rs{reward_builtin("edge_count_target", {{"target", 5}}),
                                 reward_builtin("triangle_density"),
                                 reward_builtin("valence_validity", {{"valences", {2, 3}}})};
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 3 + trial % 5;
    Graph g(n);
    for (int i = 0; i < n; ++i) g.set_node(i, static_cast<int>(rng.below(2)));
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (rng.bernoulli(0.5)) g.set_edge(i, j, 1);
    std::vector<int> m(n);
    for (int i = 0; i < n; ++i) m[i] = i;
    rng.shuffle(m);
    const Graph h = permute(g, Permutation(m));
    for (const RewardFn& r : rs) EXPECT_EQ(r(g), r(h)) << r.name;
  }
}

TEST(RLGuidance, RewardErrors) {
  EXPECT_THROW(reward_builtin("dipole"), PreconditionError);
  EXPECT_THROW(reward_builtin("edge_count_target"), PreconditionError);
  EXPECT_THROW(reward_builtin("valence_validity"), PreconditionError);
  EXPECT_THROW(reward_builtin("edge_count_target", {{"target", 1}, {"sigma", 0}}), PreconditionError);
}

TEST(RLGuidance, PolicyAtUnitTemperatureMatchesSampler) {
  const ModelParams mp = init_model(tiny_model(), 3);
  const RewardFn r = reward_builtin("triangle_density");
  const auto trajs = policy_sample(mp, tiny_prior(), 1.0, 4, 6, 77, &r, true);
  SampleConfig sc;
  sc.n_steps = 6;
  sc.n_samples = 4;
  sc.seed = 77;
  const SampleResult base = sample(mp, tiny_prior(), sc);
  ASSERT_EQ(trajs.size(), 4u);
  for (int c = 0; c < 4; ++c) {
    EXPECT_EQ(trajs[c].states.back(), base.graphs[c]);
    EXPECT_EQ(*trajs[c].terminal_reward, r(base.graphs[c]));
    EXPECT_EQ(trajs[c].rewards.size(), 7u);
  }
}

TEST(RLGuidance, KlAgainstItselfIsExactlyZero) {
  const ModelParams mp = init_model(tiny_model(), 5);
  const RewardFn r = reward_builtin("edge_count_target", {{"target", 2}});
  const auto trajs = policy_sample(mp, tiny_prior(), 1.0, 3, 5, 1, &r);
  RLConfig cfg;
  cfg.alpha = 0.0;
  const RLLoss L = rl_loss(trajs, mp, mp, cfg);
  EXPECT_EQ(L.kl, 0.0);
  EXPECT_EQ(L.loss, 0.0);
  for (double g : L.grad) EXPECT_EQ(g, 0.0);
}

TEST(RLGuidance, ZeroRewardAndZeroBetaGiveZeroLoss) {
  const ModelParams mp = init_model(tiny_model(), 6);
  const ModelParams ref = init_model(tiny_model(), 7);
  auto trajs = policy_sample(mp, tiny_prior(), 1.0, 3, 5, 2);
  for (Trajectory& t : trajs) t.terminal_reward = 0.0;
  RLConfig cfg;
  cfg.beta = 0.0;
  const RLLoss L = rl_loss(trajs, mp, ref, cfg);
  EXPECT_EQ(L.loss, 0.0);
  for (double g : L.grad) EXPECT_EQ(g, 0.0);
}

TEST(RLGuidance, LossMatchesHandComputation) {
  const ModelParams mp = init_model(tiny_model(), 8);
  const ModelParams ref = init_model(tiny_model(), 9);
  auto trajs = policy_sample(mp, tiny_prior(), 1.0, 2, 4, 3);
  trajs[0].terminal_reward = 0.8;
  trajs[1].terminal_reward = 0.3;
  RLConfig cfg;
  cfg.alpha = 0.7;
  cfg.beta = 0.2;
  const RLLoss L = rl_loss(trajs, mp, ref, cfg, false);
  EXPECT_NEAR(L.loss, hand_loss(trajs, mp, ref, 0.7, 0.2, true), 1e-10);
  EXPECT_GT(L.kl, 0.0);
  cfg.include_final_step = false;
  EXPECT_NEAR(rl_loss(trajs, mp, ref, cfg, false).loss, hand_loss(trajs, mp, ref, 0.7, 0.2, false), 1e-10);
}

TEST(RLGuidance, GradientMatchesFiniteDifferences) {
  ModelParams mp = init_model(tiny_model(), 10);
  const ModelParams ref = init_model(tiny_model(), 11);
  auto trajs = policy_sample(mp, tiny_prior(), 1.0, 2, 3, 4);
  trajs[0].terminal_reward = 0.9;
  trajs[1].terminal_reward = 0.1;
  RLConfig cfg;
  cfg.alpha = 1.0;
  cfg.beta = 0.5;
  const RLLoss L = rl_loss(trajs, mp, ref, cfg);
  Rng rng(5);
  const double eps = 1e-5;
  int checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t k = rng.below(mp.params.count());
    const std::size_t i = rng.below(mp.params[k].values.size());
    std::size_t off = 0;
    for (std::size_t a = 0; a < k; ++a) off += mp.params[a].values.size();
    const double x0 = mp.params[k].values[i];
    mp.params[k].values[i] = x0 + eps;
    const double fp = rl_loss(trajs, mp, ref, cfg, false).loss;
    mp.params[k].values[i] = x0 - eps;
    const double fm = rl_loss(trajs, mp, ref, cfg, false).loss;
    mp.params[k].values[i] = x0;
    const double num = (fp - fm) / (2 * eps);
    const double ana = L.grad[off + i];
    if (std::abs(num) < 1e-7 && std::abs(ana) < 1e-7) continue;
    EXPECT_NEAR(ana, num, 1e-4 * std::max(1.0, std::abs(num))) << mp.params[k].name;
    ++checked;
  }
  EXPECT_GT(checked, 10);
}

TEST(RLGuidance, MissingRewardIsAnError) {
  const ModelParams mp = init_model(tiny_model(), 12);
  const auto trajs = policy_sample(mp, tiny_prior(), 1.0, 2, 3, 5);
  EXPECT_THROW(rl_loss(trajs, mp, mp, RLConfig{}), PreconditionError);
}

TEST(RLGuidance, AlphaZeroKeepsReferenceFixedPoint) {
  const ModelParams mp = init_model(tiny_model(), 13);
  RLConfig cfg;
  cfg.alpha = 0.0;
  cfg.n_train = 5;
  cfg.trajectories = 3;
  cfg.n_steps = 4;
  cfg.learning_rate = 1e-2;
  const ModelParams out = finetune(mp, tiny_prior(), reward_builtin("triangle_density"), cfg);
  EXPECT_EQ(out, mp);
}

TEST(RLGuidance, KlCeilingAbortsDivergence) {
  const ModelParams mp = init_model(tiny_model(), 14);
  RLConfig cfg;
  cfg.n_train = 6;
  cfg.trajectories = 3;
  cfg.n_steps = 4;
  cfg.learning_rate = 0.2;
  cfg.kl_ceiling = 1e-9;
  EXPECT_THROW(finetune(mp, tiny_prior(), reward_builtin("triangle_density"), cfg), NumericalError);
}

TEST(RLGuidance, FinetuneLogsEveryIteration) {
  const ModelParams mp = init_model(tiny_model(), 15);
  RLConfig cfg;
  cfg.n_train = 3;
  cfg.trajectories = 2;
  cfg.n_steps = 3;
  std::vector<RLIterationLog> logs;
  FinetuneOptions opt;
  opt.on_iteration = [&](const RLIterationLog& r) { logs.push_back(r); };
  finetune(mp, tiny_prior(), reward_builtin("edge_count_target", {{"target", 3}}), cfg, opt);
  ASSERT_EQ(logs.size(), 3u);
  EXPECT_EQ(logs[0].kl, 0.0);
  EXPECT_EQ(logs[2].iteration, 2);
}

TEST(RLGuidance, StopHookEndsEarlyWithCurrentParameters) {
  const ModelParams mp = init_model(tiny_model(), 16);
  RLConfig cfg;
  cfg.n_train = 10;
  cfg.trajectories = 2;
  cfg.n_steps = 3;
  cfg.learning_rate = 1e-2;
  const RewardFn r = reward_builtin("edge_count_target", {{"target", 3}});
  ModelParams seen;
  FinetuneOptions opt;
  opt.stop_after = [&](const RLIterationLog& l, const ModelParams& p) {
    seen = p;
    return l.iteration == 3;
  };
  const ModelParams out = finetune(mp, tiny_prior(), r, cfg, opt);
  EXPECT_EQ(out, seen);
  cfg.n_train = 4;
  EXPECT_EQ(finetune(mp, tiny_prior(), r, cfg), out);
}

TEST(RLGuidance, GridToyTemperatureAndConcentration) {
  GridToyConfig cfg;
  cfg.iterations = 60;
  cfg.chains = 128;
  cfg.seed = 2;
  GridToy toy(cfg);
  const std::vector<double> h1 = toy.histogram(1.0, 4000, 9);
  EXPECT_LT(total_variation(h1, toy.target()), 0.2);
  // Higher temperature moves terminal mass away from the learned target.
  EXPECT_GT(total_variation(toy.histogram(3.0, 4000, 9), toy.target()), total_variation(h1, toy.target()));
  const double before = toy.expected_reward(h1);
  toy.finetune();
  const double after = toy.expected_reward(toy.histogram(1.0, 4000, 9));
  EXPECT_GT(after, 1.5 * before);
}
