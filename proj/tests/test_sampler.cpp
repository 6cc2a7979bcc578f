#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "flowgraph/oracle.hpp"
#include "flowgraph/sampler.hpp"

using namespace flowgraph;

namespace {

Prior three_node_prior(std::vector<double> edge_marginal, std::vector<double> node_marginal = {1.0}) {
  Prior p;
  p.node_marginal = std::move(node_marginal);
  p.edge_marginal = std::move(edge_marginal);
  p.size_distribution = {0, 0, 0, 1};
  return p;
}

// Triangle-heavy target on 3 nodes with 1 node type and 2 edge types. Not a
// product distribution.
std::vector<double> target_distribution(const GraphSpace& space) {
  std::vector<double> t(space.size(), 0.0);
  Graph tri(3), empty(3), one(3);
  tri.set_edge(0, 1, 1);
  tri.set_edge(1, 2, 1);
  tri.set_edge(0, 2, 1);
  one.set_edge(0, 1, 1);
  t[space.index(tri)] = 0.5;
  t[space.index(empty)] = 0.3;
  t[space.index(one)] = 0.2;
  return t;
}

std::vector<double> histogram(const GraphSpace& space, const std::vector<Graph>& gs) {
  std::vector<double> h(space.size(), 0.0);
  for (const Graph& g : gs) h[space.index(g)] += 1.0 / gs.size();
  return h;
}

// Posterior conditioned on the chain's own G0, from the exact entry weights.
PosteriorFn exact_conditioned_posterior(const GraphSpace& space, std::vector<CouplingEntry> coupling, PathSpec spec) {
  return [space, coupling = normalized(std::move(coupling)), spec](const Graph& gt, double t, const Graph& g0) {
    const std::vector<double> w = exact_posterior(space, gt, g0, t, coupling, spec);
    const GraphDims& dims = space.dims();
    FactorizedPosterior fp;
    for (int d = 0; d < dims.count(); ++d) fp.dims.emplace_back(space.radix(d), 0.0);
    for (std::size_t c = 0; c < coupling.size(); ++c)
      for (int d = 0; d < dims.count(); ++d) fp.dims[d][graph_value(coupling[c].g1, dims, d)] += w[c];
    return fp;
  };
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.node_types = 2;
  c.edge_types = 2;
  c.layers = 2;
  c.heads = 2;
  c.dx = 8;
  c.de = 8;
  c.dy = 8;
  c.max_nodes = 8;
  return c;
}

Prior tiny_prior() {
  Prior p;
  p.node_marginal = {0.6, 0.4};
  p.edge_marginal = {0.7, 0.3};
  p.size_distribution = {0, 0, 0, 0.3, 0.3, 0.4};
  return p;
}

}  // namespace

TEST(Sampler, TemperatureOneIsBitExact) {
  std::vector<double> p{0.123456789, 0.3, 0.576543211};
  const std::vector<double> orig = p;
  apply_temperature(p, 1.0, false);
  EXPECT_EQ(p, orig);
}

TEST(Sampler, TemperatureTwoSharpensTowardsUniform) {
  std::vector<double> p{0.9, 0.1};
  apply_temperature(p, 2.0, false);
  EXPECT_NEAR(p[0], 0.75, 1e-12);
  EXPECT_NEAR(p[1], 0.25, 1e-12);
}

TEST(Sampler, LargeTemperatureIsUniformOverSupport) {
  std::vector<double> p{0.98, 0.0, 0.01, 0.01};
  apply_temperature(p, 1e6, false);
  EXPECT_NEAR(p[0], 1.0 / 3, 1e-4);
  EXPECT_EQ(p[1], 0.0);
  EXPECT_NEAR(p[2], 1.0 / 3, 1e-4);
}

TEST(Sampler, LiteralTemperatureLeavesDistributionUnchanged) {
  std::vector<double> p{0.9, 0.1};
  apply_temperature(p, 3.0, true);
  EXPECT_NEAR(p[0], 0.9, 1e-15);
  EXPECT_NEAR(p[1], 0.1, 1e-15);
}

TEST(Sampler, SingleStepIsADirectPosteriorDraw) {
  const Prior prior = three_node_prior({0.5, 0.5}, {0.5, 0.5});
  FactorizedPosterior post;
  const GraphDims dims{3};
  for (int d = 0; d < dims.count(); ++d) post.dims.push_back({0.2 + 0.1 * d, 0.8 - 0.1 * d});
  PosteriorFn fn = [&](const Graph&, double, const Graph&) { return post; };
  SampleConfig cfg;
  cfg.n_steps = 1;
  cfg.n_samples = 50;
  cfg.seed = 4;
  const SampleResult r = sample_with(fn, prior, cfg);
  for (int c = 0; c < cfg.n_samples; ++c) {
    Graph expect(3);
    for (int d = 0; d < dims.count(); ++d) {
      Rng rng = Rng::keyed(cfg.seed, 0x5A, c, 0, d);
      set_graph_value(expect, dims, d, rng.categorical(post.dims[d]));
    }
    EXPECT_EQ(r.graphs[c], expect);
  }
}

TEST(Sampler, PointMassPosteriorReachesItsTarget) {
  const Prior prior = three_node_prior({0.5, 0.25, 0.25}, {0.5, 0.5});
  Graph target(3);
  target.set_node(1, 1);
  target.set_edge(0, 2, 2);
  target.set_edge(1, 2, 1);
  const GraphDims dims{3};
  PosteriorFn fn = [&](const Graph&, double, const Graph&) {
    FactorizedPosterior fp;
    for (int d = 0; d < dims.count(); ++d) {
      const int K = dims.is_node(d) ? 2 : 3;
      fp.dims.emplace_back(K, 0.0);
      fp.dims.back()[graph_value(target, dims, d)] = 1.0;
    }
    return fp;
  };
  for (int steps : {1, 7, 100}) {
    SampleConfig cfg;
    cfg.n_steps = steps;
    cfg.n_samples = 20;
    for (QMode m : {QMode::point_mass, QMode::prior}) {
      cfg.q_mode = m;
      for (const Graph& g : sample_with(fn, prior, cfg).graphs) EXPECT_EQ(g, target);
    }
  }
}

TEST(Sampler, ExactMarginalPosteriorRecoversTarget) {
  const GraphSpace space(3, 1, 2);
  const Prior prior = three_node_prior({0.6, 0.4});
  const std::vector<double> target = target_distribution(space);
  const auto coupling =
      independent_coupling(space, product_distribution(space, prior.node_marginal, prior.edge_marginal), target);
  for (QMode m : {QMode::point_mass, QMode::prior}) {
    const PathSpec spec{m, prior};
    SampleConfig cfg;
    cfg.n_steps = 100;
    cfg.n_samples = 10000;
    cfg.q_mode = m;
    cfg.seed = 11;
    auto memo = std::make_shared<MemoizedPosterior>(exact_marginal_posterior(space, coupling, spec), cfg.n_steps);
    PosteriorFn fn = [memo](const Graph& g, double t, const Graph& g0) { return (*memo)(g, t, g0); };
    const SampleResult r = sample_with(fn, prior, cfg);
    EXPECT_LT(total_variation(histogram(space, r.graphs), target), 0.03) << to_string(m);
    EXPECT_LE(memo->size(), static_cast<std::size_t>(space.size() * cfg.n_steps));
  }
}

TEST(Sampler, SourceConditionedPosteriorUsesChainSource) {
  const GraphSpace space(3, 1, 2);
  const Prior prior = three_node_prior({0.6, 0.4});
  const std::vector<double> target = target_distribution(space);
  const auto coupling =
      independent_coupling(space, product_distribution(space, prior.node_marginal, prior.edge_marginal), target);
  const PathSpec spec{QMode::point_mass, prior};
  SampleConfig cfg;
  cfg.n_steps = 100;
  cfg.n_samples = 10000;
  cfg.seed = 3;
  const SampleResult r = sample_with(exact_conditioned_posterior(space, coupling, spec), prior, cfg, true);
  EXPECT_LT(total_variation(histogram(space, r.graphs), target), 0.03);
}

TEST(Sampler, ModelSamplingIsDeterministicAndThreadIndependent) {
  const ModelParams mp = init_model(tiny_model(), 2);
  const Prior prior = tiny_prior();
  SampleConfig cfg;
  cfg.n_steps = 10;
  cfg.n_samples = 6;
  cfg.seed = 9;
  const SampleResult a = sample(mp, prior, cfg);
  cfg.threads = 3;
  const SampleResult b = sample(mp, prior, cfg);
  EXPECT_EQ(a.graphs, b.graphs);
  cfg.seed = 10;
  EXPECT_NE(sample(mp, prior, cfg).graphs, a.graphs);
}

TEST(Sampler, SamplesRespectPriorSupport) {
  const ModelParams mp = init_model(tiny_model(), 5);
  const Prior prior = tiny_prior();
  SampleConfig cfg;
  cfg.n_steps = 8;
  cfg.n_samples = 12;
  for (const Graph& g : sample(mp, prior, cfg).graphs) {
    EXPECT_GE(g.size(), 3);
    EXPECT_LE(g.size(), 5);
    for (int i = 0; i < g.size(); ++i) {
      EXPECT_LT(g.node(i), 2);
      EXPECT_EQ(g.edge(i, i), 0);
      for (int j = 0; j < g.size(); ++j) {
        EXPECT_EQ(g.edge(i, j), g.edge(j, i));
        EXPECT_LT(g.edge(i, j), 2);
      }
    }
  }
  cfg.fixed_size = 7;
  for (const Graph& g : sample(mp, prior, cfg).graphs) EXPECT_EQ(g.size(), 7);
}

TEST(Sampler, TrajectoryShapes) {
  const ModelParams mp = init_model(tiny_model(), 6);
  SampleConfig cfg;
  cfg.n_steps = 5;
  cfg.n_samples = 3;
  cfg.record_trajectory = true;
  const SampleResult r = sample(mp, tiny_prior(), cfg);
  ASSERT_EQ(r.trajectories.size(), 3u);
  for (std::size_t c = 0; c < 3; ++c) {
    const Trajectory& tr = r.trajectories[c];
    ASSERT_EQ(tr.times.size(), 6u);
    ASSERT_EQ(tr.states.size(), 6u);
    ASSERT_EQ(tr.log_probs.size(), 5u);
    EXPECT_EQ(tr.times.front(), 0.0);
    EXPECT_EQ(tr.times.back(), 1.0);
    EXPECT_EQ(tr.states.back(), r.graphs[c]);
    for (double lp : tr.log_probs) EXPECT_LE(lp, 0.0);
  }
}

TEST(Sampler, KernelIsEquivariantUnderInvariantPosterior) {
  // Posterior depending only on degree: permuting the state permutes the
  // transition distribution exactly.
  const Prior prior = tiny_prior();
  auto post_of = [](const Graph& g) {
    const GraphDims dims{g.size()};
    FactorizedPosterior fp;
    for (int d = 0; d < dims.count(); ++d) {
      double a;
      if (dims.is_node(d)) {
        int deg = 0;
        for (int j = 0; j < g.size(); ++j) deg += g.edge(d, j) != 0;
        a = 0.1 + 0.15 * deg;
      } else {
        const auto [i, j] = dims.pair_of(d);
        a = 0.2 + 0.3 * g.edge(i, j) + 0.05 * g.node(i) * g.node(j);
      }
      fp.dims.push_back({1.0 - a, a});
    }
    return fp;
  };
  Graph g(4);
  g.set_node(0, 1);
  g.set_node(3, 1);
  g.set_edge(0, 1, 1);
  g.set_edge(1, 2, 1);
  g.set_edge(0, 3, 1);
  const Permutation p(std::vector<int>{2, 0, 3, 1});
  const Graph h = permute(g, p);
  const GraphDims dims{4};
  const StepContext ctx{QMode::point_mass, false, &prior, 1.0, false};
  const auto a = step_transition(post_of(g), g, g, 0.3, 0.01, ctx);
  const auto b = step_transition(post_of(h), h, h, 0.3, 0.01, ctx);
  for (int d = 0; d < dims.count(); ++d) {
    int e;
    if (dims.is_node(d)) {
      e = p(d);
    } else {
      const auto [i, j] = dims.pair_of(d);
      e = dims.pair_index(p(i), p(j));
    }
    EXPECT_EQ(a[d], b[e]);
  }
}

TEST(Sampler, KernelIsEquivariantUnderModelPosterior) {
  const ModelParams mp = init_model(tiny_model(), 8);
  const Prior prior = tiny_prior();
  Rng rng(3);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 3 + trial % 4;
    Graph g(n);
    for (int i = 0; i < n; ++i) g.set_node(i, static_cast<int>(rng.below(2)));
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (rng.bernoulli(0.4)) g.set_edge(i, j, 1);
    std::vector<int> m(n);
    for (int i = 0; i < n; ++i) m[i] = i;
    rng.shuffle(m);
    const Permutation p(m);
    const Graph h = permute(g, p);
    const double t = rng.uniform() * 0.9;
    const StepContext ctx{QMode::point_mass, false, &prior, 1.0, false};
    const auto a = step_transition(posterior_probs(forward(mp, g, t)), g, g, t, 0.01, ctx);
    const auto b = step_transition(posterior_probs(forward(mp, h, t)), h, h, t, 0.01, ctx);
    const GraphDims dims{n};
    for (int d = 0; d < dims.count(); ++d) {
      int e;
      if (dims.is_node(d)) {
        e = p(d);
      } else {
        const auto [i, j] = dims.pair_of(d);
        e = dims.pair_index(p(i), p(j));
      }
      for (std::size_t k = 0; k < a[d].size(); ++k) worst = std::max(worst, std::abs(a[d][k] - b[e][k]));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Sampler, RejectsBadConfig) {
  const ModelParams mp = init_model(tiny_model(), 1);
  SampleConfig cfg;
  cfg.n_steps = 0;
  EXPECT_THROW(sample(mp, tiny_prior(), cfg), PreconditionError);
  cfg.n_steps = 5;
  cfg.temperature = 0.0;
  EXPECT_THROW(sample(mp, tiny_prior(), cfg), PreconditionError);
  cfg.temperature = 1.0;
  Prior wrong = tiny_prior();
  wrong.node_marginal = {1.0};
  EXPECT_THROW(sample(mp, wrong, cfg), PreconditionError);
}

TEST(Sampler, ManifestRecordsSettings) {
  SampleConfig cfg;
  cfg.seed = 42;
  cfg.temperature = 1.5;
  const json m = sample_manifest(cfg, "abc", "def");
  EXPECT_EQ(m["seed"], 42);
  EXPECT_EQ(m["q_mode"], "point_mass");
  EXPECT_EQ(m["checkpoint_hash"], "abc");
  EXPECT_EQ(m["temperature"], 1.5);
}
