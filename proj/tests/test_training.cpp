#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "flowgraph/checkpoint.hpp"
#include "flowgraph/datasets.hpp"
#include "flowgraph/training.hpp"

using namespace flowgraph;

namespace {

ModelConfig tiny_config(int node_types = 2, int edge_types = 3) {
  ModelConfig c;
  c.node_types = node_types;
  c.edge_types = edge_types;
  c.layers = 2;
  c.heads = 2;
  c.dx = 8;
  c.de = 8;
  c.dy = 8;
  c.dropout = 0.0;
  c.max_nodes = 24;
  return c;
}

Graph random_graph(int n, int nt, int et, Rng& rng) {
  Graph g(n);
  for (int i = 0; i < n; ++i) g.set_node(i, static_cast<int>(rng.below(nt)));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (rng.bernoulli(0.4)) g.set_edge(i, j, 1 + static_cast<int>(rng.below(et - 1)));
  return g;
}

// Scalar-loop cross-entropy written independently of ce_loss.
double reference_loss(const PosteriorLogits& lg, const Graph& g, double w) {
  auto nll = [](const double* z, int K, int target) {
    double mx = z[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, z[k]);
    double s = 0;
    for (int k = 0; k < K; ++k) s += std::exp(z[k] - mx);
    return -(z[target] - mx - std::log(s));
  };
  const int n = g.size();
  double node = 0, edge = 0;
  int pairs = 0;
  for (int i = 0; i < n; ++i) node += nll(lg.node_row(i), lg.node_types, g.node(i));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j, ++pairs) edge += nll(lg.edge_row(i, j), lg.edge_types, g.edge(i, j));
  return node / n + w * (pairs ? edge / pairs : 0.0);
}

std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("flowgraph_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace

TEST(CeLoss, UniformLogitsGiveLogK) {
  PosteriorLogits lg;
  lg.n = lg.N = 3;
  lg.node_types = 4;
  lg.edge_types = 2;
  lg.node_logits.assign(3 * 4, 0.7);
  lg.edge_logits.assign(9 * 2, -1.0);
  lg.mask.assign(3, 1);
  Graph g(3);
  g.set_node(0, 3);
  g.set_edge(0, 2, 1);
  const LossReport r = ce_loss(lg, g, 5.0);
  EXPECT_NEAR(r.node_term, std::log(4.0), 1e-12);
  EXPECT_NEAR(r.edge_term, std::log(2.0), 1e-12);
  EXPECT_NEAR(r.total, r.node_term + 5.0 * r.edge_term, 1e-12);
}

TEST(CeLoss, LargeMarginOneHotGivesZero) {
  PosteriorLogits lg;
  lg.n = lg.N = 2;
  lg.node_types = 2;
  lg.edge_types = 2;
  lg.node_logits = {60, 0, 0, 60};
  lg.edge_logits = {0, 0, 0, 60, 0, 60, 0, 0};
  Graph g(2);
  g.set_node(1, 1);
  g.set_edge(0, 1, 1);
  EXPECT_LT(ce_loss(lg, g, 5.0).total, 1e-20);
}

TEST(CeLoss, MatchesScalarLoopAndTapeLoss) {
  const ModelConfig cfg = tiny_config();
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const ModelParams mp = init_model(cfg, 40 + trial);
    const Graph gt = random_graph(3 + trial, 2, 3, rng), g1 = random_graph(3 + trial, 2, 3, rng);
    const PosteriorLogits lg = forward(mp, gt, 0.3);
    EXPECT_NEAR(ce_loss(lg, g1, 5.0).total, reference_loss(lg, g1, 5.0), 1e-12);
    EXPECT_NEAR(loss_and_grad(mp, gt, 0.3, g1, 5.0).report.total, reference_loss(lg, g1, 5.0), 1e-12);
  }
}

TEST(CeLoss, ShapeMismatchThrows) {
  const ModelParams mp = init_model(tiny_config(), 1);
  const PosteriorLogits lg = forward(mp, Graph(3), 0.5);
  EXPECT_THROW(ce_loss(lg, Graph(4), 1.0), PreconditionError);
}

TEST(CeLoss, PermutationInvariant) {
  const ModelConfig cfg = tiny_config();
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelParams mp = init_model(cfg, trial);
    const int n = 3 + trial % 4;
    const Graph g = random_graph(n, 2, 3, rng);
    std::vector<int> m(n);
    for (int i = 0; i < n; ++i) m[i] = i;
    rng.shuffle(m);
    const Permutation p(m);
    const double a = ce_loss(forward(mp, g, 0.6), g, 5.0).total;
    const double b = ce_loss(forward(mp, permute(g, p), 0.6), permute(g, p), 5.0).total;
    EXPECT_NEAR(a, b, 1e-9);
  }
}

TEST(GradCheck, TwoLayerModelOnFourNodes) {
  ModelConfig cfg = tiny_config();
  const ModelParams mp = init_model(cfg, 11);
  Rng rng(12);
  const Graph gt = random_graph(4, 2, 3, rng), g1 = random_graph(4, 2, 3, rng);
  const GradCheckResult r = grad_check(mp, gt, 0.4, 1e-5, 200, 1, &g1);
  EXPECT_GE(r.checked, 180);
  EXPECT_LT(r.max_rel_error, 1e-4);
  // Every tensor was exercised.
  EXPECT_EQ(r.per_tensor.size() + 0u, mp.params.count());
}

TEST(GradCheck, LiteralAttentionAndConditioning) {
  ModelConfig cfg = tiny_config();
  cfg.literal_attention = true;
  const ModelParams mp = init_model(cfg, 13);
  Rng rng(14);
  const Graph g = random_graph(4, 2, 3, rng);
  EXPECT_LT(grad_check(mp, g, 0.2, 1e-5, 200, 2).max_rel_error, 1e-4);
}

TEST(GradCheck, ZeroLossHasVanishingGradient) {
  ModelConfig cfg = tiny_config();
  ModelParams mp = init_model(cfg, 15);
  std::fill(mp.params.get("out_x.w").values.begin(), mp.params.get("out_x.w").values.end(), 0.0);
  std::fill(mp.params.get("out_e.w").values.begin(), mp.params.get("out_e.w").values.end(), 0.0);
  mp.params.get("out_x.b").values = {40, 0};
  mp.params.get("out_e.b").values = {40, 0, 0};
  const Graph g(4);  // all nodes type 0, no edges
  const LossAndGrad lg = loss_and_grad(mp, g, 0.5, g, 5.0);
  EXPECT_LT(lg.report.total, 1e-15);
  for (double v : lg.grad) EXPECT_LT(std::abs(v), 1e-15);
}

TEST(GradCheck, DoublingEpsQuadruplesTruncationError) {
  ModelConfig cfg = tiny_config();
  const ModelParams mp = init_model(cfg, 16);
  Rng rng(17);
  const Graph gt = random_graph(4, 2, 3, rng), g1 = random_graph(4, 2, 3, rng);
  const LossAndGrad lg = loss_and_grad(mp, gt, 0.4, g1, 5.0);
  // Large eps so truncation error dominates rounding.
  const int k = static_cast<int>(mp.params.find("out_e.w"));
  std::size_t off = 0;
  for (int i = 0; i < k; ++i) off += mp.params[i].values.size();
  std::vector<double> ratios;
  ModelParams work = mp;
  for (int i = 0; i < 6; ++i) {
    auto err = [&](double eps) {
      const double x0 = mp.params[k].values[i];
      work.params[k].values[i] = x0 + eps;
      const double fp = ce_loss(forward(work, gt, 0.4), g1, 5.0).total;
      work.params[k].values[i] = x0 - eps;
      const double fm = ce_loss(forward(work, gt, 0.4), g1, 5.0).total;
      work.params[k].values[i] = x0;
      return std::abs((fp - fm) / (2 * eps) - lg.grad[off + i]);
    };
    const double e1 = err(2e-2), e2 = err(4e-2);
    if (e1 > 1e-9) ratios.push_back(e2 / e1);
  }
  ASSERT_GE(ratios.size(), 3u);
  std::sort(ratios.begin(), ratios.end());
  const double median = ratios[ratios.size() / 2];
  EXPECT_GT(median, 3.0);
  EXPECT_LT(median, 5.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamSet ps;
  ps.add("w", 1, 3, {1.0, 2.0, 3.0});
  AdamState st;
  AdamOptions o;
  o.lr = 0.1;
  o.clip_norm = 100.0;
  adam_update(ps, {0.5, -0.25, 0.0}, st, o);
  EXPECT_NEAR(ps[0].values[0], 0.9, 1e-7);
  EXPECT_NEAR(ps[0].values[1], 2.1, 1e-7);
  EXPECT_EQ(ps[0].values[2], 3.0);
}

TEST(Adam, ClipsGlobalNorm) {
  ParamSet ps;
  ps.add("w", 1, 2, {0.0, 0.0});
  AdamState st;
  AdamOptions o;
  o.lr = 1.0;
  o.clip_norm = 1.0;
  const double norm = adam_update(ps, {30.0, 40.0}, st, o);
  EXPECT_DOUBLE_EQ(norm, 50.0);
  // First moment holds the clipped gradient (0.6, 0.8) scaled by 1 - beta1.
  EXPECT_NEAR(st.m[0], 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(st.m[1], 0.1 * 0.8, 1e-15);
  EXPECT_THROW(adam_update(ps, {NAN, 0.0}, st, o), NumericalError);
}

TEST(TrainStep, ZeroLearningRateLeavesParamsBitExact) {
  const auto data = gen_community_small(4, 1);
  const Prior prior = empirical_prior(data, 1, 2);
  ModelParams mp = init_model(tiny_config(1, 2), 2);
  const ModelParams before = mp;
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  AdamState st;
  std::vector<Graph> batch(data.begin(), data.begin() + 1);
  train_step(mp, batch, prior, cfg, st, 0);
  EXPECT_TRUE(mp == before);
}

TEST(TrainStep, OtLowersPairCostOnIdenticalCodePath) {
  const auto data = gen_community_small(64, 3);
  const Prior prior = empirical_prior(data, 1, 2);
  std::vector<Graph> same_size;
  for (const Graph& g : data)
    if (g.size() == data[0].size()) same_size.push_back(g);
  ASSERT_GE(same_size.size(), 4u);
  TrainConfig a, b;
  a.coupling_mode = CouplingMode::independent;
  b.coupling_mode = CouplingMode::ot;
  double ind = 0, ot = 0;
  for (long step = 0; step < 20; ++step) {
    double ca = 0, cb = 0;
    const auto ea = make_examples(same_size, prior, a, step, &ca);
    const auto eb = make_examples(same_size, prior, b, step, &cb);
    // Same noise graphs, only the pairing differs.
    std::multiset<std::string> na, nb;
    for (const auto& e : ea) na.insert(serialize_graph_record(e.g0));
    for (const auto& e : eb) nb.insert(serialize_graph_record(e.g0));
    EXPECT_EQ(na, nb);
    ind += ca;
    ot += cb;
  }
  EXPECT_LT(ot, ind);
}

TEST(TrainStep, NoisyGraphInterpolatesEndpoints) {
  const auto data = gen_community_small(8, 5);
  const Prior prior = empirical_prior(data, 1, 2);
  TrainConfig cfg;
  std::vector<Graph> batch(data.begin(), data.begin() + 1);
  for (long step = 0; step < 30; ++step) {
    const auto ex = make_examples(batch, prior, cfg, step);
    const GraphDims dims{ex[0].g1.size()};
    for (int d = 0; d < dims.count(); ++d) {
      const int v = graph_value(ex[0].gt, dims, d);
      EXPECT_TRUE(v == graph_value(ex[0].g0, dims, d) || v == graph_value(ex[0].g1, dims, d));
    }
  }
}

TEST(TrainLoop, ZeroStepsReturnsInit) {
  const auto data = gen_community_small(4, 1);
  const Prior prior = empirical_prior(data, 1, 2);
  const ModelParams mp = init_model(tiny_config(1, 2), 2);
  TrainConfig cfg;
  cfg.steps = 0;
  EXPECT_TRUE(train_loop(data, prior, mp, cfg) == mp);
}

TEST(TrainLoop, DeterministicAndThreadCountIndependent) {
  const auto data = gen_community_small(12, 9);
  const Prior prior = empirical_prior(data, 1, 2);
  ModelConfig mc = tiny_config(1, 2);
  mc.dropout = 0.1;
  const ModelParams mp = init_model(mc, 2);
  TrainConfig cfg;
  cfg.steps = 100;
  cfg.batch_size = 4;
  cfg.seed = 5;
  std::vector<LossReport> r1, r2, r3;
  TrainLoopOptions o1, o2, o3;
  o1.on_step = [&](const LossReport& r) { r1.push_back(r); };
  o2.on_step = [&](const LossReport& r) { r2.push_back(r); };
  o3.on_step = [&](const LossReport& r) { r3.push_back(r); };
  const ModelParams a = train_loop(data, prior, mp, cfg, o1);
  const ModelParams b = train_loop(data, prior, mp, cfg, o2);
  cfg.threads = 3;
  const ModelParams c = train_loop(data, prior, mp, cfg, o3);
  EXPECT_TRUE(a == b);
  EXPECT_TRUE(a == c);
  EXPECT_EQ(r1, r2);
  EXPECT_EQ(r1, r3);
  EXPECT_EQ(checkpoint_hash(a), checkpoint_hash(c));
}

TEST(TrainLoop, LossDecreasesOnSmallDataset) {
  const auto data = gen_community_small(8, 21);
  const Prior prior = empirical_prior(data, 1, 2);
  const ModelParams mp = init_model(tiny_config(1, 2), 3);
  TrainConfig cfg;
  cfg.steps = 300;
  cfg.batch_size = 4;
  cfg.learning_rate = 3e-3;
  std::vector<double> losses;
  TrainLoopOptions o;
  o.on_step = [&](const LossReport& r) { losses.push_back(r.total); };
  train_loop(data, prior, mp, cfg, o);
  double early = 0, late = 0;
  for (int i = 0; i < 50; ++i) {
    early += losses[i] / 50;
    late += losses[losses.size() - 1 - i] / 50;
  }
  EXPECT_LT(late, 0.8 * early);
}

TEST(TrainLoop, WritesCheckpointsAndLog) {
  const std::string dir = temp_dir("ckpt");
  const auto data = gen_community_small(4, 2);
  const Prior prior = empirical_prior(data, 1, 2);
  const ModelParams mp = init_model(tiny_config(1, 2), 3);
  TrainConfig cfg;
  cfg.steps = 6;
  cfg.batch_size = 2;
  cfg.checkpoint_interval = 3;
  TrainLoopOptions o;
  o.checkpoint_dir = dir + "/ck";
  o.log_path = dir + "/log.jsonl";
  const ModelParams out = train_loop(data, prior, mp, cfg, o);
  EXPECT_TRUE(std::filesystem::exists(dir + "/ck/step_3.json"));
  EXPECT_TRUE(load_checkpoint(dir + "/ck/step_6.json") == out);
  std::ifstream in(o.log_path);
  int lines = 0;
  for (std::string line; std::getline(in, line);) {
    const json j = json::parse(line);
    EXPECT_EQ(j.at("step").get<int>(), lines);
    ++lines;
  }
  EXPECT_EQ(lines, 6);
}

TEST(TrainLoop, RejectsBadInputs) {
  const auto data = gen_community_small(2, 2);
  const Prior prior = empirical_prior(data, 1, 2);
  ModelConfig mc = tiny_config(1, 2);
  mc.max_nodes = 8;
  TrainConfig cfg;
  EXPECT_THROW(train_loop(data, prior, init_model(mc, 1), cfg), CapacityError);
  cfg.batch_size = 0;
  EXPECT_THROW(train_loop(data, prior, init_model(tiny_config(1, 2), 1), cfg), PreconditionError);
  EXPECT_THROW(train_loop({}, prior, init_model(tiny_config(1, 2), 1), TrainConfig{}), PreconditionError);
}

TEST(Checkpoint, BitExactRoundTrip) {
  const std::string dir = temp_dir("rt");
  ModelParams mp = init_model(tiny_config(), 77);
  mp.params[0].values[0] = 0.1 + 0.2;  // not exactly representable in short decimal
  mp.params[0].values[1] = -1e-310;    // subnormal
  mp.params[0].values[2] = 1.0 / 3.0;
  save_checkpoint(dir + "/m.json", mp);
  const ModelParams back = load_checkpoint(dir + "/m.json");
  ASSERT_TRUE(back == mp);
  for (std::size_t k = 0; k < mp.params.count(); ++k)
    for (std::size_t i = 0; i < mp.params[k].values.size(); ++i)
      EXPECT_EQ(std::memcmp(&back.params[k].values[i], &mp.params[k].values[i], sizeof(double)), 0);
  EXPECT_EQ(checkpoint_hash(back), checkpoint_hash(mp));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const ModelParams mp = init_model(tiny_config(), 1);
  json j = checkpoint_to_json(mp);
  json bad = j;
  bad["hyperparameters"]["bogus"] = 1;
  EXPECT_THROW(checkpoint_from_json(bad), ParseError);
  bad = j;
  bad["tensors"][0]["shape"] = {1, 1};
  EXPECT_THROW(checkpoint_from_json(bad), ParseError);
  bad = j;
  bad["format_version"] = 99;
  EXPECT_THROW(checkpoint_from_json(bad), ParseError);
  bad = j;
  bad["tensors"].erase(0);
  EXPECT_THROW(checkpoint_from_json(bad), ParseError);
  EXPECT_NE(checkpoint_hash(mp), checkpoint_hash(init_model(tiny_config(), 2)));
}
