#include <gtest/gtest.h>

#include "flowgraph/oracle.hpp"

using namespace flowgraph;

namespace {

Prior uniform_prior(int nt, int et, int n) {
  Prior p;
  p.node_marginal.assign(nt, 1.0 / nt);
  p.edge_marginal.assign(et, 1.0 / et);
  p.size_distribution.assign(n + 1, 0.0);
  p.size_distribution[n] = 1.0;
  return p;
}

std::vector<double> random_dist(std::int64_t size, Rng& rng, double zero_fraction = 0.0) {
  std::vector<double> p(size);
  double s = 0;
  for (double& v : p) s += (v = rng.uniform() < zero_fraction ? 0.0 : rng.uniform());
  for (double& v : p) v /= s;
  return p;
}

}  // namespace

TEST(GraphSpaceType, IndexRoundTrip) {
  const GraphSpace space(3, 2, 3);
  EXPECT_EQ(space.size(), 8 * 27);
  for (std::int64_t s = 0; s < space.size(); ++s) EXPECT_EQ(space.index(space.at(s)), s);
}

TEST(GraphSpaceType, RefusesLargeSpaces) {
  EXPECT_THROW(GraphSpace(4, 2, 2), CapacityError);
  EXPECT_THROW(GraphSpace(3, 40, 40), CapacityError);
}

TEST(MarginalVelocity, DegenerateCouplingEqualsConditional) {
  const GraphSpace space(2, 2, 2);
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Graph g0 = space.at(rng.below(space.size())), g1 = space.at(rng.below(space.size()));
    const std::vector<CouplingEntry> coupling{{g0, g1, 1.0}};
    const double t = 0.1 + 0.8 * rng.uniform();
    for (QMode mode : {QMode::point_mass, QMode::prior}) {
      const PathSpec spec{mode, uniform_prior(2, 2, 2)};
      for (std::int64_t s = 0; s < space.size(); ++s) {
        const Graph gt = space.at(s);
        if (conditional_graph_prob(space, gt, coupling[0], t, spec) == 0.0) continue;
        const auto u = marginal_velocity_oracle(space, gt, t, coupling, spec);
        for (int d = 0; d < space.dims().count(); ++d) {
          const RateVector c = conditional_velocity(CategoricalState(graph_value(gt, space.dims(), d), 2),
                                                    CategoricalState(graph_value(g1, space.dims(), d), 2),
                                                    dimension_params(spec, g0, space.dims(), d, t, 2));
          for (int k = 0; k < 2; ++k) EXPECT_NEAR(u[d].rates[k], c.rates[k], 1e-12);
        }
      }
    }
  }
}

TEST(MarginalVelocity, KolmogorovAtInteriorTimes) {
  Rng rng(2);
  const GraphSpace space(2, 2, 2);
  for (QMode mode : {QMode::point_mass, QMode::prior}) {
    const Prior prior = uniform_prior(2, 2, 2);
    const PathSpec spec{mode, prior};
    const auto coupling =
        independent_coupling(space, product_distribution(space, prior.node_marginal, prior.edge_marginal),
                             random_dist(space.size(), rng));
    for (int k = 0; k <= 10; ++k) {
      const double t = 0.05 + 0.09 * k;
      EXPECT_LT(kolmogorov_residual(space, t, coupling, spec), 1e-6) << "t=" << t;
    }
  }
}

TEST(MarginalVelocity, KolmogorovThreeNodeNonUniform) {
  Rng rng(3);
  const GraphSpace space(3, 2, 2);
  Prior prior = uniform_prior(2, 2, 3);
  prior.node_marginal = {0.7, 0.3};
  prior.edge_marginal = {0.6, 0.4};
  for (QMode mode : {QMode::point_mass, QMode::prior}) {
    const PathSpec spec{mode, prior};
    const auto coupling =
        independent_coupling(space, product_distribution(space, prior.node_marginal, prior.edge_marginal),
                             random_dist(space.size(), rng, 0.5));
    for (double t : {0.05, 0.5, 0.95}) EXPECT_LT(kolmogorov_residual(space, t, coupling, spec), 1e-6);
  }
}

TEST(MarginalVelocity, SwapEquivariance) {
  const GraphSpace space(2, 2, 2);
  Rng rng(4);
  const Permutation swap({1, 0});
  // Coupling invariant under swapping both graphs' nodes.
  std::vector<CouplingEntry> coupling;
  for (int k = 0; k < 6; ++k) {
    const Graph a = space.at(rng.below(space.size())), b = space.at(rng.below(space.size()));
    const double w = rng.uniform();
    coupling.push_back({a, b, w});
    coupling.push_back({permute(a, swap), permute(b, swap), w});
  }
  const PathSpec spec{QMode::point_mass, uniform_prior(2, 2, 2)};
  for (std::int64_t s = 0; s < space.size(); ++s) {
    const Graph gt = space.at(s);
    const auto u = marginal_velocity_oracle(space, gt, 0.4, coupling, spec);
    const auto up = marginal_velocity_oracle(space, permute(gt, swap), 0.4, coupling, spec);
    // Node dims swap, the single edge dim maps to itself.
    for (int k = 0; k < 2; ++k) {
      EXPECT_NEAR(u[0].rates[k], up[1].rates[k], 1e-12);
      EXPECT_NEAR(u[1].rates[k], up[0].rates[k], 1e-12);
      EXPECT_NEAR(u[2].rates[k], up[2].rates[k], 1e-12);
    }
  }
}

TEST(ExactSampler, PointMassCoupling) {
  const GraphSpace space(2, 2, 2);
  const Graph g0 = space.at(3), g1 = space.at(5);
  for (int steps : {1, 7, 50}) {
    const auto res = exact_sampler_oracle(space, {{g0, g1, 1.0}}, PathSpec{}, {steps, 200, 1, {}});
    EXPECT_DOUBLE_EQ(res.terminal[5], 1.0);
  }
}

TEST(ExactSampler, UniformTwoStateTarget) {
  const GraphSpace space(2, 2, 2);
  const Prior prior = uniform_prior(2, 2, 2);
  std::vector<double> target(space.size(), 0.0);
  target[0] = target[space.size() - 1] = 0.5;
  const auto coupling =
      independent_coupling(space, product_distribution(space, prior.node_marginal, prior.edge_marginal), target);
  const auto r500 = exact_sampler_oracle(space, coupling, PathSpec{QMode::point_mass, prior}, {500, 100000, 7, {}});
  const double tv500 = total_variation(r500.terminal, target);
  EXPECT_LE(tv500, 0.02);
  const auto r50 = exact_sampler_oracle(space, coupling, PathSpec{QMode::point_mass, prior}, {50, 100000, 7, {}});
  EXPECT_LE(total_variation(r50.terminal, target), std::max(2 * tv500, 0.02));
}

TEST(ExactSampler, MixturePathReproducesMarginals) {
  const GraphSpace space(2, 2, 2);
  Rng rng(8);
  Prior prior = uniform_prior(2, 2, 2);
  prior.node_marginal = {0.3, 0.7};
  const std::vector<double> target = random_dist(space.size(), rng);
  const PathSpec spec{QMode::prior, prior};
  const auto coupling =
      independent_coupling(space, product_distribution(space, prior.node_marginal, prior.edge_marginal), target);
  const auto res = exact_sampler_oracle(space, coupling, spec, {200, 40000, 3, {50, 100, 150}});
  for (int s : {50, 100, 150})
    EXPECT_LE(total_variation(res.recorded.at(s), marginal_path(space, s / 200.0, coupling, spec)), 0.02);
  EXPECT_LE(total_variation(res.terminal, target), 0.02);
}
