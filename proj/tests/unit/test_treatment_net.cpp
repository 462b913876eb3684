#include <gtest/gtest.h>

#include <cmath>

#include "poul/errors.hpp"
#include "poul/treatment_net.hpp"
#include "support.hpp"

namespace poul {
namespace {

using testing::random_spec;

Mlp identity_rho(std::size_t dim) {
  DenseLayer layer{DenseMatrix::identity(dim), std::vector<double>(dim, 0.0), Activation::identity};
  return Mlp({layer});
}

TreatmentNet random_net(const PolicySpec& spec, Rng& rng, std::size_t r = 5, std::size_t d = 3) {
  TreatmentNetConfig cfg;
  cfg.embedding_dim = r;
  cfg.output_dim = d;
  cfg.hidden = {6, 6};
  return TreatmentNet::make(spec, cfg, rng);
}

std::vector<double> loop_aggregate(const TreatmentNet& net, const Mixture& m) {
  std::vector<double> z(net.atoms().dim(), 0.0);
  for (std::size_t i = 0; i < m.alpha.size(); ++i) {
    const auto phi = net.atoms().atom(i);
    for (std::size_t k = 0; k < z.size(); ++k) z[k] += m.alpha[i] * phi[k];
  }
  return z;
}

double norm_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

TEST(Aggregate, PointMassReturnsAtomExactly) {
  Rng rng(1);
  const auto spec = testing::two_by_three_spec();
  const auto net = random_net(spec, rng);
  Mixture m{std::vector<double>(spec.num_atoms(), 0.0)};
  m.alpha[4] = 1.0;
  EXPECT_EQ(net.aggregate(m), net.atoms().atom(4));
}

TEST(Aggregate, UniformOverTwoBasisAtoms) {
  DenseMatrix phi(2, 2, std::vector<double>{1.0, 0.0, 0.0, 1.0});
  AtomTable atoms(1, 2, AtomMode::table, phi);
  TreatmentNet net(atoms, identity_rho(2));
  const auto z = net.aggregate(Mixture{{0.5, 0.5}});
  EXPECT_EQ(z, (std::vector<double>{0.5, 0.5}));
}

TEST(Aggregate, MatchesLoopOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto spec = random_spec(rng, 4, 5, 3);
    const auto net = random_net(spec, rng, 7);
    for (std::size_t t = 0; t < spec.num_policies(); ++t) {
      const auto m = induced_mixture(spec, t);
      const auto z = net.aggregate(m);
      const auto oracle = loop_aggregate(net, m);
      for (std::size_t k = 0; k < z.size(); ++k) EXPECT_NEAR(z[k], oracle[k], 1e-12);
    }
  }
}

TEST(Aggregate, WrongAtomCountIsUnknownId) {
  Rng rng(3);
  const auto spec = testing::two_by_three_spec();
  const auto net = random_net(spec, rng);
  EXPECT_THROW(net.aggregate(Mixture{{1.0, 0.0}}), UnknownIdError);
}

TEST(Aggregate, LinearInMixture) {
  Rng rng(4);
  const auto spec = random_spec(rng, 3, 4, 2);
  const auto net = random_net(spec, rng);
  const auto m1 = induced_mixture(spec, 0);
  const auto m2 = induced_mixture(spec, 1);
  for (double lambda : {0.0, 0.25, 0.7, 1.0}) {
    Mixture mix{std::vector<double>(m1.alpha.size())};
    for (std::size_t i = 0; i < mix.alpha.size(); ++i) mix.alpha[i] = lambda * m1.alpha[i] + (1 - lambda) * m2.alpha[i];
    const auto z = net.aggregate(mix);
    const auto z1 = net.aggregate(m1);
    const auto z2 = net.aggregate(m2);
    for (std::size_t k = 0; k < z.size(); ++k) EXPECT_NEAR(z[k], lambda * z1[k] + (1 - lambda) * z2[k], 1e-12);
  }
}

TEST(Embed, IdentityRhoGivesAggregate) {
  Rng rng(5);
  const auto spec = random_spec(rng, 3, 3, 4);
  AtomTable atoms(3, 3, 9, AtomMode::table, rng);
  TreatmentNet net(atoms, identity_rho(9));
  for (std::size_t t = 0; t < spec.num_policies(); ++t) {
    EXPECT_EQ(net.embed(spec, t), net.aggregate(induced_mixture(spec, t)));
  }
}

TEST(Embed, EqualMixturesGiveEqualEmbeddings) {
  // Same mixture reached by different rows: weights 0.5/0.5 and swapped mass.
  const PolicySpec spec({"s1", "s2"}, {"a", "b"}, {0.5, 0.5}, {"p", "q"},
                        {{1.0, 0.0, 0.0, 1.0}, {1.0, 0.0, 0.0, 1.0}});
  Rng rng(6);
  const auto net = random_net(spec, rng);
  EXPECT_EQ(net.embed(spec, 0), net.embed(spec, 1));
}

TEST(Embed, BitIdenticalUnderPermutation) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto spec = random_spec(rng, 5, 4, 6);
    const auto net = random_net(spec, rng, 8, 4);
    const auto perm = IndexPermutation::random(spec.num_contexts(), spec.num_actions(), rng);
    const auto pspec = permute_spec(spec, perm);
    TreatmentNet pnet(net.atoms().permuted(perm), net.rho());
    for (std::size_t t = 0; t < spec.num_policies(); ++t) EXPECT_EQ(pnet.embed(pspec, t), net.embed(spec, t));
  }
}

TEST(Embed, FactoredAtomsAlsoInvariant) {
  Rng rng(8);
  const auto spec = random_spec(rng, 4, 3, 5);
  TreatmentNetConfig cfg;
  cfg.embedding_dim = 6;
  cfg.output_dim = 2;
  cfg.hidden = {5};
  cfg.atom_mode = AtomMode::factored;
  const auto net = TreatmentNet::make(spec, cfg, rng);
  const auto perm = IndexPermutation::random(4, 3, rng);
  TreatmentNet pnet(net.atoms().permuted(perm), net.rho());
  const auto pspec = permute_spec(spec, perm);
  for (std::size_t t = 0; t < spec.num_policies(); ++t) EXPECT_EQ(pnet.embed(pspec, t), net.embed(spec, t));
}

TEST(EmbedAll, CacheHitIsBitIdenticalAndSkipsAggregation) {
  Rng rng(9);
  const auto spec = random_spec(rng, 3, 3, 100);
  const auto net = random_net(spec, rng);
  const auto first = net.embed_all(spec);
  const auto after_first = net.aggregation_count();
  EXPECT_EQ(after_first, 100u);
  const auto& second = net.embed_all(spec);
  EXPECT_EQ(net.aggregation_count(), after_first);
  EXPECT_EQ(second, first);
  for (std::size_t t = 0; t < spec.num_policies(); ++t) EXPECT_EQ(second[t], net.embed(spec, t));
}

TEST(EmbedAll, OptimizerStepInvalidatesCache) {
  Rng rng(10);
  const auto spec = random_spec(rng, 3, 3, 10);
  auto net = random_net(spec, rng);
  const auto before = net.embed_all(spec);
  const auto version = net.version();

  std::vector<std::size_t> policies{0, 1, 2};
  net.zero_grad();
  net.begin_batch(spec, policies);
  for (auto t : policies) net.accumulate_gradient(t, std::vector<double>(net.output_dim(), 1.0));
  net.finish_backward();
  std::vector<ParamSlot> slots;
  net.append_slots(slots);
  Optimizer opt({OptimizerKind::sgd, 0.1});
  opt.step(slots);
  net.parameters_changed();

  EXPECT_NE(net.version(), version);
  const auto count = net.aggregation_count();
  const auto after = net.embed_all(spec);
  EXPECT_EQ(net.aggregation_count(), count + spec.num_policies());
  EXPECT_NE(after, before);
}

TEST(RhoLipschitz, KnownSpectra) {
  DenseLayer twice{DenseMatrix(3, 3, std::vector<double>{2, 0, 0, 0, 2, 0, 0, 0, 2}), std::vector<double>(3, 0.0),
                   Activation::identity};
  AtomTable atoms(1, 3, AtomMode::table, DenseMatrix::identity(3));
  EXPECT_NEAR(rho_lipschitz_bound(TreatmentNet(atoms, Mlp({twice}))), 2.0, 1e-9);
  EXPECT_NEAR(rho_lipschitz_bound(TreatmentNet(atoms, identity_rho(3))), 1.0, 1e-9);
}

TEST(RhoLipschitz, BoundsEmpiricalRatio) {
  Rng rng(11);
  const auto spec = random_spec(rng, 2, 3, 2);
  const auto net = random_net(spec, rng, 6, 4);
  const double bound = rho_lipschitz_bound(net);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    std::vector<double> u(6), v(6);
    for (std::size_t k = 0; k < 6; ++k) {
      u[k] = rng.normal();
      v[k] = u[k] + 0.1 * rng.normal();
    }
    worst = std::max(worst, norm_diff(net.rho().forward(u), net.rho().forward(v)) / norm_diff(u, v));
  }
  EXPECT_GT(worst, 0.0);
  EXPECT_LE(worst, bound * (1 + 1e-9));
}

TEST(RhoLipschitz, LayerNormInvalidatesBound) {
  Rng rng(12);
  const auto spec = random_spec(rng, 2, 2, 2);
  TreatmentNetConfig cfg;
  cfg.layer_norm = true;
  cfg.output_dim = 2;
  const auto net = TreatmentNet::make(spec, cfg, rng);
  EXPECT_FALSE(rho_bound_is_valid(net));
  EXPECT_TRUE(rho_bound_is_valid(random_net(spec, rng)));
}

TEST(Stability, PerturbedPairsRespectBound) {
  Rng rng(13);
  const auto spec = random_spec(rng, 5, 4, 20);
  const auto net = random_net(spec, rng, 10, 4);
  const double lb = rho_lipschitz_bound(net) * net.atoms().bound();
  for (std::size_t t = 0; t < spec.num_policies(); ++t) {
    const auto eps = rng.uniform(0.0, 0.5);
    const auto pert = perturb_policy(spec, t, eps, "pert", &rng);
    const auto h = net.embed(pert.spec, t);
    const auto hp = net.embed(pert.spec, pert.spec.policy_index("pert"));
    EXPECT_LE(norm_diff(h, hp), lb * policy_distance(pert.spec, t, pert.spec.policy_index("pert")) + 1e-12);
  }
}

TEST(EncoderGradCheck, TableAndFactoredAtoms) {
  Rng rng(15);
  const auto spec = random_spec(rng, 3, 4, 6);
  const std::vector<double> target{0.3, -0.7, 1.1};
  const std::vector<std::size_t> batch{0, 2, 3, 5};
  for (auto mode : {AtomMode::table, AtomMode::factored}) {
    TreatmentNetConfig cfg;
    cfg.embedding_dim = 5;
    cfg.output_dim = 3;
    cfg.hidden = {7};
    cfg.atom_mode = mode;
    auto net = TreatmentNet::make(spec, cfg, rng);
    const auto before = net.embed_all(spec);
    const auto rep = grad_check(net, spec, batch, squared_loss(target), 1e-5);
    EXPECT_TRUE(rep.passed) << rep.worst_parameter << " " << rep.max_relative_error;
    EXPECT_GT(rep.checked, 0u);
    EXPECT_EQ(net.embed_all(spec), before);
  }
}

TEST(Checkpoint, SaveLoadRoundTrip) {
  Rng rng(14);
  const auto spec = random_spec(rng, 3, 2, 4);
  const auto net = random_net(spec, rng);
  ParameterCheckpoint ck;
  net.save(ck);
  const auto back = TreatmentNet::load(ParameterCheckpoint::from_json(ck.to_json()));
  for (std::size_t t = 0; t < spec.num_policies(); ++t) EXPECT_EQ(back.embed(spec, t), net.embed(spec, t));
}

}  // namespace
}  // namespace poul
