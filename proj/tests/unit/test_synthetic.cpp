#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "poul/errors.hpp"
#include "poul/harness.hpp"
#include "poul/synthetic.hpp"
#include "support.hpp"

namespace poul {
namespace {

using testing::small_gen;

std::vector<std::size_t> policy_counts(const Dataset& data, std::size_t policies) {
  std::vector<std::size_t> counts(policies, 0);
  for (auto t : data.treatments()) ++counts.at(t);
  return counts;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

// max over (feature, policy) of |corr(x_j, 1{T = t})|
double max_assignment_correlation(const Dataset& data, std::size_t policies) {
  double worst = 0.0;
  for (std::size_t j = 0; j < data.num_features(); ++j) {
    std::vector<double> xj(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) xj[i] = data.x(i)[j];
    for (std::size_t t = 0; t < policies; ++t) {
      std::vector<double> ind(data.size());
      bool any = false;
      for (std::size_t i = 0; i < data.size(); ++i) {
        ind[i] = data.t(i) == t ? 1.0 : 0.0;
        any = any || ind[i] > 0;
      }
      if (any) worst = std::max(worst, std::abs(correlation(xj, ind)));
    }
  }
  return worst;
}

TEST(GenConfig, ValidationAndRoundTrip) {
  auto c = small_gen();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(GenConfig::from_json(c.to_json()).to_json().dump(), c.to_json().dump());
  auto bad = c;
  bad.held_out = 1.0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = c;
  bad.zipf_exponent = 0.0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = c;
  bad.noise_sd = -1.0;
  EXPECT_THROW(bad.validate(), ValidationError);
  auto doc = c.to_json();
  doc["bogus"] = true;
  EXPECT_THROW(GenConfig::from_json(doc), ValidationError);
}

TEST(Generate, ShapesAndSplit) {
  auto c = small_gen(3, 5000);
  const auto syn = generate(c);
  EXPECT_EQ(syn.train.size() + syn.test.size(), 5000u);
  EXPECT_EQ(syn.test.size(), c.num_test_rows());
  EXPECT_EQ(syn.spec.num_policies(), c.num_policies);
  EXPECT_EQ(syn.held_out.size(), c.num_held_out());
  EXPECT_EQ(syn.train.num_features(), c.num_features);
  EXPECT_EQ(syn.control, 0u);
  const auto counts = policy_counts(syn.train, syn.spec.num_policies());
  EXPECT_EQ(*std::max_element(counts.begin(), counts.end()), counts[syn.control]);
}

TEST(Generate, DeterministicGivenSeed) {
  const auto a = generate(small_gen(4));
  const auto b = generate(small_gen(4));
  EXPECT_EQ(dataset_to_jsonl(a.train, a.spec), dataset_to_jsonl(b.train, b.spec));
  EXPECT_EQ(dataset_to_jsonl(a.test, a.spec), dataset_to_jsonl(b.test, b.spec));
  EXPECT_EQ(a.oracle->to_json().dump(), b.oracle->to_json().dump());
  const auto c = generate(small_gen(5));
  EXPECT_NE(dataset_to_jsonl(a.train, a.spec), dataset_to_jsonl(c.train, c.spec));
}

TEST(Generate, NullEffectNoNoise) {
  auto c = small_gen(6, 2000);
  c.noise_sd = 0.0;
  c.effect_scale = 0.0;
  const auto syn = generate(c);
  for (std::size_t i = 0; i < syn.train.size(); ++i) {
    EXPECT_EQ(syn.train.y(i), syn.oracle->m0(syn.train.x(i)));
  }
  for (std::size_t i = 0; i < 50; ++i) {
    for (std::size_t t = 0; t < syn.spec.num_policies(); ++t) {
      EXPECT_EQ(true_cate(*syn.oracle, syn.spec, syn.test.x(i), t, syn.control), 0.0);
    }
  }
  EXPECT_EQ(true_ate(*syn.oracle, syn.spec, syn.test, 1, 0), 0.0);
}

TEST(Generate, RctFrequenciesMatchProfile) {
  auto c = small_gen(7, 40000);
  c.test_fraction = 0.0;
  c.held_out = 0.0;
  const auto syn = generate(c);
  const auto counts = policy_counts(syn.train, syn.spec.num_policies());
  const auto& profile = syn.oracle->train_profile();
  const double n = static_cast<double>(syn.train.size());
  for (std::size_t t = 0; t < profile.size(); ++t) {
    const double se = std::sqrt(profile[t] * (1 - profile[t]) / n);
    EXPECT_LT(std::abs(counts[t] / n - profile[t]), 3 * se) << "policy " << t;
  }
}

TEST(Generate, ZipfTailIsThin) {
  GenConfig c;
  c.n = 50000;
  c.test_fraction = 0.0;
  c.held_out = 0.0;
  c.num_policies = 50;
  c.zipf_exponent = 1.5;
  c.seed = 8;
  const auto syn = generate(c);
  // Mass ratio of the last to the first zipf rank.
  EXPECT_LT(std::pow(50.0, -1.5), 0.01);
  const auto counts = policy_counts(syn.train, 50);
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  EXPECT_LT(static_cast<double>(*lo), 0.01 * static_cast<double>(*hi));
}

TEST(Generate, WellSpecifiedResiduals) {
  auto c = small_gen(9, 40000);
  const auto syn = generate(c);
  const auto& data = syn.train;
  double mean = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    mean += (data.y(i) - syn.oracle->mean_outcome(data.x(i), data.t(i))) / static_cast<double>(data.size());
  }
  EXPECT_LT(std::abs(mean), 3 * c.noise_sd / std::sqrt(static_cast<double>(data.size())));
}

TEST(Generate, MeanOutcomeDecomposes) {
  const auto syn = generate(small_gen(10));
  for (std::size_t i = 0; i < 20; ++i) {
    const auto x = syn.test.x(i);
    for (std::size_t t = 0; t < syn.spec.num_policies(); ++t) {
      const double direct = syn.oracle->m0(x) + dot(syn.oracle->g0(x), syn.oracle->effect_of(induced_mixture(syn.spec, t)));
      EXPECT_NEAR(syn.oracle->mean_outcome(x, t), direct, 1e-12);
    }
  }
}

TEST(Generate, RctUncorrelatedObservationalConfounded) {
  auto c = small_gen(12, 40000);
  c.test_fraction = 0.0;
  c.held_out = 0.0;
  const double n = 40000.0;
  const auto rct = generate(c);
  // 3/sqrt(n) per pair, held family-wise over the feature x policy grid.
  const double band = familywise_z(c.num_features * c.num_policies) / std::sqrt(n);
  EXPECT_LT(max_assignment_correlation(rct.train, c.num_policies), band);
  c.regime = Regime::observational;
  const auto obs = generate(c);
  EXPECT_GT(max_assignment_correlation(obs.train, c.num_policies), 10 / std::sqrt(n));
}

TEST(Generate, StratifiedAssignsStrataFromFirstFeature) {
  auto c = small_gen(13, 4000);
  c.regime = Regime::stratified;
  const auto syn = generate(c);
  ASSERT_TRUE(syn.train.has_strata());
  EXPECT_EQ(syn.train.stratum_names().size(), c.num_strata);
  for (std::size_t i = 0; i < syn.train.size(); ++i) {
    EXPECT_EQ(syn.train.stratum(i), syn.oracle->stratum_of(syn.train.x(i)));
  }
}

TEST(Generate, HeldOutPoliciesOnlyInTest) {
  auto c = small_gen(14, 6000);
  c.num_policies = 20;
  c.held_out = 0.2;
  const auto syn = generate(c);
  ASSERT_EQ(syn.held_out.size(), 4u);
  std::set<std::size_t> train_set(syn.train.treatments().begin(), syn.train.treatments().end());
  std::set<std::size_t> test_set(syn.test.treatments().begin(), syn.test.treatments().end());
  for (std::size_t k = 0; k < syn.held_out.size(); ++k) {
    EXPECT_EQ(train_set.count(syn.held_out[k]), 0u);
    EXPECT_EQ(test_set.count(syn.held_out[k]), 1u);
    EXPECT_LE(policy_distance(syn.spec, syn.held_out[k], syn.parents[k]), c.held_out_epsilon + 1e-12);
  }
}

TEST(TrueCate, DegenerateAntisymmetricLinear) {
  const auto syn = generate(small_gen(15));
  const auto& o = *syn.oracle;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto x = syn.test.x(i);
    const auto a = induced_mixture(syn.spec, 2);
    const auto b = induced_mixture(syn.spec, 5);
    std::vector<double> diff(a.alpha.size());
    for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = a.alpha[k] - b.alpha[k];
    const double oracle = dot(o.g0(x), matvec(o.linear_map(), diff));
    EXPECT_NEAR(true_cate(o, syn.spec, x, 2, 5), oracle, 1e-12);
    EXPECT_EQ(true_cate(o, syn.spec, x, 3, 3), 0.0);
    EXPECT_EQ(true_cate(o, syn.spec, x, 2, 5), -true_cate(o, syn.spec, x, 5, 2));
  }
  EXPECT_THROW(true_cate(o, syn.spec, syn.test.x(0), 99, 0), UnknownIdError);
}

TEST(TrueCate, DuplicatedPolicyHasZeroEffect) {
  const auto syn = generate(small_gen(16));
  const auto spec = syn.spec.with_policy("dup", syn.spec.table(3));
  const auto dup = spec.policy_index("dup");
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(true_cate(*syn.oracle, spec, syn.test.x(i), dup, 3), 0.0);
}

TEST(TrueCate, NetEffectMapMatchesDirectEvaluation) {
  auto c = small_gen(17);
  c.effect_map = EffectMap::net;
  const auto syn = generate(c);
  const auto& o = *syn.oracle;
  const auto x = syn.test.x(0);
  const double direct = dot(o.g0(x), o.effect_of(induced_mixture(syn.spec, 1))) -
                        dot(o.g0(x), o.effect_of(induced_mixture(syn.spec, 0)));
  EXPECT_NEAR(true_cate(o, syn.spec, x, 1, 0), direct, 1e-12);
}

TEST(TrueAte, MeanOfCate) {
  const auto syn = generate(small_gen(18));
  const auto& o = *syn.oracle;
  Dataset one(syn.test.num_features());
  one.add_row(syn.test.x(0), 0, 0.0);
  EXPECT_EQ(true_ate(o, syn.spec, one, 4, 1), true_cate(o, syn.spec, syn.test.x(0), 4, 1));

  // Two-pass mean: sum first, divide once.
  double sum = 0.0;
  for (std::size_t i = 0; i < syn.test.size(); ++i) sum += true_cate(o, syn.spec, syn.test.x(i), 4, 1);
  EXPECT_NEAR(true_ate(o, syn.spec, syn.test, 4, 1), sum / static_cast<double>(syn.test.size()), 1e-12);
  EXPECT_THROW(true_ate(o, syn.spec, Dataset(syn.test.num_features()), 4, 1), ValidationError);
}

TEST(OracleFile, RoundTripReproducesCate) {
  for (auto map : {EffectMap::linear, EffectMap::net}) {
    auto c = small_gen(19);
    c.effect_map = map;
    c.regime = Regime::observational;
    const auto syn = generate(c);
    const auto back = OracleTruth::from_json(Json::parse(syn.oracle->to_json().dump()), syn.spec);
    for (std::size_t i = 0; i < 20; ++i) {
      const auto x = syn.test.x(i);
      EXPECT_EQ(true_cate(*back, syn.spec, x, 2, 0), true_cate(*syn.oracle, syn.spec, x, 2, 0));
      EXPECT_EQ(back->assignment_probs(x), syn.oracle->assignment_probs(x));
    }
  }
}

}  // namespace
}  // namespace poul
