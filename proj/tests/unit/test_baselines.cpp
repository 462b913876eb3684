#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "poul/baselines.hpp"
#include "poul/errors.hpp"
#include "poul/metrics.hpp"
#include "poul/policy_table.hpp"
#include "support.hpp"

namespace poul {
namespace {

// Copy of the generating spec with `dup` appended as a second id for policy
// `source`; every other row of `source` in the data is relabelled to it.
struct Duplicated {
  PolicySpec spec;
  Dataset data;
  std::size_t source = 0;
  std::size_t dup = 0;
};

Duplicated duplicate_policy(const SyntheticData& syn, std::size_t source) {
  auto ids = syn.spec.policy_ids();
  std::vector<std::vector<double>> rows;
  for (std::size_t t = 0; t < syn.spec.num_policies(); ++t) rows.push_back(syn.spec.table(t));
  ids.push_back("dup");
  rows.push_back(syn.spec.table(source));
  Duplicated out{PolicySpec(syn.spec.contexts(), syn.spec.actions(), syn.spec.weights(), ids, rows),
                 Dataset(syn.train.num_features()), source, ids.size() - 1};
  bool flip = false;
  for (std::size_t i = 0; i < syn.train.size(); ++i) {
    std::size_t t = syn.train.t(i);
    if (t == source) {
      if (flip) t = out.dup;
      flip = !flip;
    }
    out.data.add_row(syn.train.x(i), t, syn.train.y(i));
  }
  return out;
}

TEST(Categorical, DuplicateIdsDivergeWhileAtomModelIsInvariant) {
  const auto syn = generate(testing::small_gen(21));
  const auto d = duplicate_policy(syn, 1);
  const auto cfg = testing::small_train(3);

  const auto cat = train_categorical(d.data, d.spec, cfg);
  const auto poul = train_two_stage(d.data, d.data, d.spec, cfg);
  double cat_gap = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    const auto x = syn.test.x(i);
    cat_gap = std::max(cat_gap, std::abs(predict_cate(cat.model, x, d.source, d.dup)));
    EXPECT_EQ(predict_cate(poul.model, x, d.source, d.dup), 0.0);
    EXPECT_EQ(predict_cate(poul.model, x, d.source, 0), predict_cate(poul.model, x, d.dup, 0));
  }
  EXPECT_GT(cat_gap, 1e-3);
  EXPECT_NE(cat.model.encoder->embed(d.spec, d.source), cat.model.encoder->embed(d.spec, d.dup));
}

TEST(Categorical, UntrainedRowsStayAtInitialization) {
  const auto syn = generate(testing::small_gen(22));
  ASSERT_FALSE(syn.held_out.empty());
  const auto cfg = testing::small_train(4);
  const auto init = make_policy_table(syn.spec, cfg);
  const auto trained = train_categorical(syn.train, syn.spec, cfg);
  ASSERT_NE(trained.model.encoder, nullptr);
  EXPECT_EQ(trained.model.kind(), "categorical");
  for (auto t : syn.held_out) EXPECT_EQ(trained.model.encoder->embed(syn.spec, t), init->embed(syn.spec, t));
  EXPECT_NE(trained.model.encoder->embed(syn.spec, syn.control), init->embed(syn.spec, syn.control));
}

TEST(Categorical, CrossFitRecordsLineage) {
  const auto syn = generate(testing::small_gen(23));
  auto cfg = testing::small_train(5);
  cfg.folds = 3;
  const auto r = train_categorical(syn.train, syn.spec, cfg);
  ASSERT_TRUE(r.lineage.has_value());
  EXPECT_EQ(r.model.m_nets.size(), 3u);
}

TEST(Categorical, MatchesAtomModelOnHeadPolicies) {
  // Strong effects and a large test split keep per-pair AUUC well conditioned.
  GenConfig g;
  g.n = 60000;
  g.test_fraction = 0.5;
  g.effect_scale = 4.0;
  g.num_features = 6;
  g.num_policies = 20;
  g.seed = 1;
  const auto syn = generate(g);
  TrainConfig c;
  c.seed = 1;
  c.stage1_epochs = 10;
  c.stage2_epochs = 20;
  c.learning_rate = 3e-3;
  c.m_hidden = {32};
  c.g_hidden = {32};
  c.treatment.hidden = {32};
  const auto atom = train_two_stage(syn.train, syn.train, syn.spec, c);
  const auto cat = train_categorical(syn.train, syn.spec, c);

  std::vector<std::size_t> count(syn.spec.num_policies(), 0);
  for (auto t : syn.train.treatments()) ++count[t];
  std::vector<std::size_t> order(count.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return count[a] > count[b]; });
  ASSERT_EQ(order[0], syn.control);

  double atom_sum = 0.0, cat_sum = 0.0;
  for (std::size_t k = 1; k <= 3; ++k) {
    const auto t = order[k];
    atom_sum += auuc(scored_pair(syn.test, t, syn.control,
                                 [&](std::size_t i) { return predict_cate(atom.model, syn.test.x(i), t, syn.control); }));
    cat_sum += auuc(scored_pair(syn.test, t, syn.control,
                                [&](std::size_t i) { return predict_cate(cat.model, syn.test.x(i), t, syn.control); }));
  }
  EXPECT_NEAR(cat_sum / 3, atom_sum / 3, 0.05);
}

// Single-context spec with `n` point-mass policies.
PolicySpec arms_spec(std::size_t n) {
  std::vector<std::string> actions, ids;
  std::vector<std::vector<double>> rows;
  for (std::size_t t = 0; t < n; ++t) {
    actions.push_back("a" + std::to_string(t));
    ids.push_back("arm" + std::to_string(t));
    std::vector<double> row(n, 0.0);
    row[t] = 1.0;
    rows.push_back(row);
  }
  return PolicySpec({"s"}, actions, {1.0}, ids, rows);
}

TrainConfig arm_fit_config() {
  TrainConfig c;
  c.stage1_epochs = 60;
  c.batch_size = 64;
  c.learning_rate = 1e-2;
  c.m_hidden = {16};
  c.seed = 12;
  return c;
}

double variance(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double y : v) s += (y - mean) * (y - mean);
  return s / static_cast<double>(v.size());
}

TEST(TLearner, IdenticalArmsGiveNearZeroEffect) {
  Rng rng(30);
  Dataset d(3);
  std::vector<double> ys;
  for (std::size_t i = 0; i < 2000; ++i) {
    std::vector<double> x{rng.normal(), rng.normal(), rng.normal()};
    const double y = 1.0 + x[0] - 0.5 * x[1] + 0.3 * x[2] + 0.1 * rng.normal();
    d.add_row(x, 0, y);
    d.add_row(x, 1, y);
    ys.push_back(y);
  }
  const auto model = train_tlearner(d, arms_spec(2), arm_fit_config());
  double sq = 0.0;
  for (std::size_t i = 0; i < 200; ++i) sq += std::pow(model.predict_cate(d.x(2 * i), 1, 0), 2);
  EXPECT_LT(std::sqrt(sq / 200), 0.1 * std::sqrt(variance(ys)));
}

TEST(TLearner, NoiseFreeLinearArmsFitClosely) {
  Rng rng(31);
  const std::vector<std::vector<double>> coef{{0.5, 1.0, -1.0, 0.0}, {-0.5, 0.2, 0.8, 1.5}};
  Dataset d(3);
  std::vector<std::vector<double>> ys(2);
  for (std::size_t i = 0; i < 4000; ++i) {
    const std::size_t t = i % 2;
    std::vector<double> x{rng.normal(), rng.normal(), rng.normal()};
    const double y = coef[t][0] + coef[t][1] * x[0] + coef[t][2] * x[1] + coef[t][3] * x[2];
    d.add_row(x, t, y);
    ys[t].push_back(y);
  }
  const auto model = train_tlearner(d, arms_spec(2), arm_fit_config());
  for (std::size_t t = 0; t < 2; ++t) {
    double sq = 0.0, count = 0.0;
    for (std::size_t i = t; i < d.size(); i += 2) {
      sq += std::pow(model.predict_arm(d.x(i), t) - d.y(i), 2);
      count += 1.0;
    }
    EXPECT_LT(sq / count, 1e-2 * variance(ys[t])) << "arm " << t;
  }
}

TEST(TLearner, SingleRowArmIsFlaggedLowSupport) {
  Rng rng(32);
  Dataset d(2);
  for (std::size_t i = 0; i < 100; ++i) d.add_row(std::vector<double>{rng.normal(), rng.normal()}, 0, rng.normal());
  d.add_row(std::vector<double>{0.1, 0.2}, 1, 3.0);
  auto cfg = arm_fit_config();
  cfg.stage1_epochs = 2;
  const auto model = train_tlearner(d, arms_spec(3), cfg);
  const auto report = model.support_report();
  ASSERT_EQ(report.size(), 2u);
  EXPECT_EQ(report[0].policy, "arm0");
  EXPECT_FALSE(report[0].low_support);
  EXPECT_EQ(report[1].rows, 1u);
  EXPECT_TRUE(report[1].low_support);
  EXPECT_TRUE(std::isfinite(model.predict_cate(d.x(0), 1, 0)));
}

TEST(TLearner, UnseenPolicyIsAnError) {
  Rng rng(33);
  Dataset d(2);
  for (std::size_t i = 0; i < 40; ++i) d.add_row(std::vector<double>{rng.normal(), rng.normal()}, i % 2, rng.normal());
  auto cfg = arm_fit_config();
  cfg.stage1_epochs = 1;
  const auto model = train_tlearner(d, arms_spec(3), cfg);
  EXPECT_FALSE(model.has_arm(2));
  EXPECT_THROW(model.predict_cate(d.x(0), 2, 0), UnsupportedPolicyError);
  EXPECT_THROW(model.predict_arm(d.x(0), 7), UnknownIdError);
  EXPECT_THROW(train_tlearner(Dataset(2), arms_spec(3), cfg), ValidationError);
}

TEST(TLearner, CheckpointRoundTrip) {
  Rng rng(34);
  Dataset d(2);
  for (std::size_t i = 0; i < 60; ++i) d.add_row(std::vector<double>{rng.normal(), rng.normal()}, i % 2, rng.normal());
  auto cfg = arm_fit_config();
  cfg.stage1_epochs = 2;
  const auto spec = arms_spec(3);
  const auto model = train_tlearner(d, spec, cfg);
  const auto ck = ParameterCheckpoint::from_json(model.save(cfg.seed, cfg.to_json()).to_json());
  const auto back = TLearnerModel::load(ck, spec);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(back.predict_cate(d.x(i), 1, 0), model.predict_cate(d.x(i), 1, 0));
  EXPECT_FALSE(back.has_arm(2));
  EXPECT_THROW(TLearnerModel::load(ck, arms_spec(4)), ValidationError);
}

}  // namespace
}  // namespace poul
