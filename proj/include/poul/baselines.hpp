#pragma once

// Ablation estimators: the factorized model with a free per-policy embedding
// (no atom sharing), and a T-learner with one outcome net per policy.

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "poul/dataset.hpp"
#include "poul/io.hpp"
#include "poul/policy_space.hpp"
#include "poul/tensor.hpp"
#include "poul/uplift_model.hpp"

namespace poul {

// Same seed stream as the treatment net, so both ablations start from the
// same g and baseline.
std::unique_ptr<TreatmentEncoder> make_policy_table(const PolicySpec& spec, const TrainConfig& cfg);

// Runs the two-stage (or cross-fitted, when cfg.folds > 1) loop with the table.
TrainResult train_categorical(const Dataset& data, const PolicySpec& spec, const TrainConfig& cfg,
                              const TrainObserver* observer = nullptr);

struct ArmSupport {
  std::string policy;
  std::size_t rows = 0;
  bool low_support = false;
};

class TLearnerModel {
 public:
  static constexpr std::size_t kDefaultMinSupport = 30;

  TLearnerModel() = default;
  TLearnerModel(PolicySpec spec, std::vector<Mlp> heads, std::vector<std::size_t> support,
                std::size_t min_support = kDefaultMinSupport);

  const PolicySpec& spec() const { return spec_; }
  bool has_arm(std::size_t t) const;
  const std::vector<std::size_t>& support() const { return support_; }
  std::size_t min_support() const { return min_support_; }

  // Throws UnsupportedPolicyError for a policy with no training rows.
  double predict_arm(std::span<const double> x, std::size_t t) const;
  double predict_cate(std::span<const double> x, std::size_t t1, std::size_t t0) const;

  // One entry per policy with at least one training row.
  std::vector<ArmSupport> support_report() const;

  ParameterCheckpoint save(std::uint64_t seed, const Json& config) const;
  static TLearnerModel load(const ParameterCheckpoint& ck, const PolicySpec& spec);

 private:
  PolicySpec spec_;
  std::vector<Mlp> heads_;  // empty Mlp for arms without data
  std::vector<std::size_t> support_;
  std::size_t min_support_ = kDefaultMinSupport;
};

// Independent stage-1 style regressions on each policy's rows.
TLearnerModel train_tlearner(const Dataset& data, const PolicySpec& spec, const TrainConfig& cfg,
                             std::size_t min_support = TLearnerModel::kDefaultMinSupport);

}  // namespace poul
