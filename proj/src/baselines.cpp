#include "poul/baselines.hpp"

#include "poul/errors.hpp"
#include "poul/policy_table.hpp"

namespace poul {

namespace {
constexpr std::uint64_t kStreamEncoder = 4;
constexpr std::uint64_t kStreamArmBase = 1000;
}  // namespace

std::unique_ptr<TreatmentEncoder> make_policy_table(const PolicySpec& spec, const TrainConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, kStreamEncoder));
  return std::make_unique<PolicyTable>(PolicyTable::make(spec, cfg.treatment.output_dim, rng));
}

TrainResult train_categorical(const Dataset& data, const PolicySpec& spec, const TrainConfig& cfg,
                              const TrainObserver* observer) {
  cfg.validate();
  return train_crossfit_with(make_policy_table(spec, cfg), data, spec, cfg, observer);
}

TLearnerModel::TLearnerModel(PolicySpec spec, std::vector<Mlp> heads, std::vector<std::size_t> support,
                             std::size_t min_support)
    : spec_(std::move(spec)), heads_(std::move(heads)), support_(std::move(support)), min_support_(min_support) {
  if (heads_.size() != spec_.num_policies() || support_.size() != spec_.num_policies()) {
    throw ShapeError("one head and one support count per policy expected");
  }
}

bool TLearnerModel::has_arm(std::size_t t) const { return t < heads_.size() && support_[t] > 0; }

double TLearnerModel::predict_arm(std::span<const double> x, std::size_t t) const {
  if (t >= heads_.size()) throw UnknownIdError("unknown policy index " + std::to_string(t));
  if (!has_arm(t)) {
    throw UnsupportedPolicyError("T-learner has no arm for policy '" + spec_.policy_ids()[t] +
                                 "' (no training rows)");
  }
  return heads_[t].forward(x)[0];
}

double TLearnerModel::predict_cate(std::span<const double> x, std::size_t t1, std::size_t t0) const {
  return predict_arm(x, t1) - predict_arm(x, t0);
}

std::vector<ArmSupport> TLearnerModel::support_report() const {
  std::vector<ArmSupport> out;
  for (std::size_t t = 0; t < support_.size(); ++t) {
    if (support_[t] == 0) continue;
    out.push_back({spec_.policy_ids()[t], support_[t], support_[t] < min_support_});
  }
  return out;
}

ParameterCheckpoint TLearnerModel::save(std::uint64_t seed, const Json& config) const {
  ParameterCheckpoint ck;
  ck.seed = seed;
  ck.metadata["kind"] = "tlearner";
  ck.metadata["spec_fingerprint"] = spec_.fingerprint();
  ck.metadata["config"] = config;
  ck.metadata["min_support"] = min_support_;
  Json arms = Json::array();
  for (std::size_t t = 0; t < heads_.size(); ++t) {
    arms.push_back({{"policy", spec_.policy_ids()[t]}, {"rows", support_[t]}});
    if (support_[t] > 0) ck.add_mlp("arm." + spec_.policy_ids()[t], heads_[t]);
  }
  ck.metadata["arms"] = std::move(arms);
  return ck;
}

TLearnerModel TLearnerModel::load(const ParameterCheckpoint& ck, const PolicySpec& spec) {
  try {
    if (ck.metadata.at("kind").get<std::string>() != "tlearner") throw ValidationError("checkpoint is not a T-learner");
    const auto fp = ck.metadata.at("spec_fingerprint").get<std::string>();
    if (fp != spec.fingerprint()) {
      throw ValidationError("checkpoint was trained on spec " + fp + ", data uses " + spec.fingerprint());
    }
    std::vector<Mlp> heads(spec.num_policies());
    std::vector<std::size_t> support(spec.num_policies(), 0);
    for (const auto& arm : ck.metadata.at("arms")) {
      const auto id = arm.at("policy").get<std::string>();
      const auto t = spec.policy_index(id);
      support[t] = arm.at("rows").get<std::size_t>();
      if (support[t] > 0) heads[t] = ck.get_mlp("arm." + id);
    }
    return TLearnerModel(spec, std::move(heads), std::move(support), ck.metadata.at("min_support").get<std::size_t>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed T-learner checkpoint: ") + e.what());
  }
}

TLearnerModel train_tlearner(const Dataset& data, const PolicySpec& spec, const TrainConfig& cfg,
                             std::size_t min_support) {
  cfg.validate();
  if (data.empty()) throw ValidationError("T-learner needs data");
  std::vector<std::vector<std::size_t>> rows(spec.num_policies());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.t(i) >= spec.num_policies()) throw UnknownIdError("row refers to an unknown policy");
    rows[data.t(i)].push_back(i);
  }
  std::vector<Mlp> heads(spec.num_policies());
  std::vector<std::size_t> support(spec.num_policies(), 0);
  for (std::size_t t = 0; t < spec.num_policies(); ++t) {
    support[t] = rows[t].size();
    if (rows[t].empty()) continue;
    heads[t] = fit_baseline(data.subset(rows[t]), cfg, kStreamArmBase + t);
  }
  return TLearnerModel(spec, std::move(heads), std::move(support), min_support);
}

}  // namespace poul
