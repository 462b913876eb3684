#pragma once

// Orthogonalized factorized uplift model
//   y = m(x) + g(x)^T (h(t) - e_h(x)),   tau(x; t1, t0) = g(x)^T (h(t1) - h(t0))
// with two-stage training (frozen baseline, running-mean e_h) and a K-fold
// cross-fitted variant.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "poul/dataset.hpp"
#include "poul/io.hpp"
#include "poul/policy_space.hpp"
#include "poul/tensor.hpp"
#include "poul/treatment_net.hpp"

namespace poul {

enum class Regime { rct, stratified, observational };

std::string to_string(Regime r);
Regime regime_from_string(const std::string& name);

struct TrainConfig {
  std::size_t stage1_epochs = 20;  // i
  std::size_t stage2_epochs = 30;  // j
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  double l2 = 1e-6;
  std::size_t folds = 1;  // K; 1 disables cross-fitting
  std::uint64_t seed = 3407;
  Regime regime = Regime::rct;
  double propensity_clip = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;

  std::vector<std::size_t> m_hidden = {32, 32};
  std::vector<std::size_t> g_hidden = {32, 32};
  TreatmentNetConfig treatment;
  std::size_t propensity_epochs = 20;
  std::vector<std::size_t> propensity_hidden = {32};

  // rct: seed the running mean with the exact mean under the initial parameters.
  bool warm_start_mean = false;
  // rct: use the exact mean under the current parameters, refreshed each epoch.
  bool fresh_mean_per_epoch = false;
  // false drops the e_h centering entirely (the no-residualization ablation).
  bool residualize = true;

  void validate() const;
  Json to_json() const;
  // Unknown keys are rejected; missing keys keep their defaults.
  static TrainConfig from_json(const Json& doc);
};

// Softmax propensity pi_hat(t | x) over every policy in the spec.
class PropensityModel {
 public:
  PropensityModel() = default;
  PropensityModel(Mlp net, double clip) : net_(std::move(net)), clip_(clip) {}

  // Clipped below at `clip` and renormalized; sums to 1.
  std::vector<double> predict(std::span<const double> x) const;
  std::size_t num_policies() const { return net_.output_dim(); }
  double clip() const { return clip_; }
  const Mlp& net() const { return net_; }

 private:
  Mlp net_;
  double clip_ = 1e-3;
};

// Raises every entry to at least `floor` and rescales the rest so the vector
// still sums to one.
std::vector<double> clip_probabilities(std::vector<double> probs, double floor);

PropensityModel fit_propensity(const Dataset& data, const PolicySpec& spec, const TrainConfig& cfg,
                               std::vector<double>* loss_trace = nullptr);

struct EmbeddingMean {
  Regime regime = Regime::rct;
  // rct
  std::vector<double> mean;
  std::uint64_t count = 0;
  // stratified
  std::vector<std::string> strata;
  std::vector<std::vector<double>> stratum_mean;
  std::vector<std::uint64_t> stratum_count;
  // observational; one model per fold, averaged at prediction time
  std::vector<PropensityModel> propensity;

  // e_h(x). `stratum` indexes `strata`; `embeddings` holds h(t) for every policy.
  std::vector<double> value(std::span<const double> x, int stratum,
                            const std::vector<std::vector<double>>& embeddings) const;
};

class UpliftModel {
 public:
  UpliftModel() = default;
  UpliftModel(const UpliftModel& other);
  UpliftModel& operator=(const UpliftModel& other);
  UpliftModel(UpliftModel&&) noexcept = default;
  UpliftModel& operator=(UpliftModel&&) noexcept = default;

  PolicySpec spec;
  Regime regime = Regime::rct;
  std::vector<Mlp> m_nets;  // one per fold; prediction averages them
  Mlp g_net;
  std::unique_ptr<TreatmentEncoder> encoder;
  EmbeddingMean e_hat;
  bool residualize = true;

  std::string kind() const { return encoder ? encoder->kind() : "none"; }
  double baseline(std::span<const double> x) const;
  std::vector<double> heterogeneity(std::span<const double> x) const;
  std::vector<std::vector<double>> embeddings() const;
  std::vector<double> embedding_mean(std::span<const double> x, int stratum = -1) const;
};

// m_hat(x) + g(x)^T (h(t) - e_h(x))
double predict_outcome(const UpliftModel& model, std::span<const double> x, std::size_t t, int stratum = -1);
// g(x)^T (h(t1) - h(t0)); touches neither m nor e_h.
double predict_cate(const UpliftModel& model, std::span<const double> x, std::size_t t1, std::size_t t0);
double predict_cate(const UpliftModel& model, std::span<const double> x, std::span<const double> h1,
                    std::span<const double> h0);

// Stage 1: squared-loss baseline regression over all rows for cfg.stage1_epochs.
Mlp fit_baseline(const Dataset& data, const TrainConfig& cfg, std::uint64_t stream = 1,
                 std::vector<double>* loss_trace = nullptr);

// Exact e_h under the model's current parameters.
EmbeddingMean estimate_e_h(const UpliftModel& model, const Dataset& data);

struct CrossFitLineage {
  std::vector<std::size_t> fold_of_row;
  // Model k was fit on nuisance_rows[k].
  std::vector<std::vector<std::size_t>> nuisance_rows;
  // Which fold model produced row i's nuisance values.
  std::vector<std::size_t> nuisance_model_of_row;

  // True iff no row's nuisance came from a fit that saw that row.
  bool clean() const;
};

struct BatchEvent {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  std::span<const std::size_t> rows;
  // h(T_i) for each row of the batch, computed before the update.
  const std::vector<std::vector<double>>* row_embeddings = nullptr;
  const UpliftModel* model = nullptr;
};

struct TrainObserver {
  std::function<void(const BatchEvent&)> on_batch;
  std::function<void(std::size_t epoch, const UpliftModel&)> on_epoch_end;
};

struct TrainResult {
  UpliftModel model;
  std::vector<double> stage1_loss;
  std::vector<double> stage2_loss;
  std::optional<CrossFitLineage> lineage;
};

TrainResult train_two_stage(const Dataset& data_all, const Dataset& data_exp, const PolicySpec& spec,
                            const TrainConfig& cfg, const TrainObserver* observer = nullptr);
// Same loop with a caller-supplied treatment representation.
TrainResult train_two_stage_with(std::unique_ptr<TreatmentEncoder> encoder, const Dataset& data_all,
                                 const Dataset& data_exp, const PolicySpec& spec, const TrainConfig& cfg,
                                 const TrainObserver* observer = nullptr);

// K folds; K = 1 reduces to train_two_stage(data, data, ...).
TrainResult train_crossfit(const Dataset& data, const PolicySpec& spec, const TrainConfig& cfg,
                           const TrainObserver* observer = nullptr);
TrainResult train_crossfit_with(std::unique_ptr<TreatmentEncoder> encoder, const Dataset& data,
                                const PolicySpec& spec, const TrainConfig& cfg,
                                const TrainObserver* observer = nullptr);

std::unique_ptr<TreatmentEncoder> make_treatment_net(const PolicySpec& spec, const TrainConfig& cfg);

ParameterCheckpoint save_model(const UpliftModel& model, const TrainConfig& cfg);
// Rejects checkpoints whose spec fingerprint differs from `spec`.
UpliftModel load_model(const ParameterCheckpoint& ck, const PolicySpec& spec);

}  // namespace poul
