#pragma once

// Synthetic populations with a known effect structure:
//   y = m0(x) + g0(x)^T F(alpha_t) + noise,   x ~ N(0, I_p)
// F is linear in the induced mixture (or a fixed small net), so the true CATE
// is g0(x)^T (F(alpha_t1) - F(alpha_t0)).

#include <cstdint>
#include <filesystem>
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

enum class FrequencyProfile { uniform, zipf };
enum class EffectMap { linear, net };

struct GenConfig {
  std::size_t n = 50000;        // train + test rows
  double test_fraction = 0.2;
  std::size_t num_features = 10;
  std::size_t num_contexts = 6;
  std::size_t num_actions = 4;
  std::size_t num_policies = 40;  // including held-out ones
  double held_out = 0.1;
  std::size_t effect_dim = 4;
  double noise_sd = 0.5;
  FrequencyProfile profile = FrequencyProfile::zipf;
  double zipf_exponent = 1.2;
  Regime regime = Regime::rct;
  EffectMap effect_map = EffectMap::linear;
  std::uint64_t seed = 3407;

  double effect_scale = 2.0;  // overall size of g0
  double baseline_scale = 1.0;  // sd of m0(x)
  double heterogeneity_scale = 1.0;  // x-dependent part of g0 relative to its offset
  double held_out_epsilon = 0.2;  // d_Pi from each held-out policy to its parent
  std::size_t num_strata = 5;     // stratified regime: quantile strata of x0
  double confounding = 1.0;       // observational regime: scale of the x-dependent logits

  // Number of held-out policies: round(held_out * num_policies).
  std::size_t num_held_out() const;
  std::size_t num_train_policies() const { return num_policies - num_held_out(); }
  std::size_t num_test_rows() const;

  void validate() const;
  Json to_json() const;
  static GenConfig from_json(const Json& doc);
};

class OracleTruth final : public CateOracle {
 public:
  OracleTruth(GenConfig cfg, PolicySpec spec, Mlp m0, Mlp g0, DenseMatrix linear_map, Mlp effect_net,
              std::vector<double> train_profile, DenseMatrix assignment_weights);

  const GenConfig& config() const { return cfg_; }
  const PolicySpec& spec() const { return spec_; }
  std::size_t effect_dim() const { return cfg_.effect_dim; }

  double m0(std::span<const double> x) const;
  std::vector<double> g0(std::span<const double> x) const;
  // F(alpha) for an arbitrary mixture over this spec's atoms.
  std::vector<double> effect_of(const Mixture& mixture) const;
  // h0(t) = F(alpha_t) for policy t of the generating spec.
  const std::vector<double>& h0(std::size_t t) const { return h0_.at(t); }

  // E[Y | x, t]
  double mean_outcome(std::span<const double> x, std::size_t t) const;
  double cate(std::span<const double> x, std::size_t t1, std::size_t t0) const override;

  // pi0(. | x) used for the training split; zero on held-out policies.
  std::vector<double> assignment_probs(std::span<const double> x) const;
  int stratum_of(std::span<const double> x) const;
  // e0(x) = sum_t pi0(t|x) h0(t)
  std::vector<double> embedding_mean(std::span<const double> x) const;
  // m0(x) + g0(x)^T e0(x): the baseline in the centered parametrization.
  double centered_baseline(std::span<const double> x) const;

  const Mlp& baseline_net() const { return m0_; }
  const Mlp& heterogeneity_net() const { return g0_; }
  const DenseMatrix& linear_map() const { return linear_; }
  const Mlp& effect_net() const { return effect_net_; }
  const std::vector<double>& train_profile() const { return profile_; }
  // Per-stratum frequency profiles (stratified regime).
  std::vector<double> stratum_profile(std::size_t stratum) const;

  Json to_json() const;
  static std::shared_ptr<OracleTruth> from_json(const Json& doc, const PolicySpec& spec);

 private:
  GenConfig cfg_;
  PolicySpec spec_;
  Mlp m0_;
  Mlp g0_;
  DenseMatrix linear_;  // effect_dim x atoms, linear map
  Mlp effect_net_;      // net map on |S||A| * alpha
  std::vector<double> profile_;  // over the training policies (indices 0..T_train-1)
  DenseMatrix assignment_;       // observational: T_train x p logit slopes
  std::vector<std::vector<double>> h0_;
};

struct SyntheticData {
  PolicySpec spec;
  Dataset train;
  Dataset test;
  std::shared_ptr<const OracleTruth> oracle;
  std::vector<std::size_t> held_out;  // policy indices, appended after the training policies
  std::vector<std::size_t> parents;   // parents[k] was perturbed into held_out[k]
  std::size_t control = 0;            // most frequent training policy
};

SyntheticData generate(const GenConfig& cfg);

// Exact oracle CATE for policies of `spec` (which may extend the generating spec).
double true_cate(const OracleTruth& oracle, const PolicySpec& spec, std::span<const double> x, std::size_t t1,
                 std::size_t t0);
double true_ate(const OracleTruth& oracle, const PolicySpec& spec, const Dataset& data, std::size_t t1,
                std::size_t t0);

}  // namespace poul
