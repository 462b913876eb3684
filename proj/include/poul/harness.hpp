#pragma once

// Numerical checks of the estimator's structural properties on oracle or
// trained fixtures: first-order insensitivity of the score to nuisance error,
// second-order scaling of the CATE error, the Lipschitz stability bound and the
// expressiveness of the atom embedding family.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "poul/dataset.hpp"
#include "poul/io.hpp"
#include "poul/policy_space.hpp"
#include "poul/synthetic.hpp"
#include "poul/tensor.hpp"
#include "poul/treatment_net.hpp"
#include "poul/uplift_model.hpp"

namespace poul {

// z threshold with the family-wise error of a single two-sided 3-sigma test
// spread over `comparisons` checks (Bonferroni); equals 3 for one check.
double familywise_z(std::size_t comparisons);

// psi(W; g, h, m, e) = (y - m - g^T (h - e)) (h - e)
std::vector<double> score_psi(double y, double m, std::span<const double> g, std::span<const double> h,
                              std::span<const double> e);

// Fixed random direction functions for nuisance perturbations, rescaled to
// unit empirical L2 norm on the evaluation sample.
struct PerturbationPlan {
  Mlp delta_m;  // p -> 1
  Mlp delta_e;  // p -> d
  std::vector<double> grid;

  double dm(std::span<const double> x) const { return delta_m.forward(x)[0]; }
  std::vector<double> de(std::span<const double> x) const { return delta_e.forward(x); }
};

PerturbationPlan make_perturbation_plan(const Dataset& sample, std::size_t effect_dim, std::uint64_t seed,
                                        std::vector<double> grid);

struct OrthogonalityReport {
  std::size_t n = 0;
  std::vector<double> grid;
  std::vector<std::vector<double>> psi;  // psi[g][k]: mean score at grid[g]
  std::vector<double> psi0;              // at r = 0
  std::vector<double> psi0_se;
  std::vector<double> linear_coef;  // per coordinate
  std::vector<double> linear_se;
  std::vector<double> quad_coef;
  double slope = 0.0;  // log |Psi(r) - Psi(0)| vs log |r|
  bool unbiased = false;
  bool linear_ok = false;
  bool slope_ok = false;
  // delta_e = 0: worst |Psi(r) - Psi(0)| / SE over the grid
  double dm_only_max_z = 0.0;
  bool dm_only_flat = false;
  // E[h0(T) - e0(X) | x0 quantile stratum]: worst |mean| / SE
  double centering_max_z = 0.0;
  bool centering_ok = false;
  bool passed = false;

  Json to_json() const;
};

struct OrthogonalityConfig {
  std::vector<double> grid = {-0.2, -0.1, -0.05, -0.02, 0.02, 0.05, 0.1, 0.2};
  std::uint64_t seed = 3407;
  std::size_t strata = 5;
  double min_slope = 1.8;
};

OrthogonalityReport orthogonality_test(const OracleTruth& oracle, const Dataset& data,
                                       const OrthogonalityConfig& cfg = {});

struct RobustnessReport {
  std::size_t n = 0;
  std::size_t probes = 0;
  std::vector<double> grid;          // signed magnitudes
  std::vector<double> error;         // RMS over probes of tau_delta - tau_0, both nuisances
  std::vector<double> dm_only_error; // same with delta_e = 0
  std::vector<double> dm_only_se;    // RMS of the per-probe standard errors
  double baseline_error = 0.0;       // RMS(tau_0 - tau_true)
  double baseline_se = 0.0;
  double slope = 0.0;
  double dm_only_max_z = 0.0;
  bool slope_ok = false;
  bool dm_only_flat = false;
  bool baseline_ok = false;
  bool passed = false;

  Json to_json() const;
};

struct RobustnessConfig {
  std::vector<double> grid = {-0.3, -0.2, -0.1, -0.05, -0.02, 0.02, 0.05, 0.1, 0.2, 0.3};
  std::size_t probes = 200;
  std::uint64_t seed = 3407;
  double min_slope = 1.8;
  double flat_band = 3.0;
};

RobustnessReport robustness_scaling_test(const OracleTruth& oracle, const Dataset& data,
                                         const RobustnessConfig& cfg = {});

struct StabilityReport {
  double lipschitz = 0.0;  // product of rho's layer spectral norms
  double atom_bound = 0.0;  // max atom norm
  double g_bound = 0.0;     // max ||g(x)|| over probes
  bool bound_valid = true;  // false when rho uses layer norm
  std::size_t pairs = 0;
  std::size_t probes = 0;
  std::size_t embedding_violations = 0;
  std::size_t uplift_violations = 0;
  double max_embedding_ratio = 0.0;  // max ||dh|| / (L B d)
  double max_uplift_ratio = 0.0;     // max |tau| / (G L B d)
  bool passed = false;

  Json to_json() const;
};

struct StabilityConfig {
  std::size_t pairs = 1000;
  double max_epsilon = 0.5;
  std::uint64_t seed = 3407;
};

// `probes` rows supply the x's for the uplift bound.
StabilityReport stability_test(const TreatmentNet& net, const Mlp& g_net, const PolicySpec& spec,
                               std::span<const std::vector<double>> probes, const StabilityConfig& cfg = {});
StabilityReport stability_test(const UpliftModel& model, const Dataset& probes, const StabilityConfig& cfg = {});

enum class TargetKind { net, linear, constant };

struct ExpressivenessConfig {
  TargetKind target = TargetKind::net;
  std::size_t output_dim = 4;
  std::size_t train_policies = 8000;
  std::size_t test_policies = 500;
  std::size_t epochs = 250;
  std::size_t batch_size = 32;
  std::size_t width = 64;
  std::size_t layers = 2;
  double learning_rate = 3e-3;
  double final_learning_rate = 1e-5;
  std::uint64_t seed = 3407;
  double tolerance = 0.05;  // sup error allowed, relative to range(F)
  double absolute_tolerance = 1e-6;  // floor for targets with zero range
};

struct ExpressivenessReport {
  std::string target;
  std::size_t embedding_dim = 0;
  double sup_error = 0.0;
  double range = 0.0;
  double train_loss = 0.0;
  bool passed = false;

  Json to_json() const;
};

// Fits (phi, rho) with r = |S||A| to a fixed target F over random policies on
// `spec`'s contexts and weights, then refits rho's output layer by least squares.
ExpressivenessReport expressiveness_test(const PolicySpec& spec, const ExpressivenessConfig& cfg = {});

}  // namespace poul
