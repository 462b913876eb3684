#include "poul/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "poul/errors.hpp"

namespace poul {

namespace {

constexpr std::uint64_t kStreamOracle = 1;
constexpr std::uint64_t kStreamPolicies = 2;
constexpr std::uint64_t kStreamHeldOut = 3;
constexpr std::uint64_t kStreamTrainRows = 5;
constexpr std::uint64_t kStreamTestRows = 6;
constexpr std::uint64_t kStreamAssignment = 7;
constexpr std::uint64_t kStreamCalibration = 8;
constexpr std::size_t kCalibrationRows = 4096;
constexpr std::size_t kCalibrationPolicies = 512;
constexpr std::size_t kOracleWidth = 32;

std::string padded(const std::string& prefix, std::size_t i, std::size_t count) {
  const std::size_t width = std::max<std::size_t>(2, std::to_string(count > 0 ? count - 1 : 0).size());
  std::string digits = std::to_string(i);
  if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
  return prefix + digits;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

std::vector<double> normal_vector(Rng& rng, std::size_t p) {
  std::vector<double> x(p);
  for (auto& v : x) v = rng.normal();
  return x;
}

std::size_t draw_categorical(Rng& rng, const std::vector<double>& probs) {
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t t = 0; t < probs.size(); ++t) {
    if (probs[t] <= 0.0) continue;
    acc += probs[t];
    last = t;
    if (u < acc) return t;
  }
  return last;
}

std::vector<double> softmax(std::vector<double> logits) {
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (auto& v : logits) {
    v = std::exp(v - top);
    total += v;
  }
  for (auto& v : logits) v /= total;
  return logits;
}

// Rescales the last layer so every output coordinate has the given mean and
// standard deviation over the sample.
void standardize_outputs(Mlp& net, const std::vector<std::vector<double>>& sample, std::span<const double> target_mean,
                         std::span<const double> target_sd) {
  const std::size_t d = net.output_dim();
  std::vector<double> mean(d, 0.0), sq(d, 0.0);
  for (const auto& x : sample) {
    const auto y = net.forward(x);
    for (std::size_t k = 0; k < d; ++k) {
      mean[k] += y[k];
      sq[k] += y[k] * y[k];
    }
  }
  const double n = static_cast<double>(sample.size());
  auto& last = net.mutable_layers().back();
  for (std::size_t k = 0; k < d; ++k) {
    mean[k] /= n;
    const double sd = std::sqrt(std::max(sq[k] / n - mean[k] * mean[k], 1e-24));
    const double scale = target_sd[k] / sd;
    for (auto& w : last.weight.row(k)) w *= scale;
    last.bias[k] = (last.bias[k] - mean[k]) * scale + target_mean[k];
  }
}

Json reals_json(std::span<const double> v) {
  Json out = Json::array();
  for (double x : v) out.push_back(x);
  return out;
}

}  // namespace

std::size_t GenConfig::num_held_out() const {
  return static_cast<std::size_t>(std::llround(held_out * static_cast<double>(num_policies)));
}

std::size_t GenConfig::num_test_rows() const {
  return static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
}

void GenConfig::validate() const {
  if (!(held_out >= 0.0 && held_out < 1.0)) throw ValidationError("held_out must lie in [0, 1)");
  if (!(zipf_exponent > 0.0)) throw ValidationError("zipf exponent must be positive");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ValidationError("test_fraction must lie in [0, 1)");
  if (num_features == 0 || num_contexts == 0 || num_actions == 0 || effect_dim == 0) {
    throw ValidationError("feature, context, action and effect dimensions must be positive");
  }
  if (num_train_policies() < 2 || num_held_out() >= num_policies) {
    throw ValidationError("need at least two training policies");
  }
  if (num_held_out() > 0 && num_actions < 2) throw ValidationError("held-out perturbations need at least two actions");
  const std::size_t test = num_test_rows();
  if (n < 2 || test >= n) throw ValidationError("row counts leave an empty training split");
  if (!(noise_sd >= 0.0) || !std::isfinite(noise_sd)) throw ValidationError("noise_sd must be finite and >= 0");
  if (!std::isfinite(effect_scale) || !std::isfinite(baseline_scale) || baseline_scale < 0.0 ||
      !std::isfinite(heterogeneity_scale)) {
    throw ValidationError("oracle scales must be finite");
  }
  if (!(held_out_epsilon >= 0.0 && held_out_epsilon <= 2.0)) throw ValidationError("held_out_epsilon must lie in [0, 2]");
  if (regime == Regime::stratified && num_strata < 1) throw ValidationError("stratified regime needs >= 1 stratum");
  if (!std::isfinite(confounding)) throw ValidationError("confounding must be finite");
}

Json GenConfig::to_json() const {
  Json j;
  j["n"] = n;
  j["test_fraction"] = test_fraction;
  j["num_features"] = num_features;
  j["num_contexts"] = num_contexts;
  j["num_actions"] = num_actions;
  j["num_policies"] = num_policies;
  j["held_out"] = held_out;
  j["effect_dim"] = effect_dim;
  j["noise_sd"] = noise_sd;
  j["profile"] = profile == FrequencyProfile::zipf ? "zipf" : "uniform";
  j["zipf_exponent"] = zipf_exponent;
  j["regime"] = to_string(regime);
  j["effect_map"] = effect_map == EffectMap::linear ? "linear" : "net";
  j["seed"] = seed;
  j["effect_scale"] = effect_scale;
  j["baseline_scale"] = baseline_scale;
  j["heterogeneity_scale"] = heterogeneity_scale;
  j["held_out_epsilon"] = held_out_epsilon;
  j["num_strata"] = num_strata;
  j["confounding"] = confounding;
  return j;
}

GenConfig GenConfig::from_json(const Json& doc) {
  if (!doc.is_object()) throw ValidationError("generator config must be a JSON object");
  GenConfig cfg;
  const Json defaults = cfg.to_json();
  for (const auto& [key, value] : doc.items()) {
    if (!defaults.contains(key)) throw ValidationError("unknown generator config key '" + key + "'");
  }
  try {
    auto count = [&](const char* key, std::size_t& out) {
      if (doc.contains(key)) out = doc.at(key).get<std::size_t>();
    };
    auto real = [&](const char* key, double& out) {
      if (doc.contains(key)) out = doc.at(key).get<double>();
    };
    count("n", cfg.n);
    real("test_fraction", cfg.test_fraction);
    count("num_features", cfg.num_features);
    count("num_contexts", cfg.num_contexts);
    count("num_actions", cfg.num_actions);
    count("num_policies", cfg.num_policies);
    real("held_out", cfg.held_out);
    count("effect_dim", cfg.effect_dim);
    real("noise_sd", cfg.noise_sd);
    if (doc.contains("profile")) {
      const auto name = doc.at("profile").get<std::string>();
      if (name == "zipf") {
        cfg.profile = FrequencyProfile::zipf;
      } else if (name == "uniform") {
        cfg.profile = FrequencyProfile::uniform;
      } else {
        throw ValidationError("unknown frequency profile '" + name + "'");
      }
    }
    real("zipf_exponent", cfg.zipf_exponent);
    if (doc.contains("regime")) cfg.regime = regime_from_string(doc.at("regime").get<std::string>());
    if (doc.contains("effect_map")) {
      const auto name = doc.at("effect_map").get<std::string>();
      if (name == "linear") {
        cfg.effect_map = EffectMap::linear;
      } else if (name == "net") {
        cfg.effect_map = EffectMap::net;
      } else {
        throw ValidationError("unknown effect map '" + name + "'");
      }
    }
    if (doc.contains("seed")) cfg.seed = doc.at("seed").get<std::uint64_t>();
    real("effect_scale", cfg.effect_scale);
    real("baseline_scale", cfg.baseline_scale);
    real("heterogeneity_scale", cfg.heterogeneity_scale);
    real("held_out_epsilon", cfg.held_out_epsilon);
    count("num_strata", cfg.num_strata);
    real("confounding", cfg.confounding);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("generator config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

OracleTruth::OracleTruth(GenConfig cfg, PolicySpec spec, Mlp m0, Mlp g0, DenseMatrix linear_map, Mlp effect_net,
                         std::vector<double> train_profile, DenseMatrix assignment_weights)
    : cfg_(std::move(cfg)),
      spec_(std::move(spec)),
      m0_(std::move(m0)),
      g0_(std::move(g0)),
      linear_(std::move(linear_map)),
      effect_net_(std::move(effect_net)),
      profile_(std::move(train_profile)),
      assignment_(std::move(assignment_weights)) {
  if (linear_.rows() != cfg_.effect_dim || linear_.cols() != spec_.num_atoms()) {
    throw ShapeError("linear effect map must be effect_dim x atoms");
  }
  if (g0_.output_dim() != cfg_.effect_dim) throw ShapeError("g0 output must match effect_dim");
  if (profile_.size() > spec_.num_policies()) throw ShapeError("profile longer than the policy list");
  h0_.reserve(spec_.num_policies());
  for (std::size_t t = 0; t < spec_.num_policies(); ++t) h0_.push_back(effect_of(induced_mixture(spec_, t)));
}

double OracleTruth::m0(std::span<const double> x) const { return m0_.forward(x)[0]; }

std::vector<double> OracleTruth::g0(std::span<const double> x) const { return g0_.forward(x); }

std::vector<double> OracleTruth::effect_of(const Mixture& mixture) const {
  if (mixture.alpha.size() != spec_.num_atoms()) throw ShapeError("mixture does not match the oracle's atoms");
  if (cfg_.effect_map == EffectMap::linear) return matvec(linear_, mixture.alpha);
  std::vector<double> scaled(mixture.alpha);
  const double atoms = static_cast<double>(spec_.num_atoms());
  for (auto& v : scaled) v *= atoms;
  return effect_net_.forward(scaled);
}

double OracleTruth::mean_outcome(std::span<const double> x, std::size_t t) const {
  const auto g = g0(x);
  return m0(x) + dot(g, h0(t));
}

double OracleTruth::cate(std::span<const double> x, std::size_t t1, std::size_t t0) const {
  const auto& a = h0(t1);
  const auto& b = h0(t0);
  const auto g = g0(x);
  double tau = 0.0;
  for (std::size_t k = 0; k < g.size(); ++k) tau += g[k] * (a[k] - b[k]);
  return tau;
}

int OracleTruth::stratum_of(std::span<const double> x) const {
  const std::size_t k = std::max<std::size_t>(cfg_.num_strata, 1);
  const double u = normal_cdf(x[0]);
  return static_cast<int>(std::min(k - 1, static_cast<std::size_t>(u * static_cast<double>(k))));
}

std::vector<double> OracleTruth::stratum_profile(std::size_t stratum) const {
  const std::size_t n = profile_.size();
  const std::size_t shift = std::max<std::size_t>(1, n / std::max<std::size_t>(cfg_.num_strata, 1));
  std::vector<double> out(n);
  for (std::size_t t = 0; t < n; ++t) out[t] = profile_[(t + stratum * shift) % n];
  return out;
}

std::vector<double> OracleTruth::assignment_probs(std::span<const double> x) const {
  std::vector<double> probs(spec_.num_policies(), 0.0);
  std::vector<double> train;
  switch (cfg_.regime) {
    case Regime::rct:
      train = profile_;
      break;
    case Regime::stratified:
      train = stratum_profile(static_cast<std::size_t>(stratum_of(x)));
      break;
    case Regime::observational: {
      std::vector<double> logits(profile_.size());
      for (std::size_t t = 0; t < profile_.size(); ++t) {
        logits[t] = cfg_.confounding * dot(assignment_.row(t), x) + std::log(profile_[t]);
      }
      train = softmax(std::move(logits));
      break;
    }
  }
  std::copy(train.begin(), train.end(), probs.begin());
  return probs;
}

std::vector<double> OracleTruth::embedding_mean(std::span<const double> x) const {
  const auto probs = assignment_probs(x);
  std::vector<double> e(cfg_.effect_dim, 0.0);
  for (std::size_t t = 0; t < probs.size(); ++t) {
    if (probs[t] == 0.0) continue;
    for (std::size_t k = 0; k < e.size(); ++k) e[k] += probs[t] * h0_[t][k];
  }
  return e;
}

double OracleTruth::centered_baseline(std::span<const double> x) const {
  return m0(x) + dot(g0(x), embedding_mean(x));
}

Json OracleTruth::to_json() const {
  ParameterCheckpoint ck;
  ck.seed = cfg_.seed;
  ck.add_mlp("m0", m0_);
  ck.add_mlp("g0", g0_);
  ck.add("F.linear", linear_);
  if (cfg_.effect_map == EffectMap::net) ck.add_mlp("F.net", effect_net_);
  if (assignment_.size() > 0) ck.add("assignment", assignment_);
  Json doc;
  doc["schema_version"] = 1;
  doc["config"] = cfg_.to_json();
  doc["spec_fingerprint"] = spec_.fingerprint();
  doc["noise_sd"] = cfg_.noise_sd;
  doc["train_profile"] = reals_json(profile_);
  doc["parameters"] = ck.to_json();
  return doc;
}

std::shared_ptr<OracleTruth> OracleTruth::from_json(const Json& doc, const PolicySpec& spec) {
  try {
    const auto fp = doc.at("spec_fingerprint").get<std::string>();
    if (fp != spec.fingerprint()) throw ValidationError("oracle was generated for a different policy spec");
    const GenConfig cfg = GenConfig::from_json(doc.at("config"));
    const auto ck = ParameterCheckpoint::from_json(doc.at("parameters"));
    const auto& lin = ck.get("F.linear");
    Mlp net;
    if (cfg.effect_map == EffectMap::net) net = ck.get_mlp("F.net");
    DenseMatrix assignment;
    if (ck.contains("assignment")) {
      const auto& a = ck.get("assignment");
      assignment = DenseMatrix(a.rows, a.cols, a.values);
    }
    return std::make_shared<OracleTruth>(cfg, spec, ck.get_mlp("m0"), ck.get_mlp("g0"),
                                         DenseMatrix(lin.rows, lin.cols, lin.values), std::move(net),
                                         json_to_reals(doc.at("train_profile"), "train_profile"),
                                         std::move(assignment));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed oracle file: ") + e.what());
  }
}

SyntheticData generate(const GenConfig& cfg) {
  cfg.validate();
  const std::size_t p = cfg.num_features;
  const std::size_t atoms = cfg.num_contexts * cfg.num_actions;
  const std::size_t t_train = cfg.num_train_policies();
  const std::size_t t_held = cfg.num_held_out();
  Rng root(cfg.seed);

  std::vector<std::string> contexts, actions;
  for (std::size_t s = 0; s < cfg.num_contexts; ++s) contexts.push_back("s" + std::to_string(s));
  for (std::size_t a = 0; a < cfg.num_actions; ++a) actions.push_back("a" + std::to_string(a));

  // Oracle networks.
  Rng oracle_rng = root.split(kStreamOracle);
  std::vector<std::size_t> m_dims{p, kOracleWidth, 1};
  std::vector<std::size_t> g_dims{p, kOracleWidth, cfg.effect_dim};
  std::vector<std::size_t> f_dims{atoms, kOracleWidth, cfg.effect_dim};
  Mlp m0 = Mlp::make(m_dims, Activation::relu, Activation::identity, oracle_rng);
  Mlp g0 = Mlp::make(g_dims, Activation::relu, Activation::identity, oracle_rng);
  DenseMatrix linear(cfg.effect_dim, atoms);
  for (auto& v : linear.values()) v = oracle_rng.normal();
  {
    const double norm = spectral_norm(linear, 200, 1e-12);
    for (auto& v : linear.values()) v /= norm;
  }
  Mlp effect_net = Mlp::make(f_dims, Activation::relu, Activation::identity, oracle_rng);
  std::vector<double> offset(cfg.effect_dim);
  for (auto& v : offset) v = cfg.effect_scale * oracle_rng.normal();

  Rng cal_rng = root.split(kStreamCalibration);
  std::vector<std::vector<double>> cal_x;
  for (std::size_t i = 0; i < kCalibrationRows; ++i) cal_x.push_back(normal_vector(cal_rng, p));
  {
    const std::vector<double> zero{0.0};
    const std::vector<double> sd{cfg.baseline_scale};
    standardize_outputs(m0, cal_x, zero, sd);
    const std::vector<double> g_sd(cfg.effect_dim, cfg.effect_scale * cfg.heterogeneity_scale);
    standardize_outputs(g0, cal_x, offset, g_sd);
  }

  // Weights and training policies.
  Rng policy_rng = root.split(kStreamPolicies);
  std::vector<double> weights(cfg.num_contexts);
  for (auto& w : weights) w = 1.0 + policy_rng.uniform();
  {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    for (auto& w : weights) w /= total;
  }
  std::vector<std::vector<double>> rows(t_train);
  for (auto& row : rows) {
    row.reserve(atoms);
    for (std::size_t s = 0; s < cfg.num_contexts; ++s) {
      const auto probs = policy_rng.dirichlet(cfg.num_actions, 1.0);
      row.insert(row.end(), probs.begin(), probs.end());
    }
  }

  if (cfg.effect_map == EffectMap::net) {
    // Match the net map's spread over random policies to the linear map's.
    std::vector<std::vector<double>> cal_mix;
    std::vector<double> lin_mean(cfg.effect_dim, 0.0), lin_sq(cfg.effect_dim, 0.0);
    for (std::size_t i = 0; i < kCalibrationPolicies; ++i) {
      std::vector<double> alpha;
      for (std::size_t s = 0; s < cfg.num_contexts; ++s) {
        for (double v : cal_rng.dirichlet(cfg.num_actions, 1.0)) alpha.push_back(weights[s] * v);
      }
      const auto y = matvec(linear, alpha);
      for (std::size_t k = 0; k < y.size(); ++k) {
        lin_mean[k] += y[k];
        lin_sq[k] += y[k] * y[k];
      }
      for (auto& v : alpha) v *= static_cast<double>(atoms);
      cal_mix.push_back(std::move(alpha));
    }
    std::vector<double> lin_sd(cfg.effect_dim);
    const double m = static_cast<double>(kCalibrationPolicies);
    for (std::size_t k = 0; k < lin_sd.size(); ++k) {
      lin_mean[k] /= m;
      lin_sd[k] = std::sqrt(std::max(lin_sq[k] / m - lin_mean[k] * lin_mean[k], 1e-24));
    }
    standardize_outputs(effect_net, cal_mix, lin_mean, lin_sd);
  }

  // The policy with the lowest average outcome becomes the most frequent one
  // (the incumbent), so effects against it are positive on average.
  {
    auto effect_of = [&](const std::vector<double>& row) {
      std::vector<double> alpha(atoms);
      for (std::size_t i = 0; i < atoms; ++i) alpha[i] = weights[i / cfg.num_actions] * row[i];
      if (cfg.effect_map == EffectMap::linear) return matvec(linear, alpha);
      for (auto& v : alpha) v *= static_cast<double>(atoms);
      return effect_net.forward(alpha);
    };
    std::vector<double> mean_g(cfg.effect_dim, 0.0);
    for (const auto& x : cal_x) {
      const auto g = g0.forward(x);
      for (std::size_t k = 0; k < g.size(); ++k) mean_g[k] += g[k] / static_cast<double>(cal_x.size());
    }
    std::size_t worst = 0;
    double worst_value = 0.0;
    for (std::size_t t = 0; t < t_train; ++t) {
      const double v = dot(mean_g, effect_of(rows[t]));
      if (t == 0 || v < worst_value) {
        worst = t;
        worst_value = v;
      }
    }
    std::rotate(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(worst),
                rows.begin() + static_cast<std::ptrdiff_t>(worst + 1));
  }

  std::vector<std::string> ids;
  for (std::size_t t = 0; t < t_train; ++t) ids.push_back(padded("t", t, t_train));
  PolicySpec spec(contexts, actions, weights, ids, rows);

  SyntheticData out;
  Rng held_rng = root.split(kStreamHeldOut);
  for (std::size_t k = 0; k < t_held; ++k) {
    const std::size_t parent = 1 + k % (t_train - 1);
    auto perturbed = perturb_policy(spec, parent, cfg.held_out_epsilon, padded("h", k, t_held), &held_rng);
    spec = std::move(perturbed.spec);
    out.held_out.push_back(spec.num_policies() - 1);
    out.parents.push_back(parent);
  }

  std::vector<double> profile(t_train);
  for (std::size_t r = 0; r < t_train; ++r) {
    profile[r] = cfg.profile == FrequencyProfile::zipf ? std::pow(static_cast<double>(r + 1), -cfg.zipf_exponent) : 1.0;
  }
  {
    const double total = std::accumulate(profile.begin(), profile.end(), 0.0);
    for (auto& v : profile) v /= total;
  }

  DenseMatrix assignment;
  if (cfg.regime == Regime::observational) {
    Rng assign_rng = root.split(kStreamAssignment);
    assignment = DenseMatrix(t_train, p);
    const double scale = 1.0 / std::sqrt(static_cast<double>(p));
    for (auto& v : assignment.values()) v = scale * assign_rng.normal();
  }

  auto oracle = std::make_shared<OracleTruth>(cfg, spec, std::move(m0), std::move(g0), std::move(linear),
                                              std::move(effect_net), profile, std::move(assignment));

  const std::size_t n_test = cfg.num_test_rows();
  const std::size_t n_train = cfg.n - n_test;
  auto fill = [&](Dataset& data, std::size_t count, Rng& rng, bool uniform_over_all) {
    data = Dataset(p);
    if (cfg.regime == Regime::stratified) {
      for (std::size_t k = 0; k < cfg.num_strata; ++k) data.stratum_index("q" + std::to_string(k));
    }
    const std::vector<double> uniform(spec.num_policies(), 1.0 / static_cast<double>(spec.num_policies()));
    for (std::size_t i = 0; i < count; ++i) {
      const auto x = normal_vector(rng, p);
      const std::size_t t = draw_categorical(rng, uniform_over_all ? uniform : oracle->assignment_probs(x));
      const double y = oracle->mean_outcome(x, t) + cfg.noise_sd * rng.normal();
      const int stratum = cfg.regime == Regime::stratified ? oracle->stratum_of(x) : -1;
      data.add_row(x, t, y, stratum);
    }
    data.oracle = oracle;
  };
  Rng train_rng = root.split(kStreamTrainRows);
  Rng test_rng = root.split(kStreamTestRows);
  fill(out.train, n_train, train_rng, false);
  fill(out.test, n_test, test_rng, true);

  out.spec = std::move(spec);
  out.oracle = std::move(oracle);
  out.control = 0;
  return out;
}

double true_cate(const OracleTruth& oracle, const PolicySpec& spec, std::span<const double> x, std::size_t t1,
                 std::size_t t0) {
  if (spec.num_atoms() != oracle.spec().num_atoms()) throw ShapeError("spec atoms do not match the oracle");
  if (t1 >= spec.num_policies() || t0 >= spec.num_policies()) throw UnknownIdError("unknown policy in CATE query");
  const auto a = oracle.effect_of(induced_mixture(spec, t1));
  const auto b = oracle.effect_of(induced_mixture(spec, t0));
  const auto g = oracle.g0(x);
  double tau = 0.0;
  for (std::size_t k = 0; k < g.size(); ++k) tau += g[k] * (a[k] - b[k]);
  return tau;
}

double true_ate(const OracleTruth& oracle, const PolicySpec& spec, const Dataset& data, std::size_t t1,
                std::size_t t0) {
  if (data.empty()) throw ValidationError("true ATE needs data");
  if (spec.num_atoms() != oracle.spec().num_atoms()) throw ShapeError("spec atoms do not match the oracle");
  if (t1 >= spec.num_policies() || t0 >= spec.num_policies()) throw UnknownIdError("unknown policy in ATE query");
  const auto a = oracle.effect_of(induced_mixture(spec, t1));
  const auto b = oracle.effect_of(induced_mixture(spec, t0));
  std::vector<double> diff(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) diff[k] = a[k] - b[k];
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto g = oracle.g0(data.x(i));
    double tau = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) tau += g[k] * diff[k];
    total += tau;
  }
  return total / static_cast<double>(data.size());
}

}  // namespace poul
