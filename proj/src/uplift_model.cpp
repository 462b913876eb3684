#include "poul/uplift_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "poul/errors.hpp"
#include "poul/policy_table.hpp"

namespace poul {

namespace {

// Seed streams; every random draw in training derives from cfg.seed.
constexpr std::uint64_t kStreamBaseline = 1;
constexpr std::uint64_t kStreamHeterogeneity = 3;
constexpr std::uint64_t kStreamEncoder = 4;
constexpr std::uint64_t kStreamStage2Order = 5;
constexpr std::uint64_t kStreamPropensity = 6;
constexpr std::uint64_t kStreamFolds = 7;
constexpr std::uint64_t kStreamFoldBase = 100;

std::vector<std::size_t> net_dims(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

double add_l2(const Mlp& net, MlpGradients& grads, double lambda) {
  if (lambda == 0.0) return 0.0;
  double total = 0.0;
  for (std::size_t k = 0; k < net.layers().size(); ++k) {
    const auto& layer = net.layers()[k];
    auto w = layer.weight.values();
    auto gw = grads.weight[k].values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      total += w[i] * w[i];
      gw[i] += 2.0 * lambda * w[i];
    }
    for (std::size_t i = 0; i < layer.bias.size(); ++i) {
      total += layer.bias[i] * layer.bias[i];
      grads.bias[k][i] += 2.0 * lambda * layer.bias[i];
    }
  }
  return lambda * total;
}

OptimizerConfig optimizer_config(const TrainConfig& cfg) {
  OptimizerConfig oc;
  oc.kind = cfg.optimizer;
  oc.learning_rate = cfg.learning_rate;
  return oc;
}

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

std::string coordinates(std::size_t epoch, std::size_t batch) {
  return "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch);
}

Json reals_json(std::span<const double> v) {
  Json out = Json::array();
  for (double x : v) out.push_back(x);
  return out;
}

Json sizes_json(const std::vector<std::size_t>& v) {
  Json out = Json::array();
  for (auto x : v) out.push_back(x);
  return out;
}

std::vector<std::size_t> sizes_from_json(const Json& j) {
  std::vector<std::size_t> out;
  for (const auto& v : j) out.push_back(v.get<std::size_t>());
  return out;
}

// Number of e_h groups for the running-mean regimes (1 for rct).
std::size_t mean_groups(const Dataset& data, Regime regime) {
  if (regime != Regime::stratified) return 1;
  if (!data.has_strata()) throw ValidationError("stratified regime needs a stratum label on every row");
  return data.stratum_names().size();
}

std::size_t group_of(const Dataset& data, Regime regime, std::size_t row) {
  return regime == Regime::stratified ? static_cast<std::size_t>(data.stratum(row)) : 0;
}

// Exact per-group means of h(T_i) under the current parameters.
void exact_group_means(const Dataset& data, Regime regime, const std::vector<std::vector<double>>& emb,
                       std::size_t dim, std::vector<std::vector<double>>& means,
                       std::vector<std::uint64_t>& counts) {
  const std::size_t groups = mean_groups(data, regime);
  means.assign(groups, std::vector<double>(dim, 0.0));
  counts.assign(groups, 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto gidx = group_of(data, regime, i);
    const auto& h = emb.at(data.t(i));
    for (std::size_t k = 0; k < dim; ++k) means[gidx][k] += h[k];
    ++counts[gidx];
  }
  for (std::size_t gidx = 0; gidx < groups; ++gidx) {
    if (counts[gidx] == 0) {
      const std::string name = regime == Regime::stratified ? data.stratum_names()[gidx] : "all";
      throw ValidationError("empty stratum '" + name + "'");
    }
    for (auto& v : means[gidx]) v /= static_cast<double>(counts[gidx]);
  }
}

// Per-row inputs for the stage-2 loop.
struct Nuisance {
  std::vector<double> m_hat;
  // When non-empty, e_h(X_i) = sum_t weights[i][t] h(t); otherwise the
  // regime's running mean is used.
  std::vector<std::vector<double>> weights;
};

void check_policies(const Dataset& data, const PolicySpec& spec) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.t(i) >= spec.num_policies()) {
      throw UnknownIdError("row " + std::to_string(i) + " refers to policy index " + std::to_string(data.t(i)));
    }
  }
}

std::vector<double> policy_frequencies(const Dataset& data, std::span<const std::size_t> rows,
                                       std::size_t num_policies) {
  std::vector<double> freq(num_policies, 0.0);
  for (auto i : rows) freq[data.t(i)] += 1.0;
  for (auto& v : freq) v /= static_cast<double>(rows.size());
  return freq;
}

void run_stage2(UpliftModel& model, const Dataset& data, const TrainConfig& cfg, const Nuisance& nz,
                std::vector<double>& trace, const TrainObserver* observer) {
  const auto& spec = model.spec;
  const std::size_t n = data.size();
  const std::size_t d = model.encoder->output_dim();
  const bool weighted = !nz.weights.empty();
  const bool running = cfg.residualize && !weighted;
  if (running && model.regime == Regime::observational) {
    throw std::logic_error("observational stage 2 needs per-row propensity weights");
  }

  std::vector<std::vector<double>> means;
  std::vector<std::uint64_t> counts;
  if (running) {
    means.assign(mean_groups(data, model.regime), std::vector<double>(d, 0.0));
    counts.assign(means.size(), 0);
    if (cfg.warm_start_mean) {
      exact_group_means(data, model.regime, model.encoder->embed_policies(spec), d, means, counts);
      std::fill(counts.begin(), counts.end(), 0);
    }
  }

  MlpGradients g_grads = model.g_net.make_gradients();
  std::vector<ParamSlot> slots;
  model.g_net.append_slots("g", g_grads, slots);
  model.encoder->append_slots(slots);
  Optimizer opt(optimizer_config(cfg));

  Rng order_rng(mix_seed(cfg.seed, kStreamStage2Order));
  auto order = iota_rows(n);
  std::vector<std::size_t> all_policies = iota_rows(spec.num_policies());
  MlpTape tape;
  std::vector<double> e(d), diff(d), up_g(d), up_h(d), neg_h(d);
  std::vector<std::vector<double>> row_embeddings;
  std::vector<double> row_loss(n, 0.0);

  for (std::size_t epoch = 0; epoch < cfg.stage2_epochs; ++epoch) {
    order_rng.shuffle(order);
    if (running && cfg.fresh_mean_per_epoch) {
      exact_group_means(data, model.regime, model.encoder->embed_policies(spec), d, means, counts);
    }
    double epoch_penalty = 0.0;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> rows(order.data() + start, stop - start);
      const double inv_b = 1.0 / static_cast<double>(rows.size());
      double objective = 0.0;
      double penalty = 0.0;
      try {
        std::vector<std::size_t> policies;
        if (weighted) {
          policies = all_policies;
        } else {
          policies.reserve(rows.size());
          for (auto i : rows) policies.push_back(data.t(i));
          std::sort(policies.begin(), policies.end());
          policies.erase(std::unique(policies.begin(), policies.end()), policies.end());
        }
        g_grads.zero();
        model.encoder->zero_grad();
        model.encoder->begin_batch(spec, policies);

        row_embeddings.resize(rows.size());
        double loss = 0.0;
        for (std::size_t b = 0; b < rows.size(); ++b) {
          const std::size_t i = rows[b];
          const std::size_t t = data.t(i);
          const auto h = model.encoder->batch_embedding(t);
          row_embeddings[b].assign(h.begin(), h.end());

          std::fill(e.begin(), e.end(), 0.0);
          if (weighted) {
            const auto& w = nz.weights[i];
            for (std::size_t u = 0; u < w.size(); ++u) {
              if (w[u] == 0.0) continue;
              const auto hu = model.encoder->batch_embedding(u);
              for (std::size_t k = 0; k < d; ++k) e[k] += w[u] * hu[k];
            }
          } else if (running) {
            e = means[group_of(data, model.regime, i)];
          }

          const auto& g = model.g_net.forward(data.x(i), tape);
          double fit = nz.m_hat[i];
          for (std::size_t k = 0; k < d; ++k) {
            diff[k] = h[k] - e[k];
            fit += g[k] * diff[k];
          }
          const double r = data.y(i) - fit;
          loss += r * r;
          row_loss[i] = r * r;
          const double coef = -2.0 * r * inv_b;
          for (std::size_t k = 0; k < d; ++k) {
            up_g[k] = coef * diff[k];
            up_h[k] = coef * g[k];
          }
          model.encoder->accumulate_gradient(t, up_h);
          if (weighted) {
            // e_h(x) = sum_u w_u h(u) depends on the embeddings too.
            const auto& w = nz.weights[i];
            for (std::size_t u = 0; u < w.size(); ++u) {
              if (w[u] == 0.0) continue;
              for (std::size_t k = 0; k < d; ++k) neg_h[k] = -w[u] * up_h[k];
              model.encoder->accumulate_gradient(u, neg_h);
            }
          }
          model.g_net.backward(tape, up_g, g_grads);
        }
        model.encoder->finish_backward();
        penalty = add_l2(model.g_net, g_grads, cfg.l2) + model.encoder->regularize(cfg.l2);
        objective = loss * inv_b + penalty;
        if (!std::isfinite(objective)) throw TrainingError("non-finite stage-2 loss");
        opt.step(slots);
        model.encoder->parameters_changed();
      } catch (const TrainingError& err) {
        throw TrainingError(std::string("stage 2, ") + coordinates(epoch, batch) + ": " + err.what());
      }

      if (running) {
        // After the parameter step, from the embeddings the batch was fit with.
        for (std::size_t group = 0; group < means.size(); ++group) {
          std::vector<double> sum(d, 0.0);
          std::uint64_t added = 0;
          for (std::size_t b = 0; b < rows.size(); ++b) {
            if (group_of(data, model.regime, rows[b]) != group) continue;
            for (std::size_t k = 0; k < d; ++k) sum[k] += row_embeddings[b][k];
            ++added;
          }
          if (added == 0 || cfg.fresh_mean_per_epoch) continue;
          const double c = static_cast<double>(counts[group]);
          const double total = c + static_cast<double>(added);
          for (std::size_t k = 0; k < d; ++k) means[group][k] = (c * means[group][k] + sum[k]) / total;
          counts[group] += added;
        }
        if (model.regime == Regime::stratified) {
          model.e_hat.stratum_mean = means;
          model.e_hat.stratum_count = counts;
        } else {
          model.e_hat.mean = means[0];
          model.e_hat.count = counts[0];
        }
      }

      epoch_penalty += penalty * static_cast<double>(rows.size());
      if (observer && observer->on_batch) {
        BatchEvent ev;
        ev.epoch = epoch;
        ev.batch = batch;
        ev.rows = rows;
        ev.row_embeddings = &row_embeddings;
        ev.model = &model;
        observer->on_batch(ev);
      }
    }
    // Row-index order, so the trace does not depend on the shuffle.
    double epoch_loss = 0.0;
    for (double v : row_loss) epoch_loss += v;
    trace.push_back((epoch_loss + epoch_penalty) / static_cast<double>(n));
    if (observer && observer->on_epoch_end) observer->on_epoch_end(epoch, model);
  }

  if (running && cfg.fresh_mean_per_epoch) {
    exact_group_means(data, model.regime, model.encoder->embed_policies(spec), d, means, counts);
    if (model.regime == Regime::stratified) {
      model.e_hat.stratum_mean = means;
      model.e_hat.stratum_count = counts;
    } else {
      model.e_hat.mean = means[0];
      model.e_hat.count = counts[0];
    }
  }
}

UpliftModel initial_model(std::unique_ptr<TreatmentEncoder> encoder, const Dataset& data, const PolicySpec& spec,
                          const TrainConfig& cfg) {
  UpliftModel model;
  model.spec = spec;
  model.regime = cfg.regime;
  model.residualize = cfg.residualize;
  model.encoder = std::move(encoder);
  Rng g_rng(mix_seed(cfg.seed, kStreamHeterogeneity));
  model.g_net = Mlp::make(net_dims(data.num_features(), cfg.g_hidden, model.encoder->output_dim()),
                          Activation::relu, Activation::identity, g_rng);
  model.e_hat.regime = cfg.regime;
  if (cfg.regime == Regime::stratified) {
    model.e_hat.strata = data.stratum_names();
  }
  return model;
}

TrainConfig fold_config(const TrainConfig& cfg, std::size_t fold) {
  TrainConfig out = cfg;
  out.seed = mix_seed(cfg.seed, kStreamFoldBase + fold);
  return out;
}

}  // namespace

std::string to_string(Regime r) {
  switch (r) {
    case Regime::rct:
      return "rct";
    case Regime::stratified:
      return "stratified";
    case Regime::observational:
      return "observational";
  }
  return "rct";
}

Regime regime_from_string(const std::string& name) {
  if (name == "rct") return Regime::rct;
  if (name == "stratified") return Regime::stratified;
  if (name == "observational") return Regime::observational;
  throw ValidationError("unknown regime '" + name + "'");
}

void TrainConfig::validate() const {
  if (stage2_epochs < 1) throw ValidationError("stage2_epochs must be >= 1");
  if (folds < 1) throw ValidationError("folds must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning_rate must be finite and >= 0");
  }
  if (!(l2 >= 0.0) || !std::isfinite(l2)) throw ValidationError("l2 must be finite and >= 0");
  if (!(propensity_clip >= 0.0 && propensity_clip < 1.0)) throw ValidationError("propensity_clip must lie in [0, 1)");
  auto positive = [](const std::vector<std::size_t>& dims, const char* what) {
    for (auto v : dims) {
      if (v == 0) throw ValidationError(std::string(what) + " contains a zero width");
    }
  };
  positive(m_hidden, "m_hidden");
  positive(g_hidden, "g_hidden");
  positive(treatment.hidden, "treatment.hidden");
  positive(propensity_hidden, "propensity_hidden");
  if (treatment.output_dim == 0) throw ValidationError("treatment.output_dim must be positive");
  if (warm_start_mean && fresh_mean_per_epoch) {
    throw ValidationError("warm_start_mean and fresh_mean_per_epoch are mutually exclusive");
  }
}

Json TrainConfig::to_json() const {
  Json t;
  t["embedding_dim"] = treatment.embedding_dim;
  t["output_dim"] = treatment.output_dim;
  t["hidden"] = sizes_json(treatment.hidden);
  t["hidden_activation"] = poul::to_string(treatment.hidden_activation);
  t["atom_mode"] = treatment.atom_mode == AtomMode::table ? "table" : "factored";
  t["layer_norm"] = treatment.layer_norm;
  Json j;
  j["stage1_epochs"] = stage1_epochs;
  j["stage2_epochs"] = stage2_epochs;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["l2"] = l2;
  j["folds"] = folds;
  j["seed"] = seed;
  j["regime"] = poul::to_string(regime);
  j["propensity_clip"] = propensity_clip;
  j["optimizer"] = optimizer == OptimizerKind::adam ? "adam" : "sgd";
  j["m_hidden"] = sizes_json(m_hidden);
  j["g_hidden"] = sizes_json(g_hidden);
  j["treatment"] = std::move(t);
  j["propensity_epochs"] = propensity_epochs;
  j["propensity_hidden"] = sizes_json(propensity_hidden);
  j["warm_start_mean"] = warm_start_mean;
  j["fresh_mean_per_epoch"] = fresh_mean_per_epoch;
  j["residualize"] = residualize;
  return j;
}

TrainConfig TrainConfig::from_json(const Json& doc) {
  if (!doc.is_object()) throw ValidationError("train config must be a JSON object");
  TrainConfig cfg;
  static const std::set<std::string> known = {
      "stage1_epochs", "stage2_epochs", "batch_size",        "learning_rate",   "l2",
      "folds",         "seed",          "regime",            "propensity_clip", "optimizer",
      "m_hidden",      "g_hidden",      "treatment",         "propensity_epochs", "propensity_hidden",
      "warm_start_mean", "fresh_mean_per_epoch", "residualize"};
  try {
    for (const auto& [key, value] : doc.items()) {
      if (!known.contains(key)) throw ValidationError("unknown train config key '" + key + "'");
    }
    auto read_count = [&](const char* key, std::size_t& out) {
      if (!doc.contains(key)) return;
      const auto& v = doc.at(key);
      if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ValidationError(std::string(key) + " must be a nonnegative integer");
      }
      out = v.get<std::size_t>();
    };
    read_count("stage1_epochs", cfg.stage1_epochs);
    read_count("stage2_epochs", cfg.stage2_epochs);
    read_count("batch_size", cfg.batch_size);
    read_count("folds", cfg.folds);
    read_count("propensity_epochs", cfg.propensity_epochs);
    if (doc.contains("learning_rate")) cfg.learning_rate = doc.at("learning_rate").get<double>();
    if (doc.contains("l2")) cfg.l2 = doc.at("l2").get<double>();
    if (doc.contains("seed")) cfg.seed = doc.at("seed").get<std::uint64_t>();
    if (doc.contains("regime")) cfg.regime = regime_from_string(doc.at("regime").get<std::string>());
    if (doc.contains("propensity_clip")) cfg.propensity_clip = doc.at("propensity_clip").get<double>();
    if (doc.contains("optimizer")) {
      const auto name = doc.at("optimizer").get<std::string>();
      if (name == "adam") {
        cfg.optimizer = OptimizerKind::adam;
      } else if (name == "sgd") {
        cfg.optimizer = OptimizerKind::sgd;
      } else {
        throw ValidationError("unknown optimizer '" + name + "'");
      }
    }
    if (doc.contains("m_hidden")) cfg.m_hidden = sizes_from_json(doc.at("m_hidden"));
    if (doc.contains("g_hidden")) cfg.g_hidden = sizes_from_json(doc.at("g_hidden"));
    if (doc.contains("propensity_hidden")) cfg.propensity_hidden = sizes_from_json(doc.at("propensity_hidden"));
    if (doc.contains("warm_start_mean")) cfg.warm_start_mean = doc.at("warm_start_mean").get<bool>();
    if (doc.contains("fresh_mean_per_epoch")) cfg.fresh_mean_per_epoch = doc.at("fresh_mean_per_epoch").get<bool>();
    if (doc.contains("residualize")) cfg.residualize = doc.at("residualize").get<bool>();
    if (doc.contains("treatment")) {
      const auto& t = doc.at("treatment");
      static const std::set<std::string> tknown = {"embedding_dim", "output_dim", "hidden",
                                                   "hidden_activation", "atom_mode", "layer_norm"};
      for (const auto& [key, value] : t.items()) {
        if (!tknown.contains(key)) throw ValidationError("unknown treatment config key '" + key + "'");
      }
      if (t.contains("embedding_dim")) cfg.treatment.embedding_dim = t.at("embedding_dim").get<std::size_t>();
      if (t.contains("output_dim")) cfg.treatment.output_dim = t.at("output_dim").get<std::size_t>();
      if (t.contains("hidden")) cfg.treatment.hidden = sizes_from_json(t.at("hidden"));
      if (t.contains("hidden_activation")) {
        cfg.treatment.hidden_activation = activation_from_string(t.at("hidden_activation").get<std::string>());
      }
      if (t.contains("atom_mode")) {
        const auto mode = t.at("atom_mode").get<std::string>();
        if (mode == "table") {
          cfg.treatment.atom_mode = AtomMode::table;
        } else if (mode == "factored") {
          cfg.treatment.atom_mode = AtomMode::factored;
        } else {
          throw ValidationError("unknown atom_mode '" + mode + "'");
        }
      }
      if (t.contains("layer_norm")) cfg.treatment.layer_norm = t.at("layer_norm").get<bool>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::vector<double> clip_probabilities(std::vector<double> probs, double floor) {
  const std::size_t k = probs.size();
  if (k == 0) return probs;
  if (floor * static_cast<double>(k) > 1.0) throw ValidationError("clip threshold too large for the class count");
  std::vector<bool> pinned(k, false);
  for (std::size_t iter = 0; iter <= k; ++iter) {
    double free_mass = 1.0;
    double rest = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      if (pinned[i]) {
        free_mass -= floor;
      } else {
        rest += probs[i];
      }
    }
    bool changed = false;
    for (std::size_t i = 0; i < k; ++i) {
      if (pinned[i]) {
        probs[i] = floor;
      } else {
        probs[i] = rest > 0.0 ? probs[i] * free_mass / rest : free_mass;
      }
    }
    for (std::size_t i = 0; i < k; ++i) {
      if (!pinned[i] && probs[i] < floor) {
        pinned[i] = true;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return probs;
}

std::vector<double> PropensityModel::predict(std::span<const double> x) const {
  auto logits = net_.forward(x);
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (auto& v : logits) {
    v = std::exp(v - top);
    total += v;
  }
  for (auto& v : logits) v /= total;
  return clip_probabilities(std::move(logits), clip_);
}

PropensityModel fit_propensity(const Dataset& data, const PolicySpec& spec, const TrainConfig& cfg,
                               std::vector<double>* loss_trace) {
  if (data.empty()) throw ValidationError("propensity fit needs data");
  check_policies(data, spec);
  {
    std::set<std::size_t> seen(data.treatments().begin(), data.treatments().end());
    if (seen.size() < 2) throw ValidationError("propensity fit needs at least two distinct policies");
  }
  const std::size_t classes = spec.num_policies();
  Rng rng(mix_seed(cfg.seed, kStreamPropensity));
  Mlp net = Mlp::make(net_dims(data.num_features(), cfg.propensity_hidden, classes), Activation::relu,
                      Activation::identity, rng);
  MlpGradients grads = net.make_gradients();
  std::vector<ParamSlot> slots;
  net.append_slots("propensity", grads, slots);
  Optimizer opt(optimizer_config(cfg));
  Rng order_rng = rng.split(1);
  auto order = iota_rows(data.size());
  MlpTape tape;
  std::vector<double> up(classes);
  for (std::size_t epoch = 0; epoch < cfg.propensity_epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(stop - start);
      grads.zero();
      double loss = 0.0;
      try {
        for (std::size_t b = start; b < stop; ++b) {
          const std::size_t i = order[b];
          const auto& logits = net.forward(data.x(i), tape);
          const double top = *std::max_element(logits.begin(), logits.end());
          double total = 0.0;
          for (std::size_t c = 0; c < classes; ++c) {
            up[c] = std::exp(logits[c] - top);
            total += up[c];
          }
          const std::size_t t = data.t(i);
          loss += std::log(total) - (logits[t] - top);
          for (std::size_t c = 0; c < classes; ++c) up[c] = (up[c] / total - (c == t ? 1.0 : 0.0)) * inv_b;
          net.backward(tape, up, grads);
        }
        const double objective = loss * inv_b + add_l2(net, grads, cfg.l2);
        if (!std::isfinite(objective)) throw TrainingError("non-finite propensity loss");
        opt.step(slots);
        epoch_loss += objective * static_cast<double>(stop - start);
      } catch (const TrainingError& err) {
        throw TrainingError(std::string("propensity, ") + coordinates(epoch, batch) + ": " + err.what());
      }
    }
    if (loss_trace) loss_trace->push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return PropensityModel(std::move(net), cfg.propensity_clip);
}

std::vector<double> EmbeddingMean::value(std::span<const double> x, int stratum,
                                         const std::vector<std::vector<double>>& embeddings) const {
  switch (regime) {
    case Regime::rct:
      return mean;
    case Regime::stratified:
      if (stratum < 0 || static_cast<std::size_t>(stratum) >= stratum_mean.size()) {
        throw ValidationError("stratified e_h needs a known stratum, got " + std::to_string(stratum));
      }
      return stratum_mean[static_cast<std::size_t>(stratum)];
    case Regime::observational: {
      if (propensity.empty()) throw ValidationError("observational e_h needs a fitted propensity model");
      std::vector<double> probs(embeddings.size(), 0.0);
      for (const auto& model : propensity) {
        const auto p = model.predict(x);
        if (p.size() != embeddings.size()) throw ShapeError("propensity classes do not match the policy count");
        for (std::size_t t = 0; t < p.size(); ++t) probs[t] += p[t];
      }
      for (auto& v : probs) v /= static_cast<double>(propensity.size());
      const std::size_t d = embeddings.empty() ? 0 : embeddings[0].size();
      std::vector<double> out(d, 0.0);
      for (std::size_t t = 0; t < embeddings.size(); ++t) {
        for (std::size_t k = 0; k < d; ++k) out[k] += probs[t] * embeddings[t][k];
      }
      return out;
    }
  }
  return mean;
}

UpliftModel::UpliftModel(const UpliftModel& other)
    : spec(other.spec),
      regime(other.regime),
      m_nets(other.m_nets),
      g_net(other.g_net),
      encoder(other.encoder ? other.encoder->clone() : nullptr),
      e_hat(other.e_hat),
      residualize(other.residualize) {}

UpliftModel& UpliftModel::operator=(const UpliftModel& other) {
  if (this != &other) {
    UpliftModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

double UpliftModel::baseline(std::span<const double> x) const {
  if (m_nets.empty()) throw ValidationError("model has no baseline network");
  if (m_nets.size() == 1) return m_nets[0].forward(x)[0];
  double total = 0.0;
  for (const auto& net : m_nets) total += net.forward(x)[0];
  return total / static_cast<double>(m_nets.size());
}

std::vector<double> UpliftModel::heterogeneity(std::span<const double> x) const { return g_net.forward(x); }

std::vector<std::vector<double>> UpliftModel::embeddings() const {
  if (!encoder) throw ValidationError("model has no treatment encoder");
  return encoder->embed_policies(spec);
}

std::vector<double> UpliftModel::embedding_mean(std::span<const double> x, int stratum) const {
  if (!residualize) return std::vector<double>(encoder->output_dim(), 0.0);
  if (e_hat.regime == Regime::observational) return e_hat.value(x, stratum, embeddings());
  return e_hat.value(x, stratum, {});
}

double predict_outcome(const UpliftModel& model, std::span<const double> x, std::size_t t, int stratum) {
  if (t >= model.spec.num_policies()) throw UnknownIdError("unknown policy index " + std::to_string(t));
  const auto h = model.encoder->embed(model.spec, t);
  const auto e = model.embedding_mean(x, stratum);
  const auto g = model.g_net.forward(x);
  double y = model.baseline(x);
  for (std::size_t k = 0; k < g.size(); ++k) y += g[k] * (h[k] - e[k]);
  return y;
}

double predict_cate(const UpliftModel& model, std::span<const double> x, std::span<const double> h1,
                    std::span<const double> h0) {
  const auto g = model.g_net.forward(x);
  if (h1.size() != g.size() || h0.size() != g.size()) throw ShapeError("embedding size does not match g(x)");
  double tau = 0.0;
  for (std::size_t k = 0; k < g.size(); ++k) tau += g[k] * (h1[k] - h0[k]);
  return tau;
}

double predict_cate(const UpliftModel& model, std::span<const double> x, std::size_t t1, std::size_t t0) {
  const std::size_t np = model.spec.num_policies();
  if (t1 >= np || t0 >= np) throw UnknownIdError("unknown policy index in CATE query");
  const auto h1 = model.encoder->embed(model.spec, t1);
  const auto h0 = model.encoder->embed(model.spec, t0);
  return predict_cate(model, x, h1, h0);
}

Mlp fit_baseline(const Dataset& data, const TrainConfig& cfg, std::uint64_t stream, std::vector<double>* loss_trace) {
  if (data.empty()) throw ValidationError("baseline fit needs a nonempty dataset");
  Rng rng(mix_seed(cfg.seed, stream));
  Mlp net = Mlp::make(net_dims(data.num_features(), cfg.m_hidden, 1), Activation::relu, Activation::identity, rng);
  MlpGradients grads = net.make_gradients();
  std::vector<ParamSlot> slots;
  net.append_slots("m", grads, slots);
  Optimizer opt(optimizer_config(cfg));
  Rng order_rng = rng.split(2);
  auto order = iota_rows(data.size());
  MlpTape tape;
  double up[1];
  for (std::size_t epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
    order_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(stop - start);
      grads.zero();
      double loss = 0.0;
      try {
        for (std::size_t b = start; b < stop; ++b) {
          const std::size_t i = order[b];
          const double r = net.forward(data.x(i), tape)[0] - data.y(i);
          loss += r * r;
          up[0] = 2.0 * r * inv_b;
          net.backward(tape, up, grads);
        }
        const double objective = loss * inv_b + add_l2(net, grads, cfg.l2);
        if (!std::isfinite(objective)) throw TrainingError("non-finite stage-1 loss");
        opt.step(slots);
        epoch_loss += objective * static_cast<double>(stop - start);
      } catch (const TrainingError& err) {
        throw TrainingError(std::string("stage 1, ") + coordinates(epoch, batch) + ": " + err.what());
      }
    }
    if (loss_trace) loss_trace->push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return net;
}

EmbeddingMean estimate_e_h(const UpliftModel& model, const Dataset& data) {
  if (data.empty()) throw ValidationError("e_h estimate needs data");
  check_policies(data, model.spec);
  EmbeddingMean out;
  out.regime = model.regime;
  if (model.regime == Regime::observational) {
    if (model.e_hat.propensity.empty()) throw ValidationError("observational e_h needs a fitted propensity model");
    out.propensity = model.e_hat.propensity;
    return out;
  }
  const auto emb = model.embeddings();
  std::vector<std::vector<double>> means;
  std::vector<std::uint64_t> counts;
  exact_group_means(data, model.regime, emb, model.encoder->output_dim(), means, counts);
  if (model.regime == Regime::stratified) {
    out.strata = data.stratum_names();
    out.stratum_mean = std::move(means);
    out.stratum_count = std::move(counts);
  } else {
    out.mean = std::move(means[0]);
    out.count = counts[0];
  }
  return out;
}

bool CrossFitLineage::clean() const {
  if (nuisance_model_of_row.size() != fold_of_row.size()) return false;
  for (std::size_t i = 0; i < nuisance_model_of_row.size(); ++i) {
    const auto k = nuisance_model_of_row[i];
    if (k >= nuisance_rows.size()) return false;
    const auto& rows = nuisance_rows[k];
    if (std::binary_search(rows.begin(), rows.end(), i)) return false;
  }
  return true;
}

std::unique_ptr<TreatmentEncoder> make_treatment_net(const PolicySpec& spec, const TrainConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, kStreamEncoder));
  return std::make_unique<TreatmentNet>(TreatmentNet::make(spec, cfg.treatment, rng));
}

TrainResult train_two_stage(const Dataset& data_all, const Dataset& data_exp, const PolicySpec& spec,
                            const TrainConfig& cfg, const TrainObserver* observer) {
  cfg.validate();
  return train_two_stage_with(make_treatment_net(spec, cfg), data_all, data_exp, spec, cfg, observer);
}

TrainResult train_two_stage_with(std::unique_ptr<TreatmentEncoder> encoder, const Dataset& data_all,
                                 const Dataset& data_exp, const PolicySpec& spec, const TrainConfig& cfg,
                                 const TrainObserver* observer) {
  cfg.validate();
  if (data_exp.empty()) throw ValidationError("stage 2 needs a nonempty experiment dataset");
  check_policies(data_all, spec);
  check_policies(data_exp, spec);
  if (data_all.num_features() != data_exp.num_features()) throw ShapeError("datasets disagree on feature count");

  TrainResult result;
  Mlp m_hat = fit_baseline(data_all, cfg, kStreamBaseline, &result.stage1_loss);

  UpliftModel model = initial_model(std::move(encoder), data_exp, spec, cfg);
  Nuisance nz;
  nz.m_hat.resize(data_exp.size());
  for (std::size_t i = 0; i < data_exp.size(); ++i) nz.m_hat[i] = m_hat.forward(data_exp.x(i))[0];
  model.m_nets.push_back(std::move(m_hat));

  if (cfg.regime == Regime::observational) {
    auto pi_hat = fit_propensity(data_exp, spec, cfg);
    if (cfg.residualize) {
      nz.weights.reserve(data_exp.size());
      for (std::size_t i = 0; i < data_exp.size(); ++i) nz.weights.push_back(pi_hat.predict(data_exp.x(i)));
    }
    model.e_hat.propensity.push_back(std::move(pi_hat));
  }

  run_stage2(model, data_exp, cfg, nz, result.stage2_loss, observer);
  result.model = std::move(model);
  return result;
}

TrainResult train_crossfit(const Dataset& data, const PolicySpec& spec, const TrainConfig& cfg,
                           const TrainObserver* observer) {
  cfg.validate();
  return train_crossfit_with(make_treatment_net(spec, cfg), data, spec, cfg, observer);
}

TrainResult train_crossfit_with(std::unique_ptr<TreatmentEncoder> encoder, const Dataset& data,
                                const PolicySpec& spec, const TrainConfig& cfg, const TrainObserver* observer) {
  cfg.validate();
  if (cfg.folds == 1) return train_two_stage_with(std::move(encoder), data, data, spec, cfg, observer);
  const std::size_t n = data.size();
  const std::size_t K = cfg.folds;
  if (K > n) throw ValidationError("folds (" + std::to_string(K) + ") exceed row count (" + std::to_string(n) + ")");
  check_policies(data, spec);

  CrossFitLineage lineage;
  lineage.fold_of_row.assign(n, 0);
  {
    Rng fold_rng(mix_seed(cfg.seed, kStreamFolds));
    auto perm = iota_rows(n);
    fold_rng.shuffle(perm);
    for (std::size_t j = 0; j < n; ++j) lineage.fold_of_row[perm[j]] = j % K;
  }
  std::vector<std::vector<std::size_t>> fold_rows(K);
  for (std::size_t i = 0; i < n; ++i) fold_rows[lineage.fold_of_row[i]].push_back(i);
  for (std::size_t k = 0; k < K; ++k) {
    if (fold_rows[k].empty()) throw ValidationError("fold " + std::to_string(k) + " is empty");
  }

  TrainResult result;
  UpliftModel model = initial_model(std::move(encoder), data, spec, cfg);
  Nuisance nz;
  nz.m_hat.assign(n, 0.0);
  if (cfg.residualize) nz.weights.assign(n, {});
  lineage.nuisance_rows.resize(K);
  lineage.nuisance_model_of_row.assign(n, 0);

  std::size_t groups = 1;
  if (cfg.regime == Regime::stratified) groups = mean_groups(data, cfg.regime);

  for (std::size_t k = 0; k < K; ++k) {
    auto& rows_out = lineage.nuisance_rows[k];
    for (std::size_t i = 0; i < n; ++i) {
      if (lineage.fold_of_row[i] != k) rows_out.push_back(i);
    }
    const Dataset train_k = data.subset(rows_out);
    const TrainConfig cfg_k = fold_config(cfg, k);
    std::vector<double> trace;
    Mlp m_k = fit_baseline(train_k, cfg_k, kStreamBaseline, &trace);
    if (result.stage1_loss.size() < trace.size()) result.stage1_loss.resize(trace.size(), 0.0);
    for (std::size_t e = 0; e < trace.size(); ++e) result.stage1_loss[e] += trace[e] / static_cast<double>(K);

    for (auto i : fold_rows[k]) {
      nz.m_hat[i] = m_k.forward(data.x(i))[0];
      lineage.nuisance_model_of_row[i] = k;
    }
    model.m_nets.push_back(std::move(m_k));

    if (cfg.regime == Regime::observational) {
      auto pi_k = fit_propensity(train_k, spec, cfg_k);
      if (cfg.residualize) {
        for (auto i : fold_rows[k]) nz.weights[i] = pi_k.predict(data.x(i));
      }
      model.e_hat.propensity.push_back(std::move(pi_k));
    } else if (cfg.residualize) {
      // Known-design regimes: out-of-fold assignment frequencies stand in for pi_0.
      std::vector<std::vector<std::size_t>> by_group(groups);
      for (auto i : rows_out) by_group[group_of(data, cfg.regime, i)].push_back(i);
      std::vector<std::vector<double>> freq(groups);
      for (std::size_t gidx = 0; gidx < groups; ++gidx) {
        if (by_group[gidx].empty()) {
          throw ValidationError("empty stratum '" + data.stratum_names()[gidx] + "' outside fold " + std::to_string(k));
        }
        freq[gidx] = policy_frequencies(data, by_group[gidx], spec.num_policies());
      }
      for (auto i : fold_rows[k]) nz.weights[i] = freq[group_of(data, cfg.regime, i)];
    }
  }

  run_stage2(model, data, cfg, nz, result.stage2_loss, observer);
  if (cfg.residualize && cfg.regime != Regime::observational) {
    auto e = estimate_e_h(model, data);
    model.e_hat = std::move(e);
  }
  result.model = std::move(model);
  result.lineage = std::move(lineage);
  return result;
}

ParameterCheckpoint save_model(const UpliftModel& model, const TrainConfig& cfg) {
  ParameterCheckpoint ck;
  ck.seed = cfg.seed;
  ck.metadata["kind"] = model.kind();
  ck.metadata["regime"] = to_string(model.regime);
  ck.metadata["residualize"] = model.residualize;
  ck.metadata["spec_fingerprint"] = model.spec.fingerprint();
  ck.metadata["config"] = cfg.to_json();
  ck.metadata["baseline_nets"] = model.m_nets.size();
  for (std::size_t k = 0; k < model.m_nets.size(); ++k) ck.add_mlp("m." + std::to_string(k), model.m_nets[k]);
  ck.add_mlp("g", model.g_net);
  model.encoder->save(ck);

  Json e;
  e["regime"] = to_string(model.e_hat.regime);
  switch (model.e_hat.regime) {
    case Regime::rct:
      e["mean"] = reals_json(model.e_hat.mean);
      e["count"] = model.e_hat.count;
      break;
    case Regime::stratified: {
      Json strata = Json::array();
      for (std::size_t s = 0; s < model.e_hat.stratum_mean.size(); ++s) {
        strata.push_back({{"name", s < model.e_hat.strata.size() ? model.e_hat.strata[s] : std::to_string(s)},
                          {"mean", reals_json(model.e_hat.stratum_mean[s])},
                          {"count", s < model.e_hat.stratum_count.size() ? model.e_hat.stratum_count[s] : 0}});
      }
      e["strata"] = std::move(strata);
      break;
    }
    case Regime::observational:
      e["propensity_models"] = model.e_hat.propensity.size();
      e["clip"] = model.e_hat.propensity.empty() ? cfg.propensity_clip : model.e_hat.propensity[0].clip();
      for (std::size_t k = 0; k < model.e_hat.propensity.size(); ++k) {
        ck.add_mlp("propensity." + std::to_string(k), model.e_hat.propensity[k].net());
      }
      break;
  }
  ck.metadata["e_h"] = std::move(e);
  return ck;
}

UpliftModel load_model(const ParameterCheckpoint& ck, const PolicySpec& spec) {
  try {
    const auto& meta = ck.metadata;
    const auto fp = meta.at("spec_fingerprint").get<std::string>();
    if (fp != spec.fingerprint()) {
      throw ValidationError("checkpoint was trained on spec " + fp + ", data uses " + spec.fingerprint());
    }
    UpliftModel model;
    model.spec = spec;
    model.regime = regime_from_string(meta.at("regime").get<std::string>());
    model.residualize = meta.at("residualize").get<bool>();
    const auto nets = meta.at("baseline_nets").get<std::size_t>();
    for (std::size_t k = 0; k < nets; ++k) model.m_nets.push_back(ck.get_mlp("m." + std::to_string(k)));
    model.g_net = ck.get_mlp("g");
    const auto kind = meta.at("kind").get<std::string>();
    if (kind == "poul") {
      model.encoder = std::make_unique<TreatmentNet>(TreatmentNet::load(ck));
    } else if (kind == "categorical") {
      model.encoder = std::make_unique<PolicyTable>(PolicyTable::load(ck));
    } else {
      throw ValidationError("checkpoint kind '" + kind + "' is not a factorized uplift model");
    }
    const auto& e = meta.at("e_h");
    model.e_hat.regime = regime_from_string(e.at("regime").get<std::string>());
    switch (model.e_hat.regime) {
      case Regime::rct:
        model.e_hat.mean = json_to_reals(e.at("mean"), "e_h mean");
        model.e_hat.count = e.at("count").get<std::uint64_t>();
        break;
      case Regime::stratified:
        for (const auto& s : e.at("strata")) {
          model.e_hat.strata.push_back(s.at("name").get<std::string>());
          model.e_hat.stratum_mean.push_back(json_to_reals(s.at("mean"), "stratum mean"));
          model.e_hat.stratum_count.push_back(s.at("count").get<std::uint64_t>());
        }
        break;
      case Regime::observational: {
        const auto count = e.at("propensity_models").get<std::size_t>();
        const double clip = e.at("clip").get<double>();
        for (std::size_t k = 0; k < count; ++k) {
          model.e_hat.propensity.emplace_back(ck.get_mlp("propensity." + std::to_string(k)), clip);
        }
        break;
      }
    }
    if (model.g_net.output_dim() != model.encoder->output_dim()) {
      throw ValidationError("checkpoint g and h dimensions disagree");
    }
    return model;
  } catch (const nlohmann::json::exception& err) {
    throw ValidationError(std::string("malformed model checkpoint: ") + err.what());
  }
}

}  // namespace poul
