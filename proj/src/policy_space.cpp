#include "poul/policy_space.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "poul/errors.hpp"

namespace poul {

namespace {

// Validates a probability vector; rescales when the sum is off by more than
// kSimplexTolerance but within kRenormalizeTolerance.
void normalize_simplex(std::span<double> values, const std::string& what) {
  double total = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) throw ValidationError(what + ": non-finite entry");
    if (v < 0.0) throw ValidationError(what + ": negative probability");
    total += v;
  }
  const double gap = std::abs(total - 1.0);
  if (gap > kRenormalizeTolerance) {
    throw ValidationError(what + ": sums to " + format_real(total) + ", expected 1");
  }
  if (gap > kSimplexTolerance) {
    for (auto& v : values) v /= total;
  }
}

template <class Vec>
std::unordered_map<std::string, std::size_t> index_names(const Vec& names, const std::string& what) {
  std::unordered_map<std::string, std::size_t> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!out.emplace(names[i], i).second) throw ValidationError("duplicate " + what + " id '" + names[i] + "'");
  }
  return out;
}

}  // namespace

PolicySpec::PolicySpec(std::vector<std::string> contexts, std::vector<std::string> actions, std::vector<double> weights,
                       std::vector<std::string> policy_ids, std::vector<std::vector<double>> rows)
    : contexts_(std::move(contexts)),
      actions_(std::move(actions)),
      weights_(std::move(weights)),
      policy_ids_(std::move(policy_ids)),
      rows_(std::move(rows)) {
  if (contexts_.empty() || actions_.empty()) throw ValidationError("policy spec needs contexts and actions");
  index_names(contexts_, "context");
  index_names(actions_, "action");
  if (weights_.size() != contexts_.size()) throw ValidationError("one weight per context required");
  normalize_simplex(weights_, "context weights");
  if (rows_.size() != policy_ids_.size()) throw ValidationError("one sub-strategy table per policy required");
  policy_lookup_ = index_names(policy_ids_, "policy");
  const std::size_t na = actions_.size();
  for (std::size_t t = 0; t < rows_.size(); ++t) {
    if (rows_[t].size() != num_atoms()) {
      throw ValidationError("policy '" + policy_ids_[t] + "' table has wrong size");
    }
    for (std::size_t s = 0; s < contexts_.size(); ++s) {
      normalize_simplex(std::span<double>(rows_[t].data() + s * na, na),
                        "policy '" + policy_ids_[t] + "' context '" + contexts_[s] + "'");
    }
  }
}

std::size_t PolicySpec::policy_index(const std::string& id) const {
  auto it = policy_lookup_.find(id);
  if (it == policy_lookup_.end()) throw UnknownIdError("unknown policy id '" + id + "'");
  return it->second;
}

PolicySpec PolicySpec::with_policy(const std::string& id, std::vector<double> row) const {
  auto ids = policy_ids_;
  auto rows = rows_;
  ids.push_back(id);
  rows.push_back(std::move(row));
  return PolicySpec(contexts_, actions_, weights_, std::move(ids), std::move(rows));
}

Json PolicySpec::to_json() const {
  Json doc;
  doc["schema_version"] = 1;
  doc["contexts"] = contexts_;
  doc["actions"] = actions_;
  Json w = Json::object();
  for (std::size_t s = 0; s < contexts_.size(); ++s) w[contexts_[s]] = weights_[s];
  doc["weights"] = std::move(w);
  Json policies = Json::object();
  for (std::size_t t = 0; t < policy_ids_.size(); ++t) {
    Json ctx = Json::object();
    for (std::size_t s = 0; s < contexts_.size(); ++s) {
      Json row = Json::object();
      for (std::size_t a = 0; a < actions_.size(); ++a) {
        const double p = prob(t, s, a);
        if (p != 0.0) row[actions_[a]] = p;
      }
      ctx[contexts_[s]] = std::move(row);
    }
    policies[policy_ids_[t]] = std::move(ctx);
  }
  doc["policies"] = std::move(policies);
  return doc;
}

std::string PolicySpec::fingerprint() const { return hex64(fnv1a(to_json().dump())); }

PolicySpec load_policy_spec(const Json& doc) {
  try {
    auto contexts = doc.at("contexts").get<std::vector<std::string>>();
    auto actions = doc.at("actions").get<std::vector<std::string>>();
    const auto ctx_index = index_names(contexts, "context");
    const auto act_index = index_names(actions, "action");

    std::vector<double> weights(contexts.size(), 0.0);
    std::vector<bool> seen(contexts.size(), false);
    for (const auto& [name, value] : doc.at("weights").items()) {
      auto it = ctx_index.find(name);
      if (it == ctx_index.end()) throw ValidationError("weight for unknown context '" + name + "'");
      weights[it->second] = value.get<double>();
      seen[it->second] = true;
    }
    for (std::size_t s = 0; s < contexts.size(); ++s) {
      if (!seen[s]) throw ValidationError("missing weight for context '" + contexts[s] + "'");
    }

    std::vector<std::string> ids;
    std::vector<std::vector<double>> rows;
    for (const auto& [pid, table] : doc.at("policies").items()) {
      std::vector<double> row(contexts.size() * actions.size(), 0.0);
      std::vector<bool> has_ctx(contexts.size(), false);
      for (const auto& [cname, probs] : table.items()) {
        auto cit = ctx_index.find(cname);
        if (cit == ctx_index.end()) {
          throw ValidationError("policy '" + pid + "' references unknown context '" + cname + "'");
        }
        has_ctx[cit->second] = true;
        for (const auto& [aname, p] : probs.items()) {
          auto ait = act_index.find(aname);
          if (ait == act_index.end()) {
            throw ValidationError("policy '" + pid + "' references unknown action '" + aname + "'");
          }
          row[cit->second * actions.size() + ait->second] = p.get<double>();
        }
      }
      for (std::size_t s = 0; s < contexts.size(); ++s) {
        if (!has_ctx[s]) {
          throw ValidationError("policy '" + pid + "' has no sub-strategy for context '" + contexts[s] + "'");
        }
      }
      ids.push_back(pid);
      rows.push_back(std::move(row));
    }
    return PolicySpec(std::move(contexts), std::move(actions), std::move(weights), std::move(ids), std::move(rows));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed policy spec: ") + e.what());
  }
}

PolicySpec load_policy_spec_file(const std::filesystem::path& path) { return load_policy_spec(read_json_file(path)); }

double Mixture::total() const { return std::accumulate(alpha.begin(), alpha.end(), 0.0); }

Mixture induced_mixture(const PolicySpec& spec, std::size_t t) {
  if (t >= spec.num_policies()) throw UnknownIdError("policy index out of range");
  Mixture m;
  m.alpha.resize(spec.num_atoms());
  const std::size_t na = spec.num_actions();
  const auto& row = spec.table(t);
  for (std::size_t s = 0; s < spec.num_contexts(); ++s) {
    const double w = spec.weights()[s];
    for (std::size_t a = 0; a < na; ++a) m.alpha[s * na + a] = w * row[s * na + a];
  }
  return m;
}

Mixture induced_mixture(const PolicySpec& spec, const std::string& id) {
  return induced_mixture(spec, spec.policy_index(id));
}

double policy_distance(const PolicySpec& spec, std::size_t t, std::size_t u) {
  if (t >= spec.num_policies() || u >= spec.num_policies()) throw UnknownIdError("policy index out of range");
  const std::size_t na = spec.num_actions();
  const auto& a = spec.table(t);
  const auto& b = spec.table(u);
  // Summed in value order so that re-indexing contexts or actions cannot change the result.
  std::vector<double> terms;
  terms.reserve(a.size());
  for (std::size_t s = 0; s < spec.num_contexts(); ++s) {
    for (std::size_t k = 0; k < na; ++k) {
      const double diff = spec.weights()[s] * std::abs(a[s * na + k] - b[s * na + k]);
      if (diff != 0.0) terms.push_back(diff);
    }
  }
  std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (double v : terms) total += v;
  return total;
}

double policy_distance(const PolicySpec& spec, const std::string& t, const std::string& u) {
  return policy_distance(spec, spec.policy_index(t), spec.policy_index(u));
}

double mixture_l1(const Mixture& a, const Mixture& b) {
  if (a.alpha.size() != b.alpha.size()) throw ShapeError("mixture size mismatch");
  std::vector<double> terms(a.alpha.size());
  for (std::size_t i = 0; i < a.alpha.size(); ++i) terms[i] = std::abs(a.alpha[i] - b.alpha[i]);
  std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (double v : terms) total += v;
  return total;
}

IndexPermutation IndexPermutation::identity(std::size_t num_contexts, std::size_t num_actions) {
  IndexPermutation p;
  p.contexts.resize(num_contexts);
  p.actions.resize(num_actions);
  std::iota(p.contexts.begin(), p.contexts.end(), std::size_t{0});
  std::iota(p.actions.begin(), p.actions.end(), std::size_t{0});
  return p;
}

IndexPermutation IndexPermutation::random(std::size_t num_contexts, std::size_t num_actions, Rng& rng) {
  auto p = identity(num_contexts, num_actions);
  rng.shuffle(p.contexts);
  rng.shuffle(p.actions);
  return p;
}

IndexPermutation IndexPermutation::inverse() const {
  IndexPermutation inv;
  inv.contexts.resize(contexts.size());
  inv.actions.resize(actions.size());
  for (std::size_t i = 0; i < contexts.size(); ++i) inv.contexts[contexts[i]] = i;
  for (std::size_t i = 0; i < actions.size(); ++i) inv.actions[actions[i]] = i;
  return inv;
}

IndexPermutation IndexPermutation::compose(const IndexPermutation& then) const {
  // Applying *this, then `then`: new position i holds then-source j, which holds our source.
  IndexPermutation out;
  out.contexts.resize(then.contexts.size());
  out.actions.resize(then.actions.size());
  for (std::size_t i = 0; i < then.contexts.size(); ++i) out.contexts[i] = contexts.at(then.contexts[i]);
  for (std::size_t i = 0; i < then.actions.size(); ++i) out.actions[i] = actions.at(then.actions[i]);
  return out;
}

std::size_t IndexPermutation::source_atom(std::size_t atom) const {
  const std::size_t na = actions.size();
  return contexts[atom / na] * na + actions[atom % na];
}

PolicySpec permute_spec(const PolicySpec& spec, const IndexPermutation& perm) {
  const std::size_t ns = spec.num_contexts();
  const std::size_t na = spec.num_actions();
  if (perm.contexts.size() != ns || perm.actions.size() != na) {
    throw ShapeError("permutation dims do not match spec");
  }
  auto check_bijection = [](const std::vector<std::size_t>& p) {
    std::vector<bool> hit(p.size(), false);
    for (auto v : p) {
      if (v >= p.size() || hit[v]) throw ShapeError("permutation is not a bijection");
      hit[v] = true;
    }
  };
  check_bijection(perm.contexts);
  check_bijection(perm.actions);

  std::vector<std::string> contexts(ns), actions(na);
  std::vector<double> weights(ns);
  for (std::size_t i = 0; i < ns; ++i) {
    contexts[i] = spec.contexts()[perm.contexts[i]];
    weights[i] = spec.weights()[perm.contexts[i]];
  }
  for (std::size_t i = 0; i < na; ++i) actions[i] = spec.actions()[perm.actions[i]];
  std::vector<std::vector<double>> rows;
  rows.reserve(spec.num_policies());
  for (std::size_t t = 0; t < spec.num_policies(); ++t) {
    std::vector<double> row(ns * na);
    for (std::size_t atom = 0; atom < row.size(); ++atom) row[atom] = spec.table(t)[perm.source_atom(atom)];
    rows.push_back(std::move(row));
  }
  return PolicySpec(std::move(contexts), std::move(actions), std::move(weights), spec.policy_ids(), std::move(rows));
}

PerturbedPolicy perturb_policy(const PolicySpec& spec, std::size_t t, double epsilon, const std::string& new_id,
                               Rng* rng) {
  if (!(epsilon >= 0.0 && epsilon <= 2.0)) throw ValidationError("perturbation magnitude must lie in [0, 2]");
  if (t >= spec.num_policies()) throw UnknownIdError("policy index out of range");
  const std::size_t na = spec.num_actions();
  std::vector<double> row = spec.table(t);
  if (epsilon == 0.0) {
    PerturbedPolicy out{spec.with_policy(new_id, row), new_id, 0.0};
    return out;
  }

  struct Choice {
    std::size_t context;
    std::size_t action;
    double capacity;  // reachable distance
  };
  std::vector<Choice> feasible;
  for (std::size_t s = 0; s < spec.num_contexts(); ++s) {
    const double w = spec.weights()[s];
    if (w <= 0.0) continue;
    if (rng != nullptr) {
      for (std::size_t a = 0; a < na; ++a) {
        const double room = 1.0 - row[s * na + a];
        if (room > 0.0) feasible.push_back({s, a, 2.0 * w * room});
      }
    } else {
      std::size_t best = 0;
      for (std::size_t a = 1; a < na; ++a) {
        if (row[s * na + a] < row[s * na + best]) best = a;
      }
      const double room = 1.0 - row[s * na + best];
      if (room > 0.0) feasible.push_back({s, best, 2.0 * w * room});
    }
  }
  if (feasible.empty()) throw ValidationError("no context admits a perturbation of policy '" + spec.policy_ids()[t] + "'");

  Choice pick = feasible.front();
  if (rng != nullptr) {
    pick = feasible[rng->index(feasible.size())];
  } else {
    for (const auto& c : feasible) {
      if (c.capacity > pick.capacity) pick = c;
    }
  }

  const double w = spec.weights()[pick.context];
  const std::size_t base = pick.context * na;
  const double room = 1.0 - row[base + pick.action];
  double mass = std::min(epsilon / (2.0 * w), room);
  std::vector<double> moved;
  double distance = 0.0;
  // Rounding can push the realized distance a few ulps above epsilon; shrink until it fits.
  for (int attempt = 0; attempt < 64; ++attempt) {
    moved = row;
    if (mass >= room) {
      for (std::size_t a = 0; a < na; ++a) moved[base + a] = 0.0;
      moved[base + pick.action] = 1.0;
    } else {
      const double keep = 1.0 - mass / room;
      for (std::size_t a = 0; a < na; ++a) {
        if (a != pick.action) moved[base + a] = row[base + a] * keep;
      }
      double rest = 0.0;
      for (std::size_t a = 0; a < na; ++a) {
        if (a != pick.action) rest += moved[base + a];
      }
      moved[base + pick.action] = 1.0 - rest;
    }
    double l1 = 0.0;
    for (std::size_t a = 0; a < na; ++a) l1 += std::abs(moved[base + a] - row[base + a]);
    distance = w * l1;
    if (distance <= epsilon) break;
    mass *= 1.0 - 1e-12 * static_cast<double>(1 << std::min(attempt, 30));
  }
  PerturbedPolicy out{spec.with_policy(new_id, std::move(moved)), new_id, 0.0};
  out.distance = policy_distance(out.spec, t, out.spec.num_policies() - 1);
  return out;
}

}  // namespace poul
