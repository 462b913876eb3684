#pragma once

// The combinatorial treatment universe: contexts S, actions A, context weights
// w(s) and per-policy sub-strategies Pi_t(.|s). Everything is immutable after
// construction; atom (s, a) has flat index s * |A| + a.

#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "poul/io.hpp"
#include "poul/random.hpp"

namespace poul {

inline constexpr double kSimplexTolerance = 1e-9;
inline constexpr double kRenormalizeTolerance = 1e-6;

class PolicySpec {
 public:
  PolicySpec() = default;
  // `rows[t]` is the dense |S| x |A| row-major table Pi_t(a|s). Validates and
  // renormalizes anything within kRenormalizeTolerance of the simplex.
  PolicySpec(std::vector<std::string> contexts, std::vector<std::string> actions, std::vector<double> weights,
             std::vector<std::string> policy_ids, std::vector<std::vector<double>> rows);

  std::size_t num_contexts() const { return contexts_.size(); }
  std::size_t num_actions() const { return actions_.size(); }
  std::size_t num_atoms() const { return contexts_.size() * actions_.size(); }
  std::size_t num_policies() const { return policy_ids_.size(); }

  const std::vector<std::string>& contexts() const { return contexts_; }
  const std::vector<std::string>& actions() const { return actions_; }
  const std::vector<double>& weights() const { return weights_; }
  const std::vector<std::string>& policy_ids() const { return policy_ids_; }

  std::size_t policy_index(const std::string& id) const;
  bool has_policy(const std::string& id) const { return policy_lookup_.contains(id); }
  const std::vector<double>& table(std::size_t t) const { return rows_.at(t); }
  double prob(std::size_t t, std::size_t s, std::size_t a) const { return rows_[t][s * actions_.size() + a]; }

  // New spec with one extra policy appended.
  PolicySpec with_policy(const std::string& id, std::vector<double> row) const;

  // Stable content hash of the canonical JSON document.
  std::string fingerprint() const;

  Json to_json() const;

 private:
  std::vector<std::string> contexts_;
  std::vector<std::string> actions_;
  std::vector<double> weights_;
  std::vector<std::string> policy_ids_;
  std::vector<std::vector<double>> rows_;
  std::unordered_map<std::string, std::size_t> policy_lookup_;
};

// Parses the policy-spec JSON document; omitted (context, action) entries are 0.
PolicySpec load_policy_spec(const Json& doc);
PolicySpec load_policy_spec_file(const std::filesystem::path& path);

// alpha_t(s, a) = w(s) Pi_t(a|s), flat atom order.
struct Mixture {
  std::vector<double> alpha;

  double total() const;
};

Mixture induced_mixture(const PolicySpec& spec, std::size_t t);
Mixture induced_mixture(const PolicySpec& spec, const std::string& id);

// sum_s w(s) ||Pi_t(.|s) - Pi_t'(.|s)||_1
double policy_distance(const PolicySpec& spec, std::size_t t, std::size_t u);
double policy_distance(const PolicySpec& spec, const std::string& t, const std::string& u);
double mixture_l1(const Mixture& a, const Mixture& b);

// new position i holds old context contexts[i] / old action actions[i].
struct IndexPermutation {
  std::vector<std::size_t> contexts;
  std::vector<std::size_t> actions;

  static IndexPermutation identity(std::size_t num_contexts, std::size_t num_actions);
  static IndexPermutation random(std::size_t num_contexts, std::size_t num_actions, Rng& rng);
  IndexPermutation inverse() const;
  IndexPermutation compose(const IndexPermutation& then) const;
  // Old flat atom index stored at new flat position `atom`.
  std::size_t source_atom(std::size_t atom) const;
};

PolicySpec permute_spec(const PolicySpec& spec, const IndexPermutation& perm);

struct PerturbedPolicy {
  PolicySpec spec;
  std::string id;
  double distance = 0.0;
};

// Moves probability mass inside a single context s* so that d(t, t') <= epsilon.
// Without `rng` the destination is deterministic: s* maximizes the reachable
// distance, the destination action is the least likely one in that row. With
// `rng`, s* and the destination are drawn among feasible choices.
PerturbedPolicy perturb_policy(const PolicySpec& spec, std::size_t t, double epsilon, const std::string& new_id,
                               Rng* rng = nullptr);

}  // namespace poul
