#pragma once

// Permutation-invariant treatment embedding h(t) = rho(z(t)), with
// z(t) = sum_{s,a} alpha_t(s,a) phi(s,a).

#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "poul/io.hpp"
#include "poul/policy_space.hpp"
#include "poul/tensor.hpp"

namespace poul {

// What the factorized uplift model needs from a treatment representation.
// Implemented by TreatmentNet and by the categorical-ID ablation.
class TreatmentEncoder {
 public:
  virtual ~TreatmentEncoder() = default;

  virtual std::unique_ptr<TreatmentEncoder> clone() const = 0;
  virtual std::string kind() const = 0;
  virtual std::size_t output_dim() const = 0;

  // Inference on frozen parameters.
  virtual std::vector<double> embed(const PolicySpec& spec, std::size_t t) const = 0;
  virtual std::vector<std::vector<double>> embed_policies(const PolicySpec& spec) const;

  // Training pass: forward the listed policies, keep what backward needs.
  virtual void begin_batch(const PolicySpec& spec, std::span<const std::size_t> policies) = 0;
  virtual std::span<const double> batch_embedding(std::size_t t) const = 0;
  // Adds dLoss/dh(t); backprop happens in finish_backward.
  virtual void accumulate_gradient(std::size_t t, std::span<const double> grad) = 0;
  virtual void finish_backward() = 0;
  // Adds the gradient of lambda * ||params||^2 and returns its value.
  virtual double regularize(double lambda) = 0;
  virtual void append_slots(std::vector<ParamSlot>& out) = 0;
  virtual void zero_grad() = 0;
  // Invalidate any cached embeddings after a parameter update.
  virtual void parameters_changed() = 0;

  virtual void save(ParameterCheckpoint& ck) const = 0;
};

enum class AtomMode { table, factored };

// phi(s, a): either a full |S||A| x r lookup, or phi_S(s) + phi_A(a).
class AtomTable {
 public:
  AtomTable() = default;
  AtomTable(std::size_t num_contexts, std::size_t num_actions, std::size_t dim, AtomMode mode, Rng& rng);
  AtomTable(std::size_t num_contexts, std::size_t num_actions, AtomMode mode, DenseMatrix primary,
            DenseMatrix secondary = {});

  std::size_t dim() const { return dim_; }
  std::size_t num_atoms() const { return num_contexts_ * num_actions_; }
  std::size_t num_contexts() const { return num_contexts_; }
  std::size_t num_actions() const { return num_actions_; }
  AtomMode mode() const { return mode_; }

  std::vector<double> atom(std::size_t flat) const;
  // B = max_{(s,a)} ||phi(s,a)||_2
  double bound() const;

  // Reorders atoms to follow permute_spec(spec, perm).
  AtomTable permuted(const IndexPermutation& perm) const;

  DenseMatrix& primary() { return primary_; }
  const DenseMatrix& primary() const { return primary_; }
  DenseMatrix& secondary() { return secondary_; }
  const DenseMatrix& secondary() const { return secondary_; }

  bool operator==(const AtomTable&) const = default;

 private:
  std::size_t num_contexts_ = 0;
  std::size_t num_actions_ = 0;
  std::size_t dim_ = 0;
  AtomMode mode_ = AtomMode::table;
  DenseMatrix primary_;    // table: atoms x r; factored: contexts x r
  DenseMatrix secondary_;  // factored only: actions x r
};

struct TreatmentNetConfig {
  std::size_t embedding_dim = 0;  // r; 0 means min(|S||A|, 32)
  std::size_t output_dim = 8;     // d
  std::vector<std::size_t> hidden = {32, 32};
  Activation hidden_activation = Activation::relu;
  AtomMode atom_mode = AtomMode::table;
  bool layer_norm = false;
};

class TreatmentNet final : public TreatmentEncoder {
 public:
  TreatmentNet() = default;
  TreatmentNet(AtomTable atoms, Mlp rho);
  TreatmentNet(const TreatmentNet& other);
  TreatmentNet& operator=(const TreatmentNet& other);

  static TreatmentNet make(const PolicySpec& spec, const TreatmentNetConfig& config, Rng& rng);

  const AtomTable& atoms() const { return atoms_; }
  AtomTable& mutable_atoms() { return atoms_; }
  const Mlp& rho() const { return rho_; }
  Mlp& mutable_rho() { return rho_; }

  // z = sum alpha phi over nonzero atoms, summed in an order fixed by the
  // terms' values so the result does not depend on atom indexing.
  std::vector<double> aggregate(const Mixture& mixture) const;

  // One cached pass over all policies; recomputed when the parameter version
  // or the spec changes.
  const std::vector<std::vector<double>>& embed_all(const PolicySpec& spec) const;

  std::uint64_t version() const { return version_; }
  std::uint64_t aggregation_count() const { return aggregations_; }

  // TreatmentEncoder
  std::unique_ptr<TreatmentEncoder> clone() const override;
  std::string kind() const override { return "poul"; }
  std::size_t output_dim() const override { return rho_.output_dim(); }
  std::vector<double> embed(const PolicySpec& spec, std::size_t t) const override;
  std::vector<std::vector<double>> embed_policies(const PolicySpec& spec) const override { return embed_all(spec); }
  void begin_batch(const PolicySpec& spec, std::span<const std::size_t> policies) override;
  std::span<const double> batch_embedding(std::size_t t) const override;
  void accumulate_gradient(std::size_t t, std::span<const double> grad) override;
  void finish_backward() override;
  double regularize(double lambda) override;
  void append_slots(std::vector<ParamSlot>& out) override;
  void zero_grad() override;
  void parameters_changed() override;
  void save(ParameterCheckpoint& ck) const override;

  static TreatmentNet load(const ParameterCheckpoint& ck);

 private:
  struct PolicyPass {
    bool active = false;
    Mixture mixture;
    MlpTape tape;
    std::vector<double> grad;
    bool has_grad = false;
  };

  void reset_grad_buffers();

  AtomTable atoms_;
  Mlp rho_;

  std::uint64_t version_ = 0;
  mutable std::uint64_t aggregations_ = 0;

  mutable std::mutex cache_mutex_;
  mutable std::vector<std::vector<double>> cache_;
  mutable std::uint64_t cache_version_ = ~std::uint64_t{0};
  mutable std::string cache_spec_;

  std::vector<PolicyPass> passes_;
  MlpGradients rho_grad_;
  DenseMatrix atom_grad_primary_;
  DenseMatrix atom_grad_secondary_;
};

// Product of layer spectral norms of rho: an upper bound on its Lipschitz
// constant when every layer uses relu/identity and no layer norm.
double rho_lipschitz_bound(const TreatmentNet& net);
bool rho_bound_is_valid(const TreatmentNet& net);

// Central differences on every encoder parameter for sum_t loss(h(t)) over
// `policies` (distinct indices). Leaves the parameters as they were.
GradCheckReport grad_check(TreatmentEncoder& encoder, const PolicySpec& spec, std::span<const std::size_t> policies,
                           const OutputLoss& loss, double tolerance, double step = 1e-5);

}  // namespace poul
