#pragma once

// Categorical-ID treatment representation: one free vector per policy id, no
// sharing through atoms. Used by the categorical baseline.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "poul/treatment_net.hpp"

namespace poul {

class PolicyTable final : public TreatmentEncoder {
 public:
  PolicyTable() = default;
  explicit PolicyTable(DenseMatrix rows);

  // Rows ~ U(-1, 1), one per policy in `spec`.
  static PolicyTable make(const PolicySpec& spec, std::size_t dim, Rng& rng);

  const DenseMatrix& rows() const { return rows_; }

  std::unique_ptr<TreatmentEncoder> clone() const override;
  std::string kind() const override { return "categorical"; }
  std::size_t output_dim() const override { return rows_.cols(); }
  std::vector<double> embed(const PolicySpec& spec, std::size_t t) const override;
  void begin_batch(const PolicySpec& spec, std::span<const std::size_t> policies) override;
  std::span<const double> batch_embedding(std::size_t t) const override;
  void accumulate_gradient(std::size_t t, std::span<const double> grad) override;
  void finish_backward() override {}
  // Only rows that received a data gradient in this batch are penalized, so a
  // policy that never appears in training keeps its initial vector.
  double regularize(double lambda) override;
  void append_slots(std::vector<ParamSlot>& out) override;
  void zero_grad() override;
  void parameters_changed() override {}
  void save(ParameterCheckpoint& ck) const override;

  static PolicyTable load(const ParameterCheckpoint& ck);

 private:
  void check_spec(const PolicySpec& spec) const;

  DenseMatrix rows_;
  DenseMatrix grad_;
  std::vector<char> active_;
  std::vector<char> touched_;
};

}  // namespace poul
