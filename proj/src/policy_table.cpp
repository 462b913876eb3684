#include "poul/policy_table.hpp"

#include <algorithm>
#include <stdexcept>

#include "poul/errors.hpp"

namespace poul {

PolicyTable::PolicyTable(DenseMatrix rows)
    : rows_(std::move(rows)), grad_(rows_.rows(), rows_.cols()), active_(rows_.rows(), 0), touched_(rows_.rows(), 0) {
  require_finite(rows_.values(), "policy table");
}

PolicyTable PolicyTable::make(const PolicySpec& spec, std::size_t dim, Rng& rng) {
  DenseMatrix rows(spec.num_policies(), dim);
  for (auto& v : rows.values()) v = rng.uniform(-1.0, 1.0);
  return PolicyTable(std::move(rows));
}

std::unique_ptr<TreatmentEncoder> PolicyTable::clone() const { return std::make_unique<PolicyTable>(*this); }

void PolicyTable::check_spec(const PolicySpec& spec) const {
  if (spec.num_policies() != rows_.rows()) {
    throw ShapeError("policy table has " + std::to_string(rows_.rows()) + " rows, spec has " +
                     std::to_string(spec.num_policies()) + " policies");
  }
}

std::vector<double> PolicyTable::embed(const PolicySpec& spec, std::size_t t) const {
  check_spec(spec);
  if (t >= rows_.rows()) throw UnknownIdError("unknown policy index " + std::to_string(t));
  auto row = rows_.row(t);
  return {row.begin(), row.end()};
}

void PolicyTable::begin_batch(const PolicySpec& spec, std::span<const std::size_t> policies) {
  check_spec(spec);
  std::fill(active_.begin(), active_.end(), 0);
  std::fill(touched_.begin(), touched_.end(), 0);
  for (auto t : policies) active_.at(t) = 1;
}

std::span<const double> PolicyTable::batch_embedding(std::size_t t) const {
  if (!active_.at(t)) throw std::logic_error("policy not part of the current batch");
  return rows_.row(t);
}

void PolicyTable::accumulate_gradient(std::size_t t, std::span<const double> grad) {
  if (!active_.at(t)) throw std::logic_error("policy not part of the current batch");
  if (grad.size() != rows_.cols()) throw ShapeError("embedding gradient size mismatch");
  auto g = grad_.row(t);
  for (std::size_t k = 0; k < grad.size(); ++k) g[k] += grad[k];
  touched_[t] = 1;
}

double PolicyTable::regularize(double lambda) {
  if (lambda == 0.0) return 0.0;
  double total = 0.0;
  for (std::size_t t = 0; t < rows_.rows(); ++t) {
    if (!touched_[t]) continue;
    auto row = rows_.row(t);
    auto g = grad_.row(t);
    for (std::size_t k = 0; k < row.size(); ++k) {
      total += row[k] * row[k];
      g[k] += 2.0 * lambda * row[k];
    }
  }
  return lambda * total;
}

void PolicyTable::append_slots(std::vector<ParamSlot>& out) {
  out.push_back({"policy_table", rows_.values(), grad_.values()});
}

void PolicyTable::zero_grad() { std::fill(grad_.values().begin(), grad_.values().end(), 0.0); }

void PolicyTable::save(ParameterCheckpoint& ck) const { ck.add("policy_table", rows_); }

PolicyTable PolicyTable::load(const ParameterCheckpoint& ck) {
  const auto& t = ck.get("policy_table");
  return PolicyTable(DenseMatrix(t.rows, t.cols, t.values));
}

}  // namespace poul
