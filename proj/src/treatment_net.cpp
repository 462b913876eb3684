#include "poul/treatment_net.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "poul/errors.hpp"

namespace poul {

std::vector<std::vector<double>> TreatmentEncoder::embed_policies(const PolicySpec& spec) const {
  std::vector<std::vector<double>> out;
  out.reserve(spec.num_policies());
  for (std::size_t t = 0; t < spec.num_policies(); ++t) out.push_back(embed(spec, t));
  return out;
}

AtomTable::AtomTable(std::size_t num_contexts, std::size_t num_actions, std::size_t dim, AtomMode mode, Rng& rng)
    : num_contexts_(num_contexts), num_actions_(num_actions), dim_(dim), mode_(mode) {
  if (mode == AtomMode::table) {
    primary_ = DenseMatrix(num_contexts * num_actions, dim);
  } else {
    primary_ = DenseMatrix(num_contexts, dim);
    secondary_ = DenseMatrix(num_actions, dim);
  }
  for (auto& v : primary_.values()) v = rng.uniform(-1.0, 1.0);
  for (auto& v : secondary_.values()) v = rng.uniform(-1.0, 1.0);
}

AtomTable::AtomTable(std::size_t num_contexts, std::size_t num_actions, AtomMode mode, DenseMatrix primary,
                     DenseMatrix secondary)
    : num_contexts_(num_contexts),
      num_actions_(num_actions),
      dim_(primary.cols()),
      mode_(mode),
      primary_(std::move(primary)),
      secondary_(std::move(secondary)) {
  if (mode_ == AtomMode::table) {
    if (primary_.rows() != num_contexts_ * num_actions_) throw ShapeError("atom table needs |S||A| rows");
  } else {
    if (primary_.rows() != num_contexts_ || secondary_.rows() != num_actions_ || secondary_.cols() != dim_) {
      throw ShapeError("factored atom tables do not match |S|, |A|, r");
    }
  }
  require_finite(primary_.values(), "atom table");
  require_finite(secondary_.values(), "atom table");
}

std::vector<double> AtomTable::atom(std::size_t flat) const {
  if (flat >= num_atoms()) throw UnknownIdError("atom index " + std::to_string(flat) + " out of range");
  if (mode_ == AtomMode::table) {
    auto row = primary_.row(flat);
    return {row.begin(), row.end()};
  }
  auto c = primary_.row(flat / num_actions_);
  auto a = secondary_.row(flat % num_actions_);
  std::vector<double> out(dim_);
  for (std::size_t i = 0; i < dim_; ++i) out[i] = c[i] + a[i];
  return out;
}

double AtomTable::bound() const {
  double best = 0.0;
  for (std::size_t i = 0; i < num_atoms(); ++i) best = std::max(best, l2_norm(atom(i)));
  return best;
}

AtomTable AtomTable::permuted(const IndexPermutation& perm) const {
  if (perm.contexts.size() != num_contexts_ || perm.actions.size() != num_actions_) {
    throw ShapeError("permutation dims do not match atom table");
  }
  if (mode_ == AtomMode::table) {
    DenseMatrix out(primary_.rows(), primary_.cols());
    for (std::size_t i = 0; i < num_atoms(); ++i) {
      auto src = primary_.row(perm.source_atom(i));
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return AtomTable(num_contexts_, num_actions_, mode_, std::move(out));
  }
  DenseMatrix ctx(primary_.rows(), dim_), act(secondary_.rows(), dim_);
  for (std::size_t s = 0; s < num_contexts_; ++s) {
    auto src = primary_.row(perm.contexts[s]);
    std::copy(src.begin(), src.end(), ctx.row(s).begin());
  }
  for (std::size_t a = 0; a < num_actions_; ++a) {
    auto src = secondary_.row(perm.actions[a]);
    std::copy(src.begin(), src.end(), act.row(a).begin());
  }
  return AtomTable(num_contexts_, num_actions_, mode_, std::move(ctx), std::move(act));
}

TreatmentNet::TreatmentNet(AtomTable atoms, Mlp rho) : atoms_(std::move(atoms)), rho_(std::move(rho)) {
  if (rho_.input_dim() != atoms_.dim()) throw ShapeError("rho input dim must equal atom dim");
  reset_grad_buffers();
}

TreatmentNet::TreatmentNet(const TreatmentNet& other)
    : atoms_(other.atoms_), rho_(other.rho_), version_(other.version_), aggregations_(0) {
  reset_grad_buffers();
}

TreatmentNet& TreatmentNet::operator=(const TreatmentNet& other) {
  if (this != &other) {
    atoms_ = other.atoms_;
    rho_ = other.rho_;
    version_ = other.version_ + 1;
    std::lock_guard lock(cache_mutex_);
    cache_.clear();
    cache_spec_.clear();
    reset_grad_buffers();
  }
  return *this;
}

TreatmentNet TreatmentNet::make(const PolicySpec& spec, const TreatmentNetConfig& config, Rng& rng) {
  const std::size_t r = config.embedding_dim > 0 ? config.embedding_dim : std::min<std::size_t>(spec.num_atoms(), 32);
  AtomTable atoms(spec.num_contexts(), spec.num_actions(), r, config.atom_mode, rng);
  std::vector<std::size_t> dims;
  dims.push_back(r);
  dims.insert(dims.end(), config.hidden.begin(), config.hidden.end());
  dims.push_back(config.output_dim);
  Mlp rho = Mlp::make(dims, config.hidden_activation, Activation::identity, rng, config.layer_norm);
  return TreatmentNet(std::move(atoms), std::move(rho));
}

void TreatmentNet::reset_grad_buffers() {
  rho_grad_ = rho_.make_gradients();
  atom_grad_primary_ = DenseMatrix(atoms_.primary().rows(), atoms_.primary().cols());
  atom_grad_secondary_ = DenseMatrix(atoms_.secondary().rows(), atoms_.secondary().cols());
}

std::vector<double> TreatmentNet::aggregate(const Mixture& mixture) const {
  if (mixture.alpha.size() != atoms_.num_atoms()) {
    throw UnknownIdError("mixture has " + std::to_string(mixture.alpha.size()) + " atoms, table has " +
                         std::to_string(atoms_.num_atoms()));
  }
  ++aggregations_;
  const std::size_t r = atoms_.dim();
  struct Term {
    double mass;
    std::vector<double> value;
  };
  std::vector<Term> terms;
  for (std::size_t i = 0; i < mixture.alpha.size(); ++i) {
    const double mass = mixture.alpha[i];
    if (mass == 0.0) continue;
    auto phi = atoms_.atom(i);
    for (auto& v : phi) v *= mass;
    terms.push_back({mass, std::move(phi)});
  }
  std::sort(terms.begin(), terms.end(), [](const Term& a, const Term& b) {
    if (a.mass != b.mass) return a.mass < b.mass;
    return a.value < b.value;
  });
  std::vector<double> z(r, 0.0);
  for (const auto& term : terms) {
    for (std::size_t k = 0; k < r; ++k) z[k] += term.value[k];
  }
  require_finite(z, "aggregated embedding");
  return z;
}

std::vector<double> TreatmentNet::embed(const PolicySpec& spec, std::size_t t) const {
  return rho_.forward(aggregate(induced_mixture(spec, t)));
}

const std::vector<std::vector<double>>& TreatmentNet::embed_all(const PolicySpec& spec) const {
  std::lock_guard lock(cache_mutex_);
  const auto fp = spec.fingerprint();
  if (cache_version_ != version_ || cache_spec_ != fp || cache_.size() != spec.num_policies()) {
    std::vector<std::vector<double>> fresh;
    fresh.reserve(spec.num_policies());
    for (std::size_t t = 0; t < spec.num_policies(); ++t) fresh.push_back(embed(spec, t));
    cache_ = std::move(fresh);
    cache_version_ = version_;
    cache_spec_ = fp;
  }
  return cache_;
}

std::unique_ptr<TreatmentEncoder> TreatmentNet::clone() const { return std::make_unique<TreatmentNet>(*this); }

void TreatmentNet::begin_batch(const PolicySpec& spec, std::span<const std::size_t> policies) {
  if (passes_.size() != spec.num_policies()) passes_.assign(spec.num_policies(), {});
  for (auto& p : passes_) {
    p.active = false;
    p.has_grad = false;
  }
  for (auto t : policies) {
    auto& pass = passes_.at(t);
    if (pass.active) continue;
    pass.mixture = induced_mixture(spec, t);
    rho_.forward(aggregate(pass.mixture), pass.tape);
    pass.grad.assign(rho_.output_dim(), 0.0);
    pass.active = true;
  }
}

std::span<const double> TreatmentNet::batch_embedding(std::size_t t) const {
  const auto& pass = passes_.at(t);
  if (!pass.active) throw std::logic_error("policy not part of the current batch");
  return pass.tape.output();
}

void TreatmentNet::accumulate_gradient(std::size_t t, std::span<const double> grad) {
  auto& pass = passes_.at(t);
  if (!pass.active) throw std::logic_error("policy not part of the current batch");
  if (grad.size() != pass.grad.size()) throw ShapeError("embedding gradient size mismatch");
  for (std::size_t k = 0; k < grad.size(); ++k) pass.grad[k] += grad[k];
  pass.has_grad = true;
}

void TreatmentNet::finish_backward() {
  const std::size_t na = atoms_.num_actions();
  for (auto& pass : passes_) {
    if (!pass.active || !pass.has_grad) continue;
    const auto dz = rho_.backward(pass.tape, pass.grad, rho_grad_);
    for (std::size_t i = 0; i < pass.mixture.alpha.size(); ++i) {
      const double mass = pass.mixture.alpha[i];
      if (mass == 0.0) continue;
      if (atoms_.mode() == AtomMode::table) {
        auto g = atom_grad_primary_.row(i);
        for (std::size_t k = 0; k < dz.size(); ++k) g[k] += mass * dz[k];
      } else {
        auto gc = atom_grad_primary_.row(i / na);
        auto ga = atom_grad_secondary_.row(i % na);
        for (std::size_t k = 0; k < dz.size(); ++k) {
          gc[k] += mass * dz[k];
          ga[k] += mass * dz[k];
        }
      }
    }
    pass.has_grad = false;
  }
}

double TreatmentNet::regularize(double lambda) {
  if (lambda == 0.0) return 0.0;
  // Per-row sums, added in sorted order so the penalty value is independent of atom indexing.
  std::vector<double> row_norms;
  auto add_rows = [&](const DenseMatrix& m, DenseMatrix& g) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
      double acc = 0.0;
      auto row = m.row(r);
      auto grow = g.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) {
        acc += row[c] * row[c];
        grow[c] += 2.0 * lambda * row[c];
      }
      row_norms.push_back(acc);
    }
  };
  add_rows(atoms_.primary(), atom_grad_primary_);
  add_rows(atoms_.secondary(), atom_grad_secondary_);
  std::sort(row_norms.begin(), row_norms.end());
  double total = 0.0;
  for (double v : row_norms) total += v;

  for (std::size_t k = 0; k < rho_.layers().size(); ++k) {
    const auto& layer = rho_.layers()[k];
    auto gw = rho_grad_.weight[k].values();
    auto w = layer.weight.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      total += w[i] * w[i];
      gw[i] += 2.0 * lambda * w[i];
    }
    for (std::size_t i = 0; i < layer.bias.size(); ++i) {
      total += layer.bias[i] * layer.bias[i];
      rho_grad_.bias[k][i] += 2.0 * lambda * layer.bias[i];
    }
  }
  return lambda * total;
}

void TreatmentNet::append_slots(std::vector<ParamSlot>& out) {
  out.push_back({"atoms.primary", atoms_.primary().values(), atom_grad_primary_.values()});
  if (atoms_.mode() == AtomMode::factored) {
    out.push_back({"atoms.secondary", atoms_.secondary().values(), atom_grad_secondary_.values()});
  }
  rho_.append_slots("rho", rho_grad_, out);
}

void TreatmentNet::zero_grad() {
  rho_grad_.zero();
  std::fill(atom_grad_primary_.values().begin(), atom_grad_primary_.values().end(), 0.0);
  std::fill(atom_grad_secondary_.values().begin(), atom_grad_secondary_.values().end(), 0.0);
}

void TreatmentNet::parameters_changed() { ++version_; }

void TreatmentNet::save(ParameterCheckpoint& ck) const {
  ck.add("atoms.primary", atoms_.primary());
  if (atoms_.mode() == AtomMode::factored) ck.add("atoms.secondary", atoms_.secondary());
  ck.metadata["atoms"] = {{"mode", atoms_.mode() == AtomMode::table ? "table" : "factored"},
                          {"contexts", atoms_.num_contexts()},
                          {"actions", atoms_.num_actions()}};
  ck.add_mlp("rho", rho_);
}

TreatmentNet TreatmentNet::load(const ParameterCheckpoint& ck) {
  const auto& meta = ck.metadata.at("atoms");
  const AtomMode mode = meta.at("mode").get<std::string>() == "table" ? AtomMode::table : AtomMode::factored;
  const auto& p = ck.get("atoms.primary");
  DenseMatrix secondary;
  if (mode == AtomMode::factored) {
    const auto& s = ck.get("atoms.secondary");
    secondary = DenseMatrix(s.rows, s.cols, s.values);
  }
  AtomTable atoms(meta.at("contexts").get<std::size_t>(), meta.at("actions").get<std::size_t>(), mode,
                  DenseMatrix(p.rows, p.cols, p.values), std::move(secondary));
  return TreatmentNet(std::move(atoms), ck.get_mlp("rho"));
}

double rho_lipschitz_bound(const TreatmentNet& net) {
  double bound = 1.0;
  for (const auto& layer : net.rho().layers()) bound *= spectral_norm(layer.weight, 50, 1e-9);
  return bound;
}

bool rho_bound_is_valid(const TreatmentNet& net) { return !net.rho().has_layer_norm(); }

GradCheckReport grad_check(TreatmentEncoder& encoder, const PolicySpec& spec, std::span<const std::size_t> policies,
                           const OutputLoss& loss, double tolerance, double step) {
  if (!(tolerance > 0.0)) throw std::invalid_argument("grad_check tolerance must be positive");
  std::vector<double> upstream;
  encoder.zero_grad();
  encoder.begin_batch(spec, policies);
  for (auto t : policies) {
    loss(encoder.batch_embedding(t), upstream);
    encoder.accumulate_gradient(t, upstream);
  }
  encoder.finish_backward();

  std::vector<ParamSlot> slots;
  encoder.append_slots(slots);
  std::vector<std::vector<double>> analytic;
  for (const auto& s : slots) analytic.emplace_back(s.grad.begin(), s.grad.end());

  auto total = [&] {
    encoder.parameters_changed();
    double sum = 0.0;
    for (auto t : policies) sum += loss(encoder.embed(spec, t), upstream);
    return sum;
  };
  GradCheckReport report;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    auto values = slots[k].value;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = total();
      values[i] = saved - step;
      const double down = total();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double err = scale > 1e-7 ? std::abs(a - numeric) / scale : std::abs(a - numeric);
      ++report.checked;
      if (err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_parameter = slots[k].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  encoder.parameters_changed();
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace poul
