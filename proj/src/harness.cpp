#include "poul/harness.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "poul/errors.hpp"

namespace poul {

namespace {

constexpr std::uint64_t kStreamDirections = 11;
constexpr std::uint64_t kStreamProbes = 12;
constexpr std::uint64_t kStreamPairs = 13;
constexpr std::uint64_t kStreamPolicies = 14;
constexpr std::uint64_t kStreamTarget = 15;
constexpr std::uint64_t kStreamFit = 16;

struct Moments {
  double sum = 0.0;
  double sq = 0.0;
  std::size_t n = 0;

  void add(double v) {
    sum += v;
    sq += v * v;
    ++n;
  }
  double mean() const { return sum / static_cast<double>(n); }
  // Standard error of the mean.
  double se() const {
    const double m = mean();
    const double var = std::max(sq / static_cast<double>(n) - m * m, 0.0);
    return std::sqrt(var / static_cast<double>(n));
  }
};

// Least-squares slope of log(y) on log|x| over points with y > 0.
double log_log_slope(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i] > 0.0 && x[i] != 0.0) {
      lx.push_back(std::log(std::abs(x[i])));
      ly.push_back(std::log(y[i]));
    }
  }
  if (lx.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double n = static_cast<double>(lx.size());
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / n;
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  if (sxx == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / sxx;
}

void check_grid(const std::vector<double>& grid) {
  std::vector<double> mags;
  for (double r : grid) {
    if (!std::isfinite(r) || r == 0.0) throw ValidationError("perturbation grid must hold finite nonzero values");
    mags.push_back(std::abs(r));
  }
  std::sort(mags.begin(), mags.end());
  mags.erase(std::unique(mags.begin(), mags.end()), mags.end());
  if (mags.size() < 2) throw ValidationError("perturbation grid needs at least two distinct magnitudes");
}

void scale_net_output(Mlp& net, double factor) {
  auto& last = net.mutable_layers().back();
  for (auto& w : last.weight.values()) w *= factor;
  for (auto& b : last.bias) b *= factor;
}

Json reals_json(std::span<const double> v) {
  Json out = Json::array();
  for (double x : v) out.push_back(x);
  return out;
}

std::vector<std::vector<double>> random_policy_rows(const PolicySpec& spec, std::size_t count, Rng& rng) {
  std::vector<std::vector<double>> rows(count);
  for (auto& row : rows) {
    for (std::size_t s = 0; s < spec.num_contexts(); ++s) {
      const auto probs = rng.dirichlet(spec.num_actions(), 1.0);
      row.insert(row.end(), probs.begin(), probs.end());
    }
  }
  return rows;
}

PolicySpec spec_with_rows(const PolicySpec& base, const std::string& prefix, std::vector<std::vector<double>> rows) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < rows.size(); ++i) ids.push_back(prefix + std::to_string(i));
  return PolicySpec(base.contexts(), base.actions(), base.weights(), std::move(ids), std::move(rows));
}

}  // namespace

double familywise_z(std::size_t comparisons) {
  const double alpha = std::erfc(3.0 / std::sqrt(2.0)) / static_cast<double>(std::max<std::size_t>(comparisons, 1));
  double lo = 0.0, hi = 40.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (std::erfc(mid / std::sqrt(2.0)) > alpha ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<double> score_psi(double y, double m, std::span<const double> g, std::span<const double> h,
                              std::span<const double> e) {
  if (g.size() != h.size() || e.size() != h.size()) throw ShapeError("score inputs differ in dimension");
  std::vector<double> d(h.size());
  double fit = m;
  for (std::size_t k = 0; k < h.size(); ++k) {
    d[k] = h[k] - e[k];
    fit += g[k] * d[k];
  }
  const double r = y - fit;
  for (auto& v : d) v *= r;
  return d;
}

PerturbationPlan make_perturbation_plan(const Dataset& sample, std::size_t effect_dim, std::uint64_t seed,
                                        std::vector<double> grid) {
  if (sample.empty()) throw ValidationError("perturbation plan needs an evaluation sample");
  Rng rng(mix_seed(seed, kStreamDirections));
  const std::size_t p = sample.num_features();
  std::vector<std::size_t> m_dims{p, 16, 1};
  std::vector<std::size_t> e_dims{p, 16, effect_dim};
  PerturbationPlan plan;
  plan.delta_m = Mlp::make(m_dims, Activation::relu, Activation::identity, rng);
  plan.delta_e = Mlp::make(e_dims, Activation::relu, Activation::identity, rng);
  plan.grid = std::move(grid);
  double m_sq = 0.0, e_sq = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const double dm = plan.dm(sample.x(i));
    m_sq += dm * dm;
    for (double v : plan.de(sample.x(i))) e_sq += v * v;
  }
  const double n = static_cast<double>(sample.size());
  scale_net_output(plan.delta_m, 1.0 / std::sqrt(m_sq / n));
  scale_net_output(plan.delta_e, 1.0 / std::sqrt(e_sq / n));
  return plan;
}

Json OrthogonalityReport::to_json() const {
  Json j;
  j["n"] = n;
  j["grid"] = reals_json(grid);
  Json psi_j = Json::array();
  for (const auto& row : psi) psi_j.push_back(reals_json(row));
  j["psi"] = std::move(psi_j);
  j["psi0"] = reals_json(psi0);
  j["psi0_se"] = reals_json(psi0_se);
  j["linear_coef"] = reals_json(linear_coef);
  j["linear_se"] = reals_json(linear_se);
  j["quad_coef"] = reals_json(quad_coef);
  j["slope"] = slope;
  j["dm_only_max_z"] = dm_only_max_z;
  j["centering_max_z"] = centering_max_z;
  j["unbiased"] = unbiased;
  j["linear_ok"] = linear_ok;
  j["slope_ok"] = slope_ok;
  j["dm_only_flat"] = dm_only_flat;
  j["centering_ok"] = centering_ok;
  j["passed"] = passed;
  return j;
}

OrthogonalityReport orthogonality_test(const OracleTruth& oracle, const Dataset& data, const OrthogonalityConfig& cfg) {
  check_grid(cfg.grid);
  if (data.size() < 2) throw ValidationError("orthogonality test needs data");
  const std::size_t n = data.size();
  const std::size_t d = oracle.effect_dim();
  const auto plan = make_perturbation_plan(data, d, cfg.seed, cfg.grid);
  const std::size_t G = cfg.grid.size();

  OrthogonalityReport rep;
  rep.n = n;
  rep.grid = cfg.grid;
  std::vector<std::vector<double>> psi_sum(G, std::vector<double>(d, 0.0));
  std::vector<std::vector<double>> dm_sum(G, std::vector<double>(d, 0.0));
  std::vector<Moments> psi0(d), linear(d), dm_linear(d);
  std::vector<std::pair<double, std::size_t>> by_x0(n);
  std::vector<std::vector<double>> centered(n);

  for (std::size_t i = 0; i < n; ++i) {
    const auto x = data.x(i);
    const auto g = oracle.g0(x);
    const auto e0 = oracle.embedding_mean(x);
    const auto& h = oracle.h0(data.t(i));
    std::vector<double> D(d);
    for (std::size_t k = 0; k < d; ++k) D[k] = h[k] - e0[k];
    const double m_star = oracle.centered_baseline(x);
    const double R = data.y(i) - m_star - dot(g, D);
    const double dm = plan.dm(x);
    const auto de = plan.de(x);
    const double a = dm - dot(g, de);

    for (std::size_t k = 0; k < d; ++k) {
      psi0[k].add(R * D[k]);
      linear[k].add(-(a * D[k] + R * de[k]));
      dm_linear[k].add(dm * D[k]);
    }
    for (std::size_t gi = 0; gi < G; ++gi) {
      const double r = cfg.grid[gi];
      const double res = R - r * a;
      const double res_m = R - r * dm;
      for (std::size_t k = 0; k < d; ++k) {
        psi_sum[gi][k] += res * (D[k] - r * de[k]);
        dm_sum[gi][k] += res_m * D[k];
      }
    }
    by_x0[i] = {x[0], i};
    centered[i] = std::move(D);
  }
  const double nn = static_cast<double>(n);

  rep.psi.assign(G, std::vector<double>(d));
  for (std::size_t gi = 0; gi < G; ++gi) {
    for (std::size_t k = 0; k < d; ++k) rep.psi[gi][k] = psi_sum[gi][k] / nn;
  }
  double r_max = 0.0;
  for (double r : cfg.grid) r_max = std::max(r_max, std::abs(r));

  // Per-coordinate quadratic fit c0 + c1 r + c2 r^2 over the grid and r = 0.
  const double unbiased_z = familywise_z(d);
  rep.unbiased = true;
  rep.linear_ok = true;
  for (std::size_t k = 0; k < d; ++k) {
    rep.psi0.push_back(psi0[k].mean());
    rep.psi0_se.push_back(psi0[k].se());
    Eigen::MatrixXd A(G + 1, 3);
    Eigen::VectorXd b(G + 1);
    A.row(0) << 1.0, 0.0, 0.0;
    b(0) = psi0[k].mean();
    for (std::size_t gi = 0; gi < G; ++gi) {
      const double r = cfg.grid[gi];
      A.row(static_cast<Eigen::Index>(gi + 1)) << 1.0, r, r * r;
      b(static_cast<Eigen::Index>(gi + 1)) = rep.psi[gi][k];
    }
    const Eigen::VectorXd c = A.colPivHouseholderQr().solve(b);
    rep.linear_coef.push_back(c(1));
    rep.quad_coef.push_back(c(2));
    rep.linear_se.push_back(linear[k].se());
    if (std::abs(rep.psi0[k]) > unbiased_z * rep.psi0_se[k]) rep.unbiased = false;
    const double allowed = std::max(0.05 * std::abs(c(2)) * r_max, 5.0 * linear[k].se());
    if (std::abs(c(1)) > allowed) rep.linear_ok = false;
  }

  std::vector<double> mags, deltas;
  for (std::size_t gi = 0; gi < G; ++gi) {
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = rep.psi[gi][k] - rep.psi0[k];
      sq += diff * diff;
    }
    mags.push_back(cfg.grid[gi]);
    deltas.push_back(std::sqrt(sq));
  }
  rep.slope = log_log_slope(mags, deltas);
  rep.slope_ok = std::isfinite(rep.slope) && rep.slope >= cfg.min_slope;

  // delta_e = 0: Psi(r) - Psi(0) = -r mean(dm D), a pure sampling fluctuation.
  rep.dm_only_max_z = 0.0;
  for (std::size_t gi = 0; gi < G; ++gi) {
    const double r = std::abs(cfg.grid[gi]);
    for (std::size_t k = 0; k < d; ++k) {
      const double diff = std::abs(dm_sum[gi][k] / nn - rep.psi0[k]);
      const double se = r * dm_linear[k].se();
      const double z = se > 0.0 ? diff / se : (diff > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
      rep.dm_only_max_z = std::max(rep.dm_only_max_z, z);
    }
  }
  // The z statistic is the same at every grid point, so only d comparisons.
  rep.dm_only_flat = rep.dm_only_max_z <= familywise_z(d);

  // Centering within x0 quantile strata.
  std::sort(by_x0.begin(), by_x0.end());
  const std::size_t strata = std::max<std::size_t>(cfg.strata, 1);
  rep.centering_max_z = 0.0;
  for (std::size_t s = 0; s < strata; ++s) {
    const std::size_t lo = s * n / strata;
    const std::size_t hi = (s + 1) * n / strata;
    if (hi <= lo + 1) continue;
    for (std::size_t k = 0; k < d; ++k) {
      Moments mom;
      for (std::size_t j = lo; j < hi; ++j) mom.add(centered[by_x0[j].second][k]);
      const double se = mom.se();
      const double z = se > 0.0 ? std::abs(mom.mean()) / se : 0.0;
      rep.centering_max_z = std::max(rep.centering_max_z, z);
    }
  }
  rep.centering_ok = rep.centering_max_z <= familywise_z(strata * d);
  rep.passed = rep.unbiased && rep.linear_ok && rep.slope_ok && rep.dm_only_flat && rep.centering_ok;
  return rep;
}

Json RobustnessReport::to_json() const {
  Json j;
  j["n"] = n;
  j["probes"] = probes;
  j["grid"] = reals_json(grid);
  j["error"] = reals_json(error);
  j["dm_only_error"] = reals_json(dm_only_error);
  j["dm_only_se"] = reals_json(dm_only_se);
  j["baseline_error"] = baseline_error;
  j["baseline_se"] = baseline_se;
  j["slope"] = slope;
  j["dm_only_max_z"] = dm_only_max_z;
  j["slope_ok"] = slope_ok;
  j["dm_only_flat"] = dm_only_flat;
  j["baseline_ok"] = baseline_ok;
  j["passed"] = passed;
  return j;
}

RobustnessReport robustness_scaling_test(const OracleTruth& oracle, const Dataset& data, const RobustnessConfig& cfg) {
  check_grid(cfg.grid);
  const auto& layers = oracle.heterogeneity_net().layers();
  if (layers.size() != 2 || layers[0].activation != Activation::relu || layers[1].activation != Activation::identity) {
    throw ValidationError("robustness test expects g0 with one relu hidden layer");
  }
  const std::size_t n = data.size();
  const std::size_t d = oracle.effect_dim();
  const std::size_t hidden = layers[0].output_dim();
  const std::size_t J = hidden + 1;  // hidden features plus intercept
  const std::size_t P = d * J;
  if (n < P + 1) throw ValidationError("too few rows for the least-squares g-step");
  const auto plan = make_perturbation_plan(data, d, cfg.seed, cfg.grid);

  // g(x) = B^T b(x); g0 corresponds to B = [W2^T; b2^T].
  Eigen::MatrixXd features(n, J);
  Eigen::MatrixXd D(n, d), dE(n, d);
  Eigen::VectorXd target0(n), dm(n);
  Mlp hidden_net(std::vector<DenseLayer>{layers[0]});
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = data.x(i);
    const auto b = hidden_net.forward(x);
    const auto ii = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < hidden; ++j) features(ii, static_cast<Eigen::Index>(j)) = b[j];
    features(ii, static_cast<Eigen::Index>(hidden)) = 1.0;
    const auto e0 = oracle.embedding_mean(x);
    const auto& h = oracle.h0(data.t(i));
    const auto de = plan.de(x);
    for (std::size_t k = 0; k < d; ++k) {
      D(ii, static_cast<Eigen::Index>(k)) = h[k] - e0[k];
      dE(ii, static_cast<Eigen::Index>(k)) = de[k];
    }
    target0(ii) = data.y(i) - oracle.centered_baseline(x);
    dm(ii) = plan.dm(x);
  }

  // The factorization is identified only up to h -> W h, g -> W^-T g. Pin the
  // gauge with W = Cov(D)^(-1/2) so that unit-norm perturbations of e are
  // measured against a unit-scale treatment signal; tau is unchanged.
  Eigen::MatrixXd whiten, unwhiten_t;
  {
    const Eigen::MatrixXd cov = (D.transpose() * D) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::VectorXd ev = eig.eigenvalues();
    if (ev.minCoeff() <= 1e-12 * std::max(ev.maxCoeff(), 1e-300)) {
      throw TrainingError("treatment signal is rank deficient; g-step is not identified");
    }
    whiten = eig.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
    unwhiten_t = eig.eigenvectors() * ev.cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
    D = D * whiten;  // whiten is symmetric
  }

  // Probes: (x, t1, t0) with c = kron(W (h0(t1) - h0(t0)), b(x)), so tau = c^T theta.
  Rng probe_rng(mix_seed(cfg.seed, kStreamProbes));
  const std::size_t np = oracle.spec().num_policies();
  Eigen::MatrixXd probes(static_cast<Eigen::Index>(cfg.probes), static_cast<Eigen::Index>(P));
  for (std::size_t q = 0; q < cfg.probes; ++q) {
    const std::size_t row = probe_rng.index(n);
    const std::size_t t1 = probe_rng.index(np);
    std::size_t t0 = probe_rng.index(np - 1);
    if (t0 >= t1) ++t0;
    const auto& a = oracle.h0(t1);
    const auto& b = oracle.h0(t0);
    Eigen::VectorXd diff(static_cast<Eigen::Index>(d));
    for (std::size_t k = 0; k < d; ++k) diff(static_cast<Eigen::Index>(k)) = a[k] - b[k];
    diff = whiten * diff;
    for (std::size_t k = 0; k < d; ++k) {
      for (std::size_t j = 0; j < J; ++j) {
        probes(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(k * J + j)) =
            diff(static_cast<Eigen::Index>(k)) * features(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j));
      }
    }
  }
  Eigen::VectorXd theta_true(P);
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t j = 0; j < hidden; ++j) {
      theta_true(static_cast<Eigen::Index>(k * J + j)) = layers[1].weight(k, j);
    }
    theta_true(static_cast<Eigen::Index>(k * J + hidden)) = layers[1].bias[k];
  }
  {
    // theta in the whitened gauge: g~ = W^-1 g0 (W symmetric).
    const Eigen::Map<Eigen::MatrixXd> raw(theta_true.data(), static_cast<Eigen::Index>(J), static_cast<Eigen::Index>(d));
    const Eigen::MatrixXd mapped = raw * unwhiten_t;
    theta_true = Eigen::Map<const Eigen::VectorXd>(mapped.data(), static_cast<Eigen::Index>(P));
  }

  constexpr Eigen::Index kChunk = 4096;
  auto design = [&](Eigen::Index start, Eigen::Index rows, double delta, Eigen::MatrixXd& Z) {
    Z.resize(rows, static_cast<Eigen::Index>(P));
    for (std::size_t k = 0; k < d; ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      const Eigen::VectorXd reg = D.col(kk).segment(start, rows) - delta * dE.col(kk).segment(start, rows);
      Z.middleCols(static_cast<Eigen::Index>(k * J), static_cast<Eigen::Index>(J)) =
          features.middleRows(start, rows).array().colwise() * reg.array();
    }
  };
  // Solves min ||u - Z theta|| for the design at `delta`; also returns the Gram matrix.
  auto solve = [&](double delta, const Eigen::VectorXd& u, Eigen::LLT<Eigen::MatrixXd>& llt) {
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(P));
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(P));
    Eigen::MatrixXd Z;
    for (Eigen::Index start = 0; start < static_cast<Eigen::Index>(n); start += kChunk) {
      const Eigen::Index rows = std::min<Eigen::Index>(kChunk, static_cast<Eigen::Index>(n) - start);
      design(start, rows, delta, Z);
      gram.selfadjointView<Eigen::Lower>().rankUpdate(Z.transpose());
      rhs.noalias() += Z.transpose() * u.segment(start, rows);
    }
    llt.compute(gram.selfadjointView<Eigen::Lower>());
    if (llt.info() != Eigen::Success) throw TrainingError("singular least-squares system in the g-step");
    return Eigen::VectorXd(llt.solve(rhs));
  };
  // Sandwich covariance (Z^T Z)^-1 (sum z z^T w_i^2) (Z^T Z)^-1 at delta = 0.
  auto sandwich = [&](const Eigen::VectorXd& w, const Eigen::LLT<Eigen::MatrixXd>& llt) {
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(P));
    Eigen::MatrixXd Z;
    for (Eigen::Index start = 0; start < static_cast<Eigen::Index>(n); start += kChunk) {
      const Eigen::Index rows = std::min<Eigen::Index>(kChunk, static_cast<Eigen::Index>(n) - start);
      design(start, rows, 0.0, Z);
      Z.array().colwise() *= w.segment(start, rows).array();
      meat.selfadjointView<Eigen::Lower>().rankUpdate(Z.transpose());
    }
    const Eigen::MatrixXd full = meat.selfadjointView<Eigen::Lower>();
    const Eigen::MatrixXd half = llt.solve(full);
    return Eigen::MatrixXd(llt.solve(half.transpose()));
  };
  auto probe_se_rms = [&](const Eigen::MatrixXd& cov) {
    const Eigen::MatrixXd cp = probes * cov;
    const Eigen::VectorXd var = (cp.array() * probes.array()).rowwise().sum();
    return std::sqrt(var.mean());
  };
  auto rms = [](const Eigen::VectorXd& v) { return std::sqrt(v.squaredNorm() / static_cast<double>(v.size())); };

  RobustnessReport rep;
  rep.n = n;
  rep.probes = cfg.probes;
  rep.grid = cfg.grid;

  Eigen::LLT<Eigen::MatrixXd> llt0;
  const Eigen::VectorXd theta0 = solve(0.0, target0, llt0);
  const Eigen::VectorXd tau0 = probes * theta0;
  {
    Eigen::VectorXd resid(n);
    Eigen::MatrixXd Z;
    for (Eigen::Index start = 0; start < static_cast<Eigen::Index>(n); start += kChunk) {
      const Eigen::Index rows = std::min<Eigen::Index>(kChunk, static_cast<Eigen::Index>(n) - start);
      design(start, rows, 0.0, Z);
      resid.segment(start, rows) = target0.segment(start, rows) - Z * theta0;
    }
    rep.baseline_error = rms(tau0 - probes * theta_true);
    rep.baseline_se = probe_se_rms(sandwich(resid, llt0));
    rep.baseline_ok = rep.baseline_error <= 3.0 * rep.baseline_se;
  }

  // delta_m only: same design, target shifted by -delta * dm, so the change in
  // theta is exactly linear in delta.
  const Eigen::VectorXd dm_rhs_theta = [&] {
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(P));
    Eigen::MatrixXd Z;
    for (Eigen::Index start = 0; start < static_cast<Eigen::Index>(n); start += kChunk) {
      const Eigen::Index rows = std::min<Eigen::Index>(kChunk, static_cast<Eigen::Index>(n) - start);
      design(start, rows, 0.0, Z);
      rhs.noalias() += Z.transpose() * dm.segment(start, rows);
    }
    return Eigen::VectorXd(llt0.solve(rhs));
  }();
  const double dm_unit_se = probe_se_rms(sandwich(dm, llt0));

  rep.dm_only_max_z = 0.0;
  for (double delta : cfg.grid) {
    const Eigen::VectorXd u = target0 - delta * dm;
    Eigen::LLT<Eigen::MatrixXd> llt;
    const Eigen::VectorXd theta = solve(delta, u, llt);
    rep.error.push_back(rms(probes * theta - tau0));

    const Eigen::VectorXd shift = -delta * (probes * dm_rhs_theta);
    const double err = rms(shift);
    const double se = std::abs(delta) * dm_unit_se;
    rep.dm_only_error.push_back(err);
    rep.dm_only_se.push_back(se);
    rep.dm_only_max_z = std::max(rep.dm_only_max_z, se > 0.0 ? err / se : 0.0);
  }
  rep.slope = log_log_slope(cfg.grid, rep.error);
  rep.slope_ok = std::isfinite(rep.slope) && rep.slope >= cfg.min_slope;
  rep.dm_only_flat = rep.dm_only_max_z <= cfg.flat_band;
  rep.passed = rep.slope_ok && rep.dm_only_flat && rep.baseline_ok;
  return rep;
}

Json StabilityReport::to_json() const {
  Json j;
  j["lipschitz"] = lipschitz;
  j["atom_bound"] = atom_bound;
  j["g_bound"] = g_bound;
  j["bound_valid"] = bound_valid;
  j["pairs"] = pairs;
  j["probes"] = probes;
  j["embedding_violations"] = embedding_violations;
  j["uplift_violations"] = uplift_violations;
  j["max_embedding_ratio"] = max_embedding_ratio;
  j["max_uplift_ratio"] = max_uplift_ratio;
  j["passed"] = passed;
  return j;
}

StabilityReport stability_test(const TreatmentNet& net, const Mlp& g_net, const PolicySpec& spec,
                               std::span<const std::vector<double>> probes, const StabilityConfig& cfg) {
  if (spec.num_policies() == 0) throw ValidationError("stability test needs at least one policy");
  if (!(cfg.max_epsilon >= 0.0 && cfg.max_epsilon <= 2.0)) throw ValidationError("max_epsilon must lie in [0, 2]");
  StabilityReport rep;
  rep.lipschitz = rho_lipschitz_bound(net);
  rep.atom_bound = net.atoms().bound();
  rep.bound_valid = rho_bound_is_valid(net);
  rep.probes = probes.size();
  std::vector<std::vector<double>> g_values;
  for (const auto& x : probes) {
    g_values.push_back(g_net.forward(x));
    rep.g_bound = std::max(rep.g_bound, l2_norm(g_values.back()));
  }
  const double scale = rep.lipschitz * rep.atom_bound;

  Rng rng(mix_seed(cfg.seed, kStreamPairs));
  std::size_t attempts = 0;
  while (rep.pairs < cfg.pairs) {
    if (++attempts > 20 * cfg.pairs + 100) throw ValidationError("could not draw feasible perturbation pairs");
    const std::size_t t = rng.index(spec.num_policies());
    const double eps = rng.uniform(0.0, cfg.max_epsilon);
    PerturbedPolicy pert;
    try {
      pert = perturb_policy(spec, t, eps, "__stability_probe__", &rng);
    } catch (const ValidationError&) {
      continue;
    }
    ++rep.pairs;
    const std::size_t u = pert.spec.num_policies() - 1;
    const auto h1 = net.embed(pert.spec, t);
    const auto h2 = net.embed(pert.spec, u);
    const double dist = policy_distance(pert.spec, t, u);
    std::vector<double> dh(h1.size());
    for (std::size_t k = 0; k < dh.size(); ++k) dh[k] = h1[k] - h2[k];
    const double lhs = l2_norm(dh);
    const double rhs = scale * dist;
    if (lhs > rhs) ++rep.embedding_violations;
    if (rhs > 0.0) rep.max_embedding_ratio = std::max(rep.max_embedding_ratio, lhs / rhs);
    const double tau_rhs = rep.g_bound * rhs;
    for (const auto& g : g_values) {
      const double tau = std::abs(dot(g, dh));
      if (tau > tau_rhs) ++rep.uplift_violations;
      if (tau_rhs > 0.0) rep.max_uplift_ratio = std::max(rep.max_uplift_ratio, tau / tau_rhs);
    }
  }
  rep.passed = rep.embedding_violations == 0 && rep.uplift_violations == 0;
  return rep;
}

StabilityReport stability_test(const UpliftModel& model, const Dataset& probes, const StabilityConfig& cfg) {
  const auto* net = dynamic_cast<const TreatmentNet*>(model.encoder.get());
  if (!net) throw ValidationError("stability test needs a model with a treatment net");
  std::vector<std::vector<double>> xs;
  const std::size_t count = std::min<std::size_t>(probes.size(), 200);
  for (std::size_t i = 0; i < count; ++i) xs.emplace_back(probes.x(i).begin(), probes.x(i).end());
  return stability_test(*net, model.g_net, model.spec, xs, cfg);
}

Json ExpressivenessReport::to_json() const {
  Json j;
  j["target"] = target;
  j["embedding_dim"] = embedding_dim;
  j["sup_error"] = sup_error;
  j["range"] = range;
  j["train_loss"] = train_loss;
  j["passed"] = passed;
  return j;
}

ExpressivenessReport expressiveness_test(const PolicySpec& spec, const ExpressivenessConfig& cfg) {
  const std::size_t atoms = spec.num_atoms();
  if (atoms == 0 || atoms > 64) throw ValidationError("expressiveness test needs 1 <= |S||A| <= 64");
  if (cfg.train_policies == 0 || cfg.test_policies == 0 || cfg.output_dim == 0 || cfg.batch_size == 0) {
    throw ValidationError("expressiveness test needs positive sample sizes");
  }
  Rng policy_rng(mix_seed(cfg.seed, kStreamPolicies));
  const PolicySpec train = spec_with_rows(spec, "fit", random_policy_rows(spec, cfg.train_policies, policy_rng));
  const PolicySpec test = spec_with_rows(spec, "eval", random_policy_rows(spec, cfg.test_policies, policy_rng));

  // Target F on the mixture.
  Rng target_rng(mix_seed(cfg.seed, kStreamTarget));
  std::vector<std::size_t> f_dims{atoms, 32, cfg.output_dim};
  const Mlp f_net = Mlp::make(f_dims, Activation::relu, Activation::identity, target_rng);
  DenseMatrix f_lin(cfg.output_dim, atoms);
  for (auto& v : f_lin.values()) v = target_rng.normal();
  std::vector<double> f_const(cfg.output_dim);
  for (auto& v : f_const) v = target_rng.normal();
  auto target = [&](const PolicySpec& s, std::size_t t) -> std::vector<double> {
    auto alpha = induced_mixture(s, t).alpha;
    switch (cfg.target) {
      case TargetKind::constant:
        return f_const;
      case TargetKind::linear:
        return matvec(f_lin, alpha);
      case TargetKind::net:
        for (auto& v : alpha) v *= static_cast<double>(atoms);
        return f_net.forward(alpha);
    }
    return f_const;
  };
  std::vector<std::vector<double>> y_train, y_test;
  for (std::size_t t = 0; t < train.num_policies(); ++t) y_train.push_back(target(train, t));
  for (std::size_t t = 0; t < test.num_policies(); ++t) y_test.push_back(target(test, t));

  TreatmentNetConfig tcfg;
  tcfg.embedding_dim = atoms;
  tcfg.output_dim = cfg.output_dim;
  tcfg.hidden.assign(cfg.layers, cfg.width);
  tcfg.hidden_activation = cfg.target == TargetKind::linear ? Activation::identity : Activation::relu;
  Rng fit_rng(mix_seed(cfg.seed, kStreamFit));
  TreatmentNet net = TreatmentNet::make(train, tcfg, fit_rng);

  std::vector<ParamSlot> slots;
  net.append_slots(slots);
  OptimizerConfig oc;
  oc.learning_rate = cfg.learning_rate;
  Optimizer opt(oc);
  std::vector<std::size_t> order(train.num_policies());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng order_rng = fit_rng.split(1);
  std::vector<double> grad(cfg.output_dim);
  const double pi = std::acos(-1.0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double progress = cfg.epochs > 1 ? static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1) : 1.0;
    opt.set_learning_rate(cfg.final_learning_rate +
                          0.5 * (cfg.learning_rate - cfg.final_learning_rate) * (1.0 + std::cos(pi * progress)));
    order_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> batch(order.data() + start, stop - start);
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      net.zero_grad();
      net.begin_batch(train, batch);
      for (auto t : batch) {
        const auto h = net.batch_embedding(t);
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] = 2.0 * (h[k] - y_train[t][k]) * inv_b;
        net.accumulate_gradient(t, grad);
      }
      net.finish_backward();
      opt.step(slots);
      net.parameters_changed();
    }
  }

  // Exact least-squares refit of rho's output layer on the trained features.
  {
    const std::size_t last = net.rho().layers().size() - 1;
    const std::size_t width = net.rho().layers()[last].input_dim();
    const auto nt = static_cast<Eigen::Index>(train.num_policies());
    Eigen::MatrixXd F(nt, static_cast<Eigen::Index>(width + 1));
    Eigen::MatrixXd Y(nt, static_cast<Eigen::Index>(cfg.output_dim));
    MlpTape tape;
    for (std::size_t t = 0; t < train.num_policies(); ++t) {
      net.rho().forward(net.aggregate(induced_mixture(train, t)), tape);
      const auto& feat = tape.inputs[last];
      const auto row = static_cast<Eigen::Index>(t);
      for (std::size_t j = 0; j < width; ++j) F(row, static_cast<Eigen::Index>(j)) = feat[j];
      F(row, static_cast<Eigen::Index>(width)) = 1.0;
      for (std::size_t k = 0; k < cfg.output_dim; ++k) Y(row, static_cast<Eigen::Index>(k)) = y_train[t][k];
    }
    const Eigen::MatrixXd W = F.colPivHouseholderQr().solve(Y);
    auto& layer = net.mutable_rho().mutable_layers()[last];
    for (std::size_t k = 0; k < cfg.output_dim; ++k) {
      for (std::size_t j = 0; j < width; ++j) {
        layer.weight(k, j) = W(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k));
      }
      layer.bias[k] = W(static_cast<Eigen::Index>(width), static_cast<Eigen::Index>(k));
    }
    net.parameters_changed();
  }

  ExpressivenessReport rep;
  rep.target = cfg.target == TargetKind::net ? "net" : (cfg.target == TargetKind::linear ? "linear" : "constant");
  rep.embedding_dim = atoms;
  double sq = 0.0;
  for (std::size_t t = 0; t < train.num_policies(); ++t) {
    const auto h = net.embed(train, t);
    for (std::size_t k = 0; k < h.size(); ++k) sq += (h[k] - y_train[t][k]) * (h[k] - y_train[t][k]);
  }
  rep.train_loss = sq / static_cast<double>(train.num_policies());
  for (std::size_t k = 0; k < cfg.output_dim; ++k) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& y : y_test) {
      lo = std::min(lo, y[k]);
      hi = std::max(hi, y[k]);
    }
    rep.range = std::max(rep.range, hi - lo);
  }
  for (std::size_t t = 0; t < test.num_policies(); ++t) {
    const auto h = net.embed(test, t);
    for (std::size_t k = 0; k < h.size(); ++k) rep.sup_error = std::max(rep.sup_error, std::abs(h[k] - y_test[t][k]));
  }
  rep.passed = rep.sup_error <= std::max(cfg.tolerance * rep.range, cfg.absolute_tolerance);
  return rep;
}

}  // namespace poul
