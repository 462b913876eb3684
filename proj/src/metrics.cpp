#include "poul/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "poul/errors.hpp"

namespace poul {

namespace {

std::vector<std::size_t> ranked(const std::vector<double>& score, bool descending) {
  for (double s : score) {
    if (!std::isfinite(s)) throw MetricError("non-finite score");
  }
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (descending) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  } else {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  }
  return order;
}

void check_table(const ScoredDataset& s) {
  if (s.treated.size() != s.score.size() || s.outcome.size() != s.score.size()) {
    throw ShapeError("scored dataset columns differ in length");
  }
}

}  // namespace

void ScoredDataset::add(double s, bool is_treated, double y) {
  score.push_back(s);
  treated.push_back(is_treated ? 1 : 0);
  outcome.push_back(y);
}

double auuc(const ScoredDataset& scored, std::vector<LiftPoint>* curve) {
  check_table(scored);
  const std::size_t n = scored.size();
  if (n < 2) throw MetricError("AUUC needs at least two rows");
  const auto treated_total = static_cast<std::size_t>(std::count(scored.treated.begin(), scored.treated.end(), 1));
  if (treated_total == 0 || treated_total == n) throw MetricError("AUUC needs both treated and control rows");

  const auto order = ranked(scored.score, true);
  std::vector<double> gain(n);
  double yt = 0.0, yc = 0.0;
  std::size_t nt = 0, nc = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = order[k];
    if (scored.treated[i]) {
      yt += scored.outcome[i];
      ++nt;
    } else {
      yc += scored.outcome[i];
      ++nc;
    }
    const double lift = (nt > 0 && nc > 0) ? yt / static_cast<double>(nt) - yc / static_cast<double>(nc) : 0.0;
    gain[k] = lift * static_cast<double>(k + 1);
  }
  const double total = gain[n - 1];
  if (total == 0.0) throw MetricError("total gain G(n) is zero; normalized AUUC is undefined");
  const double norm = std::abs(total);
  double sum = 0.0;
  if (curve) curve->clear();
  for (std::size_t k = 0; k < n; ++k) {
    const double g = gain[k] / norm;
    sum += g;
    if (curve) curve->push_back({k + 1, gain[k] / static_cast<double>(k + 1), gain[k], g});
  }
  return sum / static_cast<double>(n);
}

MapeResult mape_binned(const ScoredDataset& scored, std::size_t bins) {
  check_table(scored);
  const std::size_t n = scored.size();
  if (bins == 0) throw MetricError("MAPE needs at least one bin");
  if (n < bins) throw MetricError("fewer rows than bins");
  const auto order = ranked(scored.score, false);
  const std::size_t base = n / bins;
  const std::size_t extra = n % bins;

  MapeResult result;
  double total = 0.0;
  std::size_t pos = 0;
  for (std::size_t m = 0; m < bins; ++m) {
    const std::size_t size = base + (m < extra ? 1 : 0);
    MapeBin bin;
    bin.index = m;
    bin.rows = size;
    double score_sum = 0.0, yt = 0.0, yc = 0.0;
    for (std::size_t j = pos; j < pos + size; ++j) {
      const std::size_t i = order[j];
      score_sum += scored.score[i];
      if (scored.treated[i]) {
        yt += scored.outcome[i];
        ++bin.treated;
      } else {
        yc += scored.outcome[i];
        ++bin.control;
      }
    }
    pos += size;
    bin.predicted = score_sum / static_cast<double>(size);
    if (bin.treated == 0 || bin.control == 0) {
      bin.note = "bin " + std::to_string(m) + " lacks a treated or control row";
    } else {
      bin.observed = yt / static_cast<double>(bin.treated) - yc / static_cast<double>(bin.control);
      if (bin.observed == 0.0) {
        bin.note = "bin " + std::to_string(m) + " has zero observed effect";
      } else {
        bin.valid = true;
        total += std::abs((bin.predicted - bin.observed) / bin.observed);
        ++result.valid_bins;
      }
    }
    if (!bin.valid) result.warnings.push_back(bin.note + "; excluded");
    result.bins.push_back(std::move(bin));
  }
  if (result.valid_bins == 0) throw MetricError("no bin has a defined observed effect");
  result.mape = total / static_cast<double>(result.valid_bins);
  return result;
}

double pehe(std::span<const double> predicted, std::span<const double> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("prediction and truth lengths differ");
  if (predicted.empty()) throw MetricError("PEHE needs at least one row");
  double sq = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double e = predicted[i] - truth[i];
    sq += e * e;
  }
  return std::sqrt(sq / static_cast<double>(predicted.size()));
}

double pehe(std::span<const double> predicted, const Dataset& data, const PolicySpec& spec, std::size_t t1,
            std::size_t t0) {
  if (!data.oracle) throw MetricError("PEHE needs a ground-truth oracle attached to the dataset");
  if (t1 >= spec.num_policies() || t0 >= spec.num_policies()) throw UnknownIdError("unknown policy in PEHE query");
  if (predicted.size() != data.size()) throw ShapeError("one prediction per dataset row expected");
  std::vector<double> truth(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) truth[i] = data.oracle->cate(data.x(i), t1, t0);
  return pehe(predicted, truth);
}

Json EvalReport::to_json() const {
  Json j;
  j["treated"] = treated_id;
  j["control"] = control_id;
  j["rows"] = rows;
  j["treated_rows"] = treated_rows;
  j["auuc"] = auuc ? Json(*auuc) : Json(nullptr);
  j["mape"] = mape ? Json(*mape) : Json(nullptr);
  j["pehe"] = pehe ? Json(*pehe) : Json(nullptr);
  Json b = Json::array();
  for (const auto& bin : bins) {
    b.push_back({{"bin", bin.index},
                 {"rows", bin.rows},
                 {"treated", bin.treated},
                 {"control", bin.control},
                 {"predicted", bin.predicted},
                 {"observed", bin.valid ? Json(bin.observed) : Json(nullptr)},
                 {"valid", bin.valid}});
  }
  j["bins"] = std::move(b);
  j["warnings"] = warnings;
  j["conventions"] = {{"lift_before_both_groups", "zero"}, {"tie_break", "input order"}};
  return j;
}

EvalReport evaluate_pair(const ScoredDataset& scored, const std::string& treated_id, const std::string& control_id,
                         std::size_t bins, std::optional<double> pehe_value) {
  EvalReport report;
  report.treated_id = treated_id;
  report.control_id = control_id;
  report.rows = scored.size();
  report.treated_rows = static_cast<std::size_t>(std::count(scored.treated.begin(), scored.treated.end(), 1));
  report.pehe = pehe_value;
  try {
    report.auuc = auuc(scored, &report.lift_curve);
  } catch (const MetricError& e) {
    report.warnings.push_back(std::string("auuc: ") + e.what());
  }
  try {
    auto m = mape_binned(scored, bins);
    report.mape = m.mape;
    report.bins = std::move(m.bins);
    for (auto& w : m.warnings) report.warnings.push_back("mape: " + w);
  } catch (const MetricError& e) {
    report.warnings.push_back(std::string("mape: ") + e.what());
  }
  return report;
}

std::string reports_to_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  out << "treated,control,metric,bin,value\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string(); };
  for (const auto& r : reports) {
    out << r.treated_id << ',' << r.control_id << ",auuc,," << opt(r.auuc) << '\n';
    out << r.treated_id << ',' << r.control_id << ",mape,," << opt(r.mape) << '\n';
    out << r.treated_id << ',' << r.control_id << ",pehe,," << opt(r.pehe) << '\n';
    for (const auto& b : r.bins) {
      out << r.treated_id << ',' << r.control_id << ",bin_predicted," << b.index << ',' << format_real(b.predicted)
          << '\n';
      out << r.treated_id << ',' << r.control_id << ",bin_observed," << b.index << ','
          << (b.valid ? format_real(b.observed) : std::string()) << '\n';
    }
  }
  return out.str();
}

std::string lift_curves_to_csv(const std::vector<EvalReport>& reports, std::size_t samples) {
  std::ostringstream out;
  out << "treated,control,k,lift,gain,normalized_gain\n";
  for (const auto& r : reports) {
    const std::size_t n = r.lift_curve.size();
    if (n == 0) continue;
    std::vector<std::size_t> picks;
    if (samples < 2 || n <= samples) {
      for (std::size_t k = 0; k < n; ++k) picks.push_back(k);
    } else {
      for (std::size_t j = 0; j < samples; ++j) picks.push_back(j * (n - 1) / (samples - 1));
    }
    for (auto k : picks) {
      const auto& p = r.lift_curve[k];
      out << r.treated_id << ',' << r.control_id << ',' << p.k << ',' << format_real(p.lift) << ','
          << format_real(p.gain) << ',' << format_real(p.normalized_gain) << '\n';
    }
  }
  return out.str();
}

}  // namespace poul
