#pragma once

// Uplift ranking and calibration metrics on a (score, exposure, outcome) table:
// normalized AUUC, decile-binned MAPE and PEHE against a ground-truth oracle.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "poul/dataset.hpp"
#include "poul/io.hpp"
#include "poul/policy_space.hpp"

namespace poul {

struct ScoredDataset {
  std::vector<double> score;  // predicted ITE
  std::vector<int> treated;   // 1 = exposed to t1, 0 = t0
  std::vector<double> outcome;

  std::size_t size() const { return score.size(); }
  void add(double s, bool is_treated, double y);
};

struct LiftPoint {
  std::size_t k = 0;
  double lift = 0.0;
  double gain = 0.0;
  double normalized_gain = 0.0;
};

// Rows sorted by descending score, ties kept in input order. Lift(k) is 0
// until both groups have appeared in the prefix.
double auuc(const ScoredDataset& scored, std::vector<LiftPoint>* curve = nullptr);

struct MapeBin {
  std::size_t index = 0;  // 0 = lowest predicted ITE
  std::size_t rows = 0;
  std::size_t treated = 0;
  std::size_t control = 0;
  double predicted = 0.0;  // mean score in the bin
  double observed = 0.0;   // difference in mean outcomes
  bool valid = false;
  std::string note;
};

struct MapeResult {
  double mape = 0.0;
  std::vector<MapeBin> bins;
  std::size_t valid_bins = 0;
  std::vector<std::string> warnings;
};

// Equal-count bins over ascending scores; the first (n mod bins) bins get one
// extra row. Bins without both groups, or with a zero observed effect, are
// excluded and reported in `warnings`.
MapeResult mape_binned(const ScoredDataset& scored, std::size_t bins = 10);

// sqrt(mean((predicted - truth)^2))
double pehe(std::span<const double> predicted, std::span<const double> truth);
// Against the dataset's attached oracle, per row at (t1, t0).
double pehe(std::span<const double> predicted, const Dataset& data, const PolicySpec& spec, std::size_t t1,
            std::size_t t0);

// Rows of `data` assigned to t1 or t0, with `score(i)` for each kept row i.
template <class ScoreFn>
ScoredDataset scored_pair(const Dataset& data, std::size_t t1, std::size_t t0, ScoreFn&& score) {
  ScoredDataset out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.t(i) != t1 && data.t(i) != t0) continue;
    out.add(score(i), data.t(i) == t1, data.y(i));
  }
  return out;
}

struct EvalReport {
  std::string treated_id;
  std::string control_id;
  std::size_t rows = 0;
  std::size_t treated_rows = 0;
  std::optional<double> auuc;
  std::optional<double> mape;
  std::optional<double> pehe;
  std::vector<MapeBin> bins;
  std::vector<LiftPoint> lift_curve;
  std::vector<std::string> warnings;

  Json to_json() const;
};

// Computes whatever metrics are defined; undefined ones are left empty with a
// warning instead of aborting the report.
EvalReport evaluate_pair(const ScoredDataset& scored, const std::string& treated_id, const std::string& control_id,
                         std::size_t bins = 10, std::optional<double> pehe_value = std::nullopt);

// Flat CSV: one row per metric and per bin of every report.
std::string reports_to_csv(const std::vector<EvalReport>& reports);
// At most `samples` evenly spaced points of each lift curve.
std::string lift_curves_to_csv(const std::vector<EvalReport>& reports, std::size_t samples = 101);

}  // namespace poul
