#include "poul/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "poul/errors.hpp"

namespace poul {

void Dataset::add_row(std::span<const double> x, std::size_t t, double y, int stratum) {
  if (y_.empty() && p_ == 0) p_ = x.size();
  if (x.size() != p_) throw ShapeError("row has " + std::to_string(x.size()) + " features, expected " + std::to_string(p_));
  for (double v : x) {
    if (!std::isfinite(v)) throw ValidationError("non-finite covariate");
  }
  if (!std::isfinite(y)) throw ValidationError("non-finite outcome");
  x_.insert(x_.end(), x.begin(), x.end());
  t_.push_back(t);
  y_.push_back(y);
  strata_.push_back(stratum);
}

bool Dataset::has_strata() const {
  return !strata_.empty() && std::all_of(strata_.begin(), strata_.end(), [](int s) { return s >= 0; });
}

int Dataset::stratum_index(const std::string& name) {
  auto it = std::find(stratum_names_.begin(), stratum_names_.end(), name);
  if (it != stratum_names_.end()) return static_cast<int>(it - stratum_names_.begin());
  stratum_names_.push_back(name);
  return static_cast<int>(stratum_names_.size() - 1);
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out(p_);
  out.stratum_names_ = stratum_names_;
  out.oracle = oracle;
  for (auto i : rows) out.add_row(x(i), t_.at(i), y_[i], strata_[i]);
  return out;
}

Dataset parse_dataset_jsonl(const std::string& text, const PolicySpec& spec) {
  Dataset data;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto row = Json::parse(line);
      const auto x = json_to_reals(row.at("x"), "x");
      const auto t = spec.policy_index(row.at("t").get<std::string>());
      const double y = row.at("y").get<double>();
      int stratum = -1;
      if (row.contains("stratum") && !row["stratum"].is_null()) {
        stratum = data.stratum_index(row["stratum"].get<std::string>());
      }
      data.add_row(x, t, y, stratum);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("dataset line " + std::to_string(lineno) + ": " + e.what());
    } catch (const std::exception& e) {
      throw ValidationError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return data;
}

Dataset load_dataset_jsonl(const std::filesystem::path& path, const PolicySpec& spec) {
  return parse_dataset_jsonl(read_text_file(path), spec);
}

std::string dataset_to_jsonl(const Dataset& data, const PolicySpec& spec) {
  std::string out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Json row;
    Json x = Json::array();
    for (double v : data.x(i)) x.push_back(v);
    row["x"] = std::move(x);
    row["t"] = spec.policy_ids().at(data.t(i));
    row["y"] = data.y(i);
    if (data.stratum(i) >= 0) row["stratum"] = data.stratum_names().at(static_cast<std::size_t>(data.stratum(i)));
    out += row.dump();
    out += '\n';
  }
  return out;
}

void write_dataset_jsonl(const std::filesystem::path& path, const Dataset& data, const PolicySpec& spec) {
  write_text_file(path, dataset_to_jsonl(data, spec));
}

}  // namespace poul
