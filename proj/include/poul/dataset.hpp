#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "poul/policy_space.hpp"

namespace poul {

// Ground-truth effect function; only synthetic data has one.
class CateOracle {
 public:
  virtual ~CateOracle() = default;
  virtual double cate(std::span<const double> x, std::size_t t1, std::size_t t0) const = 0;
};

// Rows (x, t, y, stratum?). Policies are indices into the bound PolicySpec.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::size_t num_features) : p_(num_features) {}

  std::size_t size() const { return y_.size(); }
  bool empty() const { return y_.empty(); }
  std::size_t num_features() const { return p_; }

  void add_row(std::span<const double> x, std::size_t t, double y, int stratum = -1);

  std::span<const double> x(std::size_t i) const { return {x_.data() + i * p_, p_}; }
  std::size_t t(std::size_t i) const { return t_[i]; }
  double y(std::size_t i) const { return y_[i]; }
  int stratum(std::size_t i) const { return strata_[i]; }
  bool has_strata() const;

  const std::vector<std::size_t>& treatments() const { return t_; }
  const std::vector<double>& outcomes() const { return y_; }

  // Stratum labels; stratum(i) indexes into this list.
  std::vector<std::string>& stratum_names() { return stratum_names_; }
  const std::vector<std::string>& stratum_names() const { return stratum_names_; }
  int stratum_index(const std::string& name);

  Dataset subset(std::span<const std::size_t> rows) const;

  std::shared_ptr<const CateOracle> oracle;

 private:
  std::size_t p_ = 0;
  std::vector<double> x_;
  std::vector<std::size_t> t_;
  std::vector<double> y_;
  std::vector<int> strata_;
  std::vector<std::string> stratum_names_;
};

// JSONL: one {x:[real], t:"policy_id", y:real, stratum?:"id"} object per line.
Dataset load_dataset_jsonl(const std::filesystem::path& path, const PolicySpec& spec);
Dataset parse_dataset_jsonl(const std::string& text, const PolicySpec& spec);
std::string dataset_to_jsonl(const Dataset& data, const PolicySpec& spec);
void write_dataset_jsonl(const std::filesystem::path& path, const Dataset& data, const PolicySpec& spec);

}  // namespace poul
