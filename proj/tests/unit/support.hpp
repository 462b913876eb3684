#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "poul/synthetic.hpp"
#include "poul/uplift_model.hpp"

namespace poul::testing {

// Small generator config for fast tests.
inline GenConfig small_gen(std::uint64_t seed = 11, std::size_t n = 3000) {
  GenConfig g;
  g.n = n;
  g.num_features = 4;
  g.num_contexts = 3;
  g.num_actions = 3;
  g.num_policies = 10;
  g.effect_dim = 2;
  g.seed = seed;
  return g;
}

inline TrainConfig small_train(std::uint64_t seed = 5) {
  TrainConfig c;
  c.stage1_epochs = 3;
  c.stage2_epochs = 3;
  c.batch_size = 128;
  c.m_hidden = {8};
  c.g_hidden = {8};
  c.treatment.hidden = {8};
  c.treatment.output_dim = 2;
  c.propensity_epochs = 3;
  c.propensity_hidden = {8};
  c.seed = seed;
  return c;
}

// Per-test scratch directory under the system temp dir, wiped on creation.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("poul_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline PolicySpec two_by_three_spec() {
  return PolicySpec({"s1", "s2"}, {"a0", "a1", "a2"}, {0.5, 0.5}, {"t0", "t1"},
                    {{1.0, 0.0, 0.0, 0.2, 0.3, 0.5}, {0.0, 0.5, 0.5, 1.0 / 3, 1.0 / 3, 1.0 / 3}});
}

// Dirichlet(1) weights and rows.
inline PolicySpec random_spec(Rng& rng, std::size_t contexts, std::size_t actions, std::size_t policies) {
  std::vector<std::string> cs, as, ids;
  for (std::size_t s = 0; s < contexts; ++s) cs.push_back("c" + std::to_string(s));
  for (std::size_t a = 0; a < actions; ++a) as.push_back("a" + std::to_string(a));
  auto w = rng.dirichlet(contexts, 1.0);
  std::vector<std::vector<double>> rows;
  for (std::size_t t = 0; t < policies; ++t) {
    ids.push_back("p" + std::to_string(t));
    std::vector<double> row;
    for (std::size_t s = 0; s < contexts; ++s) {
      const auto r = rng.dirichlet(actions, 1.0);
      row.insert(row.end(), r.begin(), r.end());
    }
    rows.push_back(std::move(row));
  }
  return PolicySpec(cs, as, w, ids, rows);
}

}  // namespace poul::testing
