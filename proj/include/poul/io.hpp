#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "poul/tensor.hpp"

namespace poul {

using Json = nlohmann::ordered_json;

// 64-bit FNV-1a; used for fingerprints and file digests.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string file_digest(const std::filesystem::path& path);

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const Json& doc);

// Decimal text with 17 significant digits.
std::string format_real(double v);

struct NamedTensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
};

// {schema_version, seed, modules:[{name, shape, values}], metadata}
struct ParameterCheckpoint {
  static constexpr int kSchemaVersion = 1;

  std::uint64_t seed = 0;
  std::vector<NamedTensor> modules;
  Json metadata = Json::object();

  void add(const std::string& name, const DenseMatrix& m);
  void add(const std::string& name, std::span<const double> v);
  const NamedTensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  // Weights/biases go to modules, layer activations to metadata["architectures"].
  void add_mlp(const std::string& prefix, const Mlp& net);
  Mlp get_mlp(const std::string& prefix) const;

  Json to_json() const;
  static ParameterCheckpoint from_json(const Json& doc);
};

std::vector<double> json_to_reals(const Json& arr, const std::string& what);

}  // namespace poul
