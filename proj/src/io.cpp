#include "poul/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "poul/errors.hpp"

namespace poul {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string file_digest(const std::filesystem::path& path) { return "fnv1a64:" + hex64(fnv1a(read_text_file(path))); }

Json read_json_file(const std::filesystem::path& path) {
  const auto text = read_text_file(path);
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const Json& doc) {
  write_text_file(path, doc.dump(2) + "\n");
}

std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void ParameterCheckpoint::add(const std::string& name, const DenseMatrix& m) {
  modules.push_back({name, m.rows(), m.cols(), {m.values().begin(), m.values().end()}});
}

void ParameterCheckpoint::add(const std::string& name, std::span<const double> v) {
  modules.push_back({name, 1, v.size(), {v.begin(), v.end()}});
}

bool ParameterCheckpoint::contains(const std::string& name) const {
  for (const auto& m : modules) {
    if (m.name == name) return true;
  }
  return false;
}

const NamedTensor& ParameterCheckpoint::get(const std::string& name) const {
  for (const auto& m : modules) {
    if (m.name == name) return m;
  }
  throw ValidationError("checkpoint has no module '" + name + "'");
}

void ParameterCheckpoint::add_mlp(const std::string& prefix, const Mlp& net) {
  Json arch = Json::array();
  for (std::size_t k = 0; k < net.layers().size(); ++k) {
    const auto& layer = net.layers()[k];
    const std::string base = prefix + ".layer" + std::to_string(k);
    add(base + ".weight", layer.weight);
    add(base + ".bias", layer.bias);
    arch.push_back({{"activation", to_string(layer.activation)}, {"layer_norm", layer.layer_norm}});
  }
  if (!metadata.contains("architectures")) metadata["architectures"] = Json::object();
  metadata["architectures"][prefix] = arch;
}

Mlp ParameterCheckpoint::get_mlp(const std::string& prefix) const {
  if (!metadata.contains("architectures") || !metadata["architectures"].contains(prefix)) {
    throw ValidationError("checkpoint has no network '" + prefix + "'");
  }
  const auto& arch = metadata["architectures"][prefix];
  std::vector<DenseLayer> layers;
  for (std::size_t k = 0; k < arch.size(); ++k) {
    const std::string base = prefix + ".layer" + std::to_string(k);
    const auto& w = get(base + ".weight");
    const auto& b = get(base + ".bias");
    DenseLayer layer;
    layer.weight = DenseMatrix(w.rows, w.cols, w.values);
    layer.bias = b.values;
    layer.activation = activation_from_string(arch[k].at("activation").get<std::string>());
    layer.layer_norm = arch[k].value("layer_norm", false);
    layers.push_back(std::move(layer));
  }
  return Mlp(std::move(layers));
}

Json ParameterCheckpoint::to_json() const {
  Json doc;
  doc["schema_version"] = kSchemaVersion;
  doc["seed"] = seed;
  Json mods = Json::array();
  for (const auto& m : modules) {
    Json vals = Json::array();
    for (double v : m.values) vals.push_back(v);
    mods.push_back({{"name", m.name}, {"shape", {m.rows, m.cols}}, {"values", std::move(vals)}});
  }
  doc["modules"] = std::move(mods);
  doc["metadata"] = metadata;
  return doc;
}

std::vector<double> json_to_reals(const Json& arr, const std::string& what) {
  if (!arr.is_array()) throw ValidationError(what + " must be an array");
  std::vector<double> out;
  out.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_number()) throw ValidationError(what + " must contain numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

ParameterCheckpoint ParameterCheckpoint::from_json(const Json& doc) {
  try {
    if (doc.at("schema_version").get<int>() != kSchemaVersion) {
      throw ValidationError("unsupported checkpoint schema_version");
    }
    ParameterCheckpoint ck;
    ck.seed = doc.at("seed").get<std::uint64_t>();
    for (const auto& m : doc.at("modules")) {
      NamedTensor t;
      t.name = m.at("name").get<std::string>();
      const auto& shape = m.at("shape");
      t.rows = shape.at(0).get<std::size_t>();
      t.cols = shape.at(1).get<std::size_t>();
      t.values = json_to_reals(m.at("values"), "module " + t.name);
      if (t.values.size() != t.rows * t.cols) throw ShapeError("module " + t.name + " shape/value mismatch");
      ck.modules.push_back(std::move(t));
    }
    if (doc.contains("metadata")) ck.metadata = doc["metadata"];
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace poul
