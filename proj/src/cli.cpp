#include "poul/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "poul/baselines.hpp"
#include "poul/errors.hpp"
#include "poul/harness.hpp"
#include "poul/io.hpp"
#include "poul/metrics.hpp"
#include "poul/synthetic.hpp"
#include "poul/uplift_model.hpp"
#include "poul/version.hpp"

namespace poul {

namespace {

namespace fs = std::filesystem;

constexpr std::uint64_t kStreamRandomScore = 21;
constexpr std::uint64_t kStreamProbeRows = 22;

fs::path resolve_out_dir(const std::string& flag) {
  fs::path dir = ".";
  if (!flag.empty()) {
    dir = flag;
  } else if (const char* env = std::getenv("POUL_OUT_DIR"); env && *env) {
    dir = env;
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());
  return dir;
}

class Manifest {
 public:
  Manifest(std::string command, std::vector<std::string> args, fs::path dir)
      : dir_(std::move(dir)), start_(std::chrono::steady_clock::now()) {
    doc_["command"] = std::move(command);
    doc_["arguments"] = std::move(args);
    doc_["version"] = kVersion;
    doc_["seed"] = nullptr;
    doc_["config"] = Json::object();
    doc_["inputs"] = Json::array();
    doc_["outputs"] = Json::array();
  }

  void seed(std::uint64_t s) { doc_["seed"] = s; }
  void config(Json c) { doc_["config"] = std::move(c); }
  void extra(const std::string& key, Json value) { doc_[key] = std::move(value); }
  void input(const fs::path& p) { doc_["inputs"].push_back({{"path", p.string()}, {"digest", file_digest(p)}}); }

  fs::path output(const std::string& name) {
    doc_["outputs"].push_back(name);
    return dir_ / name;
  }

  void write() {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    doc_["wall_clock_seconds"] = secs;
    write_json_file(dir_ / "manifest.json", doc_);
  }

 private:
  fs::path dir_;
  std::chrono::steady_clock::time_point start_;
  Json doc_;
};

std::pair<std::string, std::string> parse_pair(const std::string& text) {
  const auto pos = text.rfind(':');
  if (pos == std::string::npos || pos == 0 || pos + 1 == text.size()) {
    throw ValidationError("pair must look like TREATED:CONTROL, got '" + text + "'");
  }
  return {text.substr(0, pos), text.substr(pos + 1)};
}

// A checkpoint of any model kind, with the embeddings precomputed.
struct LoadedModel {
  Json metadata;
  std::optional<UpliftModel> factorized;
  std::optional<TLearnerModel> tlearner;
  std::vector<std::vector<double>> embeddings;
  std::vector<int> stratum_map;  // data stratum index -> model stratum index

  std::string kind() const { return metadata.value("kind", std::string("unknown")); }

  double cate(std::span<const double> x, std::size_t t1, std::size_t t0) const {
    if (tlearner) return tlearner->predict_cate(x, t1, t0);
    return predict_cate(*factorized, x, embeddings.at(t1), embeddings.at(t0));
  }

  double outcome(std::span<const double> x, std::size_t t, int data_stratum) const {
    if (tlearner) return tlearner->predict_arm(x, t);
    int s = -1;
    if (data_stratum >= 0 && static_cast<std::size_t>(data_stratum) < stratum_map.size()) {
      s = stratum_map[static_cast<std::size_t>(data_stratum)];
    }
    return predict_outcome(*factorized, x, t, s);
  }

  void bind_strata(const Dataset& data) {
    stratum_map.clear();
    if (!factorized) return;
    const auto& names = factorized->e_hat.strata;
    for (const auto& name : data.stratum_names()) {
      const auto it = std::find(names.begin(), names.end(), name);
      stratum_map.push_back(it == names.end() ? -1 : static_cast<int>(it - names.begin()));
    }
  }
};

LoadedModel load_any_model(const fs::path& path, const PolicySpec& spec) {
  const auto ck = ParameterCheckpoint::from_json(read_json_file(path));
  LoadedModel out;
  out.metadata = ck.metadata;
  if (out.kind() == "tlearner") {
    out.tlearner = TLearnerModel::load(ck, spec);
  } else {
    out.factorized = load_model(ck, spec);
    out.embeddings = out.factorized->embeddings();
  }
  return out;
}

Json policy_counts(const Dataset& data, const PolicySpec& spec) {
  std::vector<std::size_t> counts(spec.num_policies(), 0);
  for (auto t : data.treatments()) ++counts[t];
  Json j = Json::object();
  for (std::size_t t = 0; t < counts.size(); ++t) j[spec.policy_ids()[t]] = counts[t];
  return j;
}

// (held-out policy, most frequent policy) for every policy without training rows.
std::vector<std::pair<std::size_t, std::size_t>> default_pairs(const Json& counts, const PolicySpec& spec) {
  std::size_t control = 0, best = 0;
  std::vector<std::size_t> unseen;
  for (std::size_t t = 0; t < spec.num_policies(); ++t) {
    const auto c = counts.value(spec.policy_ids()[t], std::size_t{0});
    if (c > best) {
      best = c;
      control = t;
    }
    if (c == 0) unseen.push_back(t);
  }
  if (best == 0) throw ValidationError("training counts are empty; pass --pair explicitly");
  if (unseen.empty()) throw ValidationError("no held-out policies in the training counts; pass --pair explicitly");
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (auto t : unseen) pairs.emplace_back(t, control);
  return pairs;
}

std::string loss_trace_csv(const TrainResult& r) {
  std::ostringstream ss;
  ss << "stage,epoch,loss\n";
  for (std::size_t e = 0; e < r.stage1_loss.size(); ++e) ss << "1," << e + 1 << ',' << format_real(r.stage1_loss[e]) << '\n';
  for (std::size_t e = 0; e < r.stage2_loss.size(); ++e) ss << "2," << e + 1 << ',' << format_real(r.stage2_loss[e]) << '\n';
  return ss.str();
}

const char* verdict(bool ok) { return ok ? "PASS" : "FAIL"; }

struct GenArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n, policies;
  std::optional<std::string> regime, effect_map;
  std::optional<double> held_out, noise;
};

int cmd_gen(const GenArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  GenConfig cfg = a.config.empty() ? GenConfig{} : GenConfig::from_json(read_json_file(a.config));
  if (a.seed) cfg.seed = *a.seed;
  if (a.n) cfg.n = *a.n;
  if (a.policies) cfg.num_policies = *a.policies;
  if (a.regime) cfg.regime = regime_from_string(*a.regime);
  if (a.effect_map) {
    Json j = cfg.to_json();
    j["effect_map"] = *a.effect_map;
    cfg = GenConfig::from_json(j);
  }
  if (a.held_out) cfg.held_out = *a.held_out;
  if (a.noise) cfg.noise_sd = *a.noise;
  cfg.validate();

  const auto dir = resolve_out_dir(a.out);
  Manifest man("gen", args, dir);
  if (!a.config.empty()) man.input(a.config);
  man.seed(cfg.seed);
  man.config(cfg.to_json());

  const auto data = generate(cfg);
  write_json_file(man.output("spec.json"), data.spec.to_json());
  write_dataset_jsonl(man.output("train.jsonl"), data.train, data.spec);
  write_dataset_jsonl(man.output("test.jsonl"), data.test, data.spec);
  write_json_file(man.output("oracle.json"), data.oracle->to_json());
  Json held = Json::array();
  for (auto t : data.held_out) held.push_back(data.spec.policy_ids()[t]);
  man.extra("held_out", std::move(held));
  man.extra("control", data.spec.policy_ids()[data.control]);
  man.write();
  out << "wrote " << data.train.size() << " train and " << data.test.size() << " test rows over "
      << data.spec.num_policies() << " policies to " << dir.string() << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string model = "poul", spec, train, exp, config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> folds, stage1, stage2, batch;
  std::optional<double> lr, l2;
  std::optional<std::string> regime;
  bool warm_start = false, fresh_mean = false, no_residualize = false;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::from_json(read_json_file(a.config));
  if (a.seed) cfg.seed = *a.seed;
  if (a.folds) cfg.folds = *a.folds;
  if (a.stage1) cfg.stage1_epochs = *a.stage1;
  if (a.stage2) cfg.stage2_epochs = *a.stage2;
  if (a.batch) cfg.batch_size = *a.batch;
  if (a.lr) cfg.learning_rate = *a.lr;
  if (a.l2) cfg.l2 = *a.l2;
  if (a.regime) cfg.regime = regime_from_string(*a.regime);
  if (a.warm_start) cfg.warm_start_mean = true;
  if (a.fresh_mean) cfg.fresh_mean_per_epoch = true;
  if (a.no_residualize) cfg.residualize = false;
  cfg.validate();
  if (!a.exp.empty() && (a.model != "poul" || cfg.folds > 1)) {
    throw ValidationError("--exp is only used by the two-stage poul model");
  }

  const auto dir = resolve_out_dir(a.out);
  Manifest man("train", args, dir);
  man.input(a.spec);
  man.input(a.train);
  if (!a.exp.empty()) man.input(a.exp);
  if (!a.config.empty()) man.input(a.config);
  man.seed(cfg.seed);
  man.config(cfg.to_json());

  const auto spec = load_policy_spec_file(a.spec);
  const auto data = load_dataset_jsonl(a.train, spec);
  ParameterCheckpoint ck;
  std::optional<TrainResult> result;
  if (a.model == "poul") {
    // K = 1 goes through the cross-fit entry point too, which reduces to two-stage.
    if (!a.exp.empty()) {
      result = train_two_stage(data, load_dataset_jsonl(a.exp, spec), spec, cfg);
    } else {
      result = train_crossfit(data, spec, cfg);
    }
    ck = save_model(result->model, cfg);
  } else if (a.model == "categorical") {
    result = train_categorical(data, spec, cfg);
    ck = save_model(result->model, cfg);
  } else {
    const auto model = train_tlearner(data, spec, cfg);
    ck = model.save(cfg.seed, cfg.to_json());
    std::ostringstream ss;
    ss << "policy,rows,low_support\n";
    for (const auto& arm : model.support_report()) {
      ss << arm.policy << ',' << arm.rows << ',' << (arm.low_support ? 1 : 0) << '\n';
    }
    write_text_file(man.output("support.csv"), ss.str());
  }
  ck.metadata["train_policy_counts"] = policy_counts(data, spec);
  write_json_file(man.output("model.json"), ck.to_json());
  if (result) write_text_file(man.output("loss_trace.csv"), loss_trace_csv(*result));
  man.write();
  out << "trained " << a.model << " on " << data.size() << " rows";
  if (result && !result->stage2_loss.empty()) out << "; final loss " << format_real(result->stage2_loss.back());
  out << "\n";
  return kExitOk;
}

struct PredictArgs {
  std::string model, spec, data, pair, out;
};

int cmd_predict(const PredictArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  const auto dir = resolve_out_dir(a.out);
  Manifest man("predict", args, dir);
  man.input(a.spec);
  man.input(a.model);
  man.input(a.data);
  const auto spec = load_policy_spec_file(a.spec);
  auto model = load_any_model(a.model, spec);
  const auto data = load_dataset_jsonl(a.data, spec);
  model.bind_strata(data);
  std::optional<std::pair<std::size_t, std::size_t>> pair;
  if (!a.pair.empty()) {
    const auto [t1, t0] = parse_pair(a.pair);
    pair.emplace(spec.policy_index(t1), spec.policy_index(t0));
    man.extra("pair", a.pair);
  }
  std::ostringstream ss;
  ss << "row,policy,y_hat" << (pair ? ",tau_hat" : "") << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    ss << i << ',' << spec.policy_ids()[data.t(i)] << ',' << format_real(model.outcome(data.x(i), data.t(i), data.stratum(i)));
    if (pair) ss << ',' << format_real(model.cate(data.x(i), pair->first, pair->second));
    ss << '\n';
  }
  write_text_file(man.output("predictions.csv"), ss.str());
  man.write();
  out << "wrote " << data.size() << " predictions\n";
  return kExitOk;
}

struct EvalArgs {
  std::string model, spec, test, oracle, train, out;
  std::vector<std::string> pairs;
  bool random_score = false, oracle_score = false;
  std::size_t bins = 10;
  std::uint64_t seed = 3407;
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  if (a.random_score && a.oracle_score) throw ValidationError("--random-score and --oracle-score are exclusive");
  if (a.oracle_score && a.oracle.empty()) throw ValidationError("--oracle-score needs --oracle");
  if (!a.random_score && !a.oracle_score && a.model.empty()) throw ValidationError("eval needs --model or a score flag");
  if (a.bins == 0) throw ValidationError("--bins must be positive");

  const auto dir = resolve_out_dir(a.out);
  Manifest man("eval", args, dir);
  man.input(a.spec);
  man.input(a.test);
  for (const auto* p : {&a.model, &a.oracle, &a.train}) {
    if (!p->empty()) man.input(*p);
  }
  man.seed(a.seed);

  const auto spec = load_policy_spec_file(a.spec);
  Dataset test = load_dataset_jsonl(a.test, spec);
  std::shared_ptr<const OracleTruth> oracle;
  if (!a.oracle.empty()) {
    oracle = OracleTruth::from_json(read_json_file(a.oracle), spec);
    test.oracle = oracle;
  }
  std::optional<LoadedModel> model;
  if (!a.model.empty() && !a.random_score && !a.oracle_score) model = load_any_model(a.model, spec);

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& text : a.pairs) {
    const auto [t1, t0] = parse_pair(text);
    pairs.emplace_back(spec.policy_index(t1), spec.policy_index(t0));
  }
  if (pairs.empty()) {
    Json counts;
    if (!a.train.empty()) {
      counts = policy_counts(load_dataset_jsonl(a.train, spec), spec);
    } else if (model && model->metadata.contains("train_policy_counts")) {
      counts = model->metadata.at("train_policy_counts");
    } else {
      throw ValidationError("default pairs need --train or a model trained by this tool; pass --pair");
    }
    pairs = default_pairs(counts, spec);
  }

  const std::string source = a.random_score ? "random" : (a.oracle_score ? "oracle" : model->kind());
  Rng rng(mix_seed(a.seed, kStreamRandomScore));
  std::vector<EvalReport> reports;
  for (const auto& [t1, t0] : pairs) {
    std::vector<double> scores(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
      if (a.random_score) {
        scores[i] = rng.uniform();
      } else if (a.oracle_score) {
        scores[i] = true_cate(*oracle, spec, test.x(i), t1, t0);
      } else {
        scores[i] = model->cate(test.x(i), t1, t0);
      }
    }
    std::optional<double> pehe_value;
    if (oracle && !a.random_score) pehe_value = pehe(scores, test, spec, t1, t0);
    const auto scored = scored_pair(test, t1, t0, [&](std::size_t i) { return scores[i]; });
    reports.push_back(evaluate_pair(scored, spec.policy_ids()[t1], spec.policy_ids()[t0], a.bins, pehe_value));
  }

  Json doc;
  doc["score_source"] = source;
  doc["bins"] = a.bins;
  Json arr = Json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  doc["pairs"] = std::move(arr);
  write_json_file(man.output("eval.json"), doc);
  write_text_file(man.output("eval.csv"), reports_to_csv(reports));
  write_text_file(man.output("lift.csv"), lift_curves_to_csv(reports));
  man.config({{"score_source", source}, {"bins", a.bins}});
  man.write();
  for (const auto& r : reports) {
    out << r.treated_id << " vs " << r.control_id << ": auuc=" << (r.auuc ? format_real(*r.auuc) : "n/a")
        << " mape=" << (r.mape ? format_real(*r.mape) : "n/a");
    if (r.pehe) out << " pehe=" << format_real(*r.pehe);
    out << "\n";
  }
  return kExitOk;
}

struct EmbedArgs {
  std::string spec, model, out;
  std::uint64_t seed = 3407;
};

int cmd_embed(const EmbedArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  const auto dir = resolve_out_dir(a.out);
  Manifest man("embed", args, dir);
  man.input(a.spec);
  if (!a.model.empty()) man.input(a.model);
  const auto spec = load_policy_spec_file(a.spec);
  std::vector<std::vector<double>> emb;
  if (!a.model.empty()) {
    const auto model = load_any_model(a.model, spec);
    if (!model.factorized) throw ValidationError("a " + model.kind() + " checkpoint has no treatment embeddings");
    emb = model.embeddings;
  } else {
    TrainConfig cfg;
    cfg.seed = a.seed;
    man.seed(a.seed);
    emb = make_treatment_net(spec, cfg)->embed_policies(spec);
  }
  Json doc = Json::object();
  for (std::size_t t = 0; t < spec.num_policies(); ++t) doc[spec.policy_ids()[t]] = emb[t];
  write_json_file(man.output("embeddings.json"), doc);
  man.write();
  out << "wrote " << emb.size() << " embeddings\n";
  return kExitOk;
}

int cmd_distance(const std::string& spec_path, const std::string& out_flag, const std::vector<std::string>& args,
                 std::ostream& out) {
  const auto dir = resolve_out_dir(out_flag);
  Manifest man("distance", args, dir);
  man.input(spec_path);
  const auto spec = load_policy_spec_file(spec_path);
  const std::size_t n = spec.num_policies();
  std::ostringstream ss;
  ss << "policy";
  for (const auto& id : spec.policy_ids()) ss << ',' << id;
  ss << '\n';
  for (std::size_t t = 0; t < n; ++t) {
    ss << spec.policy_ids()[t];
    for (std::size_t u = 0; u < n; ++u) {
      // Upper triangle computed once and mirrored so the matrix is exactly symmetric.
      const double d = t == u ? 0.0 : policy_distance(spec, std::min(t, u), std::max(t, u));
      ss << ',' << format_real(d);
    }
    ss << '\n';
  }
  write_text_file(man.output("distance.csv"), ss.str());
  man.write();
  out << "wrote " << n << "x" << n << " distance matrix\n";
  return kExitOk;
}

struct VerifyArgs {
  std::string model, spec, config, out;
  bool stability_only = false;
  std::uint64_t seed = 3407;
};

struct VerifyConfig {
  GenConfig generator;
  std::size_t orthogonality_rows = 200000;
  std::size_t robustness_rows = 1000000;
  std::size_t stability_pairs = 1000;
  std::size_t stability_probes = 200;
  ExpressivenessConfig expressiveness;

  static VerifyConfig from_json(const Json& doc) {
    static const std::vector<std::string> known = {"generator",        "orthogonality_rows", "robustness_rows",
                                                   "stability_pairs",  "stability_probes",   "expressiveness"};
    for (const auto& [key, _] : doc.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) {
        throw ValidationError("unknown verify config key '" + key + "'");
      }
    }
    VerifyConfig c;
    if (doc.contains("generator")) c.generator = GenConfig::from_json(doc.at("generator"));
    c.orthogonality_rows = doc.value("orthogonality_rows", c.orthogonality_rows);
    c.robustness_rows = doc.value("robustness_rows", c.robustness_rows);
    c.stability_pairs = doc.value("stability_pairs", c.stability_pairs);
    c.stability_probes = doc.value("stability_probes", c.stability_probes);
    if (doc.contains("expressiveness")) {
      const auto& e = doc.at("expressiveness");
      for (const auto& [key, _] : e.items()) {
        if (key != "epochs" && key != "train_policies" && key != "test_policies" && key != "batch_size" &&
            key != "width" && key != "layers" && key != "learning_rate") {
          throw ValidationError("unknown expressiveness key '" + key + "'");
        }
      }
      auto& x = c.expressiveness;
      x.epochs = e.value("epochs", x.epochs);
      x.train_policies = e.value("train_policies", x.train_policies);
      x.test_policies = e.value("test_policies", x.test_policies);
      x.batch_size = e.value("batch_size", x.batch_size);
      x.width = e.value("width", x.width);
      x.layers = e.value("layers", x.layers);
      x.learning_rate = e.value("learning_rate", x.learning_rate);
    }
    return c;
  }

  Json to_json() const {
    return {{"generator", generator.to_json()},
            {"orthogonality_rows", orthogonality_rows},
            {"robustness_rows", robustness_rows},
            {"stability_pairs", stability_pairs},
            {"stability_probes", stability_probes},
            {"expressiveness",
             {{"epochs", expressiveness.epochs},
              {"train_policies", expressiveness.train_policies},
              {"test_policies", expressiveness.test_policies},
              {"batch_size", expressiveness.batch_size},
              {"width", expressiveness.width},
              {"layers", expressiveness.layers},
              {"learning_rate", expressiveness.learning_rate}}}};
  }
};

SyntheticData oracle_fixture(const GenConfig& base, std::size_t rows) {
  GenConfig g = base;
  g.n = rows;
  g.test_fraction = 0.0;
  g.held_out = 0.0;
  return generate(g);
}

int cmd_verify(const VerifyArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  if (!a.model.empty() && a.spec.empty()) throw ValidationError("--model needs --spec");
  VerifyConfig vc = a.config.empty() ? VerifyConfig{} : VerifyConfig::from_json(read_json_file(a.config));
  vc.generator.seed = a.seed;
  vc.expressiveness.seed = a.seed;
  vc.generator.validate();

  const auto dir = resolve_out_dir(a.out);
  Manifest man("verify", args, dir);
  if (!a.model.empty()) {
    man.input(a.spec);
    man.input(a.model);
  }
  if (!a.config.empty()) man.input(a.config);
  man.seed(a.seed);
  man.config(vc.to_json());

  Json tests = Json::object();
  bool passed = true;

  if (!a.stability_only) {
    {
      const auto fx = oracle_fixture(vc.generator, vc.orthogonality_rows);
      OrthogonalityConfig oc;
      oc.seed = a.seed;
      const auto r = orthogonality_test(*fx.oracle, fx.train, oc);
      out << "orthogonality    " << verdict(r.passed) << "  slope=" << format_real(r.slope)
          << " centering_z=" << format_real(r.centering_max_z) << "\n";
      passed = passed && r.passed;
      tests["orthogonality"] = r.to_json();
    }
    {
      const auto fx = oracle_fixture(vc.generator, vc.robustness_rows);
      RobustnessConfig rc;
      rc.seed = a.seed;
      const auto r = robustness_scaling_test(*fx.oracle, fx.train, rc);
      out << "robustness       " << verdict(r.passed) << "  slope=" << format_real(r.slope)
          << " dm_only_z=" << format_real(r.dm_only_max_z) << "\n";
      passed = passed && r.passed;
      tests["robustness"] = r.to_json();
    }
  }

  std::optional<PolicySpec> spec;
  StabilityConfig sc;
  sc.pairs = vc.stability_pairs;
  sc.seed = a.seed;
  StabilityReport stab;
  if (!a.model.empty()) {
    spec = load_policy_spec_file(a.spec);
    const auto model = load_any_model(a.model, *spec);
    if (!model.factorized || model.kind() != "poul") {
      throw ValidationError("stability needs a poul checkpoint, got " + model.kind());
    }
    const auto* net = dynamic_cast<const TreatmentNet*>(model.factorized->encoder.get());
    Rng rng(mix_seed(a.seed, kStreamProbeRows));
    std::vector<std::vector<double>> probes(vc.stability_probes);
    for (auto& x : probes) {
      x.resize(model.factorized->g_net.input_dim());
      for (auto& v : x) v = rng.normal();
    }
    stab = stability_test(*net, model.factorized->g_net, *spec, probes, sc);
  } else {
    // Short training run; the bound must hold for whatever parameters result.
    GenConfig g = vc.generator;
    g.n = 6000;
    const auto fx = generate(g);
    TrainConfig tc;
    tc.seed = a.seed;
    tc.stage1_epochs = 3;
    tc.stage2_epochs = 5;
    const auto trained = train_two_stage(fx.train, fx.train, fx.spec, tc);
    spec = fx.spec;
    stab = stability_test(trained.model, fx.test, sc);
  }
  out << "stability        " << verdict(stab.passed) << "  pairs=" << stab.pairs
      << " max_ratio=" << format_real(stab.max_embedding_ratio)
      << (stab.bound_valid ? "" : "  (bound not proven: layer norm in rho)") << "\n";
  passed = passed && stab.passed;
  tests["stability"] = stab.to_json();

  if (!a.stability_only) {
    Json reps = Json::array();
    for (auto kind : {TargetKind::net, TargetKind::linear, TargetKind::constant}) {
      ExpressivenessConfig ec = vc.expressiveness;
      ec.target = kind;
      const auto r = expressiveness_test(*spec, ec);
      out << "expressiveness   " << verdict(r.passed) << "  target=" << r.target
          << " sup_error=" << format_real(r.sup_error) << " range=" << format_real(r.range) << "\n";
      passed = passed && r.passed;
      reps.push_back(r.to_json());
    }
    tests["expressiveness"] = std::move(reps);
  }

  Json doc;
  doc["version"] = kVersion;
  doc["seed"] = a.seed;
  doc["tests"] = std::move(tests);
  doc["passed"] = passed;
  write_json_file(man.output("verify.json"), doc);
  man.write();
  out << (passed ? "all checks passed" : "verification FAILED") << "\n";
  return passed ? kExitOk : kExitVerify;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Policy-valued treatment uplift modeling"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  std::vector<std::string> args(argv + std::min(argc, 1), argv + argc);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen", "Generate a synthetic benchmark with ground truth");
  c_gen->add_option("--config", gen.config, "Generator config JSON")->check(CLI::ExistingFile);
  c_gen->add_option("--out", gen.out, "Output directory");
  c_gen->add_option("--seed", gen.seed);
  c_gen->add_option("--n", gen.n, "Total rows (train + test)");
  c_gen->add_option("--policies", gen.policies, "Number of policies including held-out ones");
  c_gen->add_option("--regime", gen.regime)->check(CLI::IsMember({"rct", "stratified", "observational"}));
  c_gen->add_option("--effect-map", gen.effect_map)->check(CLI::IsMember({"linear", "net"}));
  c_gen->add_option("--held-out", gen.held_out, "Fraction of policies held out of training");
  c_gen->add_option("--noise", gen.noise, "Outcome noise standard deviation");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--model", train.model)->check(CLI::IsMember({"poul", "categorical", "tlearner"}));
  c_train->add_option("--spec", train.spec)->required()->check(CLI::ExistingFile);
  c_train->add_option("--train", train.train, "Training rows (JSONL)")->required()->check(CLI::ExistingFile);
  c_train->add_option("--exp", train.exp, "Experiment rows for e_h (two-stage only)")->check(CLI::ExistingFile);
  c_train->add_option("--config", train.config, "Training config JSON")->check(CLI::ExistingFile);
  c_train->add_option("--out", train.out);
  c_train->add_option("--seed", train.seed);
  c_train->add_option("--folds", train.folds);
  c_train->add_option("--stage1-epochs", train.stage1);
  c_train->add_option("--stage2-epochs", train.stage2);
  c_train->add_option("--batch-size", train.batch);
  c_train->add_option("--lr", train.lr);
  c_train->add_option("--l2", train.l2);
  c_train->add_option("--regime", train.regime)->check(CLI::IsMember({"rct", "stratified", "observational"}));
  c_train->add_flag("--warm-start", train.warm_start, "Seed the running mean with the exact initial mean");
  c_train->add_flag("--fresh-mean", train.fresh_mean, "Recompute the exact mean every epoch");
  c_train->add_flag("--no-residualize", train.no_residualize, "Drop the e_h centering");

  PredictArgs pred;
  auto* c_pred = app.add_subcommand("predict", "Predict outcomes and optionally uplift");
  c_pred->add_option("--model", pred.model)->required()->check(CLI::ExistingFile);
  c_pred->add_option("--spec", pred.spec)->required()->check(CLI::ExistingFile);
  c_pred->add_option("--data", pred.data)->required()->check(CLI::ExistingFile);
  c_pred->add_option("--pair", pred.pair, "TREATED:CONTROL uplift column");
  c_pred->add_option("--out", pred.out);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "AUUC / MAPE / PEHE per treatment pair");
  c_eval->add_option("--model", ev.model)->check(CLI::ExistingFile);
  c_eval->add_option("--spec", ev.spec)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--test", ev.test)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--oracle", ev.oracle, "Ground-truth oracle; enables PEHE")->check(CLI::ExistingFile);
  c_eval->add_option("--train", ev.train, "Training rows, for the default held-out pairs")->check(CLI::ExistingFile);
  c_eval->add_option("--pair", ev.pairs, "TREATED:CONTROL, repeatable");
  c_eval->add_flag("--random-score", ev.random_score, "Score rows uniformly at random");
  c_eval->add_flag("--oracle-score", ev.oracle_score, "Score rows with the true CATE");
  c_eval->add_option("--bins", ev.bins, "MAPE bins");
  c_eval->add_option("--seed", ev.seed);
  c_eval->add_option("--out", ev.out);

  EmbedArgs emb;
  auto* c_embed = app.add_subcommand("embed", "Export h(t) for every policy");
  c_embed->add_option("--spec", emb.spec)->required()->check(CLI::ExistingFile);
  c_embed->add_option("--model", emb.model)->check(CLI::ExistingFile);
  c_embed->add_option("--seed", emb.seed, "Initialization seed when no model is given");
  c_embed->add_option("--out", emb.out);

  std::string dist_spec, dist_out;
  auto* c_dist = app.add_subcommand("distance", "Pairwise policy distance matrix");
  c_dist->add_option("--spec", dist_spec)->required()->check(CLI::ExistingFile);
  c_dist->add_option("--out", dist_out);

  VerifyArgs ver;
  auto* c_ver = app.add_subcommand("verify", "Run the numerical property checks");
  c_ver->add_option("--model", ver.model)->check(CLI::ExistingFile);
  c_ver->add_option("--spec", ver.spec)->check(CLI::ExistingFile);
  c_ver->add_option("--config", ver.config, "Verify config JSON")->check(CLI::ExistingFile);
  c_ver->add_flag("--stability-only", ver.stability_only, "Skip the score and expressiveness checks");
  c_ver->add_option("--seed", ver.seed);
  c_ver->add_option("--out", ver.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (c_gen->parsed()) return cmd_gen(gen, args, out);
    if (c_train->parsed()) return cmd_train(train, args, out);
    if (c_pred->parsed()) return cmd_predict(pred, args, out);
    if (c_eval->parsed()) return cmd_eval(ev, args, out);
    if (c_embed->parsed()) return cmd_embed(emb, args, out);
    if (c_dist->parsed()) return cmd_distance(dist_spec, dist_out, args, out);
    if (c_ver->parsed()) return cmd_verify(ver, args, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UnknownIdError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace poul
