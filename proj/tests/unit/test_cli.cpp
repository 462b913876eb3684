#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <set>
#include <sstream>

#include "poul/cli.hpp"
#include "poul/io.hpp"
#include "poul/treatment_net.hpp"
#include "support.hpp"

namespace poul {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "poul");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) { return read_text_file(p); }

std::set<std::string> policies_in(const fs::path& jsonl) {
  std::set<std::string> ids;
  std::istringstream in(slurp(jsonl));
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) ids.insert(Json::parse(line).at("t").get<std::string>());
  }
  return ids;
}

std::size_t line_count(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += line.empty() ? 0 : 1;
  return n;
}

GenConfig bench_config() {
  GenConfig g;
  g.n = 4000;
  g.num_features = 4;
  g.num_contexts = 3;
  g.num_actions = 3;
  g.effect_dim = 2;
  g.seed = 17;
  return g;
}

// Generated once; reused read-only by the tests below.
const fs::path& bench() {
  static const fs::path dir = [] {
    const auto d = testing::scratch_dir("cli_bench");
    write_json_file(d / "gen.json", bench_config().to_json());
    write_json_file(d / "train_cfg.json", testing::small_train(8).to_json());
    const auto r = cli({"gen", "--config", (d / "gen.json").string(), "--out", (d / "data").string()});
    if (r.code != 0) throw std::runtime_error("bench generation failed: " + r.err);
    return d;
  }();
  return dir;
}

fs::path data(const std::string& name) { return bench() / "data" / name; }

std::vector<std::string> train_args(const fs::path& out, const std::string& model = "poul") {
  return {"train", "--model", model, "--spec", data("spec.json").string(), "--train", data("train.jsonl").string(),
          "--config", (bench() / "train_cfg.json").string(), "--out", out.string()};
}

TEST(CliGen, WritesFiveFilesWithSplitCounts) {
  for (const auto* name : {"spec.json", "train.jsonl", "test.jsonl", "oracle.json", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(data(name))) << name;
  }
  const auto cfg = bench_config();
  EXPECT_EQ(line_count(data("test.jsonl")), cfg.num_test_rows());
  EXPECT_EQ(line_count(data("train.jsonl")) + line_count(data("test.jsonl")), cfg.n);
}

TEST(CliGen, HeldOutPoliciesAbsentFromTrain) {
  const auto spec = load_policy_spec_file(data("spec.json"));
  ASSERT_EQ(spec.num_policies(), 40u);
  const auto seen = policies_in(data("train.jsonl"));
  std::set<std::string> absent;
  for (const auto& id : spec.policy_ids()) {
    if (!seen.contains(id)) absent.insert(id);
  }
  EXPECT_EQ(absent.size(), 4u);
  const auto man = read_json_file(data("manifest.json"));
  std::set<std::string> listed;
  for (const auto& id : man.at("held_out")) listed.insert(id.get<std::string>());
  EXPECT_EQ(listed, absent);
}

TEST(CliGen, SameSeedIsByteIdentical) {
  const auto dir = testing::scratch_dir("cli_gen_again");
  ASSERT_EQ(cli({"gen", "--config", (bench() / "gen.json").string(), "--out", dir.string()}).code, 0);
  for (const auto* name : {"spec.json", "train.jsonl", "test.jsonl", "oracle.json"}) {
    EXPECT_EQ(slurp(dir / name), slurp(data(name))) << name;
  }
}

TEST(CliGen, InvalidConfigIsUsageError) {
  const auto dir = testing::scratch_dir("cli_gen_bad");
  write_json_file(dir / "bad.json", Json{{"n", 100}, {"no_such_key", 1}});
  EXPECT_EQ(cli({"gen", "--config", (dir / "bad.json").string(), "--out", dir.string()}).code, 1);
  EXPECT_EQ(cli({"gen", "--held-out", "1.5", "--out", dir.string()}).code, 1);
}

TEST(CliTrain, ZeroStageTwoEpochsRejected) {
  const auto dir = testing::scratch_dir("cli_train_j0");
  auto args = train_args(dir);
  args.insert(args.end(), {"--stage2-epochs", "0"});
  const auto r = cli(args);
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(fs::exists(dir / "model.json"));
}

TEST(CliTrain, SingleFoldMatchesLibraryTwoStage) {
  const auto dir = testing::scratch_dir("cli_train_k1");
  auto args = train_args(dir);
  args.insert(args.end(), {"--folds", "1"});
  ASSERT_EQ(cli(args).code, 0);
  for (const auto* name : {"model.json", "loss_trace.csv", "manifest.json"}) EXPECT_TRUE(fs::exists(dir / name));

  const auto spec = load_policy_spec_file(data("spec.json"));
  const auto rows = load_dataset_jsonl(data("train.jsonl"), spec);
  const auto cfg = TrainConfig::from_json(read_json_file(bench() / "train_cfg.json"));
  const auto lib = train_two_stage(rows, rows, spec, cfg);
  auto from_cli = read_json_file(dir / "model.json");
  from_cli["metadata"].erase("train_policy_counts");
  EXPECT_EQ(from_cli, save_model(lib.model, cfg).to_json());
}

TEST(CliTrain, RerunFromManifestIsIdenticalExceptWallClock) {
  const auto dir = testing::scratch_dir("cli_train_rerun");
  ASSERT_EQ(cli(train_args(dir)).code, 0);
  const auto model = slurp(dir / "model.json");
  const auto trace = slurp(dir / "loss_trace.csv");
  auto man = read_json_file(dir / "manifest.json");

  std::vector<std::string> again;
  for (const auto& a : man.at("arguments")) again.push_back(a.get<std::string>());
  ASSERT_EQ(cli(again).code, 0);
  EXPECT_EQ(slurp(dir / "model.json"), model);
  EXPECT_EQ(slurp(dir / "loss_trace.csv"), trace);
  auto man2 = read_json_file(dir / "manifest.json");
  EXPECT_TRUE(man.contains("wall_clock_seconds"));
  man.erase("wall_clock_seconds");
  man2.erase("wall_clock_seconds");
  EXPECT_EQ(man, man2);
}

TEST(CliTrain, MissingFileIsUsageError) {
  EXPECT_EQ(cli({"train", "--spec", "/nonexistent/spec.json", "--train", "/nonexistent/x.jsonl"}).code, 1);
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
}

TEST(CliEval, OracleScoresHaveZeroPehe) {
  const auto dir = testing::scratch_dir("cli_eval_oracle");
  const auto r = cli({"eval", "--oracle-score", "--spec", data("spec.json").string(), "--test",
                      data("test.jsonl").string(), "--oracle", data("oracle.json").string(), "--train",
                      data("train.jsonl").string(), "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto doc = read_json_file(dir / "eval.json");
  EXPECT_EQ(doc.at("score_source"), "oracle");
  ASSERT_FALSE(doc.at("pairs").empty());
  for (const auto& p : doc.at("pairs")) EXPECT_EQ(p.at("pehe").get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(dir / "eval.csv"));
  EXPECT_TRUE(fs::exists(dir / "lift.csv"));
}

TEST(CliEval, DefaultPairsAreHeldOutVersusMostFrequent) {
  const auto dir = testing::scratch_dir("cli_eval_pairs");
  ASSERT_EQ(cli({"eval", "--random-score", "--spec", data("spec.json").string(), "--test", data("test.jsonl").string(),
                 "--train", data("train.jsonl").string(), "--out", dir.string()})
                .code,
            0);
  const auto man = read_json_file(data("manifest.json"));
  const auto doc = read_json_file(dir / "eval.json");
  std::set<std::string> treated;
  for (const auto& p : doc.at("pairs")) {
    treated.insert(p.at("treated").get<std::string>());
    EXPECT_EQ(p.at("control"), man.at("control"));
  }
  std::set<std::string> held;
  for (const auto& id : man.at("held_out")) held.insert(id.get<std::string>());
  EXPECT_EQ(treated, held);

  // Without --train the defaults come from the counts stored in a model.
  const auto model_dir = testing::scratch_dir("cli_eval_pairs_model");
  ASSERT_EQ(cli(train_args(model_dir)).code, 0);
  const auto dir2 = testing::scratch_dir("cli_eval_pairs2");
  ASSERT_EQ(cli({"eval", "--model", (model_dir / "model.json").string(), "--spec", data("spec.json").string(),
                 "--test", data("test.jsonl").string(), "--out", dir2.string()})
                .code,
            0);
  EXPECT_EQ(read_json_file(dir2 / "eval.json").at("pairs").size(), held.size());

  EXPECT_EQ(cli({"eval", "--random-score", "--spec", data("spec.json").string(), "--test",
                 data("test.jsonl").string(), "--out", dir2.string()})
                .code,
            1);
}

TEST(CliEval, RandomScoresGiveHalfAuuc) {
  // Few policies so that the pair has enough rows; the pair with the largest
  // true effect keeps |G(n)| away from zero.
  const auto dir = testing::scratch_dir("cli_eval_random");
  ASSERT_EQ(cli({"gen", "--seed", "5", "--n", "40000", "--policies", "5", "--held-out", "0", "--out", dir.string()})
                .code,
            0);
  const auto spec = load_policy_spec_file(dir / "spec.json");
  const auto test = load_dataset_jsonl(dir / "test.jsonl", spec);
  const auto oracle = OracleTruth::from_json(read_json_file(dir / "oracle.json"), spec);
  const std::size_t control = spec.policy_index(read_json_file(dir / "manifest.json").at("control"));
  std::size_t best = 0;
  double best_ate = -1e300;
  for (std::size_t t = 0; t < spec.num_policies(); ++t) {
    if (t == control) continue;
    const double ate = true_ate(*oracle, spec, test, t, control);
    if (ate > best_ate) {
      best_ate = ate;
      best = t;
    }
  }
  const std::string pair = spec.policy_ids()[best] + ":" + spec.policy_ids()[control];
  std::vector<double> values;
  for (int seed = 1; seed <= 10; ++seed) {
    ASSERT_EQ(cli({"eval", "--random-score", "--seed", std::to_string(seed), "--pair", pair, "--spec",
                   (dir / "spec.json").string(), "--test", (dir / "test.jsonl").string(), "--out",
                   (dir / "eval").string()})
                  .code,
              0);
    values.push_back(read_json_file(dir / "eval" / "eval.json").at("pairs")[0].at("auuc").get<double>());
  }
  double mean = 0.0, sq = 0.0;
  for (double v : values) mean += v / 10.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  const double se = std::sqrt(sq / 9.0 / 10.0);
  EXPECT_NEAR(mean, 0.5, std::max(3.0 * se, 0.01));
  EXPECT_NEAR(mean, 0.5, 0.05);
}

TEST(CliEval, FingerprintMismatchIsUsageError) {
  const auto model_dir = testing::scratch_dir("cli_fp_model");
  ASSERT_EQ(cli(train_args(model_dir)).code, 0);
  const auto other = testing::scratch_dir("cli_fp_other");
  ASSERT_EQ(cli({"gen", "--seed", "99", "--n", "500", "--out", other.string()}).code, 0);
  const auto r = cli({"eval", "--model", (model_dir / "model.json").string(), "--spec", (other / "spec.json").string(),
                      "--test", (other / "test.jsonl").string(), "--train", (other / "train.jsonl").string(), "--out",
                      other.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("spec"), std::string::npos);
}

TEST(CliEval, TLearnerOnUnseenPolicyIsRuntimeError) {
  const auto model_dir = testing::scratch_dir("cli_tl_model");
  ASSERT_EQ(cli(train_args(model_dir, "tlearner")).code, 0);
  EXPECT_TRUE(fs::exists(model_dir / "support.csv"));
  const auto r = cli({"eval", "--model", (model_dir / "model.json").string(), "--spec", data("spec.json").string(),
                      "--test", data("test.jsonl").string(), "--out", model_dir.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("no arm"), std::string::npos);
}

TEST(CliPredict, WritesOneRowPerInput) {
  const auto dir = testing::scratch_dir("cli_predict");
  ASSERT_EQ(cli(train_args(dir)).code, 0);
  const auto spec = load_policy_spec_file(data("spec.json"));
  const std::string pair = spec.policy_ids()[1] + ":" + spec.policy_ids()[0];
  ASSERT_EQ(cli({"predict", "--model", (dir / "model.json").string(), "--spec", data("spec.json").string(), "--data",
                 data("test.jsonl").string(), "--pair", pair, "--out", dir.string()})
                .code,
            0);
  EXPECT_EQ(line_count(dir / "predictions.csv"), line_count(data("test.jsonl")) + 1);
  EXPECT_EQ(slurp(dir / "predictions.csv").substr(0, 26), "row,policy,y_hat,tau_hat\n0");
}

TEST(CliEmbed, ExportsModelEmbeddings) {
  const auto dir = testing::scratch_dir("cli_embed");
  ASSERT_EQ(cli(train_args(dir)).code, 0);
  ASSERT_EQ(cli({"embed", "--spec", data("spec.json").string(), "--model", (dir / "model.json").string(), "--out",
                 dir.string()})
                .code,
            0);
  const auto spec = load_policy_spec_file(data("spec.json"));
  const auto model = load_model(ParameterCheckpoint::from_json(read_json_file(dir / "model.json")), spec);
  const auto doc = read_json_file(dir / "embeddings.json");
  ASSERT_EQ(doc.size(), spec.num_policies());
  for (std::size_t t = 0; t < spec.num_policies(); ++t) {
    EXPECT_EQ(doc.at(spec.policy_ids()[t]).get<std::vector<double>>(), model.encoder->embed(spec, t));
  }
  // Without a model the seeded initialization is exported, deterministically.
  const auto a = testing::scratch_dir("cli_embed_init_a"), b = testing::scratch_dir("cli_embed_init_b");
  ASSERT_EQ(cli({"embed", "--spec", data("spec.json").string(), "--seed", "4", "--out", a.string()}).code, 0);
  ASSERT_EQ(cli({"embed", "--spec", data("spec.json").string(), "--seed", "4", "--out", b.string()}).code, 0);
  EXPECT_EQ(slurp(a / "embeddings.json"), slurp(b / "embeddings.json"));
}

TEST(CliDistance, MatrixIsSymmetricWithZeroDiagonal) {
  const auto dir = testing::scratch_dir("cli_distance");
  ASSERT_EQ(cli({"distance", "--spec", data("spec.json").string(), "--out", dir.string()}).code, 0);
  const auto spec = load_policy_spec_file(data("spec.json"));
  std::istringstream in(slurp(dir / "distance.csv"));
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> m;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    EXPECT_EQ(cell, spec.policy_ids()[m.size()]);
    m.emplace_back();
    while (std::getline(row, cell, ',')) m.back().push_back(std::stod(cell));
  }
  const std::size_t n = spec.num_policies();
  ASSERT_EQ(m.size(), n);
  for (std::size_t t = 0; t < n; ++t) {
    ASSERT_EQ(m[t].size(), n);
    EXPECT_EQ(m[t][t], 0.0);
    for (std::size_t u = 0; u < n; ++u) EXPECT_EQ(m[t][u], m[u][t]);
  }
  for (auto [t, u] : {std::pair<std::size_t, std::size_t>{0, 1}, {3, 17}, {39, 2}, {12, 30}}) {
    EXPECT_EQ(m[t][u], policy_distance(spec, t, u));
  }
}

TEST(CliDistance, OutputDirDefaultsToEnvironment) {
  const auto dir = testing::scratch_dir("cli_env_out");
  ::setenv("POUL_OUT_DIR", dir.string().c_str(), 1);
  const auto r = cli({"distance", "--spec", data("spec.json").string()});
  ::unsetenv("POUL_OUT_DIR");
  ASSERT_EQ(r.code, 0);
  EXPECT_TRUE(fs::exists(dir / "distance.csv"));
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
}

TEST(CliVerify, StabilityOnlySkipsScoreTests) {
  const auto dir = testing::scratch_dir("cli_verify_stab");
  ASSERT_EQ(cli(train_args(dir)).code, 0);
  const auto r = cli({"verify", "--stability-only", "--model", (dir / "model.json").string(), "--spec",
                      data("spec.json").string(), "--out", dir.string()});
  ASSERT_EQ(r.code, 0) << r.out << r.err;
  const auto doc = read_json_file(dir / "verify.json");
  EXPECT_TRUE(doc.at("passed").get<bool>());
  EXPECT_TRUE(doc.at("tests").contains("stability"));
  EXPECT_FALSE(doc.at("tests").contains("orthogonality"));
  EXPECT_FALSE(doc.at("tests").contains("robustness"));
  EXPECT_FALSE(doc.at("tests").contains("expressiveness"));
  EXPECT_EQ(doc.at("tests").at("stability").at("embedding_violations"), 0);
}

TEST(CliVerify, InflatedRhoStillPassesBecauseBoundIsMeasured) {
  const auto dir = testing::scratch_dir("cli_verify_broken");
  ASSERT_EQ(cli(train_args(dir)).code, 0);
  const auto spec = load_policy_spec_file(data("spec.json"));
  const auto cfg = TrainConfig::from_json(read_json_file(bench() / "train_cfg.json"));
  auto model = load_model(ParameterCheckpoint::from_json(read_json_file(dir / "model.json")), spec);
  auto* net = dynamic_cast<TreatmentNet*>(model.encoder.get());
  ASSERT_NE(net, nullptr);
  for (auto& layer : net->mutable_rho().mutable_layers()) {
    for (auto& v : layer.weight.values()) v *= 1e3;
  }
  net->parameters_changed();
  write_json_file(dir / "broken.json", save_model(model, cfg).to_json());

  const auto r = cli({"verify", "--stability-only", "--model", (dir / "broken.json").string(), "--spec",
                      data("spec.json").string(), "--out", dir.string()});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_GT(read_json_file(dir / "verify.json").at("tests").at("stability").at("lipschitz").get<double>(), 1e5);
}

TEST(CliVerify, ModelWithoutSpecIsUsageError) {
  const auto dir = testing::scratch_dir("cli_verify_nospec");
  ASSERT_EQ(cli(train_args(dir)).code, 0);
  EXPECT_EQ(cli({"verify", "--model", (dir / "model.json").string(), "--out", dir.string()}).code, 1);
}

}  // namespace
}  // namespace poul
