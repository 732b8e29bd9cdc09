#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tempose/cli.hpp"
#include "tempose/eval.hpp"

namespace fs = std::filesystem;
using namespace tempose;
using namespace tempose::cli;

namespace {

constexpr const char* kTinyConfig = R"([synth]
objects = 2
feature_dim = 8
keyframes = 3
frames_per_segment = 25
model_points = 16
train_sequences = 2
val_sequences = 1

[model]
n_layers = 1
n_heads = 2
max_context = 8

[train]
epochs = 1
steps_per_epoch = 3
batch_size = 2
val_clips = 2
clip_len = 3
)";

struct Result {
  int code = 0;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "tempose");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Result r;
  r.code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() / ("tempose_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root);
    fs::create_directories(root);
    config = root / "tiny.toml";
    write(config, kTinyConfig);
    unsetenv("TEMPOSE_STRICT");
  }
  void TearDown() override {
    fs::remove_all(root);
    unsetenv("TEMPOSE_STRICT");
  }

  fs::path synth(const std::string& name, const std::string& seed = "3") {
    const auto dir = root / name;
    const auto r = invoke({"synth-gen", "--config", config.string(), "--out", dir.string(), "--seed", seed});
    EXPECT_EQ(r.code, 0) << r.err;
    return dir;
  }

  fs::path root, config;
};

// Files under dir (relative, sorted), manifests excluded.
std::vector<std::string> primary_files(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.json")
      out.push_back(fs::relative(e.path(), dir).generic_string());
  std::sort(out.begin(), out.end());
  return out;
}

void expect_same_tree(const fs::path& a, const fs::path& b) {
  const auto fa = primary_files(a), fb = primary_files(b);
  ASSERT_EQ(fa, fb);
  for (const auto& f : fa) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

}  // namespace

TEST(Config, ParsesTablesAndRejectsBadInput) {
  const RunConfig rc = parse_config(kTinyConfig);
  EXPECT_EQ(rc.synth.feature_dim, 8);
  EXPECT_EQ(rc.train_sequences, 2);
  EXPECT_EQ(rc.model.n_layers, 1);
  EXPECT_EQ(rc.train.clip_len, 3);
  EXPECT_FALSE(rc.model_dim_given);

  EXPECT_THROW(parse_config("[synth]\nfeature_dim = 3\n"), ConfigError);
  EXPECT_THROW(parse_config("[synth]\nfeature_dims = 8\n"), ConfigError);
  EXPECT_THROW(parse_config("[extra]\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nseed = 4\n"), ConfigError);
  EXPECT_THROW(parse_config("[train]\nlr = -1.0\n"), ConfigError);
  EXPECT_THROW(parse_config("[train\n"), ConfigError);
}

TEST(Manifest, HashIsFnv1a) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST_F(CliTest, SynthGenOutputsParseBack) {
  const auto dir = synth("data");
  const auto ds = data::read_dataset(dir);
  EXPECT_EQ(ds.train.size(), 2u);
  EXPECT_EQ(ds.val.size(), 1u);
  EXPECT_EQ(ds.train[0].feature_dim, 8);
  EXPECT_TRUE(ds.train[0].has_features());
  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["command"], "synth-gen");
  EXPECT_EQ(manifest["seed"], 3);
  EXPECT_EQ(manifest["outputs"].get<std::vector<std::string>>(), primary_files(dir));
}

TEST_F(CliTest, SynthGenIsDeterministic) {
  expect_same_tree(synth("a"), synth("b"));
  EXPECT_NE(slurp(synth("c", "4") / "val" / (data::read_dataset(root / "a").val[0].id + ".jsonl")),
            slurp(root / "a" / "val" / (data::read_dataset(root / "a").val[0].id + ".jsonl")));
}

TEST_F(CliTest, InvalidConfigExitsWithConfigCode) {
  write(config, "[synth]\nfeature_dim = 2\n");
  const auto r = invoke({"synth-gen", "--config", config.string(), "--out", (root / "x").string(), "--seed", "1"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("feature dim"), std::string::npos) << r.err;
}

TEST_F(CliTest, StrictModeRequiresSeed) {
  setenv("TEMPOSE_STRICT", "1", 1);
  const auto r = invoke({"synth-gen", "--config", config.string(), "--out", (root / "x").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--seed"), std::string::npos) << r.err;
  unsetenv("TEMPOSE_STRICT");
  const auto ok = invoke({"synth-gen", "--config", config.string(), "--out", (root / "y").string()});
  EXPECT_EQ(ok.code, 0);
  EXPECT_NE(ok.err.find("time seed"), std::string::npos);
}

TEST_F(CliTest, MissingDataDirectoryFails) {
  const auto r = invoke({"train", "--config", config.string(), "--data", (root / "absent").string(), "--out",
                         (root / "run").string(), "--seed", "1"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("absent"), std::string::npos) << r.err;
}

TEST_F(CliTest, TrainEvalReportPipeline) {
  const auto data_dir = synth("data");
  const auto run_dir = root / "run";
  auto r = invoke({"train", "--config", config.string(), "--data", data_dir.string(), "--out", run_dir.string(),
                   "--seed", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(run_dir / "checkpoints" / "epoch_001.vpck"));
  EXPECT_TRUE(fs::exists(run_dir / "best.vpck"));
  EXPECT_TRUE(fs::exists(run_dir / "train_log.csv"));
  EXPECT_TRUE(fs::exists(run_dir / "manifest.json"));

  // Sweep: one report per context length, monotone curves.
  const auto ev = root / "eval";
  r = invoke({"eval", "--checkpoint", (run_dir / "best.vpck").string(), "--data", data_dir.string(), "--out",
              ev.string(), "--context-len", "2,3", "--svg", "--seed", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* L : {"ctx2", "ctx3"}) {
    EXPECT_TRUE(fs::exists(ev / L / "report.csv"));
    EXPECT_TRUE(fs::exists(ev / L / "records.jsonl"));
    EXPECT_TRUE(fs::exists(ev / L / "curves.svg"));
    std::istringstream curve(slurp(ev / L / "curve_add.csv"));
    std::string line;
    std::getline(curve, line);
    double last_t = -1, last_a = -1;
    while (std::getline(curve, line)) {
      const double t = std::stod(line.substr(0, line.find(','))), a = std::stod(line.substr(line.find(',') + 1));
      EXPECT_GT(t, last_t);
      EXPECT_GE(a, last_a);
      last_t = t;
      last_a = a;
    }
  }
  EXPECT_EQ(slurp(ev / "sweep.csv").rfind("context_len,", 0), 0u);

  // Report of one file reproduces eval's own report.
  const auto rep = root / "rep";
  r = invoke({"report", "--records", (ev / "ctx3" / "records.jsonl").string(), "--out", rep.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(rep / "report.csv"), slurp(ev / "ctx3" / "report.csv"));
  EXPECT_EQ(slurp(rep / "curve_add.csv"), slurp(ev / "ctx3" / "curve_add.csv"));

  // Two files holding disjoint classes give the union plus a recomputed pooled row.
  auto all = eval::load_records(ev / "ctx3" / "records.jsonl");
  eval::RecordsFile part_a{all.header, {}}, part_b{all.header, {}};
  const int first_class = all.records.front().class_id;
  for (const auto& rec : all.records) (rec.class_id == first_class ? part_a : part_b).records.push_back(rec);
  ASSERT_FALSE(part_b.records.empty());
  eval::save_records(root / "a.jsonl", part_a);
  eval::save_records(root / "b.jsonl", part_b);
  const auto rep2 = root / "rep2";
  r = invoke({"report", "--records", (root / "a.jsonl").string(), (root / "b.jsonl").string(), "--out", rep2.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(rep2 / "report.csv"), slurp(ev / "ctx3" / "report.csv"));

  // Unknown class ids are listed.
  auto bad = all;
  bad.records.front().class_id = 97;
  bad.records.back().class_id = 98;
  eval::save_records(root / "bad.jsonl", bad);
  r = invoke({"report", "--records", (root / "bad.jsonl").string(), "--out", (root / "rep3").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("97"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("98"), std::string::npos) << r.err;

  // Resume continues from a checkpoint.
  r = invoke({"train", "--config", config.string(), "--data", data_dir.string(), "--out", (root / "run2").string(),
              "--resume", (run_dir / "checkpoints" / "epoch_001.vpck").string(), "--seed", "5"});
  EXPECT_EQ(r.code, 0) << r.err;
}

TEST_F(CliTest, GroundTruthAsPredictionScoresFull) {
  const auto data_dir = synth("data");
  const auto run_dir = root / "run";
  ASSERT_EQ(invoke({"train", "--config", config.string(), "--data", data_dir.string(), "--out", run_dir.string(),
                    "--seed", "5"})
                .code,
            0);
  const auto ev = root / "eval";
  const auto r = invoke({"eval", "--checkpoint", (run_dir / "best.vpck").string(), "--data", data_dir.string(),
                         "--out", ev.string(), "--context-len", "3", "--gt-as-pred"});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string report = slurp(ev / "ctx3" / "report.csv");
  EXPECT_NE(report.find("ALL,100.0000,100.0000"), std::string::npos) << report;
}

TEST_F(CliTest, EvalNamesBothDimsOnMismatch) {
  const auto data_dir = synth("data");
  const auto run_dir = root / "run";
  ASSERT_EQ(invoke({"train", "--config", config.string(), "--data", data_dir.string(), "--out", run_dir.string(),
                    "--seed", "5"})
                .code,
            0);
  std::string wide = kTinyConfig;
  wide.replace(wide.find("feature_dim = 8"), 15, "feature_dim = 12");
  write(config, wide);
  const auto wide_dir = synth("wide");
  const auto r = invoke({"eval", "--checkpoint", (run_dir / "best.vpck").string(), "--data", wide_dir.string(),
                         "--out", (root / "ev").string(), "--context-len", "3"});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("8"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("12"), std::string::npos) << r.err;
}
