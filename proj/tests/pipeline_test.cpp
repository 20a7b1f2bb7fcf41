#include <gtest/gtest.h>

#include "cli_runner.hpp"
#include "protoseg/protoseg.hpp"
#include "temp_dir.hpp"

using namespace protoseg;
namespace fs = std::filesystem;

namespace {

CliResult cli(const std::string& args, const std::string& env = "") { return run_cli(PROTOSEG_CLI, args, env); }

std::string q(const fs::path& p) { return quoted(p); }

std::vector<char> bytes_of(const fs::path& p) { return read_file(p); }

void write_json(const fs::path& p, const nlohmann::json& j) { write_text_atomic(p, j.dump(2)); }

nlohmann::json base_config() {
  return {{"patch_size", 160}, {"min_overlap", 40}, {"target_size", 1000}, {"k", 50}};
}

// One small synthetic dataset shared by every test in the suite.
class Pipeline : public ::testing::Test {
 protected:
  static inline TempDir* dir = nullptr;
  static fs::path root() { return dir->path; }
  static fs::path train() { return root() / "data/train/manifest.json"; }
  static fs::path test() { return root() / "data/test/manifest.json"; }
  static fs::path config() { return root() / "config.json"; }

  static void SetUpTestSuite() {
    dir = new TempDir;
    write_json(root() / "spec.json", {{"train_images", 8}, {"test_anomalous", 3}, {"test_clean", 2}, {"seed", 5}});
    write_json(config(), base_config());
    ASSERT_EQ(cli("synth --spec " + q(root() / "spec.json") + " --output " + q(root() / "data")).code, 0);
    ASSERT_EQ(cli("--config " + q(config()) + " build-bank --manifest " + q(train()) + " --output " +
                  q(root() / "bank.sadb")).code, 0);
    ASSERT_EQ(cli("--config " + q(config()) + " calibrate --manifest " + q(train()) + " --bank " +
                  q(root() / "bank.sadb") + " --output " + q(root() / "cal.json")).code, 0);
  }
  static void TearDownTestSuite() {
    delete dir;
    dir = nullptr;
  }

  static CliResult infer(const fs::path& out, const std::string& extra = "") {
    return cli(extra + " --config " + q(config()) + " infer --manifest " + q(test()) + " --bank " +
               q(root() / "bank.sadb") + " --calibration " + q(root() / "cal.json") + " --output " + q(out));
  }
};

TEST_F(Pipeline, SmokeEndToEnd) {
  const auto out = root() / "smoke";
  ASSERT_EQ(infer(out).code, 0);
  for (const char* suffix : {".pgm", ".sadm", ".token.sadm"}) EXPECT_TRUE(fs::exists(out / ("anomalous_000" + std::string(suffix))));
  const auto map = read_map(out / "anomalous_000.sadm");
  EXPECT_EQ(map.rows(), 128u);
  EXPECT_EQ(map.cols(), 96u);
  EXPECT_EQ(map.scale, kOutputScale);
  EXPECT_EQ(read_map(out / "anomalous_000.token.sadm").scale, kTokenScale);
  const auto r = cli("evaluate --manifest " + q(test()) + " --predictions " + q(out) + " --output " + q(out / "report.json"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto report = nlohmann::json::parse(bytes_of(out / "report.json"));
  EXPECT_GT(report["per_class"]["synth"]["f1"].get<double>(), 0.5);
  EXPECT_TRUE(fs::exists(out / "report.txt"));
  EXPECT_NE(r.output.find("AU-ROC_0.05"), std::string::npos);
}

TEST_F(Pipeline, EmptyManifestIsDataError) {
  write_json(root() / "empty.json", {{"class_name", "synth"}, {"split", "train"}, {"entries", nlohmann::json::array()}});
  const auto r = cli("--config " + q(config()) + " build-bank --manifest " + q(root() / "empty.json") + " --output " +
                     q(root() / "empty.sadb"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("no images"), std::string::npos) << r.output;
}

TEST_F(Pipeline, RerunGivesIdenticalBank) {
  ASSERT_EQ(cli("--config " + q(config()) + " build-bank --manifest " + q(train()) + " --output " +
                q(root() / "again.sadb")).code, 0);
  EXPECT_EQ(bytes_of(root() / "again.sadb"), bytes_of(root() / "bank.sadb"));
  EXPECT_EQ(bytes_of(root() / "again.sadb.split.json"), bytes_of(root() / "bank.sadb.split.json"));
  ASSERT_EQ(cli("--seed 11 --config " + q(config()) + " build-bank --manifest " + q(train()) + " --output " +
                q(root() / "seed11.sadb")).code, 0);
  EXPECT_NE(bytes_of(root() / "seed11.sadb.split.json"), bytes_of(root() / "bank.sadb.split.json"));
}

TEST_F(Pipeline, GainScalesThresholdLinearly) {
  auto c13 = base_config(), c15 = base_config();
  c13["gain"] = 1.3;
  c15["gain"] = 1.5;
  write_json(root() / "g13.json", c13);
  write_json(root() / "g15.json", c15);
  for (const char* g : {"g13", "g15"}) {
    ASSERT_EQ(cli("--config " + q(root() / (std::string(g) + ".json")) + " calibrate --manifest " + q(train()) +
                  " --bank " + q(root() / "bank.sadb") + " --output " + q(root() / (std::string(g) + "_cal.json"))).code, 0);
  }
  const double t13 = read_calibration(root() / "g13_cal.json").threshold;
  const double t15 = read_calibration(root() / "g15_cal.json").threshold;
  EXPECT_NEAR(t15 / t13, 15.0 / 13.0, 1e-12);
}

TEST_F(Pipeline, MissingBankIsDataError) {
  const auto r = cli("--config " + q(config()) + " calibrate --manifest " + q(train()) + " --bank " +
                     q(root() / "nope.sadb") + " --output " + q(root() / "x.json"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("nope.sadb"), std::string::npos);
  EXPECT_EQ(cli("--config " + q(config()) + " infer --manifest " + q(test()) + " --bank " + q(root() / "nope.sadb") +
                " --calibration " + q(root() / "cal.json") + " --output " + q(root() / "x")).code, 3);
}

TEST_F(Pipeline, CalibrationBoundToBank) {
  ASSERT_EQ(cli("--seed 11 --config " + q(config()) + " build-bank --manifest " + q(train()) + " --output " +
                q(root() / "other.sadb")).code, 0);
  const auto r = cli("--config " + q(config()) + " infer --manifest " + q(test()) + " --bank " +
                     q(root() / "other.sadb") + " --calibration " + q(root() / "cal.json") + " --output " + q(root() / "x"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find("different bank"), std::string::npos);
}

TEST_F(Pipeline, PerfectMasksScoreOne) {
  const auto pred = root() / "perfect";
  fs::create_directories(pred);
  for (const auto& e : read_manifest(test()).entries) fs::copy_file(*e.ground_truth, pred / (e.image_id + ".pgm"));
  const auto r = cli("evaluate --manifest " + q(test()) + " --predictions " + q(pred) + " --output " + q(pred / "r.json"));
  ASSERT_EQ(r.code, 0) << r.output;
  const auto report = nlohmann::json::parse(bytes_of(pred / "r.json"));
  EXPECT_EQ(report["per_class"]["synth"]["f1"].get<double>(), 1.0);
  EXPECT_TRUE(report["per_class"]["synth"]["auroc_capped"].is_null());  // no score maps supplied
  EXPECT_EQ(report["mean_f1"].get<double>(), 1.0);
}

TEST_F(Pipeline, SwappedRolesTransposePrecisionAndRecall) {
  const auto pred_dir = root() / "swap_pred";
  ASSERT_EQ(infer(pred_dir).code, 0);
  // second manifest whose ground truth is the prediction, predictions are the ground truth
  auto manifest = read_manifest(test());
  const auto gt_dir = root() / "swap_gt";
  fs::create_directories(gt_dir);
  for (auto& e : manifest.entries) {
    fs::copy_file(*e.ground_truth, gt_dir / (e.image_id + ".pgm"));
    e.ground_truth = pred_dir / (e.image_id + ".pgm");
  }
  write_manifest(root() / "swapped.json", manifest);
  ASSERT_EQ(cli("evaluate --manifest " + q(test()) + " --predictions " + q(pred_dir) + " --output " +
                q(root() / "a.json")).code, 0);
  ASSERT_EQ(cli("evaluate --manifest " + q(root() / "swapped.json") + " --predictions " + q(gt_dir) + " --output " +
                q(root() / "b.json")).code, 0);
  const auto a = nlohmann::json::parse(bytes_of(root() / "a.json"))["per_class"]["synth"];
  const auto b = nlohmann::json::parse(bytes_of(root() / "b.json"))["per_class"]["synth"];
  EXPECT_EQ(a["counts"]["tp"], b["counts"]["tp"]);
  EXPECT_EQ(a["counts"]["fp"], b["counts"]["fn"]);
  EXPECT_EQ(a["counts"]["fn"], b["counts"]["fp"]);
  EXPECT_EQ(a["counts"]["tn"], b["counts"]["tn"]);
  EXPECT_NEAR(a["f1"].get<double>(), b["f1"].get<double>(), 1e-15);
}

TEST_F(Pipeline, ReportSchema) {
  const auto out = root() / "schema";
  ASSERT_EQ(infer(out).code, 0);
  ASSERT_EQ(cli("evaluate --manifest " + q(test()) + " --predictions " + q(out) + " --output " + q(out / "r.json")).code, 0);
  const auto j = nlohmann::json::parse(bytes_of(out / "r.json"));
  ASSERT_TRUE(j["per_class"].is_object());
  EXPECT_TRUE(j["mean_f1"].is_number());
  EXPECT_TRUE(j["mean_auroc"].is_number());
  const auto& c = j["per_class"]["synth"];
  EXPECT_TRUE(c["f1"].is_number());
  EXPECT_TRUE(c["auroc_capped"].is_number());
  EXPECT_EQ(c["images"].get<int>(), 5);
  for (const char* k : {"tp", "fp", "fn", "tn"}) EXPECT_TRUE(c["counts"][k].is_number_unsigned()) << k;
  const auto total = c["counts"]["tp"].get<std::uint64_t>() + c["counts"]["fp"].get<std::uint64_t>() +
                     c["counts"]["fn"].get<std::uint64_t>() + c["counts"]["tn"].get<std::uint64_t>();
  EXPECT_EQ(total, 5u * 128 * 96);
}

TEST_F(Pipeline, StrictChallengeRefusesOverrides) {
  auto c = base_config();
  c["class_overrides"] = {{"synth", {{"gain", 1.5}}}};
  write_json(root() / "override.json", c);
  const std::string args = " calibrate --manifest " + q(train()) + " --bank " + q(root() / "bank.sadb") + " --output ";
  EXPECT_EQ(cli("--config " + q(root() / "override.json") + args + q(root() / "ov.json")).code, 0);
  EXPECT_DOUBLE_EQ(read_calibration(root() / "ov.json").gain, 1.5);
  const auto r = cli("--strict-challenge --config " + q(root() / "override.json") + args + q(root() / "ov2.json"));
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(root() / "ov2.json"));
  EXPECT_EQ(cli("--strict-challenge --config " + q(config()) + args + q(root() / "ov3.json")).code, 0);
}

TEST_F(Pipeline, ConfigErrorsExitTwo) {
  auto bad = base_config();
  bad["gian"] = 1.4;
  write_json(root() / "typo.json", bad);
  const auto r = cli("--config " + q(root() / "typo.json") + " build-bank --manifest " + q(train()) + " --output " +
                     q(root() / "t.sadb"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("gian"), std::string::npos);
  EXPECT_EQ(cli("build-bank --bogus").code, 2);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("--help").code, 0);
}

TEST_F(Pipeline, ConfigFromEnvironment) {
  // defaults use P=640, which does not match the fixture, so success proves the variable was read
  EXPECT_EQ(cli("build-bank --manifest " + q(train()) + " --output " + q(root() / "e1.sadb")).code, 3);
  EXPECT_EQ(cli("build-bank --manifest " + q(train()) + " --output " + q(root() / "e2.sadb"),
                "PROTOSEG_CONFIG=" + q(config())).code, 0);
  EXPECT_EQ(bytes_of(root() / "e2.sadb"), bytes_of(root() / "bank.sadb"));
}

TEST_F(Pipeline, PerImageFailuresReportedAndRunContinues) {
  const auto broken = root() / "broken";
  fs::create_directories(broken);
  auto manifest = read_manifest(test());
  for (auto& e : manifest.entries) {
    const auto dst = broken / e.embeddings.filename();
    fs::copy_file(e.embeddings, dst);
    e.embeddings = dst;
  }
  auto bytes = read_file(manifest.entries[1].embeddings);
  bytes.resize(bytes.size() / 2);
  write_file_atomic(manifest.entries[1].embeddings, bytes);
  write_manifest(broken / "manifest.json", manifest);
  const auto out = root() / "broken_out";
  const auto r = cli("--config " + q(config()) + " infer --manifest " + q(broken / "manifest.json") + " --bank " +
                     q(root() / "bank.sadb") + " --calibration " + q(root() / "cal.json") + " --output " + q(out));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.output.find(manifest.entries[1].image_id), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("4/5"), std::string::npos) << r.output;
  EXPECT_TRUE(fs::exists(out / (manifest.entries[0].image_id + ".pgm")));
  EXPECT_TRUE(fs::exists(out / (manifest.entries[4].image_id + ".pgm")));
  EXPECT_FALSE(fs::exists(out / (manifest.entries[1].image_id + ".pgm")));
}

TEST_F(Pipeline, ThreadCountDoesNotChangeOutputs) {
  const auto a = root() / "j1", b = root() / "j4";
  ASSERT_EQ(infer(a, "--jobs 1").code, 0);
  ASSERT_EQ(infer(b, "--jobs 4").code, 0);
  for (const auto& e : read_manifest(test()).entries) {
    for (const char* s : {".pgm", ".sadm", ".token.sadm"}) {
      EXPECT_EQ(bytes_of(a / (e.image_id + s)), bytes_of(b / (e.image_id + s))) << e.image_id << s;
    }
  }
  ASSERT_EQ(cli("--jobs 3 --config " + q(config()) + " build-bank --manifest " + q(train()) + " --output " +
                q(root() / "j3.sadb")).code, 0);
  EXPECT_EQ(bytes_of(root() / "j3.sadb"), bytes_of(root() / "bank.sadb"));
}

TEST_F(Pipeline, PngMasksAndFullResolution) {
  const auto out = root() / "png";
  ASSERT_EQ(cli("--config " + q(config()) + " infer --mask-format png --full-res --manifest " + q(test()) + " --bank " +
                q(root() / "bank.sadb") + " --calibration " + q(root() / "cal.json") + " --output " + q(out)).code, 0);
  const auto m = read_mask(out / "anomalous_000.png");
  EXPECT_EQ(m.rows(), 512u);
  EXPECT_EQ(m.cols(), 384u);
  EXPECT_EQ(cli("--config " + q(config()) + " infer --mask-format bmp --manifest " + q(test()) + " --bank " +
                q(root() / "bank.sadb") + " --calibration " + q(root() / "cal.json") + " --output " + q(out)).code, 2);
}

TEST(PipelineLibrary, ConstantScoreThreshold) {
  TempDir dir;
  auto make = [&](const std::string& id, float value) {
    ImageEmbeddings e;
    e.image_id = id;
    e.original = {256, 256};
    e.scaled = scaled_geom(e.original, 5, 8);
    e.grid = build_grid(e.scaled, 160, 40);
    e.layer_ids = {7};
    e.layer_dims = {4};
    e.patches = {{TokenField(10, 10, 4, std::vector<float>(400, value))}};
    write_embeddings(dir / (id + ".sade"), e);
    return ManifestEntry{id, e.original, dir / (id + ".sade"), std::nullopt};
  };
  DatasetManifest m{"flat", Split::train, {make("a", 1.0f), make("b", 1.0f)}};
  PipelineConfig config;
  config.patch_size = 160;
  config.min_overlap = 40;
  config.layers = {7};
  const MemoryBank bank({{7, FeatureSet(7, 1, 4, std::vector<float>(4, 0.0f))}}, {});
  const HoldoutSplit split{{"a"}, {"b"}};
  const auto cal = run_calibrate(m, bank, split, config);
  EXPECT_NEAR(cal.threshold, 1.4 * 2.0, 1e-6);  // every token is at distance |(1,1,1,1)| = 2
  EXPECT_EQ(cal.sample_count, 64u * 64u);
}

}  // namespace
