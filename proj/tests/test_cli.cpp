#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "json.hpp"
#include "modelprobe/digest.hpp"
#include "modelprobe/similarity.hpp"
#include "modelprobe/tensor.hpp"
#include "support/test_util.hpp"
#include "zip_writer.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Run {
  int code = -1;
  std::string out, err;
};

// Runs the installed binary with stdout and stderr captured separately.
Run cli(const std::string& args, const std::string& env = "") {
  auto dir = fs::temp_directory_path() / "modelprobe-tests";
  fs::create_directories(dir);
  const auto tag = std::to_string(::getpid());
  auto out = dir / ("cli." + tag + ".stdout"), err = dir / ("cli." + tag + ".stderr");
  std::string cmd = env + " " MODELPROBE_CLI " " + args + " >" + out.string() + " 2>" + err.string();
  int status = std::system(cmd.c_str());
  Run r{WEXITSTATUS(status), slurp(out), slurp(err)};
  fs::remove(out);
  fs::remove(err);
  return r;
}

fs::path corpus_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "modelprobe-tests" / ("cli-corpus." + std::to_string(::getpid()));
    fs::remove_all(d);
    fixture::write_corpus(fixture::shared_corpus(), d);
    return d;
  }();
  return dir;
}

std::string model(const std::string& name) { return (corpus_dir() / "models" / (name + ".tflite")).string(); }

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("compare").code, 2);
  EXPECT_EQ(cli("attack --kind FGSM").code, 2);
  EXPECT_EQ(cli("--version").code, 0);
}

TEST(Cli, DomainErrorsExitOneWithJson) {
  auto dir = testutil::scratch_dir();
  std::ofstream(dir / "junk.tflite") << "not a flatbuffer at all, sorry";
  auto r = cli("compare " + (dir / "junk.tflite").string() + " " + model("base_a") + " --out " + dir.string());
  EXPECT_EQ(r.code, 1);
  auto err = json::parse(r.err);
  EXPECT_EQ(err["error"], "BadMagic");
  EXPECT_TRUE(err.contains("message"));

  auto m = cli("match " + model("fe_a") + " --out " + dir.string(), "MODELPROBE_REGISTRY=" + (dir / "nowhere").string());
  EXPECT_EQ(m.code, 1);
  EXPECT_EQ(json::parse(m.err)["error"], "IoFailure");
}

TEST(Cli, CompareTwoModels) {
  auto dir = testutil::scratch_dir();
  auto r = cli("compare " + model("base_a") + " " + model("fe_a") + " --out " + dir.string());
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = json::parse(r.out);
  EXPECT_EQ(j["structural"].get<double>(), 14.0 / 16.0);
  EXPECT_EQ(j["parametric"].get<double>(), 1.0);
  auto manifest = json::parse(slurp(dir / "manifest.compare.json"));
  EXPECT_EQ(manifest["subcommand"], "compare");
  EXPECT_EQ(manifest["config"]["threshold"], 0.8);
  EXPECT_EQ(manifest["config"]["seed"], 0);
  ASSERT_EQ(manifest["inputs"].size(), 2u);
  EXPECT_EQ(manifest["inputs"][0]["sha256"], modelprobe::Digest::of(modelprobe::read_file(model("base_a"))).hex());

  // idempotent rerun
  auto first = slurp(dir / "compare.json");
  ASSERT_EQ(cli("compare " + model("base_a") + " " + model("fe_a") + " --out " + dir.string()).code, 0);
  EXPECT_EQ(slurp(dir / "compare.json"), first);
}

TEST(Cli, DigThenCompareEqualsDirectCompare) {
  auto dir = testutil::scratch_dir();
  const auto& corpus = fixture::shared_corpus();
  modelprobe::write_file(dir / "app.apk", fixture::make_zip({{"assets/a.tflite", corpus.model("base_c").bytes, true},
                                                  {"assets/b.bin", corpus.model("ft_c").bytes, false}}));
  auto dug = cli("dig " + (dir / "app.apk").string() + " --out " + (dir / "m").string());
  ASSERT_EQ(dug.code, 0) << dug.err;
  auto models = json::parse(slurp(dir / "m" / "models.json"))["models"];
  ASSERT_EQ(models.size(), 2u);
  std::string a = (dir / "m" / (models[0]["digest"].get<std::string>() + ".tflite")).string();
  std::string b = (dir / "m" / (models[1]["digest"].get<std::string>() + ".tflite")).string();

  auto via_dig = cli("compare " + a + " " + b + " --policy relaxed --out " + (dir / "c1").string());
  auto direct = cli("compare " + model("base_c") + " " + model("ft_c") + " --policy relaxed --out " + (dir / "c2").string());
  ASSERT_EQ(via_dig.code, 0);
  ASSERT_EQ(direct.code, 0);
  EXPECT_EQ(via_dig.out, direct.out);
  EXPECT_EQ(slurp(dir / "c1" / "compare.json"), slurp(dir / "c2" / "compare.json"));
  EXPECT_EQ(json::parse(direct.out)["parametric"].get<double>(), 7.0 / 9.0);

  // matrix form: same cells as parsing the corpus files directly
  auto matrix = cli("compare " + a + " " + b + " " + model("base_a") + " --out " + (dir / "c3").string());
  ASSERT_EQ(matrix.code, 0);
  auto parsed = modelprobe::SimilarityMatrix::from_json(slurp(dir / "c3" / "compare.json"));
  auto ga = testutil::corpus_graph("base_c"), gb = testutil::corpus_graph("ft_c"), gc = testutil::corpus_graph("base_a");
  EXPECT_EQ(parsed.at(0, 1), modelprobe::compare_models(ga, gb));
  EXPECT_EQ(parsed.at(0, 2), modelprobe::compare_models(ga, gc));
  EXPECT_TRUE(fs::exists(dir / "c3" / "similarity.csv"));
}

TEST(Cli, GraphAndMatch) {
  auto dir = testutil::scratch_dir();
  std::string files;
  for (const auto& m : fixture::shared_corpus().models) files += " " + model(m.name);
  auto g = cli("graph" + files + " --format json --out " + dir.string());
  ASSERT_EQ(g.code, 0) << g.err;
  auto summary = json::parse(g.out);
  EXPECT_EQ(summary["nodes"], 8);
  // fe_a-base_a and fe_b-base_b clear both thresholds under the strict policy
  EXPECT_EQ(summary["edges"], 2);
  EXPECT_TRUE(fs::exists(dir / "graph.json"));

  auto m = cli("match" + files + " --out " + dir.string(),
               "MODELPROBE_REGISTRY=" + (corpus_dir() / "registry").string());
  ASSERT_EQ(m.code, 0) << m.err;
  auto j = json::parse(slurp(dir / "match.json"));
  EXPECT_EQ(j["per_class"]["FeatureExtraction"], 2);
}

TEST(Cli, AttackWritesOutcomeAndTensor) {
  auto dir = testutil::scratch_dir();
  auto ex = corpus_dir() / "examples" / "fe_a";
  auto labels = json::parse(slurp(ex / "labels.json"));
  auto r = cli("attack --kind PGD_Linf --surrogate " + model("base_a") + " --target " + model("fe_a") + " --input " +
               (ex / "ex00.tensor").string() + " --label " + std::to_string(labels["ex00.tensor"].get<int>()) +
               " --out " + dir.string());
  ASSERT_EQ(r.code, 0) << r.err;
  auto j = json::parse(r.out);
  EXPECT_LE(j["linf"].get<double>(), 0.05 + 1e-6);
  auto adv = modelprobe::read_tensor_file(dir / "x_adv.tensor");
  EXPECT_EQ(adv.shape, (std::vector<int>{1, 16, 16, 3}));
  EXPECT_TRUE(fs::exists(dir / "manifest.attack.json"));
}

TEST(Cli, ExperimentOutputs) {
  auto dir = testutil::scratch_dir();
  auto c = corpus_dir();
  auto r = cli("experiment --targets " + (c / "targets").string() + " --registry " + (c / "registry").string() +
               " --examples " + (c / "examples").string() + " --kinds FGSM,DDN --seed 1 --jobs 2 --out " + dir.string());
  ASSERT_EQ(r.code, 0) << r.err;
  for (auto f : {"report.json", "report.md", "scatter.csv", "manifest.experiment.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_TRUE(fs::exists(dir / "x_adv" / "fe_a" / "FGSM" / "targeted"));
  auto report = json::parse(slurp(dir / "report.json"));
  EXPECT_EQ(report["models"].size(), 4u);
}
