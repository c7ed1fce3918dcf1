#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "alsim/alsim.hpp"
#include "alsim/io.hpp"
#include "cli.hpp"
#include "test_util.hpp"

using namespace alsim;
using alsim::fixtures::TempDir;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "alsim");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    unsetenv("ALSIM_SEED");
    ASSERT_EQ(run({"generate", "--images", "300", "--seed", "1", "--out", dir.file("pool.json")}).code, 0);
    ASSERT_EQ(run({"generate", "--images", "60", "--seed", "2", "--prefix", "test", "--out", dir.file("test.json")}).code, 0);
  }
  void TearDown() override { unsetenv("ALSIM_SEED"); }

  std::vector<std::string> simulate(const std::string& out, std::vector<std::string> extra = {}) {
    std::vector<std::string> a{"simulate", "--dataset", dir.file("pool.json"), "--test", dir.file("test.json"),
                               "--strategy", "bib", "--budget", "20", "--cycles", "3", "--seed", "42",
                               "--part-rate", "0.6", "--group-rate", "0.6", "--fidelity-gain", "0.05",
                               "--out", dir.file(out)};
    a.insert(a.end(), extra.begin(), extra.end());
    return a;
  }

  std::string write_predictions(std::size_t n) {
    const Dataset pool = io::load_dataset(dir.file("pool.json"));
    std::vector<ImageRecord> recs(pool.images().begin(), pool.images().begin() + static_cast<std::ptrdiff_t>(n));
    const Dataset small(pool.class_names(), recs);
    SyntheticParams params;
    params.part_rate = 1.0;
    SyntheticDetector det(small, params, 3);
    io::save_dataset(dir.file("small.json"), small);
    io::save_predictions(dir.file("preds.json"), det.detect(small, {}));
    return dir.file("preds.json");
  }

  TempDir dir{"cli"};
};

}  // namespace

TEST_F(Cli, SimulateHappyPath) {
  const auto r = run({"simulate", "--dataset", dir.file("pool.json"), "--test", dir.file("test.json"), "--strategy",
                      "bib", "--budget", "50", "--cycles", "5", "--seed", "42", "--detector", "synthetic", "--out",
                      dir.file("run")});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = io::read_text(dir.file("run/metrics.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2 + 6);
  EXPECT_EQ(csv.rfind("# format=alsim-metrics/1 config_hash=", 0), 0u);
  EXPECT_NE(csv.find("cycle,n_annotated,strategy,seed,ap50,ap,bib_count,wall_ms"), std::string::npos);

  const auto manifest = io::manifest_from_json(io::read_json(dir.file("run/manifest.json")));
  EXPECT_TRUE(manifest.complete);
  EXPECT_EQ(manifest.selection_files.size(), 5u);
  const auto sel = io::read_json(dir.file("run/selection_003.json"));
  EXPECT_EQ(sel["format"], "alsim-sel/1");
  EXPECT_EQ(sel["cycle"], 3);
  EXPECT_EQ(sel["selected"].size(), 50u);
  EXPECT_EQ(sel["strategy"], "bib");
  EXPECT_EQ(sel["config_hash"], manifest.config_hash);
  const auto state = io::read_json(dir.file("run/state.json"));
  EXPECT_EQ(state["format"], "alsim-state/1");
  EXPECT_EQ(state["config_hash"], manifest.config_hash);
}

TEST_F(Cli, MetricsAreByteIdenticalAcrossReruns) {
  ASSERT_EQ(run(simulate("a")).code, 0);
  ASSERT_EQ(run(simulate("b")).code, 0);
  EXPECT_EQ(io::read_text(dir.file("a/metrics.csv")), io::read_text(dir.file("b/metrics.csv")));
  EXPECT_EQ(io::read_text(dir.file("a/state.json")), io::read_text(dir.file("b/state.json")));
}

TEST_F(Cli, StopAndResumeMatchesUninterrupted) {
  ASSERT_EQ(run(simulate("whole")).code, 0);
  const auto first = run(simulate("split", {"--stop-after", "2"}));
  ASSERT_EQ(first.code, 0) << first.err;
  EXPECT_FALSE(io::manifest_from_json(io::read_json(dir.file("split/manifest.json"))).complete);
  const auto second = run({"simulate", "--dataset", dir.file("pool.json"), "--test", dir.file("test.json"), "--resume",
                           dir.file("split")});
  ASSERT_EQ(second.code, 0) << second.err;
  EXPECT_EQ(io::read_text(dir.file("split/metrics.csv")), io::read_text(dir.file("whole/metrics.csv")));
  EXPECT_EQ(io::read_text(dir.file("split/state.json")), io::read_text(dir.file("whole/state.json")));
  EXPECT_EQ(io::read_text(dir.file("split/manifest.json")), io::read_text(dir.file("whole/manifest.json")));

  // A complete run is immutable.
  const auto again = run({"simulate", "--dataset", dir.file("pool.json"), "--test", dir.file("test.json"), "--resume",
                          dir.file("split")});
  EXPECT_EQ(again.code, 2);
  // Existing run directories are not overwritten.
  EXPECT_EQ(run(simulate("whole")).code, 2);
}

TEST_F(Cli, ResumeAgainstADifferentDatasetFails) {
  ASSERT_EQ(run(simulate("r", {"--stop-after", "1"})).code, 0);
  ASSERT_EQ(run({"generate", "--images", "300", "--seed", "9", "--out", dir.file("other.json")}).code, 0);
  const auto r = run({"simulate", "--dataset", dir.file("other.json"), "--test", dir.file("test.json"), "--resume",
                      dir.file("r")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("hash"), std::string::npos) << r.err;
}

TEST_F(Cli, SeedEnvironmentOverride) {
  setenv("ALSIM_SEED", "7", 1);
  ASSERT_EQ(run(simulate("env")).code, 0);
  unsetenv("ALSIM_SEED");
  auto args = simulate("flag");
  *(std::find(args.begin(), args.end(), "42")) = "7";
  ASSERT_EQ(run(args).code, 0);
  EXPECT_EQ(io::manifest_from_json(io::read_json(dir.file("env/manifest.json"))).config.seed, 7u);
  EXPECT_EQ(io::read_text(dir.file("env/metrics.csv")), io::read_text(dir.file("flag/metrics.csv")));
}

TEST_F(Cli, Select) {
  const std::string preds = write_predictions(30);
  const auto r = run({"select", "--predictions", preds, "--strategy", "entropy-max", "--budget", "10", "--out",
                      dir.file("sel.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto sel = io::read_json(dir.file("sel.json"));
  EXPECT_EQ(sel["format"], "alsim-sel/1");
  EXPECT_EQ(sel["selected"].size(), 10u);
  EXPECT_TRUE(sel.contains("config_hash"));

  // Annotated ids are excluded from the pool.
  const auto r2 = run({"select", "--predictions", preds, "--strategy", "b-random", "--budget", "25", "--dataset",
                       dir.file("small.json"), "--annotated", dir.file("sel.json"), "--out", dir.file("sel2.json")});
  ASSERT_EQ(r2.code, 0) << r2.err;
  const auto first = io::ids_from_json(sel, "sel");
  const auto second = io::ids_from_json(io::read_json(dir.file("sel2.json")), "sel2");
  EXPECT_EQ(second.size(), 20u);
  for (const auto& id : second) EXPECT_EQ(std::find(first.begin(), first.end(), id), first.end());
}

TEST_F(Cli, BibStats) {
  const std::string preds = write_predictions(40);
  const auto r = run({"bib-stats", "--predictions", preds, "--dataset", dir.file("small.json"), "--mu", "3", "--delta",
                      "0.8"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("pairs "), std::string::npos);
  EXPECT_NE(r.out.find("images_with_pairs 40"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("wrong_fraction 1"), std::string::npos) << r.out;
}

TEST_F(Cli, EvalAndValidate) {
  const std::string preds = write_predictions(10);
  const auto e = run({"eval", "--predictions", preds, "--dataset", dir.file("small.json"), "--out", dir.file("ev.json")});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("ap50 "), std::string::npos);
  EXPECT_TRUE(io::read_json(dir.file("ev.json")).contains("ap"));

  EXPECT_EQ(run({"validate", "--dataset", dir.file("pool.json")}).code, 0);
  EXPECT_EQ(run({"validate", "--predictions", preds}).code, 0);
  auto j = io::read_json(dir.file("pool.json"));
  j["images"][0]["gt"][0]["class"] = 99;
  io::write_json(dir.file("bad.json"), j);
  const auto v = run({"validate", "--dataset", dir.file("bad.json")});
  EXPECT_EQ(v.code, 2);
  EXPECT_NE(v.out.find("gt_class_range"), std::string::npos) << v.out;
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run({"simulate", "--dataset", dir.file("pool.json"), "--bogus"}).code, 1);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"select", "--predictions", "x.json", "--strategy", "nope", "--out", "y.json"}).code, 1);
  EXPECT_EQ(run(simulate("toobig", {"--budget", "200"})).code, 1);
  EXPECT_EQ(run({"eval", "--predictions", dir.file("missing.json"), "--dataset", dir.file("pool.json")}).code, 2);
  io::write_text_atomic(dir.file("garbage.json"), "{ not json");
  EXPECT_EQ(run({"validate", "--predictions", dir.file("garbage.json")}).code, 2);
}
