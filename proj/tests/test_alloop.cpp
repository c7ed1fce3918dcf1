#include <gtest/gtest.h>

#include <numeric>
#include <random>
#include <set>

#include "alsim/alsim.hpp"
#include "test_util.hpp"

using namespace alsim;

namespace {

const StrategyKind kAllKinds[] = {StrategyKind::u_random,    StrategyKind::b_random, StrategyKind::entropy_max,
                                  StrategyKind::entropy_sum, StrategyKind::loss,     StrategyKind::core_set,
                                  StrategyKind::core_set_ent, StrategyKind::bib};

ExperimentConfig config(StrategyKind kind, std::size_t budget, std::size_t cycles, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.strategy.kind = kind;
  cfg.budget = budget;
  cfg.cycles = cycles;
  cfg.seed = seed;
  cfg.synthetic.part_rate = 0.5;
  cfg.synthetic.group_rate = 0.5;
  cfg.synthetic.fidelity_gain = 0.05;
  return cfg;
}

// Forwards to another source and keeps a copy of every answer.
class Recorder : public DetectorSource {
 public:
  explicit Recorder(DetectorSource& inner) : inner_(&inner) {}
  PredictionSet predict_pool(std::size_t t, const CycleState& s) override {
    pool.resize(std::max(pool.size(), t + 1));
    return pool[t] = inner_->predict_pool(t, s);
  }
  PredictionSet predict_test(std::size_t t, const CycleState& s) override {
    test.resize(std::max(test.size(), t + 1));
    return test[t] = inner_->predict_test(t, s);
  }
  std::vector<PredictionSet> pool, test;

 private:
  DetectorSource* inner_;
};

}  // namespace

TEST(CycleState, InitialState) {
  const Dataset pool = alsim::fixtures::small_dataset(12, 1);
  const auto s = CycleState::initial(pool, 3, true);
  EXPECT_EQ(s.t, 0u);
  EXPECT_EQ(s.weak.size(), 12u);
  EXPECT_TRUE(s.annotated.empty());
  EXPECT_TRUE(s.pair_store.has_value());
  EXPECT_TRUE(s.invariant_violations(pool).empty());
  EXPECT_FALSE(CycleState::initial(pool, 3, false).pair_store.has_value());
}

TEST(RunCycle, BudgetEqualToPoolExhaustsIt) {
  const Dataset pool = alsim::fixtures::small_dataset(10, 2);
  SyntheticDetector det(pool, SyntheticParams{}, 1);
  for (auto kind : kAllKinds) {
    const auto cfg = config(kind, 10, 1, 7);
    const auto s0 = CycleState::initial(pool, cfg.seed, kind == StrategyKind::bib);
    const auto s1 = run_cycle(s0, det.detect(pool, s0.annotated), cfg, pool);
    EXPECT_TRUE(s1.weak.empty()) << to_string(kind);
    EXPECT_EQ(s1.annotated.size(), 10u);
    EXPECT_EQ(s1.t, 1u);
    EXPECT_TRUE(s1.invariant_violations(pool).empty());
  }
}

TEST(RunCycle, SelectionsAreDisjoint) {
  const Dataset pool = alsim::fixtures::small_dataset(30, 3);
  SyntheticParams params;
  params.part_rate = 0.7;
  SyntheticDetector det(pool, params, 1);
  for (auto kind : kAllKinds) {
    const auto cfg = config(kind, 2, 2, 5);
    auto s = CycleState::initial(pool, cfg.seed, kind == StrategyKind::bib);
    s = run_cycle(s, det.detect(pool, s.annotated), cfg, pool);
    s = run_cycle(s, det.detect(pool, s.annotated), cfg, pool);
    ASSERT_EQ(s.history.size(), 2u);
    std::set<ImageId> a1(s.history[0].begin(), s.history[0].end());
    for (const auto& id : s.history[1]) EXPECT_FALSE(a1.count(id)) << to_string(kind);
    EXPECT_EQ(s.annotated.size(), 4u);
  }
}

TEST(RunCycle, ErrorsCarryTheCycle) {
  const Dataset pool = alsim::fixtures::small_dataset(6, 3);
  PredictionSet preds;  // covers nothing
  const auto cfg = config(StrategyKind::entropy_max, 2, 1, 0);
  const auto s0 = CycleState::initial(pool, 0, false);
  try {
    run_cycle(s0, preds, cfg, pool);
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("cycle 1:", 0), 0u) << e.what();
  }
}

TEST(OracleLabel, Examples) {
  std::vector<ImageRecord> recs{{"two", 100, 100, {{1}}, {{BBox(0, 0, 5, 5), 0}, {BBox(10, 10, 20, 20), 0}}},
                                {"none", 100, 100, {{1}}, {}}};
  const Dataset ds({"c"}, recs);
  const std::vector<ImageId> ids{"two", "none"};
  const Labels l = oracle_label(ds, ids);
  EXPECT_EQ(l.at("two"), recs[0].gt);
  ASSERT_TRUE(l.count("none"));
  EXPECT_TRUE(l.at("none").empty());
  EXPECT_EQ(oracle_label(ds, ids), l);
  EXPECT_THROW(oracle_label(ds, std::vector<ImageId>{"zzz"}), DataError);
}

TEST(SyntheticDetect, NoiselessReproducesGroundTruth) {
  const Dataset ds = alsim::fixtures::small_dataset(60, 4);
  SyntheticDetector det(ds, SyntheticParams{}, 9);
  const PredictionSet preds = det.detect(ds, {});
  for (const auto& im : ds.images()) {
    const auto& dets = preds.at(im.id).detections;
    ASSERT_EQ(dets.size(), im.gt.size());
    for (std::size_t k = 0; k < dets.size(); ++k) {
      EXPECT_EQ(dets[k].box, im.gt[k].box);
      EXPECT_EQ(dets[k].class_id, im.gt[k].class_id);
      EXPECT_EQ(dets[k].confidence, 1.0);
    }
  }
  const auto m = evaluate(ds, preds);
  EXPECT_EQ(m.ap50, 1.0);
  EXPECT_EQ(m.ap, 1.0);
}

TEST(SyntheticDetect, PartRateOneGivesPairsEverywhere) {
  SyntheticDatasetSpec spec;
  spec.num_images = 100;
  Dataset ds = make_synthetic_dataset(spec, 5);
  // Keep one GT box per image.
  std::vector<ImageRecord> recs = ds.images();
  for (auto& r : recs) {
    r.gt.erase(r.gt.begin() + 1, r.gt.end());
    r.weak_label.present.assign(spec.num_classes, 0);
    r.weak_label.present[r.gt[0].class_id] = 1;
  }
  const Dataset single(ds.class_names(), recs);
  SyntheticParams params;
  params.part_rate = 1.0;
  SyntheticDetector det(single, params, 3);
  const auto counts = count_bib(det.detect(single, {}), BibParams{});
  for (const auto& [id, n] : counts.per_image) EXPECT_GE(n, 1u) << id;
}

TEST(SyntheticDetect, ExpectedPairCountDecaysWithAnnotation) {
  const Dataset pool = alsim::fixtures::small_dataset(200, 6);
  const Dataset test = alsim::fixtures::small_dataset(100, 7, "test");
  SyntheticParams params;
  params.part_rate = 0.6;
  params.group_rate = 0.6;
  params.fidelity_gain = 0.05;
  const std::vector<std::size_t> ks{0, 5, 10, 20, 40, 80, 160};
  std::vector<double> mean(ks.size(), 0.0);
  const int seeds = 100;
  for (int seed = 0; seed < seeds; ++seed) {
    SyntheticDetector det(pool, params, static_cast<std::uint64_t>(seed));
    std::vector<ImageId> order = pool.ids();
    std::mt19937_64 gen(static_cast<std::uint64_t>(seed));
    std::shuffle(order.begin(), order.end(), gen);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const std::vector<ImageId> s(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(ks[i]));
      mean[i] += static_cast<double>(count_bib(det.detect(test, s), BibParams{}).total) / seeds;
    }
  }
  for (std::size_t i = 1; i < ks.size(); ++i) EXPECT_LE(mean[i], mean[i - 1]) << "k=" << ks[i];
  EXPECT_LT(mean.back(), mean.front());
}

TEST(SyntheticDetect, DependsOnTheSetOnly) {
  const Dataset pool = alsim::fixtures::small_dataset(50, 8);
  SyntheticParams params;
  params.part_rate = 0.5;
  params.group_rate = 0.5;
  params.fidelity_gain = 0.1;
  SyntheticDetector det(pool, params, 1);
  const std::vector<ImageId> ids = pool.ids();
  std::vector<ImageId> s(ids.begin(), ids.begin() + 20);
  const auto a = det.detect(pool, s);
  std::reverse(s.begin(), s.end());
  EXPECT_EQ(det.detect(pool, s), a);
  EXPECT_THROW(det.fidelity(std::vector<ImageId>{"not-in-pool"}), DataError);
}

TEST(Experiment, FullBudgetInOneCycle) {
  const Dataset pool = alsim::fixtures::small_dataset(25, 9);
  const Dataset test = alsim::fixtures::small_dataset(10, 10, "test");
  const auto cfg = config(StrategyKind::u_random, 25, 1, 3);
  SyntheticSource src(pool, test, cfg.synthetic, cfg.seed);
  ExperimentRunner runner(cfg, pool, test, src);
  runner.run();
  ASSERT_EQ(runner.rows().size(), 2u);
  EXPECT_EQ(runner.rows()[0].cycle, 0u);
  EXPECT_EQ(runner.rows()[1].cycle, 1u);
  EXPECT_EQ(runner.rows()[1].n_annotated, 25u);
  EXPECT_TRUE(runner.state().weak.empty());
}

TEST(Experiment, ConfigValidation) {
  const Dataset pool = alsim::fixtures::small_dataset(10, 9);
  EXPECT_THROW(config(StrategyKind::u_random, 6, 2, 0).validate(pool.size()), std::invalid_argument);
  EXPECT_THROW(config(StrategyKind::u_random, 0, 2, 0).validate(pool.size()), std::invalid_argument);
  EXPECT_THROW(config(StrategyKind::u_random, 1, 0, 0).validate(pool.size()), std::invalid_argument);
  auto bad_rate = config(StrategyKind::u_random, 1, 1, 0);
  bad_rate.synthetic.miss_rate = 1.5;
  EXPECT_THROW(bad_rate.validate(pool.size()), std::invalid_argument);
  EXPECT_NO_THROW(config(StrategyKind::u_random, 5, 2, 0).validate(pool.size()));
}

TEST(Experiment, DeterministicAndSafeAtEveryCycle) {
  const Dataset pool = alsim::fixtures::small_dataset(60, 11);
  const Dataset test = alsim::fixtures::small_dataset(20, 12, "test");
  for (auto kind : kAllKinds) {
    const auto cfg = config(kind, 7, 4, 21);
    std::vector<CycleState> states[2];
    std::vector<CycleMetrics> rows[2];
    for (int rep = 0; rep < 2; ++rep) {
      SyntheticSource src(pool, test, cfg.synthetic, cfg.seed);
      ExperimentRunner runner(cfg, pool, test, src);
      while (!runner.done()) {
        runner.step();
        const auto& s = runner.state();
        EXPECT_TRUE(s.invariant_violations(pool).empty()) << to_string(kind);
        EXPECT_EQ(s.annotated.size(), std::min(s.t * cfg.budget, pool.size()));
        states[rep].push_back(s);
      }
      rows[rep] = runner.rows();
    }
    EXPECT_EQ(states[0], states[1]) << to_string(kind);
    EXPECT_EQ(rows[0], rows[1]) << to_string(kind);
  }
}

TEST(Experiment, ReplayAndSyntheticShareTheCodePath) {
  const Dataset pool = alsim::fixtures::small_dataset(60, 13);
  const Dataset test = alsim::fixtures::small_dataset(20, 14, "test");
  for (auto kind : {StrategyKind::bib, StrategyKind::core_set_ent, StrategyKind::b_random}) {
    const auto cfg = config(kind, 8, 3, 2);
    SyntheticSource synth(pool, test, cfg.synthetic, cfg.seed);
    Recorder rec(synth);
    ExperimentRunner live(cfg, pool, test, rec);
    live.run();

    ReplaySource replay(rec.pool, rec.test);
    ExperimentRunner again(cfg, pool, test, replay);
    again.run();
    EXPECT_EQ(again.rows(), live.rows()) << to_string(kind);
    EXPECT_EQ(again.state(), live.state()) << to_string(kind);
    EXPECT_EQ(rec.pool.size(), cfg.cycles);
    EXPECT_EQ(rec.test.size(), cfg.cycles + 1);
  }
}

TEST(Experiment, ReplayMissingCycleIsAnError) {
  const Dataset pool = alsim::fixtures::small_dataset(20, 15);
  const Dataset test = alsim::fixtures::small_dataset(5, 16, "test");
  const auto cfg = config(StrategyKind::u_random, 2, 2, 0);
  SyntheticDetector det(pool, cfg.synthetic, 0);
  ReplaySource replay({det.detect(pool, {})}, {det.detect(test, {}), det.detect(test, {}), det.detect(test, {})});
  ExperimentRunner runner(cfg, pool, test, replay);
  EXPECT_THROW(runner.run(), DataError);
}

TEST(Experiment, ResumeMatchesUninterrupted) {
  const Dataset pool = alsim::fixtures::small_dataset(60, 17);
  const Dataset test = alsim::fixtures::small_dataset(20, 18, "test");
  const auto cfg = config(StrategyKind::bib, 6, 4, 8);
  SyntheticSource a(pool, test, cfg.synthetic, cfg.seed);
  const auto full = run_experiment(cfg, pool, test, a);

  SyntheticSource b(pool, test, cfg.synthetic, cfg.seed);
  ExperimentRunner first(cfg, pool, test, b);
  first.step();
  first.step();
  SyntheticSource c(pool, test, cfg.synthetic, cfg.seed);
  ExperimentRunner second(cfg, pool, test, c, first.state(), first.rows());
  second.run();
  EXPECT_EQ(second.rows(), full);

  CycleState broken = first.state();
  broken.weak.pop_back();
  EXPECT_THROW(ExperimentRunner(cfg, pool, test, c, broken, first.rows()), DataError);
}
