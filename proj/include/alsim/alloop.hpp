#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "alsim/bib.hpp"
#include "alsim/detections.hpp"
#include "alsim/error.hpp"
#include "alsim/eval.hpp"
#include "alsim/rng.hpp"
#include "alsim/strategies.hpp"
#include "alsim/synthetic.hpp"

namespace alsim {

using Labels = std::map<ImageId, std::vector<GroundTruthBox>>;

// Partition of the training pool after t cycles: W weakly labelled, S fully
// annotated (S is the union of history), plus the oracle labels G for S and
// the random stream used by the strategies.
struct CycleState {
  std::size_t t = 0;
  std::vector<ImageId> weak;       // sorted
  std::vector<ImageId> annotated;  // sorted
  std::vector<std::vector<ImageId>> history;
  Labels labels;
  std::optional<PairStore> pair_store;
  Rng rng;

  static CycleState initial(const Dataset& pool, std::uint64_t seed, bool with_pair_store) {
    CycleState s;
    s.weak = pool.ids();
    std::sort(s.weak.begin(), s.weak.end());
    s.rng = Rng(seed);
    if (with_pair_store) s.pair_store.emplace();
    return s;
  }

  // Empty when every state invariant holds against `pool`.
  std::vector<std::string> invariant_violations(const Dataset& pool) const {
    std::vector<std::string> out;
    std::vector<ImageId> all = pool.ids();
    std::sort(all.begin(), all.end());
    std::vector<ImageId> both;
    std::set_intersection(weak.begin(), weak.end(), annotated.begin(), annotated.end(), std::back_inserter(both));
    if (!both.empty()) out.push_back("W and S overlap");
    std::vector<ImageId> uni;
    std::set_union(weak.begin(), weak.end(), annotated.begin(), annotated.end(), std::back_inserter(uni));
    if (uni != all) out.push_back("W and S do not cover the pool");
    std::vector<ImageId> from_history;
    for (const auto& a : history) from_history.insert(from_history.end(), a.begin(), a.end());
    std::sort(from_history.begin(), from_history.end());
    if (from_history != annotated) out.push_back("S differs from the union of selections");
    if (history.size() != t) out.push_back("history length differs from cycle index");
    std::vector<ImageId> keys;
    for (const auto& [id, boxes] : labels) keys.push_back(id);
    if (keys != annotated) out.push_back("labelled images differ from S");
    return out;
  }

  friend bool operator==(const CycleState&, const CycleState&) = default;
};

// Simulated annotator: ground-truth lookup.
inline Labels oracle_label(const Dataset& dataset, std::span<const ImageId> ids) {
  Labels out;
  for (const auto& id : ids) out[id] = dataset.at(id).gt;
  return out;
}

// Source of model predictions. `model_cycle` is the number of completed
// cycles of the model (M^t); every model is fine-tuned from the initial one,
// so predictions may depend on S^t but not on how it was reached.
class DetectorSource {
 public:
  virtual ~DetectorSource() = default;
  // Predictions over the whole training pool (W and S).
  virtual PredictionSet predict_pool(std::size_t model_cycle, const CycleState& state) = 0;
  // Predictions over the held-out evaluation split.
  virtual PredictionSet predict_test(std::size_t model_cycle, const CycleState& state) = 0;
};

// Pre-recorded per-cycle prediction files.
class ReplaySource : public DetectorSource {
 public:
  ReplaySource(std::vector<PredictionSet> pool_by_cycle, std::vector<PredictionSet> test_by_cycle)
      : pool_(std::move(pool_by_cycle)), test_(std::move(test_by_cycle)) {}

  PredictionSet predict_pool(std::size_t model_cycle, const CycleState&) override {
    if (model_cycle >= pool_.size()) throw DataError("replay: no pool predictions for cycle " + std::to_string(model_cycle));
    return pool_[model_cycle];
  }
  PredictionSet predict_test(std::size_t model_cycle, const CycleState&) override {
    if (model_cycle >= test_.size()) throw DataError("replay: no test predictions for cycle " + std::to_string(model_cycle));
    return test_[model_cycle];
  }

 private:
  std::vector<PredictionSet> pool_;
  std::vector<PredictionSet> test_;
};

class SyntheticSource : public DetectorSource {
 public:
  SyntheticSource(const Dataset& pool, const Dataset& test, SyntheticParams params, std::uint64_t seed)
      : pool_(&pool), test_(&test), detector_(pool, params, seed) {}

  PredictionSet predict_pool(std::size_t, const CycleState& state) override {
    return detector_.detect(*pool_, state.annotated);
  }
  PredictionSet predict_test(std::size_t, const CycleState& state) override {
    return detector_.detect(*test_, state.annotated);
  }
  const SyntheticDetector& detector() const { return detector_; }

 private:
  const Dataset* pool_;
  const Dataset* test_;
  SyntheticDetector detector_;
};

struct ExperimentConfig {
  StrategyConfig strategy;
  std::size_t budget = 50;
  std::size_t cycles = 5;
  std::uint64_t seed = 0;
  std::string detector = "synthetic";  // "synthetic" or "replay"
  SyntheticParams synthetic;
  std::string replay_dir;
  std::vector<double> iou_thresholds = coco_iou_thresholds();
  bool normalize_features = false;
  bool record_timing = false;

  void validate(std::size_t pool_size) const {
    strategy.validate();
    if (budget < 1) throw std::invalid_argument("budget must be >= 1");
    if (cycles < 1) throw std::invalid_argument("cycles must be >= 1");
    if (budget * cycles > pool_size) {
      throw std::invalid_argument("budget x cycles (" + std::to_string(budget * cycles) + ") exceeds pool size " +
                                  std::to_string(pool_size));
    }
    if (detector != "synthetic" && detector != "replay") throw std::invalid_argument("unknown detector '" + detector + "'");
    if (detector == "synthetic") synthetic.validate();
    if (iou_thresholds.empty()) throw std::invalid_argument("need at least one IoU threshold");
  }
};

// Select A^t from W with the configured strategy, annotate it, and move it
// from W to S.
inline CycleState run_cycle(const CycleState& state, const PredictionSet& pool_preds, const ExperimentConfig& cfg,
                            const Dataset& pool, std::vector<ImageId>* selected = nullptr) {
  CycleState next = state;
  const PredictionSet* preds = &pool_preds;
  PredictionSet normalized;
  if (cfg.normalize_features) {
    normalized = pool_preds;
    l2_normalize_features(normalized);
    preds = &normalized;
  }
  if (cfg.strategy.kind == StrategyKind::bib && !next.pair_store) next.pair_store.emplace();

  std::vector<ImageId> picked;
  try {
    SelectionInputs in{*preds, state.weak, state.annotated, &pool, next.pair_store ? &*next.pair_store : nullptr};
    picked = select_images(cfg.strategy, in, cfg.budget, next.rng);
  } catch (const DataError& e) {
    throw DataError("cycle " + std::to_string(state.t + 1) + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument("cycle " + std::to_string(state.t + 1) + ": " + e.what());
  }

  for (auto& [id, boxes] : oracle_label(pool, picked)) next.labels[id] = std::move(boxes);
  std::vector<ImageId> sorted_pick = picked;
  std::sort(sorted_pick.begin(), sorted_pick.end());
  std::vector<ImageId> weak;
  std::set_difference(state.weak.begin(), state.weak.end(), sorted_pick.begin(), sorted_pick.end(),
                      std::back_inserter(weak));
  next.weak = std::move(weak);
  std::vector<ImageId> annotated;
  std::set_union(state.annotated.begin(), state.annotated.end(), sorted_pick.begin(), sorted_pick.end(),
                 std::back_inserter(annotated));
  next.annotated = std::move(annotated);
  next.history.push_back(picked);
  next.t = state.t + 1;
  if (selected != nullptr) *selected = std::move(picked);
  return next;
}

struct CycleMetrics {
  std::size_t cycle = 0;
  std::size_t n_annotated = 0;
  std::string strategy;
  std::uint64_t seed = 0;
  double ap50 = 0.0;
  double ap = 0.0;
  std::size_t bib_count = 0;
  double wall_ms = 0.0;
  std::vector<std::size_t> class_counts;  // annotated images per class
  friend bool operator==(const CycleMetrics&, const CycleMetrics&) = default;
};

// Drives the active-learning cycles one step at a time so a run can be
// checkpointed. The first step evaluates the initial model (cycle 0); each
// later step selects, annotates and evaluates one cycle.
class ExperimentRunner {
 public:
  ExperimentRunner(ExperimentConfig cfg, const Dataset& pool, const Dataset& test, DetectorSource& source)
      : cfg_(std::move(cfg)), pool_(&pool), test_(&test), source_(&source) {
    cfg_.validate(pool.size());
    state_ = CycleState::initial(pool, cfg_.seed, cfg_.strategy.kind == StrategyKind::bib);
  }

  // Continue from a checkpoint.
  ExperimentRunner(ExperimentConfig cfg, const Dataset& pool, const Dataset& test, DetectorSource& source,
                   CycleState state, std::vector<CycleMetrics> rows)
      : cfg_(std::move(cfg)), pool_(&pool), test_(&test), source_(&source), state_(std::move(state)),
        rows_(std::move(rows)) {
    cfg_.validate(pool.size());
    const auto bad = state_.invariant_violations(pool);
    if (!bad.empty()) throw DataError("checkpoint state is inconsistent: " + bad.front());
    if (rows_.size() != state_.t + 1) throw DataError("checkpoint metrics do not match its cycle index");
  }

  bool done() const { return rows_.size() == cfg_.cycles + 1; }

  void step() {
    if (done()) return;
    const auto start = std::chrono::steady_clock::now();
    last_selection_.clear();
    if (!rows_.empty()) {
      const PredictionSet preds = source_->predict_pool(state_.t, state_);
      state_ = run_cycle(state_, preds, cfg_, *pool_, &last_selection_);
    }
    CycleMetrics row = evaluate_current();
    if (cfg_.record_timing) {
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
    rows_.push_back(std::move(row));
  }

  void run() {
    while (!done()) step();
  }

  const ExperimentConfig& config() const { return cfg_; }
  const CycleState& state() const { return state_; }
  const std::vector<CycleMetrics>& rows() const { return rows_; }
  const std::vector<ImageId>& last_selection() const { return last_selection_; }

 private:
  CycleMetrics evaluate_current() {
    PredictionSet test_preds = source_->predict_test(state_.t, state_);
    CycleMetrics row;
    row.cycle = state_.t;
    row.n_annotated = state_.annotated.size();
    row.strategy = std::string(to_string(cfg_.strategy.kind));
    row.seed = cfg_.seed;
    const DetectionMetrics m = evaluate(*test_, test_preds, cfg_.iou_thresholds);
    row.ap50 = m.ap50;
    row.ap = m.ap;
    row.bib_count = count_bib(test_preds, cfg_.strategy.bib).total;
    row.class_counts.assign(pool_->num_classes(), 0);
    for (const auto& id : state_.annotated) {
      const auto& wl = pool_->at(id).weak_label;
      for (std::size_t c = 0; c < row.class_counts.size(); ++c) row.class_counts[c] += wl.has(c) ? 1 : 0;
    }
    return row;
  }

  ExperimentConfig cfg_;
  const Dataset* pool_;
  const Dataset* test_;
  DetectorSource* source_;
  CycleState state_;
  std::vector<CycleMetrics> rows_;
  std::vector<ImageId> last_selection_;
};

inline std::vector<CycleMetrics> run_experiment(const ExperimentConfig& cfg, const Dataset& pool, const Dataset& test,
                                                DetectorSource& source) {
  ExperimentRunner runner(cfg, pool, test, source);
  runner.run();
  return runner.rows();
}

}  // namespace alsim
