#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "alsim/alsim.hpp"

namespace alsim::cli {

namespace fs = std::filesystem;

inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kDataError = 2;

struct SimulateArgs {
  std::string dataset, test, out, resume, replay_dir;
  std::string strategy = "bib";
  std::string detector = "synthetic";
  std::size_t stop_after = 0;  // 0: run to completion
};

inline std::uint64_t effective_seed(std::uint64_t flag_seed) {
  if (const char* env = std::getenv("ALSIM_SEED"); env != nullptr && *env != '\0') {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("ALSIM_SEED is not an unsigned integer: ") + env);
    }
  }
  return flag_seed;
}

inline std::unique_ptr<DetectorSource> make_source(const ExperimentConfig& cfg, const Dataset& pool, const Dataset& test) {
  if (cfg.detector == "synthetic") return std::make_unique<SyntheticSource>(pool, test, cfg.synthetic, cfg.seed);
  if (cfg.replay_dir.empty()) throw std::invalid_argument("--detector replay needs --replay-dir");
  std::vector<PredictionSet> pool_preds;
  std::vector<PredictionSet> test_preds;
  const fs::path dir(cfg.replay_dir);
  for (std::size_t t = 0; t < cfg.cycles; ++t) {
    pool_preds.push_back(io::load_predictions(dir / ("pool_" + std::to_string(t) + ".json")));
  }
  for (std::size_t t = 0; t <= cfg.cycles; ++t) {
    test_preds.push_back(io::load_predictions(dir / ("test_" + std::to_string(t) + ".json")));
  }
  return std::make_unique<ReplaySource>(std::move(pool_preds), std::move(test_preds));
}

inline std::string selection_name(std::size_t cycle) {
  std::string n = std::to_string(cycle);
  if (n.size() < 3) n.insert(0, 3 - n.size(), '0');
  return "selection_" + n + ".json";
}

// Runs (or continues) an experiment in `run_dir`, checkpointing after every
// cycle: state.json, selection_NNN.json, metrics.csv and manifest.json.
inline void simulate(const SimulateArgs& args, ExperimentConfig cfg, std::ostream& log) {
  const Dataset pool = io::load_dataset(args.dataset);
  const Dataset test = io::load_dataset(args.test);
  if (pool.num_classes() != test.num_classes()) throw DataError("dataset and test split disagree on class count");
  const std::uint64_t pool_hash = io::dataset_hash(pool);
  const std::string test_hash = io::hex64(io::dataset_hash(test));

  const bool resuming = !args.resume.empty();
  const fs::path run_dir = resuming ? fs::path(args.resume) : fs::path(args.out);
  io::RunManifest manifest;
  std::optional<CycleState> state;
  if (resuming) {
    manifest = io::manifest_from_json(io::read_json(run_dir / "manifest.json"), (run_dir / "manifest.json").string());
    if (manifest.complete) throw DataError(run_dir.string() + ": run is complete and cannot be resumed");
    if (manifest.dataset_hash != io::hex64(pool_hash)) throw DataError("resume: dataset hash mismatch");
    if (manifest.test_hash != test_hash) throw DataError("resume: test split hash mismatch");
    cfg = manifest.config;
    if (fs::exists(run_dir / "state.json")) state = io::resume(run_dir / "state.json", pool_hash);
  } else {
    cfg.validate(pool.size());
    if (fs::exists(run_dir / "manifest.json")) {
      throw DataError(run_dir.string() + ": already holds a run; use --resume or another --out");
    }
    fs::create_directories(run_dir);
    manifest.config = cfg;
    manifest.config_hash = io::config_hash(cfg);
    manifest.dataset_hash = io::hex64(pool_hash);
    manifest.test_hash = test_hash;
  }

  auto source = make_source(cfg, pool, test);
  std::unique_ptr<ExperimentRunner> runner;
  if (state) {
    runner = std::make_unique<ExperimentRunner>(cfg, pool, test, *source, std::move(*state), manifest.rows);
  } else {
    runner = std::make_unique<ExperimentRunner>(cfg, pool, test, *source);
    manifest.rows.clear();
  }

  std::size_t steps = 0;
  while (!runner->done()) {
    runner->step();
    ++steps;
    const auto& row = runner->rows().back();
    if (row.cycle > 0) {
      const std::string name = selection_name(row.cycle);
      nlohmann::json sel = io::selection_to_json(row.cycle, runner->last_selection(), cfg.strategy.kind, cfg.seed,
                                       manifest.config_hash);
      sel["class_counts"] = row.class_counts;
      io::write_json(run_dir / name, sel);
      manifest.selection_files.push_back(name);
    }
    manifest.rows = runner->rows();
    manifest.complete = runner->done();
    io::save_state(run_dir / "state.json", runner->state(), manifest.config_hash, pool_hash);
    io::write_text_atomic(run_dir / "metrics.csv", io::metrics_csv(manifest.rows, manifest.config_hash));
    io::write_json(run_dir / "manifest.json", io::manifest_to_json(manifest));
    log << "cycle " << row.cycle << ": n_annotated=" << row.n_annotated << " ap50=" << row.ap50 << " ap=" << row.ap
        << " bib_count=" << row.bib_count << "\n";
    if (args.stop_after != 0 && steps >= args.stop_after) break;
  }
}

inline void add_bib_flags(CLI::App* app, BibParams& bib) {
  app->add_option("--mu", bib.mu, "Minimum area ratio large/small for a box-in-box pair")->capture_default_str();
  app->add_option("--delta", bib.delta, "Minimum fraction of the small box inside the large one")->capture_default_str();
}

// Entry point shared by the executable and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"alsim: active-learning acquisition simulator for weakly-supervised detection"};
  app.require_subcommand(1);

  // generate
  SyntheticDatasetSpec gen_spec;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset file");
  gen->add_option("--images", gen_spec.num_images, "Number of images")->capture_default_str();
  gen->add_option("--classes", gen_spec.num_classes, "Number of classes")->capture_default_str();
  gen->add_option("--prefix", gen_spec.id_prefix, "Image id prefix")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Random seed")->capture_default_str();
  gen->add_option("--out", gen_out, "Output dataset file")->required();

  // simulate
  SimulateArgs sim;
  ExperimentConfig cfg;
  auto* simc = app.add_subcommand("simulate", "Run active-learning cycles and write a run directory");
  simc->add_option("--dataset", sim.dataset, "Training pool dataset file")->required();
  simc->add_option("--test", sim.test, "Held-out evaluation dataset file")->required();
  auto* out_opt = simc->add_option("--out", sim.out, "Run directory to create");
  auto* resume_opt = simc->add_option("--resume", sim.resume, "Continue the run in this directory");
  out_opt->excludes(resume_opt);
  simc->add_option("--strategy", sim.strategy, "u-random|b-random|entropy-max|entropy-sum|loss|core-set|core-set-ent|bib")
      ->capture_default_str();
  simc->add_option("--budget", cfg.budget, "Images annotated per cycle")->capture_default_str();
  simc->add_option("--cycles", cfg.cycles, "Number of cycles")->capture_default_str();
  simc->add_option("--seed", cfg.seed, "Experiment seed (ALSIM_SEED overrides)")->capture_default_str();
  simc->add_option("--detector", sim.detector, "synthetic|replay")->capture_default_str();
  simc->add_option("--replay-dir", sim.replay_dir, "Directory with pool_<t>.json and test_<t>.json");
  simc->add_option("--loss-key", cfg.strategy.loss_key, "Loss used by the loss strategy")->capture_default_str();
  add_bib_flags(simc, cfg.strategy.bib);
  simc->add_option("--part-rate", cfg.synthetic.part_rate)->capture_default_str();
  simc->add_option("--group-rate", cfg.synthetic.group_rate)->capture_default_str();
  simc->add_option("--miss-rate", cfg.synthetic.miss_rate)->capture_default_str();
  simc->add_option("--spurious-rate", cfg.synthetic.spurious_rate)->capture_default_str();
  simc->add_option("--fidelity-gain", cfg.synthetic.fidelity_gain)->capture_default_str();
  simc->add_option("--feature-noise", cfg.synthetic.feature_noise)->capture_default_str();
  simc->add_option("--feature-dim", cfg.synthetic.feature_dim)->capture_default_str();
  simc->add_option("--box-jitter", cfg.synthetic.box_jitter)->capture_default_str();
  simc->add_flag("--normalize-features", cfg.normalize_features, "L2-normalise region and image features");
  simc->add_flag("--record-timing", cfg.record_timing, "Fill wall_ms (makes metrics.csv non-reproducible)");
  simc->add_option("--stop-after", sim.stop_after, "Stop after this many steps (checkpoint kept for --resume)");

  // select
  std::string sel_preds, sel_out, sel_dataset, sel_annotated, sel_strategy;
  std::size_t sel_budget = 50, sel_cycle = 1;
  std::uint64_t sel_seed = 0;
  StrategyConfig sel_cfg;
  auto* selc = app.add_subcommand("select", "Choose images to annotate from one predictions file");
  selc->add_option("--predictions", sel_preds, "Predictions over the weakly-labelled pool")->required();
  selc->add_option("--strategy", sel_strategy, "Acquisition strategy")->required();
  selc->add_option("--budget", sel_budget, "Number of images to select")->capture_default_str();
  selc->add_option("--out", sel_out, "Selection output file")->required();
  selc->add_option("--seed", sel_seed, "Random seed (ALSIM_SEED overrides)")->capture_default_str();
  selc->add_option("--dataset", sel_dataset, "Dataset file (weak labels, needed by b-random)");
  selc->add_option("--annotated", sel_annotated, "Already-annotated ids: JSON array or selection file");
  selc->add_option("--cycle", sel_cycle, "Cycle index recorded in the output")->capture_default_str();
  selc->add_option("--loss-key", sel_cfg.loss_key)->capture_default_str();
  add_bib_flags(selc, sel_cfg.bib);

  // eval
  std::string ev_preds, ev_dataset, ev_out;
  auto* evc = app.add_subcommand("eval", "AP50 and AP of predictions against a dataset");
  evc->add_option("--predictions", ev_preds)->required();
  evc->add_option("--dataset", ev_dataset)->required();
  evc->add_option("--out", ev_out, "Optional JSON report");

  // bib-stats
  std::string bs_preds, bs_dataset;
  BibParams bs_bib;
  auto* bsc = app.add_subcommand("bib-stats", "Count box-in-box pairs and how many contain a wrong box");
  bsc->add_option("--predictions", bs_preds)->required();
  bsc->add_option("--dataset", bs_dataset, "Ground truth; enables the wrong-pair fraction");
  add_bib_flags(bsc, bs_bib);

  // validate
  std::string va_dataset, va_preds;
  auto* vac = app.add_subcommand("validate", "Check a dataset or predictions file");
  auto* va_d = vac->add_option("--dataset", va_dataset);
  auto* va_p = vac->add_option("--predictions", va_preds);
  va_d->excludes(va_p);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) {
      io::save_dataset(gen_out, make_synthetic_dataset(gen_spec, effective_seed(gen_seed)));
      out << "wrote " << gen_spec.num_images << " images to " << gen_out << "\n";
    } else if (*simc) {
      if (sim.out.empty() && sim.resume.empty()) throw std::invalid_argument("simulate needs --out or --resume");
      cfg.strategy.kind = parse_strategy(sim.strategy);
      cfg.detector = sim.detector;
      cfg.replay_dir = sim.replay_dir;
      cfg.seed = effective_seed(cfg.seed);
      cfg.synthetic.part_mu = cfg.strategy.bib.mu;
      cfg.synthetic.part_delta = cfg.strategy.bib.delta;
      cfg.strategy.validate();
      simulate(sim, cfg, out);
    } else if (*selc) {
      sel_cfg.kind = parse_strategy(sel_strategy);
      sel_cfg.validate();
      PredictionSet preds = io::load_predictions(sel_preds);
      std::optional<Dataset> dataset;
      if (!sel_dataset.empty()) dataset = io::load_dataset(sel_dataset);
      std::vector<ImageId> annotated;
      if (!sel_annotated.empty()) annotated = io::ids_from_json(io::read_json(sel_annotated), sel_annotated);
      std::sort(annotated.begin(), annotated.end());
      std::vector<ImageId> pool;
      for (const auto& [id, im] : preds.images) {
        if (!std::binary_search(annotated.begin(), annotated.end(), id)) pool.push_back(id);
      }
      PairStore store;
      Rng rng(effective_seed(sel_seed));
      SelectionInputs in{preds, pool, annotated, dataset ? &*dataset : nullptr, &store};
      const auto picked = select_images(sel_cfg, in, sel_budget, rng);
      ExperimentConfig echo;
      echo.strategy = sel_cfg;
      echo.budget = sel_budget;
      echo.seed = rng.seed();
      io::write_json(sel_out, io::selection_to_json(sel_cycle, picked, sel_cfg.kind, rng.seed(), io::config_hash(echo)));
      out << "selected " << picked.size() << " images -> " << sel_out << "\n";
    } else if (*evc) {
      const Dataset d = io::load_dataset(ev_dataset);
      const PredictionSet p = io::load_predictions(ev_preds);
      const DetectionMetrics m = evaluate(d, p);
      out << "ap50 " << m.ap50 << "\nap " << m.ap << "\n";
      for (std::size_t c = 0; c < d.num_classes(); ++c) {
        out << "class " << d.class_names()[c] << " ap50 " << m.ap50_per_class[c] << " ap " << m.ap_per_class[c] << "\n";
      }
      if (!ev_out.empty()) {
        io::write_json(ev_out, {{"format", "alsim-eval/1"}, {"ap50", m.ap50}, {"ap", m.ap},
                                {"ap50_per_class", m.ap50_per_class}, {"ap_per_class", m.ap_per_class}});
      }
    } else if (*bsc) {
      bs_bib.validate();
      const PredictionSet p = io::load_predictions(bs_preds);
      const BibCount count = count_bib(p, bs_bib);
      std::size_t with_pairs = 0;
      for (const auto& [id, n] : count.per_image) with_pairs += n > 0 ? 1 : 0;
      out << "pairs " << count.total << "\nimages_with_pairs " << with_pairs << "\nimages " << p.images.size() << "\n";
      if (!bs_dataset.empty()) {
        const Dataset d = io::load_dataset(bs_dataset);
        const PairVerification v = verify_bib_pairs(d, p, bs_bib);
        out << "wrong_pairs " << v.wrong << "\nwrong_fraction " << v.fraction() << "\n";
      }
    } else if (*vac) {
      if (!va_dataset.empty()) {
        const Dataset d = io::dataset_from_json(io::read_json(va_dataset), va_dataset);
        const auto violations = validate_dataset(d);
        for (const auto& v : violations) out << v.image_id << ": " << v.rule << " (" << v.detail << ")\n";
        out << violations.size() << " violation(s)\n";
        return violations.empty() ? kOk : kDataError;
      }
      if (!va_preds.empty()) {
        const PredictionSet p = io::load_predictions(va_preds);
        out << "ok: " << p.images.size() << " images, feature_dim " << p.feature_dim << "\n";
        return kOk;
      }
      throw std::invalid_argument("validate needs --dataset or --predictions");
    }
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kOk;
}

}  // namespace alsim::cli
