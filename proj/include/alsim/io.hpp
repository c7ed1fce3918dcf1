#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "alsim/alloop.hpp"
#include "alsim/detections.hpp"
#include "alsim/error.hpp"

namespace alsim::io {

using nlohmann::json;

inline constexpr const char* kDatasetFormat = "alsim-dataset/1";
inline constexpr const char* kPredictionsFormat = "alsim-preds/1";
inline constexpr const char* kSelectionFormat = "alsim-sel/1";
inline constexpr const char* kStateFormat = "alsim-state/1";
inline constexpr const char* kManifestFormat = "alsim-run/1";
inline constexpr const char* kMetricsFormat = "alsim-metrics/1";

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to a sibling temp file and renames it over `path`.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(path.string() + ": cannot write");
    out << text;
    if (!out) throw DataError(path.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline json parse_json(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(source + ": " + e.what());
  }
}

inline json read_json(const std::filesystem::path& path) { return parse_json(read_text(path), path.string()); }

inline void write_json(const std::filesystem::path& path, const json& j) { write_text_atomic(path, j.dump(2) + "\n"); }

namespace detail {

inline const json& field(const json& j, const char* key, const std::string& ctx) {
  if (!j.is_object()) throw DataError(ctx + ": expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw DataError(ctx + ": missing field '" + key + "'");
  return *it;
}

template <class T>
T get(const json& j, const char* key, const std::string& ctx) {
  const json& v = field(j, key, ctx);
  try {
    return v.get<T>();
  } catch (const json::exception& e) {
    throw DataError(ctx + "." + key + ": " + e.what());
  }
}

inline void check_format(const json& j, const char* expected, const std::string& ctx) {
  const auto format = get<std::string>(j, "format", ctx);
  if (format != expected) {
    throw DataError(ctx + ": unsupported format version '" + format + "', expected '" + expected + "'");
  }
}

inline BBox box_from(const json& j, const std::string& ctx) {
  std::vector<double> c;
  try {
    c = j.get<std::vector<double>>();
  } catch (const json::exception&) {
    throw DataError(ctx + ": box must be an array of 4 numbers");
  }
  if (c.size() != 4) throw DataError(ctx + ": box must have 4 coordinates, got " + std::to_string(c.size()));
  return BBox::unvalidated(c[0], c[1], c[2], c[3]);
}

inline json box_to(const BBox& b) { return json::array({b.x_min(), b.y_min(), b.x_max(), b.y_max()}); }

inline std::string at(const std::string& ctx, const char* name, std::size_t i) {
  return ctx + "." + name + "[" + std::to_string(i) + "]";
}

}  // namespace detail

// ---------------------------------------------------------------- datasets

// Structural parse only; invariants are left to validate_dataset.
inline Dataset dataset_from_json(const json& j, const std::string& source = "dataset") {
  detail::check_format(j, kDatasetFormat, source);
  auto classes = detail::get<std::vector<std::string>>(j, "classes", source);
  const json& images = detail::field(j, "images", source);
  if (!images.is_array()) throw DataError(source + ".images: expected an array");
  std::vector<ImageRecord> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string ctx = detail::at(source, "images", i);
    const json& im = images[i];
    ImageRecord rec{detail::get<std::string>(im, "id", ctx), detail::get<double>(im, "width", ctx),
                    detail::get<double>(im, "height", ctx), {}, {}};
    for (int v : detail::get<std::vector<int>>(im, "weak_label", ctx)) {
      if (v != 0 && v != 1) throw DataError(ctx + ".weak_label: entries must be 0 or 1");
      rec.weak_label.present.push_back(static_cast<std::uint8_t>(v));
    }
    if (im.contains("gt")) {
      const json& gts = im.at("gt");
      if (!gts.is_array()) throw DataError(ctx + ".gt: expected an array");
      for (std::size_t g = 0; g < gts.size(); ++g) {
        const std::string gctx = detail::at(ctx, "gt", g);
        const auto cls = detail::get<long long>(gts[g], "class", gctx);
        if (cls < 0) throw DataError(gctx + ".class: must be non-negative");
        rec.gt.push_back({detail::box_from(detail::field(gts[g], "box", gctx), gctx + ".box"),
                          static_cast<std::size_t>(cls)});
      }
    }
    out.push_back(std::move(rec));
  }
  return Dataset(std::move(classes), std::move(out));
}

inline json dataset_to_json(const Dataset& d) {
  json images = json::array();
  for (const auto& im : d.images()) {
    json gts = json::array();
    for (const auto& g : im.gt) gts.push_back({{"box", detail::box_to(g.box)}, {"class", g.class_id}});
    std::vector<int> wl(im.weak_label.present.begin(), im.weak_label.present.end());
    images.push_back({{"id", im.id}, {"width", im.width}, {"height", im.height}, {"weak_label", wl}, {"gt", gts}});
  }
  return {{"format", kDatasetFormat}, {"classes", d.class_names()}, {"images", images}};
}

inline std::string describe(const std::vector<Violation>& violations) {
  std::string s;
  for (const auto& v : violations) s += "\n  " + v.image_id + ": " + v.rule + " (" + v.detail + ")";
  return s;
}

// Parses and validates; any violation is an error listing all of them.
inline Dataset load_dataset(const std::filesystem::path& path) {
  Dataset d = dataset_from_json(read_json(path), path.string());
  const auto violations = validate_dataset(d);
  if (!violations.empty()) throw DataError(path.string() + ": invalid dataset:" + describe(violations));
  return d;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& d) { write_json(path, dataset_to_json(d)); }

inline std::uint64_t dataset_hash(const Dataset& d) { return fnv1a64(dataset_to_json(d).dump()); }

// ------------------------------------------------------------- predictions

// Enforces a uniform feature length F and class-probability length C + 1,
// renormalises probabilities within 1e-3 of summing to 1, and requires each
// detection's class to be the argmax object class.
inline PredictionSet predictions_from_json(const json& j, const std::string& source = "predictions") {
  detail::check_format(j, kPredictionsFormat, source);
  PredictionSet out;
  out.feature_dim = detail::get<std::size_t>(j, "feature_dim", source);
  const std::size_t dim = out.feature_dim;
  auto check_dim = [&](const Feature& f, const std::string& ctx) {
    if (f.size() != dim) {
      throw DataError(ctx + ": feature length " + std::to_string(f.size()) + " differs from feature_dim " +
                      std::to_string(dim));
    }
  };
  std::optional<std::size_t> probs_len;
  const json& images = detail::field(j, "images", source);
  if (!images.is_array()) throw DataError(source + ".images: expected an array");
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string ctx = detail::at(source, "images", i);
    const json& im = images[i];
    ImagePredictions p;
    p.image_id = detail::get<std::string>(im, "id", ctx);
    if (im.contains("image_feature") && !im.at("image_feature").is_null()) {
      p.image_feature = detail::get<Feature>(im, "image_feature", ctx);
      check_dim(*p.image_feature, ctx + ".image_feature");
    }
    if (im.contains("weak_loss") && !im.at("weak_loss").is_null()) {
      p.weak_loss = detail::get<std::map<std::string, double>>(im, "weak_loss", ctx);
      for (const auto& [k, v] : p.weak_loss) {
        if (!std::isfinite(v) || v < 0.0) throw DataError(ctx + ".weak_loss." + k + ": must be finite and >= 0");
      }
    }
    const json& dets = detail::field(im, "detections", ctx);
    if (!dets.is_array()) throw DataError(ctx + ".detections: expected an array");
    for (std::size_t k = 0; k < dets.size(); ++k) {
      const std::string dctx = detail::at(ctx, "detections", k);
      const json& d = dets[k];
      BBox box = detail::box_from(detail::field(d, "box", dctx), dctx + ".box");
      if (!box.is_valid()) throw DataError(dctx + ".box: must be finite with positive area");
      auto probs = detail::get<std::vector<double>>(d, "probs", dctx);
      if (probs.size() < 2) throw DataError(dctx + ".probs: need at least one object class plus background");
      if (probs_len && *probs_len != probs.size()) {
        throw DataError(dctx + ".probs: length " + std::to_string(probs.size()) + " differs from earlier length " +
                        std::to_string(*probs_len));
      }
      probs_len = probs.size();
      try {
        normalize_class_probs(probs);
      } catch (const DataError& e) {
        throw DataError(dctx + ".probs: " + e.what());
      }
      const auto cls = detail::get<long long>(d, "class", dctx);
      if (cls < 0 || static_cast<std::size_t>(cls) + 1 >= probs.size()) throw DataError(dctx + ".class: out of range");
      if (argmax_object_class(probs) != static_cast<std::size_t>(cls)) {
        throw DataError(dctx + ".class: " + std::to_string(cls) + " is not the argmax object class of probs");
      }
      const double conf = detail::get<double>(d, "confidence", dctx);
      if (!(conf >= 0.0 && conf <= 1.0)) throw DataError(dctx + ".confidence: must be in [0, 1]");
      Feature feat = detail::get<Feature>(d, "feature", dctx);
      check_dim(feat, dctx + ".feature");
      p.detections.push_back({box, static_cast<std::size_t>(cls), conf, std::move(probs), std::move(feat)});
    }
    if (!out.images.emplace(p.image_id, p).second) throw DataError(ctx + ": duplicate image id '" + p.image_id + "'");
  }
  return out;
}

inline json predictions_to_json(const PredictionSet& preds) {
  json images = json::array();
  for (const auto& [id, im] : preds.images) {
    json dets = json::array();
    for (const auto& d : im.detections) {
      dets.push_back({{"box", detail::box_to(d.box)},
                      {"class", d.class_id},
                      {"confidence", d.confidence},
                      {"probs", d.class_probs},
                      {"feature", d.feature}});
    }
    json entry = {{"id", id}, {"detections", dets}};
    if (im.image_feature) entry["image_feature"] = *im.image_feature;
    if (!im.weak_loss.empty()) entry["weak_loss"] = im.weak_loss;
    images.push_back(std::move(entry));
  }
  return {{"format", kPredictionsFormat}, {"feature_dim", preds.feature_dim}, {"images", images}};
}

inline PredictionSet load_predictions(const std::filesystem::path& path) {
  return predictions_from_json(read_json(path), path.string());
}

inline void save_predictions(const std::filesystem::path& path, const PredictionSet& p) {
  write_json(path, predictions_to_json(p));
}

// ------------------------------------------------------------------ config

inline json config_to_json(const ExperimentConfig& c) {
  const auto& s = c.synthetic;
  return {{"strategy", std::string(to_string(c.strategy.kind))},
          {"mu", c.strategy.bib.mu},
          {"delta", c.strategy.bib.delta},
          {"loss_key", c.strategy.loss_key},
          {"budget", c.budget},
          {"cycles", c.cycles},
          {"seed", c.seed},
          {"detector", c.detector},
          {"replay_dir", c.replay_dir},
          {"synthetic",
           {{"part_rate", s.part_rate},
            {"group_rate", s.group_rate},
            {"miss_rate", s.miss_rate},
            {"spurious_rate", s.spurious_rate},
            {"fidelity_gain", s.fidelity_gain},
            {"feature_noise", s.feature_noise},
            {"feature_dim", s.feature_dim},
            {"box_jitter", s.box_jitter},
            {"part_mu", s.part_mu},
            {"part_delta", s.part_delta}}},
          {"iou_thresholds", c.iou_thresholds},
          {"normalize_features", c.normalize_features},
          {"record_timing", c.record_timing}};
}

inline ExperimentConfig config_from_json(const json& j, const std::string& ctx = "config") {
  using detail::get;
  ExperimentConfig c;
  try {
    c.strategy.kind = parse_strategy(get<std::string>(j, "strategy", ctx));
  } catch (const std::invalid_argument& e) {
    throw DataError(ctx + ".strategy: " + e.what());
  }
  c.strategy.bib.mu = get<double>(j, "mu", ctx);
  c.strategy.bib.delta = get<double>(j, "delta", ctx);
  c.strategy.loss_key = get<std::string>(j, "loss_key", ctx);
  c.budget = get<std::size_t>(j, "budget", ctx);
  c.cycles = get<std::size_t>(j, "cycles", ctx);
  c.seed = get<std::uint64_t>(j, "seed", ctx);
  c.detector = get<std::string>(j, "detector", ctx);
  c.replay_dir = get<std::string>(j, "replay_dir", ctx);
  const json& s = detail::field(j, "synthetic", ctx);
  const std::string sctx = ctx + ".synthetic";
  c.synthetic.part_rate = get<double>(s, "part_rate", sctx);
  c.synthetic.group_rate = get<double>(s, "group_rate", sctx);
  c.synthetic.miss_rate = get<double>(s, "miss_rate", sctx);
  c.synthetic.spurious_rate = get<double>(s, "spurious_rate", sctx);
  c.synthetic.fidelity_gain = get<double>(s, "fidelity_gain", sctx);
  c.synthetic.feature_noise = get<double>(s, "feature_noise", sctx);
  c.synthetic.feature_dim = get<std::size_t>(s, "feature_dim", sctx);
  c.synthetic.box_jitter = get<double>(s, "box_jitter", sctx);
  c.synthetic.part_mu = get<double>(s, "part_mu", sctx);
  c.synthetic.part_delta = get<double>(s, "part_delta", sctx);
  c.iou_thresholds = get<std::vector<double>>(j, "iou_thresholds", ctx);
  c.normalize_features = get<bool>(j, "normalize_features", ctx);
  c.record_timing = get<bool>(j, "record_timing", ctx);
  return c;
}

inline std::string config_hash(const ExperimentConfig& c) { return hex64(fnv1a64(config_to_json(c).dump())); }

// --------------------------------------------------------------- selection

inline json selection_to_json(std::size_t cycle, const std::vector<ImageId>& selected, StrategyKind strategy,
                              std::uint64_t seed, const std::string& cfg_hash) {
  return {{"format", kSelectionFormat},
          {"cycle", cycle},
          {"selected", selected},
          {"strategy", std::string(to_string(strategy))},
          {"seed", seed},
          {"config_hash", cfg_hash}};
}

// Accepts a plain JSON array of ids or a selection file.
inline std::vector<ImageId> ids_from_json(const json& j, const std::string& ctx) {
  if (j.is_array()) {
    try {
      return j.get<std::vector<ImageId>>();
    } catch (const json::exception& e) {
      throw DataError(ctx + ": " + e.what());
    }
  }
  detail::check_format(j, kSelectionFormat, ctx);
  return detail::get<std::vector<ImageId>>(j, "selected", ctx);
}

// ------------------------------------------------------------------- state

inline json state_to_json(const CycleState& s, const std::string& cfg_hash, std::uint64_t pool_hash) {
  json labels = json::object();
  for (const auto& [id, boxes] : s.labels) {
    json arr = json::array();
    for (const auto& g : boxes) arr.push_back({{"box", detail::box_to(g.box)}, {"class", g.class_id}});
    labels[id] = arr;
  }
  json store = nullptr;
  if (s.pair_store) {
    store = json::array();
    for (const auto& p : s.pair_store->pairs()) {
      store.push_back({{"image_id", p.image_id}, {"small", p.small_index}, {"large", p.large_index}, {"feature", p.feature}});
    }
  }
  return {{"format", kStateFormat},
          {"config_hash", cfg_hash},
          {"dataset_hash", hex64(pool_hash)},
          {"t", s.t},
          {"weak", s.weak},
          {"annotated", s.annotated},
          {"history", s.history},
          {"labels", labels},
          {"pair_store", store},
          {"rng", {{"seed", s.rng.seed()}, {"draws", s.rng.draws()}}}};
}

// Rebuilds a state, refusing one written for a different pool dataset.
inline CycleState state_from_json(const json& j, std::uint64_t expected_pool_hash, const std::string& ctx = "state") {
  using detail::get;
  detail::check_format(j, kStateFormat, ctx);
  if (get<std::string>(j, "dataset_hash", ctx) != hex64(expected_pool_hash)) {
    throw DataError(ctx + ": dataset hash mismatch; the checkpoint was written for a different dataset");
  }
  CycleState s;
  s.t = get<std::size_t>(j, "t", ctx);
  s.weak = get<std::vector<ImageId>>(j, "weak", ctx);
  s.annotated = get<std::vector<ImageId>>(j, "annotated", ctx);
  s.history = get<std::vector<std::vector<ImageId>>>(j, "history", ctx);
  const json& labels = detail::field(j, "labels", ctx);
  if (!labels.is_object()) throw DataError(ctx + ".labels: expected an object");
  for (const auto& [id, arr] : labels.items()) {
    auto& boxes = s.labels[id];
    for (std::size_t g = 0; g < arr.size(); ++g) {
      const std::string gctx = ctx + ".labels." + id + "[" + std::to_string(g) + "]";
      BBox b = detail::box_from(detail::field(arr[g], "box", gctx), gctx + ".box");
      if (!b.is_valid()) throw DataError(gctx + ".box: invalid");
      boxes.push_back({b, get<std::size_t>(arr[g], "class", gctx)});
    }
  }
  const json& store = detail::field(j, "pair_store", ctx);
  if (!store.is_null()) {
    s.pair_store.emplace();
    for (std::size_t i = 0; i < store.size(); ++i) {
      const std::string pctx = detail::at(ctx, "pair_store", i);
      s.pair_store->add({get<std::string>(store[i], "image_id", pctx), get<std::size_t>(store[i], "small", pctx),
                         get<std::size_t>(store[i], "large", pctx), get<Feature>(store[i], "feature", pctx)});
    }
  }
  const json& rng = detail::field(j, "rng", ctx);
  s.rng = Rng::restore(get<std::uint64_t>(rng, "seed", ctx + ".rng"), get<std::uint64_t>(rng, "draws", ctx + ".rng"));
  return s;
}

inline void save_state(const std::filesystem::path& path, const CycleState& s, const std::string& cfg_hash,
                       std::uint64_t pool_hash) {
  write_json(path, state_to_json(s, cfg_hash, pool_hash));
}

inline CycleState resume(const std::filesystem::path& path, std::uint64_t pool_hash) {
  return state_from_json(read_json(path), pool_hash, path.string());
}

// ----------------------------------------------------------------- metrics

inline json metrics_to_json(const CycleMetrics& m) {
  return {{"cycle", m.cycle},       {"n_annotated", m.n_annotated}, {"strategy", m.strategy},
          {"seed", m.seed},         {"ap50", m.ap50},               {"ap", m.ap},
          {"bib_count", m.bib_count}, {"wall_ms", m.wall_ms},       {"class_counts", m.class_counts}};
}

inline CycleMetrics metrics_from_json(const json& j, const std::string& ctx) {
  using detail::get;
  CycleMetrics m;
  m.cycle = get<std::size_t>(j, "cycle", ctx);
  m.n_annotated = get<std::size_t>(j, "n_annotated", ctx);
  m.strategy = get<std::string>(j, "strategy", ctx);
  m.seed = get<std::uint64_t>(j, "seed", ctx);
  m.ap50 = get<double>(j, "ap50", ctx);
  m.ap = get<double>(j, "ap", ctx);
  m.bib_count = get<std::size_t>(j, "bib_count", ctx);
  m.wall_ms = get<double>(j, "wall_ms", ctx);
  m.class_counts = get<std::vector<std::size_t>>(j, "class_counts", ctx);
  return m;
}

inline std::string metrics_csv(const std::vector<CycleMetrics>& rows, const std::string& cfg_hash) {
  std::string out = std::string("# format=") + kMetricsFormat + " config_hash=" + cfg_hash + "\n";
  out += "cycle,n_annotated,strategy,seed,ap50,ap,bib_count,wall_ms\n";
  char line[256];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%zu,%zu,%s,%llu,%.6f,%.6f,%zu,%.3f\n", r.cycle, r.n_annotated,
                  r.strategy.c_str(), static_cast<unsigned long long>(r.seed), r.ap50, r.ap, r.bib_count, r.wall_ms);
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------- manifest

struct RunManifest {
  ExperimentConfig config;
  std::string config_hash;
  std::string dataset_hash;
  std::string test_hash;
  std::vector<CycleMetrics> rows;
  std::vector<std::string> selection_files;  // one per completed cycle >= 1
  bool complete = false;
};

inline json manifest_to_json(const RunManifest& m) {
  json rows = json::array();
  for (const auto& r : m.rows) rows.push_back(metrics_to_json(r));
  return {{"format", kManifestFormat},
          {"config", config_to_json(m.config)},
          {"config_hash", m.config_hash},
          {"seed", m.config.seed},
          {"dataset_hash", m.dataset_hash},
          {"test_hash", m.test_hash},
          {"metrics", "metrics.csv"},
          {"state", "state.json"},
          {"selections", m.selection_files},
          {"rows", rows},
          {"status", m.complete ? "complete" : "running"}};
}

inline RunManifest manifest_from_json(const json& j, const std::string& ctx = "manifest") {
  using detail::get;
  detail::check_format(j, kManifestFormat, ctx);
  RunManifest m;
  m.config = config_from_json(detail::field(j, "config", ctx), ctx + ".config");
  m.config_hash = get<std::string>(j, "config_hash", ctx);
  if (m.config_hash != config_hash(m.config)) throw DataError(ctx + ": config hash does not match the stored config");
  m.dataset_hash = get<std::string>(j, "dataset_hash", ctx);
  m.test_hash = get<std::string>(j, "test_hash", ctx);
  m.selection_files = get<std::vector<std::string>>(j, "selections", ctx);
  const json& rows = detail::field(j, "rows", ctx);
  for (std::size_t i = 0; i < rows.size(); ++i) m.rows.push_back(metrics_from_json(rows[i], detail::at(ctx, "rows", i)));
  const auto status = get<std::string>(j, "status", ctx);
  if (status != "complete" && status != "running") throw DataError(ctx + ".status: unknown value '" + status + "'");
  m.complete = status == "complete";
  return m;
}

}  // namespace alsim::io
