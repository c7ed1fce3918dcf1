#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "alsim/bib.hpp"
#include "alsim/detections.hpp"
#include "alsim/error.hpp"
#include "alsim/rng.hpp"

namespace alsim {

enum class StrategyKind { u_random, b_random, entropy_max, entropy_sum, loss, core_set, core_set_ent, bib };

inline constexpr std::array<std::string_view, 5> kLossKeys = {"mil", "ref1", "ref2", "ref3", "ref_sum"};

inline std::string_view to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::u_random: return "u-random";
    case StrategyKind::b_random: return "b-random";
    case StrategyKind::entropy_max: return "entropy-max";
    case StrategyKind::entropy_sum: return "entropy-sum";
    case StrategyKind::loss: return "loss";
    case StrategyKind::core_set: return "core-set";
    case StrategyKind::core_set_ent: return "core-set-ent";
    case StrategyKind::bib: return "bib";
  }
  return "?";
}

// Accepts both the dashed names and their underscore spellings.
inline StrategyKind parse_strategy(std::string_view name) {
  std::string s(name);
  std::replace(s.begin(), s.end(), '_', '-');
  if (s == "coreset") s = "core-set";
  if (s == "coreset-ent") s = "core-set-ent";
  for (auto k : {StrategyKind::u_random, StrategyKind::b_random, StrategyKind::entropy_max,
                 StrategyKind::entropy_sum, StrategyKind::loss, StrategyKind::core_set,
                 StrategyKind::core_set_ent, StrategyKind::bib}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown strategy '" + std::string(name) + "'");
}

struct StrategyConfig {
  StrategyKind kind = StrategyKind::u_random;
  BibParams bib;
  std::string loss_key = "ref3";

  void validate() const {
    if (std::find(kLossKeys.begin(), kLossKeys.end(), loss_key) == kLossKeys.end()) {
      throw std::invalid_argument("unknown loss key '" + loss_key + "'");
    }
    bib.validate();
  }
};

struct UncertaintyScore {
  ImageId image_id;
  double u = 0.0;
};

// Shannon entropy (natural log) of a class-probability vector, 0 ln 0 = 0.
inline double box_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v < 0.0 || !std::isfinite(v)) throw std::invalid_argument("box_entropy: negative or non-finite probability");
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

// Both poolings score an image without detections as 0.
inline double entropy_max_score(const ImagePredictions& p) {
  double best = 0.0;
  for (const auto& d : p.detections) best = std::max(best, box_entropy(d.class_probs));
  return best;
}

inline double entropy_sum_score(const ImagePredictions& p) {
  double sum = 0.0;
  for (const auto& d : p.detections) sum += box_entropy(d.class_probs);
  return sum;
}

// The `budget` highest scores; equal scores resolve to the lowest image id.
inline std::vector<ImageId> select_topk(std::vector<UncertaintyScore> scores, std::size_t budget) {
  std::sort(scores.begin(), scores.end(), [](const UncertaintyScore& a, const UncertaintyScore& b) {
    if (a.u != b.u) return a.u > b.u;
    return a.image_id < b.image_id;
  });
  std::vector<ImageId> out;
  for (std::size_t i = 0; i < scores.size() && i < budget; ++i) out.push_back(scores[i].image_id);
  return out;
}

namespace detail {

inline std::vector<ImageId> sorted_unique(std::span<const ImageId> ids) {
  std::vector<ImageId> out(ids.begin(), ids.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace detail

// Uniform sample without replacement. The pool is sorted first so the result
// does not depend on caller ordering.
inline std::vector<ImageId> u_random(std::span<const ImageId> pool, std::size_t budget, Rng& rng) {
  std::vector<ImageId> ids = detail::sorted_unique(pool);
  const std::size_t n = std::min(budget, ids.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.index(ids.size() - i);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(n);
  return ids;
}

// One iteration of b_random, for auditing.
struct BRandomStep {
  std::vector<std::size_t> counts_before;  // per class, over S and earlier picks
  std::optional<std::size_t> target_class;  // none when no class was reachable
  ImageId picked;
};

// Class-balanced random sampling. Each step targets the least-represented
// class among the weak labels of the annotated set plus earlier picks (ties
// broken uniformly at random); if no remaining pool image contains it the next
// least-represented class is tried. A uniformly random pool image containing
// the target class is then picked.
inline std::vector<ImageId> b_random(std::span<const ImageId> pool, std::size_t budget, const Dataset& dataset,
                                     std::span<const ImageId> annotated, Rng& rng,
                                     std::vector<BRandomStep>* trace = nullptr) {
  const std::size_t num_classes = dataset.num_classes();
  std::vector<ImageId> remaining = detail::sorted_unique(pool);
  std::vector<std::size_t> counts(num_classes, 0);
  auto count_image = [&](const ImageId& id) {
    const auto& wl = dataset.at(id).weak_label;
    for (std::size_t c = 0; c < num_classes; ++c) counts[c] += wl.has(c) ? 1 : 0;
  };
  for (const auto& id : annotated) count_image(id);
  for (const auto& id : remaining) (void)dataset.at(id);

  std::vector<ImageId> out;
  while (out.size() < budget && !remaining.empty()) {
    BRandomStep step;
    step.counts_before = counts;

    std::vector<std::size_t> open(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) open[c] = c;
    std::vector<std::size_t> holders;
    while (!open.empty()) {
      std::size_t least = std::numeric_limits<std::size_t>::max();
      for (auto c : open) least = std::min(least, counts[c]);
      std::vector<std::size_t> tied;
      for (auto c : open) {
        if (counts[c] == least) tied.push_back(c);
      }
      const std::size_t cls = tied[rng.index(tied.size())];
      for (std::size_t k = 0; k < remaining.size(); ++k) {
        if (dataset.at(remaining[k]).weak_label.has(cls)) holders.push_back(k);
      }
      if (!holders.empty()) {
        step.target_class = cls;
        break;
      }
      open.erase(std::find(open.begin(), open.end(), cls));
    }
    if (holders.empty()) {
      // Only images without any present class are left.
      for (std::size_t k = 0; k < remaining.size(); ++k) holders.push_back(k);
    }

    const std::size_t k = holders[rng.index(holders.size())];
    step.picked = remaining[k];
    count_image(remaining[k]);
    out.push_back(remaining[k]);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(k));
    if (trace != nullptr) trace->push_back(std::move(step));
  }
  return out;
}

using FeatureMap = std::map<ImageId, Feature>;

namespace detail {

// Greedy farthest-first traversal with a per-candidate multiplier on the
// nearest-reference distance. With no reference points the first pick is
// uniformly random; argmax ties go to the lowest image id.
inline std::vector<ImageId> weighted_core_set(const FeatureMap& features, const std::map<ImageId, double>* weight,
                                              std::span<const ImageId> pool, std::span<const ImageId> annotated,
                                              std::size_t budget, Rng& rng) {
  auto feature_of = [&](const ImageId& id) -> const Feature& {
    auto it = features.find(id);
    if (it == features.end()) throw DataError("core-set: no feature for image '" + id + "'");
    return it->second;
  };
  std::vector<ImageId> ids = sorted_unique(pool);
  std::vector<double> multiplier(ids.size(), 1.0);
  if (weight != nullptr) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto it = weight->find(ids[i]);
      if (it == weight->end()) throw DataError("core-set-ent: no uncertainty for image '" + ids[i] + "'");
      if (!(it->second >= 0.0)) throw DataError("core-set-ent: negative uncertainty for image '" + ids[i] + "'");
      multiplier[i] = it->second;
    }
  }

  std::vector<double> nearest(ids.size(), std::numeric_limits<double>::infinity());
  std::vector<bool> taken(ids.size(), false);
  auto absorb = [&](const Feature& ref) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!taken[i]) nearest[i] = std::min(nearest[i], euclidean_distance(feature_of(ids[i]), ref));
    }
  };
  for (const auto& id : annotated) absorb(feature_of(id));

  std::vector<ImageId> out;
  const std::size_t n = std::min(budget, ids.size());
  if (n > 0 && annotated.empty()) {
    const std::size_t first = rng.index(ids.size());
    taken[first] = true;
    out.push_back(ids[first]);
    absorb(feature_of(ids[first]));
  }
  while (out.size() < n) {
    std::size_t best = ids.size();
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (taken[i]) continue;
      const double score = multiplier[i] * nearest[i];
      if (best == ids.size() || score > best_score) {
        best = i;
        best_score = score;
      }
    }
    taken[best] = true;
    out.push_back(ids[best]);
    absorb(feature_of(ids[best]));
  }
  return out;
}

}  // namespace detail

// Greedy core-set: repeatedly the pool image farthest from S and the picks so far.
inline std::vector<ImageId> core_set_greedy(const FeatureMap& features, std::span<const ImageId> pool,
                                            std::span<const ImageId> annotated, std::size_t budget, Rng& rng) {
  return detail::weighted_core_set(features, nullptr, pool, annotated, budget, rng);
}

// Core-set with each candidate's nearest distance scaled by its uncertainty.
inline std::vector<ImageId> core_set_ent(const FeatureMap& features, const std::map<ImageId, double>& uncertainty,
                                         std::span<const ImageId> pool, std::span<const ImageId> annotated,
                                         std::size_t budget, Rng& rng) {
  return detail::weighted_core_set(features, &uncertainty, pool, annotated, budget, rng);
}

inline std::vector<ImageId> loss_rank(const PredictionSet& preds, std::span<const ImageId> pool,
                                      const std::string& key, std::size_t budget) {
  std::vector<UncertaintyScore> scores;
  for (const auto& id : detail::sorted_unique(pool)) {
    const auto& losses = preds.at(id).weak_loss;
    auto it = losses.find(key);
    if (it == losses.end()) throw DataError("loss: image '" + id + "' has no '" + key + "' loss");
    scores.push_back({id, it->second});
  }
  return select_topk(std::move(scores), budget);
}

// Everything a strategy may read when choosing A^t.
struct SelectionInputs {
  const PredictionSet& predictions;    // covers the pool, and S for feature-based strategies
  std::span<const ImageId> pool;       // W^{t-1}
  std::span<const ImageId> annotated;  // S^{t-1}
  const Dataset* dataset = nullptr;    // weak labels, read by b-random only
  PairStore* store = nullptr;          // required by bib
};

inline std::vector<ImageId> select_images(const StrategyConfig& cfg, const SelectionInputs& in, std::size_t budget,
                                          Rng& rng) {
  if (budget == 0) throw std::invalid_argument("budget must be >= 1");
  if (in.pool.empty()) throw std::invalid_argument("pool of weakly-labelled images is empty");
  const auto pool = detail::sorted_unique(in.pool);

  auto entropy_scores = [&](auto&& pooling) {
    std::vector<UncertaintyScore> scores;
    for (const auto& id : pool) scores.push_back({id, pooling(in.predictions.at(id))});
    return scores;
  };
  auto features_for = [&]() {
    FeatureMap features;
    for (const auto& id : pool) features.emplace(id, image_feature_or_default(in.predictions.at(id)));
    for (const auto& id : in.annotated) features.emplace(id, image_feature_or_default(in.predictions.at(id)));
    return features;
  };

  switch (cfg.kind) {
    case StrategyKind::u_random:
      return u_random(pool, budget, rng);
    case StrategyKind::b_random:
      if (in.dataset == nullptr) throw std::invalid_argument("b-random needs the dataset's weak labels");
      return b_random(pool, budget, *in.dataset, in.annotated, rng);
    case StrategyKind::entropy_max:
      return select_topk(entropy_scores(entropy_max_score), budget);
    case StrategyKind::entropy_sum:
      return select_topk(entropy_scores(entropy_sum_score), budget);
    case StrategyKind::loss:
      return loss_rank(in.predictions, pool, cfg.loss_key, budget);
    case StrategyKind::core_set:
      return core_set_greedy(features_for(), pool, in.annotated, budget, rng);
    case StrategyKind::core_set_ent: {
      std::map<ImageId, double> u;
      for (const auto& id : pool) u.emplace(id, entropy_max_score(in.predictions.at(id)));
      return core_set_ent(features_for(), u, pool, in.annotated, budget, rng);
    }
    case StrategyKind::bib: {
      if (in.store == nullptr) throw std::invalid_argument("bib needs a pair store");
      return bib_select(in.predictions, pool, budget, *in.store, cfg.bib, rng).selected;
    }
  }
  throw std::logic_error("unhandled strategy");
}

}  // namespace alsim
