#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "alsim/detections.hpp"
#include "alsim/error.hpp"
#include "alsim/geometry.hpp"
#include "alsim/rng.hpp"

namespace alsim {

// Thresholds of the box-in-box test: the large box must be at least `mu`
// times the area of the small one and cover at least `delta` of it.
struct BibParams {
  double mu = 3.0;
  double delta = 0.8;

  void validate() const {
    if (!(mu > 1.0) || !std::isfinite(mu)) throw std::invalid_argument("bib: mu must be > 1");
    if (!(delta > 0.0 && delta <= 1.0)) throw std::invalid_argument("bib: delta must be in (0, 1]");
  }
  friend bool operator==(const BibParams&, const BibParams&) = default;
};

// An ordered (small, large) pair of same-image detections. The feature is the
// small box's region feature followed by the large box's.
struct BibPair {
  ImageId image_id;
  std::size_t small_index = 0;
  std::size_t large_index = 0;
  Feature feature;
  friend bool operator==(const BibPair&, const BibPair&) = default;
};

inline bool is_bib(const Detection& small, const Detection& large, const BibParams& params) {
  if (small.class_id != large.class_id) return false;
  if (area(large.box) / area(small.box) < params.mu) return false;
  return ioa_first(small.box, large.box) >= params.delta;
}

// All ordered pairs (i, j), i != j, with is_bib(dets[i], dets[j]); sorted by
// (i, j).
inline std::vector<BibPair> find_bib(const ImageId& image_id, std::span<const Detection> dets,
                                     const BibParams& params) {
  std::vector<BibPair> pairs;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (std::size_t j = 0; j < dets.size(); ++j) {
      if (i == j || !is_bib(dets[i], dets[j], params)) continue;
      BibPair p{image_id, i, j, {}};
      p.feature.reserve(dets[i].feature.size() + dets[j].feature.size());
      p.feature.insert(p.feature.end(), dets[i].feature.begin(), dets[i].feature.end());
      p.feature.insert(p.feature.end(), dets[j].feature.begin(), dets[j].feature.end());
      pairs.push_back(std::move(p));
    }
  }
  return pairs;
}

inline std::vector<BibPair> find_bib(const ImagePredictions& im, const BibParams& params) {
  return find_bib(im.image_id, im.detections, params);
}

// Pairs of already-annotated images. Grows monotonically over an experiment
// and ignores re-insertion of a pair it already holds.
class PairStore {
 public:
  bool add(BibPair pair) {
    auto key = std::make_tuple(pair.image_id, pair.small_index, pair.large_index);
    if (!keys_.insert(std::move(key)).second) return false;
    pairs_.push_back(std::move(pair));
    return true;
  }

  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }
  const std::vector<BibPair>& pairs() const { return pairs_; }

  friend bool operator==(const PairStore& a, const PairStore& b) { return a.pairs_ == b.pairs_; }

 private:
  std::vector<BibPair> pairs_;
  std::set<std::tuple<ImageId, std::size_t, std::size_t>> keys_;
};

struct BibCount {
  std::size_t total = 0;
  std::map<ImageId, std::size_t> per_image;
};

inline BibCount count_bib(const PredictionSet& preds, const BibParams& params) {
  BibCount out;
  for (const auto& [id, im] : preds.images) {
    const std::size_t n = find_bib(im, params).size();
    out.per_image[id] = n;
    out.total += n;
  }
  return out;
}

struct BibSelection {
  std::vector<ImageId> selected;
  // How many of `selected` (a prefix) came from pair sampling; the rest are
  // the uniform fill used when too few images contain pairs.
  std::size_t from_pairs = 0;
};

// Diverse-mistake selection over the weakly-labelled pool.
//
// Every pool image's pairs are discovered first. While the budget is not met
// and some unselected image has pairs: if the store is empty the image with
// the most pairs is taken (uniform among ties); otherwise each candidate pair
// is weighted by its Euclidean distance to the nearest stored pair and one
// pair is drawn proportionally to that weight, selecting its image. The
// chosen image's pairs all enter the store. Remaining budget is filled
// uniformly at random from the rest of the pool.
//
// Nearest-store distances are cached per pair and only updated against newly
// stored entries; min is exact so this matches full recomputation bit for bit.
inline BibSelection bib_select(const PredictionSet& preds, std::span<const ImageId> pool,
                               std::size_t budget, PairStore& store, const BibParams& params, Rng& rng) {
  if (budget == 0) throw std::invalid_argument("bib_select: budget must be >= 1");
  if (pool.empty()) throw std::invalid_argument("bib_select: pool of weakly-labelled images is empty");
  params.validate();

  std::vector<ImageId> ids(pool.begin(), pool.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

  struct ImagePairs {
    std::size_t begin = 0;
    std::size_t end = 0;
    bool taken = false;
    std::size_t count() const { return end - begin; }
  };
  std::vector<ImagePairs> images(ids.size());
  std::vector<BibPair> pairs;
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto found = find_bib(preds.at(ids[i]), params);
    images[i].begin = pairs.size();
    for (auto& p : found) {
      pairs.push_back(std::move(p));
      owner.push_back(i);
    }
    images[i].end = pairs.size();
  }

  std::vector<double> nearest(pairs.size(), std::numeric_limits<double>::infinity());
  std::size_t synced = 0;
  auto refresh = [&] {
    const auto& stored = store.pairs();
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      if (images[owner[p]].taken) continue;
      for (std::size_t k = synced; k < stored.size(); ++k) {
        nearest[p] = std::min(nearest[p], euclidean_distance(pairs[p].feature, stored[k].feature));
      }
    }
    synced = stored.size();
  };

  BibSelection out;
  auto take = [&](std::size_t i) {
    images[i].taken = true;
    out.selected.push_back(ids[i]);
    for (std::size_t p = images[i].begin; p < images[i].end; ++p) store.add(pairs[p]);
  };

  while (out.selected.size() < budget) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (!images[i].taken && images[i].count() > 0) candidates.push_back(i);
    }
    if (candidates.empty()) break;

    if (store.empty()) {
      std::size_t most = 0;
      for (auto i : candidates) most = std::max(most, images[i].count());
      std::vector<std::size_t> tied;
      for (auto i : candidates) {
        if (images[i].count() == most) tied.push_back(i);
      }
      take(tied[rng.index(tied.size())]);
    } else {
      refresh();
      std::vector<std::size_t> live;
      std::vector<double> weights;
      for (auto i : candidates) {
        for (std::size_t p = images[i].begin; p < images[i].end; ++p) {
          live.push_back(p);
          weights.push_back(nearest[p]);
        }
      }
      take(owner[live[sample_proportional(weights, rng)]]);
    }
  }
  out.from_pairs = out.selected.size();

  if (out.selected.size() < budget) {
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (!images[i].taken) rest.push_back(i);
    }
    while (out.selected.size() < budget && !rest.empty()) {
      const std::size_t k = rng.index(rest.size());
      take(rest[k]);
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(k));
    }
  }
  return out;
}

}  // namespace alsim
