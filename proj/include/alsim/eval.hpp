#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "alsim/bib.hpp"
#include "alsim/detections.hpp"
#include "alsim/geometry.hpp"

namespace alsim {

struct MatchResult {
  std::vector<bool> true_positive;                    // per detection
  std::vector<std::optional<std::size_t>> det_match;  // matched GT index per detection
  std::vector<std::optional<std::size_t>> gt_match;   // matching detection per GT
};

// Greedy matching for one image. Detections are visited by descending
// confidence (ties to lower index); each takes the unmatched same-class GT
// with highest IoU >= iou_thr, or becomes a false positive.
inline MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruthBox> gts,
                                    double iou_thr) {
  MatchResult m;
  m.true_positive.assign(dets.size(), false);
  m.det_match.assign(dets.size(), std::nullopt);
  m.gt_match.assign(gts.size(), std::nullopt);

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].confidence > dets[b].confidence; });

  for (auto d : order) {
    std::optional<std::size_t> best;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (m.gt_match[g] || gts[g].class_id != dets[d].class_id) continue;
      const double o = iou(dets[d].box, gts[g].box);
      if (o >= iou_thr && o > best_iou) {
        best = g;
        best_iou = o;
      }
    }
    if (best) {
      m.true_positive[d] = true;
      m.det_match[d] = best;
      m.gt_match[*best] = d;
    }
  }
  return m;
}

// All-point interpolated AP from TP flags already in ranking order.
inline double average_precision_ranked(const std::vector<bool>& ranked_tp, std::size_t n_gt) {
  if (n_gt == 0) return 0.0;
  std::vector<double> recall;
  std::vector<double> precision;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < ranked_tp.size(); ++i) {
    tp += ranked_tp[i] ? 1 : 0;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  // Precision envelope, then sum over recall steps.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct ClassAp {
  std::vector<double> per_class;
  std::vector<std::size_t> n_gt;
  // Mean over classes with at least one GT box; 0 when there are none.
  double mean = 0.0;
};

struct ImageMatch {
  ImageId image_id;
  std::span<const Detection> detections;
  MatchResult match;
};

// Per-class AP over a set of matched images. Detections of a class are ranked
// globally by confidence, ties by (image id, detection index).
inline ClassAp average_precision(std::span<const ImageMatch> images, std::span<const std::size_t> n_gt_per_class) {
  const std::size_t num_classes = n_gt_per_class.size();
  struct Ranked {
    double confidence;
    const ImageId* image;
    std::size_t index;
    bool tp;
  };
  std::vector<std::vector<Ranked>> by_class(num_classes);
  for (const auto& im : images) {
    for (std::size_t d = 0; d < im.detections.size(); ++d) {
      const auto c = im.detections[d].class_id;
      if (c < num_classes) by_class[c].push_back({im.detections[d].confidence, &im.image_id, d, im.match.true_positive[d]});
    }
  }

  ClassAp out;
  out.n_gt.assign(n_gt_per_class.begin(), n_gt_per_class.end());
  out.per_class.assign(num_classes, 0.0);
  std::size_t counted = 0;
  double sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& list = by_class[c];
    std::sort(list.begin(), list.end(), [](const Ranked& a, const Ranked& b) {
      if (a.confidence != b.confidence) return a.confidence > b.confidence;
      if (*a.image != *b.image) return *a.image < *b.image;
      return a.index < b.index;
    });
    std::vector<bool> tp_bits(list.size());
    for (std::size_t i = 0; i < list.size(); ++i) tp_bits[i] = list[i].tp;
    out.per_class[c] = average_precision_ranked(tp_bits, n_gt_per_class[c]);
    if (n_gt_per_class[c] > 0) {
      sum += out.per_class[c];
      ++counted;
    }
  }
  out.mean = counted > 0 ? sum / static_cast<double>(counted) : 0.0;
  return out;
}

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.5 + 0.05 * k);
  return t;
}

struct DetectionMetrics {
  double ap50 = 0.0;
  double ap = 0.0;  // mean over IoU 0.50:0.05:0.95
  std::vector<double> ap50_per_class;
  std::vector<double> ap_per_class;
};

// AP at one IoU threshold over every image of `gt` (missing predictions count
// as no detections).
inline ClassAp evaluate_at(const Dataset& gt, const PredictionSet& preds, double iou_thr) {
  std::vector<std::size_t> n_gt(gt.num_classes(), 0);
  std::vector<ImageMatch> matches;
  matches.reserve(gt.size());
  for (const auto& im : gt.images()) {
    for (const auto& g : im.gt) {
      if (g.class_id < n_gt.size()) ++n_gt[g.class_id];
    }
    auto it = preds.images.find(im.id);
    std::span<const Detection> dets;
    if (it != preds.images.end()) dets = it->second.detections;
    matches.push_back({im.id, dets, match_detections(dets, im.gt, iou_thr)});
  }
  return average_precision(matches, n_gt);
}

inline DetectionMetrics evaluate(const Dataset& gt, const PredictionSet& preds,
                                 std::span<const double> thresholds = {}) {
  std::vector<double> thr(thresholds.begin(), thresholds.end());
  if (thr.empty()) thr = coco_iou_thresholds();
  DetectionMetrics out;
  const ClassAp at50 = evaluate_at(gt, preds, 0.5);
  out.ap50 = at50.mean;
  out.ap50_per_class = at50.per_class;
  out.ap_per_class.assign(gt.num_classes(), 0.0);
  for (double t : thr) {
    const ClassAp r = t == 0.5 ? at50 : evaluate_at(gt, preds, t);
    out.ap += r.mean;
    for (std::size_t c = 0; c < r.per_class.size(); ++c) out.ap_per_class[c] += r.per_class[c];
  }
  out.ap /= static_cast<double>(thr.size());
  for (double& v : out.ap_per_class) v /= static_cast<double>(thr.size());
  return out;
}

struct PairVerification {
  std::size_t pairs = 0;
  std::size_t wrong = 0;  // pairs where the small or the large box is a false positive
  double fraction() const { return pairs == 0 ? 0.0 : static_cast<double>(wrong) / static_cast<double>(pairs); }
};

// `matches` holds the IoU-0.5 match of each pair's image.
inline PairVerification verify_bib_pairs(std::span<const BibPair> pairs,
                                         const std::map<ImageId, MatchResult>& matches) {
  PairVerification out;
  for (const auto& p : pairs) {
    auto it = matches.find(p.image_id);
    if (it == matches.end()) throw DataError("verify_bib_pairs: no match result for image '" + p.image_id + "'");
    const auto& tp = it->second.true_positive;
    if (p.small_index >= tp.size() || p.large_index >= tp.size()) {
      throw DataError("verify_bib_pairs: pair index out of range for image '" + p.image_id + "'");
    }
    ++out.pairs;
    if (!tp[p.small_index] || !tp[p.large_index]) ++out.wrong;
  }
  return out;
}

// Finds every pair in `preds` and checks it against `gt` at IoU 0.5.
inline PairVerification verify_bib_pairs(const Dataset& gt, const PredictionSet& preds, const BibParams& params) {
  std::vector<BibPair> pairs;
  std::map<ImageId, MatchResult> matches;
  for (const auto& [id, im] : preds.images) {
    const auto& rec = gt.at(id);
    matches.emplace(id, match_detections(im.detections, rec.gt, 0.5));
    auto found = find_bib(im, params);
    pairs.insert(pairs.end(), found.begin(), found.end());
  }
  return verify_bib_pairs(pairs, matches);
}

struct BibDecay {
  std::vector<std::size_t> counts;
  bool non_increasing = true;
};

inline BibDecay bib_decay_report(std::span<const PredictionSet> per_cycle, const BibParams& params) {
  BibDecay out;
  for (const auto& preds : per_cycle) out.counts.push_back(count_bib(preds, params).total);
  for (std::size_t t = 1; t < out.counts.size(); ++t) {
    if (out.counts[t] > out.counts[t - 1]) out.non_increasing = false;
  }
  return out;
}

}  // namespace alsim
