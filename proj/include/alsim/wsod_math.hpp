#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "alsim/detections.hpp"
#include "alsim/geometry.hpp"
#include "alsim/rng.hpp"

namespace alsim {

// Two-stream MIL region scores, R regions x C classes, raw logits.
struct RegionScores {
  Eigen::MatrixXd classification;
  Eigen::MatrixXd detection;
};

inline Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double peak = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - peak).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

inline Eigen::MatrixXd column_softmax(const Eigen::MatrixXd& logits) {
  return row_softmax(logits.transpose()).transpose();
}

// s = rowsoftmax(s_c) ⊙ colsoftmax(s_d).
inline Eigen::MatrixXd combine_scores(const RegionScores& rs) {
  if (rs.classification.rows() != rs.detection.rows() || rs.classification.cols() != rs.detection.cols()) {
    throw std::invalid_argument("combine_scores: classification and detection streams differ in shape");
  }
  if (rs.classification.rows() < 1 || rs.classification.cols() < 1) {
    throw std::invalid_argument("combine_scores: need at least one region and one class");
  }
  if (!rs.classification.allFinite() || !rs.detection.allFinite()) {
    throw std::invalid_argument("combine_scores: non-finite logits");
  }
  return row_softmax(rs.classification).cwiseProduct(column_softmax(rs.detection));
}

// Image-level class scores: column sums of the combined region scores.
inline Eigen::VectorXd mil_image_scores(const Eigen::MatrixXd& s) { return s.colwise().sum().transpose(); }

// Mean binary cross-entropy between image scores and the weak label. Scores
// are clamped to [eps, 1 - eps] first since column sums may exceed 1.
inline double mil_bce_loss(const Eigen::VectorXd& phi, const WeakLabel& q, double eps = 1e-6) {
  if (static_cast<std::size_t>(phi.size()) != q.size() || phi.size() == 0) {
    throw std::invalid_argument("mil_bce_loss: score and label lengths differ");
  }
  double total = 0.0;
  for (Eigen::Index c = 0; c < phi.size(); ++c) {
    const double p = std::clamp(phi[c], eps, 1.0 - eps);
    total += q.has(static_cast<std::size_t>(c)) ? std::log(p) : std::log(1.0 - p);
  }
  return -total / static_cast<double>(phi.size());
}

// Number of regions considered per class when mining pseudo-boxes:
// ceil(15% of R), at least one.
inline std::size_t top_fraction_count(std::size_t regions) {
  return std::max<std::size_t>(1, (15 * regions + 99) / 100);
}

struct ClassColumn {
  std::size_t class_id = 0;
  std::vector<double> scores;  // one per region
};

struct PseudoBox {
  BBox box;
  std::size_t class_id = 0;
  std::size_t region_index = 0;
  friend bool operator==(const PseudoBox&, const PseudoBox&) = default;
};

// For each present class: rank regions by score (ties to the lower index),
// keep the top 15%, then drop any region whose IoU with an already-kept
// higher-ranked region is >= 0.3. Results for all classes are concatenated in
// input class order.
inline std::vector<PseudoBox> pseudo_box_generation(std::span<const BBox> regions,
                                                    std::span<const ClassColumn> present_classes) {
  constexpr double kSuppressIou = 0.3;
  std::vector<PseudoBox> out;
  const std::size_t keep = top_fraction_count(regions.size());
  for (const auto& column : present_classes) {
    if (column.scores.size() != regions.size()) {
      throw std::invalid_argument("pseudo_box_generation: score column length differs from region count");
    }
    std::vector<std::size_t> order(regions.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return column.scores[a] > column.scores[b]; });
    order.resize(std::min(keep, order.size()));

    std::vector<std::size_t> kept;
    for (auto r : order) {
      bool clear = true;
      for (auto k : kept) {
        if (iou(regions[r], regions[k]) >= kSuppressIou) {
          clear = false;
          break;
        }
      }
      if (clear) kept.push_back(r);
    }
    for (auto r : kept) out.push_back({regions[r], column.class_id, r});
  }
  return out;
}

struct Proposal {
  BBox box;
  // K refinement heads x (C + 1) class scores; background last.
  std::vector<std::vector<double>> head_scores;
};

struct ProposalSampling {
  std::size_t total = 512;
  std::size_t positives = 128;
  double positive_iou = 0.5;  // strictly greater
  double negative_iou = 0.3;  // less than or equal
  bool hard_negatives = true;
};

struct ProposalSample {
  std::vector<std::size_t> positives;  // proposal indices
  std::vector<std::size_t> negatives;  // in rank order
  bool positive_shortfall = false;
  bool total_shortfall = false;
};

// Object score of a proposal for negative mining: head scores are averaged,
// softmaxed, and the largest non-background probability is returned.
inline double hard_negative_score(const Proposal& p) {
  if (p.head_scores.empty()) throw std::invalid_argument("hard negative mining needs at least one head of scores");
  const std::size_t width = p.head_scores.front().size();
  if (width < 2) throw std::invalid_argument("head scores need at least one object class plus background");
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(1, static_cast<Eigen::Index>(width));
  for (const auto& head : p.head_scores) {
    if (head.size() != width) throw std::invalid_argument("refinement heads disagree on class count");
    for (std::size_t c = 0; c < width; ++c) mean(0, static_cast<Eigen::Index>(c)) += head[c];
  }
  mean /= static_cast<double>(p.head_scores.size());
  const Eigen::MatrixXd probs = row_softmax(mean);
  return probs.leftCols(static_cast<Eigen::Index>(width - 1)).maxCoeff();
}

inline double max_iou(const BBox& box, std::span<const GroundTruthBox> gt) {
  double best = 0.0;
  for (const auto& g : gt) best = std::max(best, iou(box, g.box));
  return best;
}

// Proposal subset for box-supervised training: up to `positives` proposals
// overlapping a ground-truth box by IoU > 0.5 (uniformly subsampled when
// over-supplied) and the remainder from proposals with IoU <= 0.3 against all
// ground truth. Negatives are the highest-ranked by hard_negative_score (ties
// to the lower index), or a uniform sample when hard mining is off. A
// positive shortfall is filled with extra negatives.
inline ProposalSample difficulty_aware_sampling(std::span<const Proposal> proposals,
                                                std::span<const GroundTruthBox> gt, Rng& rng,
                                                const ProposalSampling& cfg = {}) {
  std::vector<std::size_t> pos;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const double overlap = max_iou(proposals[i].box, gt);
    if (overlap > cfg.positive_iou) {
      pos.push_back(i);
    } else if (overlap <= cfg.negative_iou) {
      neg.push_back(i);
    }
  }

  ProposalSample out;
  if (pos.size() > cfg.positives) {
    for (std::size_t i = 0; i < cfg.positives; ++i) {
      const std::size_t j = i + rng.index(pos.size() - i);
      std::swap(pos[i], pos[j]);
    }
    pos.resize(cfg.positives);
    std::sort(pos.begin(), pos.end());
  }
  out.positive_shortfall = pos.size() < cfg.positives;
  out.positives = pos;

  const std::size_t quota = cfg.total - out.positives.size();
  if (cfg.hard_negatives) {
    std::vector<double> score(proposals.size(), 0.0);
    for (auto i : neg) score[i] = hard_negative_score(proposals[i]);
    std::stable_sort(neg.begin(), neg.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    if (neg.size() > quota) neg.resize(quota);
  } else if (neg.size() > quota) {
    for (std::size_t i = 0; i < quota; ++i) {
      const std::size_t j = i + rng.index(neg.size() - i);
      std::swap(neg[i], neg[j]);
    }
    neg.resize(quota);
  }
  out.negatives = std::move(neg);
  out.total_shortfall = out.positives.size() + out.negatives.size() < cfg.total;
  return out;
}

}  // namespace alsim
