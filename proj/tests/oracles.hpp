#pragma once

// Independent reference implementations used as test oracles. They favour
// plain loops and recomputation over the library's bookkeeping.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "alsim/alsim.hpp"

namespace alsim::fixtures {

// exp(x_i) / sum_j exp(x_j), without a max shift.
inline std::vector<double> plain_softmax(const std::vector<double>& x) {
  double s = 0;
  for (double v : x) s += std::exp(v);
  std::vector<double> out;
  for (double v : x) out.push_back(std::exp(v) / s);
  return out;
}

// Argmax over candidates of u_i * min distance to the references, recomputed
// from scratch at every step. With no references the first pick replays the
// seeded uniform draw.
inline std::vector<ImageId> core_set_oracle(const FeatureMap& f, const std::map<ImageId, double>* u,
                                            std::vector<ImageId> pool, std::vector<ImageId> refs, std::size_t budget,
                                            std::uint64_t seed) {
  std::sort(pool.begin(), pool.end());
  std::vector<ImageId> out;
  auto dist = [&](const ImageId& a, const ImageId& b) {
    double s = 0;
    for (std::size_t k = 0; k < f.at(a).size(); ++k) s += std::pow(f.at(a)[k] - f.at(b)[k], 2);
    return std::sqrt(s);
  };
  if (refs.empty()) {
    Rng rng(seed);
    const ImageId first = pool[rng.index(pool.size())];
    out.push_back(first);
    refs.push_back(first);
  }
  while (out.size() < std::min(budget, pool.size())) {
    ImageId best;
    double best_v = -1;
    for (const auto& id : pool) {
      if (std::find(out.begin(), out.end(), id) != out.end()) continue;
      double m = std::numeric_limits<double>::infinity();
      for (const auto& r : refs) m = std::min(m, dist(id, r));
      const double v = (u ? u->at(id) : 1.0) * m;
      if (v > best_v) {
        best_v = v;
        best = id;
      }
    }
    out.push_back(best);
    refs.push_back(best);
  }
  return out;
}

// Ranks by explicit counting, then suppresses in rank order.
inline std::vector<PseudoBox> pseudo_box_reference(const std::vector<BBox>& regions,
                                                   const std::vector<ClassColumn>& cols) {
  std::vector<PseudoBox> out;
  const std::size_t r = regions.size();
  const auto keep =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.15 * static_cast<double>(r) - 1e-9)));
  for (const auto& col : cols) {
    std::vector<std::size_t> by_rank(r);
    for (std::size_t i = 0; i < r; ++i) {
      std::size_t rank = 0;
      for (std::size_t j = 0; j < r; ++j) {
        if (col.scores[j] > col.scores[i] || (col.scores[j] == col.scores[i] && j < i)) ++rank;
      }
      by_rank[rank] = i;
    }
    std::vector<std::size_t> kept;
    for (std::size_t k = 0; k < std::min(keep, r); ++k) {
      const std::size_t i = by_rank[k];
      bool ok = true;
      for (auto j : kept) ok = ok && iou(regions[i], regions[j]) < 0.3;
      if (ok) kept.push_back(i);
    }
    for (auto i : kept) out.push_back({regions[i], col.class_id, i});
  }
  return out;
}

// Empty when `s` is what the default sampling configuration must produce for
// these proposals; otherwise a description of the first difference. The
// positive subset is random when over-supplied, so only its size and
// membership are checked then.
inline std::string check_sampling(const std::vector<Proposal>& ps, const std::vector<GroundTruthBox>& gt,
                                  const ProposalSample& s) {
  std::vector<std::size_t> pos, neg;
  std::vector<double> score(ps.size(), 0.0);
  std::vector<bool> is_neg(ps.size(), false);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    double best = 0;
    for (const auto& g : gt) best = std::max(best, iou(ps[i].box, g.box));
    if (best > 0.5) pos.push_back(i);
    if (best > 0.3) continue;
    neg.push_back(i);
    is_neg[i] = true;
    const std::size_t width = ps[i].head_scores.front().size();
    std::vector<double> mean(width, 0.0);
    for (const auto& h : ps[i].head_scores) {
      for (std::size_t c = 0; c < width; ++c) mean[c] += h[c] / static_cast<double>(ps[i].head_scores.size());
    }
    const auto sm = plain_softmax(mean);
    score[i] = *std::max_element(sm.begin(), sm.end() - 1);
  }
  const std::size_t n_pos = std::min<std::size_t>(pos.size(), 128);
  if (s.positives.size() != n_pos) return "positive count " + std::to_string(s.positives.size());
  for (std::size_t k = 0; k < s.positives.size(); ++k) {
    if (!std::binary_search(pos.begin(), pos.end(), s.positives[k])) return "sampled a non-positive";
    if (k > 0 && s.positives[k] <= s.positives[k - 1]) return "positives not distinct and sorted";
  }
  if (pos.size() <= 128 && s.positives != pos) return "positives differ";
  std::stable_sort(neg.begin(), neg.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  neg.resize(std::min(neg.size(), 512 - n_pos));
  if (s.negatives.size() != neg.size()) return "negative count " + std::to_string(s.negatives.size());
  for (std::size_t k = 0; k < neg.size(); ++k) {
    if (std::abs(score[s.negatives[k]] - score[neg[k]]) > 1e-12) return "negative ranking differs";
    if (s.negatives[k] >= ps.size() || !is_neg[s.negatives[k]]) return "sampled a non-negative";
  }
  if (s.positive_shortfall != (pos.size() < 128)) return "positive shortfall flag";
  if (s.total_shortfall != (n_pos + neg.size() < 512)) return "total shortfall flag";
  return "";
}

}  // namespace alsim::fixtures
