#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "alsim/detections.hpp"
#include "alsim/error.hpp"
#include "alsim/rng.hpp"

namespace alsim {

struct SyntheticDatasetSpec {
  std::size_t num_images = 500;
  std::size_t num_classes = 5;
  std::string id_prefix = "img";
  double width = 500.0;
  double height = 400.0;
  double min_side = 90.0;
  double max_side = 150.0;
};

// Random scenes of 1-2 classes with 1-3 instances each. Instances of one
// class never overlap by IoU >= 0.3 or cover half of each other, and sides
// stay within [min_side, max_side] so that no ground-truth box is 3x another.
inline Dataset make_synthetic_dataset(const SyntheticDatasetSpec& spec, std::uint64_t seed) {
  if (spec.num_classes == 0) throw std::invalid_argument("synthetic dataset needs at least one class");
  Rng rng(seed);
  std::vector<std::string> classes;
  for (std::size_t c = 0; c < spec.num_classes; ++c) classes.push_back("class" + std::to_string(c));

  std::vector<ImageRecord> images;
  for (std::size_t i = 0; i < spec.num_images; ++i) {
    char id[64];
    std::snprintf(id, sizeof id, "%s%05zu", spec.id_prefix.c_str(), i);
    ImageRecord im{id, spec.width, spec.height, {std::vector<std::uint8_t>(spec.num_classes, 0)}, {}};

    const std::size_t n_cls = (spec.num_classes > 1 && rng.uniform() < 0.35) ? 2 : 1;
    std::vector<std::size_t> cls;
    while (cls.size() < n_cls) {
      const std::size_t c = rng.index(spec.num_classes);
      if (std::find(cls.begin(), cls.end(), c) == cls.end()) cls.push_back(c);
    }
    for (auto c : cls) {
      im.weak_label.present[c] = 1;
      const std::size_t n_obj = 1 + rng.index(3);
      std::vector<BBox> placed;
      for (std::size_t k = 0; k < n_obj; ++k) {
        for (int attempt = 0; attempt < 50; ++attempt) {
          const double w = spec.min_side + rng.uniform() * (spec.max_side - spec.min_side);
          const double h = spec.min_side + rng.uniform() * (spec.max_side - spec.min_side);
          const double x = rng.uniform() * (spec.width - w);
          const double y = rng.uniform() * (spec.height - h);
          BBox b(x, y, x + w, y + h);
          bool ok = true;
          for (const auto& other : placed) {
            if (iou(b, other) >= 0.3 || ioa_first(b, other) >= 0.5 || ioa_first(other, b) >= 0.5) ok = false;
          }
          if (!ok) continue;
          placed.push_back(b);
          im.gt.push_back({b, c});
          break;
        }
      }
    }
    images.push_back(std::move(im));
  }
  return Dataset(std::move(classes), std::move(images));
}

// Failure model of the synthetic detector. Rates are the per-object
// probabilities of each failure for an object of average difficulty before
// any annotation; `fidelity_gain` controls how fast annotation suppresses
// them.
struct SyntheticParams {
  double part_rate = 0.0;
  double group_rate = 0.0;
  double miss_rate = 0.0;
  double spurious_rate = 0.0;
  double fidelity_gain = 0.0;
  double feature_noise = 0.3;
  std::size_t feature_dim = 16;
  // Relative localisation noise of correct boxes, as a fraction of box size.
  double box_jitter = 0.0;
  // Part boxes are built to satisfy is_bib against their object under these.
  double part_mu = 3.0;
  double part_delta = 0.8;

  void validate() const {
    for (double r : {part_rate, group_rate, miss_rate, spurious_rate}) {
      if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("synthetic: failure rates must be in [0, 1]");
    }
    if (!(fidelity_gain >= 0.0)) throw std::invalid_argument("synthetic: fidelity_gain must be >= 0");
    if (!(feature_noise >= 0.0)) throw std::invalid_argument("synthetic: feature_noise must be >= 0");
    if (!(box_jitter >= 0.0 && box_jitter < 0.5)) throw std::invalid_argument("synthetic: box_jitter must be in [0, 0.5)");
    if (feature_dim == 0) throw std::invalid_argument("synthetic: feature_dim must be >= 1");
    if (!(part_mu > 1.0) || !(part_delta > 0.0 && part_delta <= 1.0)) {
      throw std::invalid_argument("synthetic: invalid part geometry thresholds");
    }
  }
};

// Stand-in for a detector fine-tuned on the annotated set S.
//
// Every object carries a latent appearance mode (frequent modes are easy,
// rare ones hard). A failure with base rate r strikes an object of hardness h
// with probability (1 - (1 - r)^h) * decay, where
// decay = 1 / (1 + fidelity_gain * exposure). The exposure of a (class, mode)
// counts the annotated objects of that kind which the initial model gets
// wrong, divided by the mean number of such objects per pool image. A
// uniformly random S of size k therefore has expected exposure k, i.e. the
// detector improves at 1 / (1 + gain * |S|) on average, and faster where a
// strategy annotates actual mistakes. The output depends on the set S only,
// never on the order in which it was built.
//
// All randomness is keyed on (seed, image, object, purpose), so each object
// meets the same draws in every cycle: a failure present with a larger S is
// also present with any subset of it.
class SyntheticDetector {
 public:
  static constexpr std::size_t kModes = 4;
  static constexpr std::array<double, kModes> kModeWeights = {0.5, 0.25, 0.15, 0.10};
  static constexpr std::array<double, kModes> kModeHardness = {0.25, 0.8, 1.6, 2.2};

  struct Fidelity {
    std::vector<double> decay;  // per (class, mode), row-major
    double global_decay = 1.0;
  };

  SyntheticDetector(const Dataset& pool, SyntheticParams params, std::uint64_t seed)
      : pool_(&pool), params_(params), seed_(seed), num_classes_(pool.num_classes()) {
    params_.validate();
    Rng world(hash_combine(seed, 0x5eedf00dULL));
    const std::size_t dim = params_.feature_dim;
    auto vec = [&](double scale) {
      Feature f(dim);
      for (auto& v : f) v = scale * world.normal();
      return f;
    };
    for (std::size_t c = 0; c < num_classes_; ++c) centers_.push_back(vec(2.0));
    for (std::size_t k = 0; k < num_classes_ * kModes; ++k) mode_offsets_.push_back(vec(1.5));
    for (std::size_t r = 0; r < kRoles; ++r) role_offsets_.push_back(vec(1.5));

    std::vector<double> total(num_classes_ * kModes, 0.0);
    for (const auto& im : pool.images()) {
      lessons_.emplace(im.id, initial_failures(im));
      for (const auto& [k, n] : lessons_.at(im.id)) total[k] += static_cast<double>(n);
    }
    frequency_.resize(total.size());
    for (std::size_t k = 0; k < total.size(); ++k) {
      frequency_[k] = pool.size() == 0 ? 0.0 : total[k] / static_cast<double>(pool.size());
    }
  }

  const SyntheticParams& params() const { return params_; }

  std::size_t mode_of(const ImageId& image, std::size_t object) const {
    const double u = hash_uniform(key(image, object, kTagMode));
    double acc = 0.0;
    for (std::size_t m = 0; m < kModes; ++m) {
      acc += kModeWeights[m];
      if (u < acc) return m;
    }
    return kModes - 1;
  }

  Fidelity fidelity(std::span<const ImageId> annotated) const {
    std::vector<double> seen(num_classes_ * kModes, 0.0);
    for (const auto& id : annotated) {
      auto it = lessons_.find(id);
      if (it == lessons_.end()) throw DataError("synthetic: annotated image '" + id + "' is not in the pool");
      for (const auto& [k, n] : it->second) seen[k] += static_cast<double>(n);
    }
    const double n = static_cast<double>(annotated.size());
    Fidelity f;
    f.decay.resize(seen.size());
    for (std::size_t k = 0; k < seen.size(); ++k) {
      const double exposure = frequency_[k] > 0.0 ? seen[k] / frequency_[k] : n;
      f.decay[k] = 1.0 / (1.0 + params_.fidelity_gain * exposure);
    }
    f.global_decay = 1.0 / (1.0 + params_.fidelity_gain * n);
    return f;
  }

  // Predictions for every image of `target` from the model trained with S.
  PredictionSet detect(const Dataset& target, std::span<const ImageId> annotated) const {
    if (target.num_classes() != num_classes_) throw DataError("synthetic: class count differs from the pool dataset");
    const Fidelity f = fidelity(annotated);
    PredictionSet out;
    out.feature_dim = params_.feature_dim;
    for (const auto& im : target.images()) out.images.emplace(im.id, detect_image(im, f));
    return out;
  }

  ImagePredictions detect_image(const ImageRecord& im, const Fidelity& f) const {
    ImagePredictions out;
    out.image_id = im.id;

    // The second member of a grouped pair is absorbed into the group box.
    std::vector<int> group_partner(im.gt.size(), -1);
    std::vector<bool> absorbed(im.gt.size(), false);
    for (const auto& [lead, partner] : group_pairs(im, f)) {
      group_partner[lead] = static_cast<int>(partner);
      absorbed[partner] = true;
    }

    for (std::size_t j = 0; j < im.gt.size(); ++j) {
      if (absorbed[j]) continue;
      const auto& gt = im.gt[j];
      const bool missed = hash_uniform(key(im.id, j, kTagMiss)) < failure_probability(params_.miss_rate, im, j, f);
      const bool part = hash_uniform(key(im.id, j, kTagPart)) < failure_probability(params_.part_rate, im, j, f);
      const bool grouped = group_partner[j] >= 0;
      const bool confused = part || grouped;

      if (!missed) {
        const double conf = confused ? 0.25 + 0.3 * hash_uniform(key(im.id, j, kTagConf)) : 1.0;
        out.detections.push_back(make_detection(jittered(im, j), gt.class_id, conf, im, j, kRoleFull));
      }
      if (part) {
        const double conf = 0.6 + 0.35 * hash_uniform(key(im.id, j, kTagPartConf));
        out.detections.push_back(make_detection(part_box(im, j), gt.class_id, conf, im, j, kRolePart));
      }
      if (grouped) {
        const auto& other = im.gt[static_cast<std::size_t>(group_partner[j])].box;
        BBox merged(std::min(gt.box.x_min(), other.x_min()), std::min(gt.box.y_min(), other.y_min()),
                    std::max(gt.box.x_max(), other.x_max()), std::max(gt.box.y_max(), other.y_max()));
        const double conf = 0.55 + 0.4 * hash_uniform(key(im.id, j, kTagGroupConf));
        out.detections.push_back(make_detection(merged, gt.class_id, conf, im, j, kRoleGroup));
      }
    }

    for (std::size_t slot = 0; slot < kSpuriousSlots; ++slot) {
      const std::size_t tag = 1000 + slot;
      if (!(hash_uniform(key(im.id, tag, kTagSpurious)) < params_.spurious_rate * f.global_decay)) continue;
      const double w = 20.0 + 100.0 * hash_uniform(key(im.id, tag, kTagW));
      const double h = 20.0 + 100.0 * hash_uniform(key(im.id, tag, kTagH));
      const double x = hash_uniform(key(im.id, tag, kTagX)) * std::max(1.0, im.width - w);
      const double y = hash_uniform(key(im.id, tag, kTagY)) * std::max(1.0, im.height - h);
      const std::size_t cls = static_cast<std::size_t>(hash_uniform(key(im.id, tag, kTagClass)) *
                                                       static_cast<double>(num_classes_));
      const double conf = 0.3 + 0.5 * hash_uniform(key(im.id, tag, kTagConf));
      out.detections.push_back(make_detection(BBox(x, y, x + w, y + h), std::min(cls, num_classes_ - 1), conf, im,
                                              tag, kRoleSpurious));
    }

    // Refinement-loss proxies: confusion-weighted sums of (1 - confidence).
    double slack = 0.0;
    for (const auto& d : out.detections) slack += 1.0 - d.confidence;
    out.weak_loss["mil"] = 0.05 + 0.5 * slack;
    out.weak_loss["ref1"] = slack;
    out.weak_loss["ref2"] = 0.9 * slack;
    out.weak_loss["ref3"] = 0.8 * slack;
    out.weak_loss["ref_sum"] = out.weak_loss["ref1"] + out.weak_loss["ref2"] + out.weak_loss["ref3"];
    return out;
  }

 private:
  static constexpr std::size_t kRoles = 4;
  static constexpr std::size_t kRoleFull = 0, kRolePart = 1, kRoleGroup = 2, kRoleSpurious = 3;
  static constexpr std::size_t kSpuriousSlots = 2;
  enum Tag : std::uint64_t {
    kTagMode = 1, kTagMiss, kTagPart, kTagGroup, kTagConf, kTagPartConf, kTagGroupConf, kTagSpurious,
    kTagW, kTagH, kTagX, kTagY, kTagClass, kTagPartScale, kTagPartPos, kTagJitter, kTagFeature
  };

  std::uint64_t key(const ImageId& image, std::size_t object, std::uint64_t tag) const {
    return hash_combine(hash_combine(hash_combine(seed_, fnv1a64(image)), object), tag);
  }

  // (class, mode) -> number of objects in `im` that fail in some way under
  // the initial model.
  std::map<std::size_t, std::size_t> initial_failures(const ImageRecord& im) const {
    Fidelity initial;
    initial.decay.assign(num_classes_ * kModes, 1.0);
    std::vector<bool> failing(im.gt.size(), false);
    for (const auto& [lead, partner] : group_pairs(im, initial)) failing[lead] = failing[partner] = true;
    for (std::size_t j = 0; j < im.gt.size(); ++j) {
      if (hash_uniform(key(im.id, j, kTagMiss)) < failure_probability(params_.miss_rate, im, j, initial) ||
          hash_uniform(key(im.id, j, kTagPart)) < failure_probability(params_.part_rate, im, j, initial)) {
        failing[j] = true;
      }
    }
    std::map<std::size_t, std::size_t> out;
    for (std::size_t j = 0; j < im.gt.size(); ++j) {
      if (failing[j] && im.gt[j].class_id < num_classes_) ++out[im.gt[j].class_id * kModes + mode_of(im.id, j)];
    }
    return out;
  }

  // Same-class instances are paired in order; a pair groups with the
  // lead's group-failure probability.
  std::vector<std::pair<std::size_t, std::size_t>> group_pairs(const ImageRecord& im, const Fidelity& f) const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t c = 0; c < num_classes_; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t j = 0; j < im.gt.size(); ++j) {
        if (im.gt[j].class_id == c) members.push_back(j);
      }
      for (std::size_t k = 0; k + 1 < members.size(); k += 2) {
        const std::size_t lead = members[k];
        if (hash_uniform(key(im.id, lead, kTagGroup)) < failure_probability(params_.group_rate, im, lead, f)) {
          out.emplace_back(lead, members[k + 1]);
        }
      }
    }
    return out;
  }

  double failure_probability(double rate, const ImageRecord& im, std::size_t j, const Fidelity& f) const {
    if (rate <= 0.0) return 0.0;
    const std::size_t m = mode_of(im.id, j);
    const double base = 1.0 - std::pow(1.0 - rate, kModeHardness[m]);
    return base * f.decay[im.gt[j].class_id * kModes + m];
  }

  BBox jittered(const ImageRecord& im, std::size_t j) const {
    const BBox& b = im.gt[j].box;
    if (params_.box_jitter <= 0.0) return b;
    std::array<double, 4> c = b.coords();
    const double size[4] = {b.width(), b.height(), b.width(), b.height()};
    for (std::size_t k = 0; k < 4; ++k) {
      const double u = hash_uniform(hash_combine(key(im.id, j, kTagJitter), k));
      c[k] += params_.box_jitter * size[k] * (2.0 * u - 1.0);
    }
    return BBox(c[0], c[1], c[2], c[3]);
  }

  // A box inside the object with sides scaled by s in [0.25, 0.35] (capped so
  // the area ratio stays >= part_mu), hence fully contained.
  BBox part_box(const ImageRecord& im, std::size_t j) const {
    const BBox& b = im.gt[j].box;
    const double cap = std::min(0.35, 0.98 / std::sqrt(params_.part_mu));
    const double lo = std::min(0.25, cap);
    const double s = lo + (cap - lo) * hash_uniform(key(im.id, j, kTagPartScale));
    const double w = s * b.width();
    const double h = s * b.height();
    const double x = b.x_min() + (b.width() - w) * hash_uniform(hash_combine(key(im.id, j, kTagPartPos), 0));
    const double y = b.y_min() + (b.height() - h) * hash_uniform(hash_combine(key(im.id, j, kTagPartPos), 1));
    return BBox(x, y, x + w, y + h);
  }

  Detection make_detection(const BBox& box, std::size_t cls, double conf, const ImageRecord& im,
                           std::size_t object, std::size_t role) const {
    Detection d{box, cls, conf, std::vector<double>(num_classes_ + 1, 0.0), Feature(params_.feature_dim, 0.0)};
    const double top = 0.5 + 0.5 * conf;
    const double rest = (1.0 - top) / static_cast<double>(num_classes_);
    for (auto& p : d.class_probs) p = rest;
    d.class_probs[cls] = top;

    const std::size_t mode = role == kRoleSpurious ? 0 : mode_of(im.id, object);
    const std::uint64_t noise_key = hash_combine(key(im.id, object, kTagFeature), role);
    for (std::size_t k = 0; k < params_.feature_dim; ++k) {
      double v = centers_[cls][k] + role_offsets_[role][k];
      if (role != kRoleSpurious) v += mode_offsets_[cls * kModes + mode][k];
      v += params_.feature_noise * hash_normal(hash_combine(noise_key, k));
      d.feature[k] = v;
    }
    return d;
  }

  const Dataset* pool_;
  SyntheticParams params_;
  std::uint64_t seed_;
  std::size_t num_classes_;
  std::vector<Feature> centers_;
  std::vector<Feature> mode_offsets_;
  std::vector<Feature> role_offsets_;
  std::map<ImageId, std::map<std::size_t, std::size_t>> lessons_;
  std::vector<double> frequency_;
};

}  // namespace alsim
