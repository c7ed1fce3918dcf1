#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "alsim/error.hpp"
#include "alsim/geometry.hpp"

namespace alsim {

using ImageId = std::string;
using Feature = std::vector<double>;

// Image-level class presence vector q, one entry per dataset class.
struct WeakLabel {
  std::vector<std::uint8_t> present;

  std::size_t size() const { return present.size(); }
  bool has(std::size_t class_id) const {
    return class_id < present.size() && present[class_id] != 0;
  }
  friend bool operator==(const WeakLabel&, const WeakLabel&) = default;
};

struct GroundTruthBox {
  BBox box;
  std::size_t class_id = 0;
  friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

// One predicted box. class_probs has C + 1 entries; the background class is
// the last one. confidence is the detector's ranking score and is carried
// separately from the probabilities.
struct Detection {
  BBox box;
  std::size_t class_id = 0;
  double confidence = 0.0;
  std::vector<double> class_probs;
  Feature feature;
  friend bool operator==(const Detection&, const Detection&) = default;
};

struct ImagePredictions {
  ImageId image_id;
  std::vector<Detection> detections;
  std::optional<Feature> image_feature;
  std::map<std::string, double> weak_loss;
  friend bool operator==(const ImagePredictions&, const ImagePredictions&) = default;
};

// Per-image predictions keyed by image id, as read from one predictions file.
struct PredictionSet {
  std::size_t feature_dim = 0;
  std::map<ImageId, ImagePredictions> images;

  const ImagePredictions& at(const ImageId& id) const {
    auto it = images.find(id);
    if (it == images.end()) throw DataError("no predictions for image '" + id + "'");
    return it->second;
  }
  bool contains(const ImageId& id) const { return images.count(id) != 0; }
  friend bool operator==(const PredictionSet&, const PredictionSet&) = default;
};

struct ImageRecord {
  ImageId id;
  double width = 0.0;
  double height = 0.0;
  WeakLabel weak_label;
  std::vector<GroundTruthBox> gt;
  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<std::string> class_names, std::vector<ImageRecord> images)
      : class_names_(std::move(class_names)), images_(std::move(images)) {
    for (std::size_t i = 0; i < images_.size(); ++i) index_.emplace(images_[i].id, i);
  }

  std::size_t num_classes() const { return class_names_.size(); }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::vector<ImageRecord>& images() const { return images_; }
  std::size_t size() const { return images_.size(); }

  // First record with this id, or nullptr.
  const ImageRecord* find(const ImageId& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &images_[it->second];
  }
  const ImageRecord& at(const ImageId& id) const {
    const ImageRecord* rec = find(id);
    if (rec == nullptr) throw DataError("unknown image id '" + id + "'");
    return *rec;
  }

  std::vector<ImageId> ids() const {
    std::vector<ImageId> out;
    out.reserve(images_.size());
    for (const auto& im : images_) out.push_back(im.id);
    return out;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.class_names_ == b.class_names_ && a.images_ == b.images_;
  }

 private:
  std::vector<std::string> class_names_;
  std::vector<ImageRecord> images_;
  std::map<ImageId, std::size_t> index_;
};

struct Violation {
  ImageId image_id;
  std::string rule;
  std::string detail;
};

// Reports every broken dataset invariant; never throws.
inline std::vector<Violation> validate_dataset(const Dataset& d) {
  std::vector<Violation> out;
  const std::size_t num_classes = d.num_classes();
  std::set<ImageId> seen;
  for (const auto& im : d.images()) {
    if (!seen.insert(im.id).second) out.push_back({im.id, "duplicate_id", "image id appears more than once"});
    if (!(im.width > 0.0) || !(im.height > 0.0) || !std::isfinite(im.width) ||
        !std::isfinite(im.height)) {
      out.push_back({im.id, "image_size", "width and height must be positive"});
    }
    if (im.weak_label.size() != num_classes) {
      out.push_back({im.id, "weak_label_length",
                     "weak label has " + std::to_string(im.weak_label.size()) + " entries, expected " +
                         std::to_string(num_classes)});
    } else {
      bool any = false;
      for (auto v : im.weak_label.present) any = any || v != 0;
      if (!any) out.push_back({im.id, "weak_label_empty", "no class marked present"});
    }
    for (std::size_t g = 0; g < im.gt.size(); ++g) {
      const auto& gt = im.gt[g];
      const std::string where = "gt[" + std::to_string(g) + "]";
      if (gt.class_id >= num_classes) {
        out.push_back({im.id, "gt_class_range", where + " class " + std::to_string(gt.class_id) + " out of range"});
      } else if (!im.weak_label.has(gt.class_id)) {
        out.push_back({im.id, "gt_class_not_in_weak_label",
                       where + " class " + std::to_string(gt.class_id) + " not marked present"});
      }
      if (!gt.box.is_valid()) {
        out.push_back({im.id, "box_invalid", where + " box must be finite with x_max > x_min and y_max > y_min"});
      } else if (gt.box.x_min() < 0.0 || gt.box.y_min() < 0.0 || gt.box.x_max() > im.width ||
                 gt.box.y_max() > im.height) {
        out.push_back({im.id, "box_outside_image", where + " box exceeds image bounds"});
      }
    }
  }
  return out;
}

// Index of the largest object-class probability (background excluded); ties
// go to the lowest index.
inline std::size_t argmax_object_class(std::span<const double> class_probs) {
  std::size_t best = 0;
  for (std::size_t c = 1; c + 1 < class_probs.size(); ++c) {
    if (class_probs[c] > class_probs[best]) best = c;
  }
  return best;
}

// Rejects negative entries or a sum more than 1e-3 away from 1; otherwise
// rescales the vector to sum to 1. Vectors already within rounding of 1 are
// left untouched so repeated load/save cycles are a fixed point.
inline void normalize_class_probs(std::vector<double>& probs) {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw DataError("class probabilities must be finite and non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-3) {
    throw DataError("class probabilities sum to " + std::to_string(sum) + ", expected 1");
  }
  const double rounding = 4.0 * std::numeric_limits<double>::epsilon() * static_cast<double>(probs.size());
  if (std::abs(sum - 1.0) > rounding) {
    for (double& p : probs) p /= sum;
  }
}

// The explicit image feature when present, else the mean of region features.
inline Feature image_feature_or_default(const ImagePredictions& p) {
  if (p.image_feature) return *p.image_feature;
  if (p.detections.empty()) throw DataError("image '" + p.image_id + "': no feature source");
  Feature mean(p.detections.front().feature.size(), 0.0);
  for (const auto& d : p.detections) {
    if (d.feature.size() != mean.size()) throw DataError("image '" + p.image_id + "': mixed feature lengths");
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += d.feature[k];
  }
  for (double& v : mean) v /= static_cast<double>(p.detections.size());
  return mean;
}

inline void l2_normalize(Feature& f) {
  double sq = 0.0;
  for (double v : f) sq += v * v;
  if (sq <= 0.0) return;
  const double inv = 1.0 / std::sqrt(sq);
  for (double& v : f) v *= inv;
}

// Applies l2_normalize to every region and image feature.
inline void l2_normalize_features(PredictionSet& preds) {
  for (auto& [id, im] : preds.images) {
    for (auto& d : im.detections) l2_normalize(d.feature);
    if (im.image_feature) l2_normalize(*im.image_feature);
  }
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DataError("feature length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double sq = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    sq += d * d;
  }
  return std::sqrt(sq);
}

}  // namespace alsim
