#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace alsim {

// Axis-aligned box [x_min, y_min, x_max, y_max] in continuous pixel
// coordinates. Area is (x_max - x_min) * (y_max - y_min), no +1 convention.
class BBox {
 public:
  BBox(double x_min, double y_min, double x_max, double y_max)
      : c_{x_min, y_min, x_max, y_max} {
    if (!is_valid()) {
      std::ostringstream os;
      os << "invalid box [" << x_min << ", " << y_min << ", " << x_max << ", " << y_max
         << "]: coordinates must be finite with positive area";
      throw std::invalid_argument(os.str());
    }
  }

  // Skips validation. Only ingest code uses this, so that malformed boxes can
  // be reported as dataset violations instead of aborting the parse.
  static BBox unvalidated(double x_min, double y_min, double x_max, double y_max) {
    return BBox(std::array<double, 4>{x_min, y_min, x_max, y_max});
  }

  bool is_valid() const {
    return std::isfinite(c_[0]) && std::isfinite(c_[1]) && std::isfinite(c_[2]) &&
           std::isfinite(c_[3]) && c_[2] > c_[0] && c_[3] > c_[1];
  }

  double x_min() const { return c_[0]; }
  double y_min() const { return c_[1]; }
  double x_max() const { return c_[2]; }
  double y_max() const { return c_[3]; }
  double width() const { return c_[2] - c_[0]; }
  double height() const { return c_[3] - c_[1]; }
  const std::array<double, 4>& coords() const { return c_; }

  friend bool operator==(const BBox&, const BBox&) = default;

 private:
  explicit BBox(const std::array<double, 4>& c) : c_(c) {}
  std::array<double, 4> c_;
};

inline double area(const BBox& b) { return b.width() * b.height(); }

inline double intersection_area(const BBox& a, const BBox& b) {
  const double w = std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min());
  const double h = std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min());
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  return inter / (area(a) + area(b) - inter);
}

// Fraction of `a` covered by `b`. Not symmetric.
inline double ioa_first(const BBox& a, const BBox& b) { return intersection_area(a, b) / area(a); }

}  // namespace alsim
