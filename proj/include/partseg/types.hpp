#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace partseg {

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline std::size_t checked_extent(long long h, long long w, long long k,
                                  const char* what) {
  if (h < 1 || w < 1 || k < 1)
    throw std::invalid_argument(std::string(what) + ": invalid dimensions");
  return static_cast<std::size_t>(h) * static_cast<std::size_t>(w) *
         static_cast<std::size_t>(k);
}

}  // namespace detail

// Dense H x W x K tensor of per-pixel per-label real values. Used both for
// pre-softmax scores and for probability maps. Row-major with the label
// axis innermost: index = (r * W + c) * K + k.
struct ScoreMap {
  int height = 0;
  int width = 0;
  int num_labels = 0;
  std::vector<double> data;

  ScoreMap() = default;
  ScoreMap(int h, int w, int k, double fill = 0.0)
      : height(h),
        width(w),
        num_labels(k),
        data(detail::checked_extent(h, w, k, "ScoreMap"), fill) {
    detail::require(k >= 2, "ScoreMap: need at least two labels");
  }

  double& at(int r, int c, int k) {
    return data[(static_cast<std::size_t>(r) * width + c) * num_labels + k];
  }
  double at(int r, int c, int k) const {
    return data[(static_cast<std::size_t>(r) * width + c) * num_labels + k];
  }

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height) * width;
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const ScoreMap& o) const {
    return height == o.height && width == o.width && num_labels == o.num_labels;
  }
};

// H x W categorical map; entries are label indices in [0, num_labels).
struct LabelMap {
  int height = 0;
  int width = 0;
  int num_labels = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(int h, int w, int k, std::uint8_t fill = 0)
      : height(h),
        width(w),
        num_labels(k),
        data(detail::checked_extent(h, w, 1, "LabelMap"), fill) {
    detail::require(k >= 1 && k <= 256, "LabelMap: label count out of range");
    detail::require(fill < k, "LabelMap: fill label out of range");
  }

  std::uint8_t& at(int r, int c) {
    return data[static_cast<std::size_t>(r) * width + c];
  }
  std::uint8_t at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * width + c];
  }

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height) * width;
  }

  void validate() const {
    for (std::uint8_t v : data)
      detail::require(v < num_labels, "LabelMap: label out of range");
  }
};

// Three-channel 8-bit image, row-major, channels innermost.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;  // H * W * 3

  Image() = default;
  Image(int h, int w, std::uint8_t fill = 0)
      : height(h),
        width(w),
        data(detail::checked_extent(h, w, 3, "Image"), fill) {}

  std::uint8_t& at(int r, int c, int ch) {
    return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch];
  }
  std::uint8_t at(int r, int c, int ch) const {
    return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch];
  }
};

// Axis-aligned rectangle with inclusive pixel coordinates.
struct DetectionBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;
  double confidence = 0.0;
  int label = 0;

  int box_width() const { return x1 - x0 + 1; }
  int box_height() const { return y1 - y0 + 1; }
  long long area() const {
    return static_cast<long long>(box_width()) * box_height();
  }
  bool contains(int r, int c) const {
    return r >= y0 && r <= y1 && c >= x0 && c <= x1;
  }

  void validate() const {
    detail::require(x0 <= x1 && y0 <= y1, "DetectionBox: degenerate extent");
    detail::require(std::isfinite(confidence) && confidence >= 0.0 &&
                        confidence <= 1.0,
                    "DetectionBox: confidence must be finite in [0,1]");
    detail::require(label >= 0, "DetectionBox: negative label");
  }
};

// Clamps a box to [0, w) x [0, h). Returns false if nothing remains.
inline bool clamp_box(DetectionBox& b, int height, int width) {
  b.x0 = std::max(b.x0, 0);
  b.y0 = std::max(b.y0, 0);
  b.x1 = std::min(b.x1, width - 1);
  b.y1 = std::min(b.y1, height - 1);
  return b.x0 <= b.x1 && b.y0 <= b.y1;
}

}  // namespace partseg
