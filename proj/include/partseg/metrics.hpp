#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "partseg/types.hpp"

namespace partseg {

struct IouReport {
  std::vector<double> per_label;     // K entries; 0 where excluded
  std::vector<std::uint8_t> included;  // 0 when pred and gt are both empty
  double mean = 0.0;                 // over included labels only
  std::vector<std::pair<std::string, double>> merged;  // label-union scores
};

// A named union of label indices, e.g. {"upper", {1, 2}}.
struct LabelGroup {
  std::string name;
  std::vector<int> labels;
};

inline double mean_of(std::span<const double> values) {
  detail::require(!values.empty(), "mean_of: empty value list");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

// Pools pixel counts across any number of (pred, gt) pairs; IOU is then
// computed over the pooled confusion matrix rather than per image.
class IouAccumulator {
 public:
  explicit IouAccumulator(int num_labels) : k_(num_labels) {
    detail::require(num_labels >= 2, "IouAccumulator: need at least two labels");
    confusion_.assign(static_cast<std::size_t>(k_) * k_, 0);
  }

  void add(const LabelMap& pred, const LabelMap& gt) {
    detail::require(pred.height == gt.height && pred.width == gt.width,
                    "iou_report: dimension mismatch");
    detail::require(pred.num_labels == k_ && gt.num_labels == k_,
                    "iou_report: label count mismatch");
    for (std::size_t i = 0; i < pred.data.size(); ++i)
      ++confusion_[static_cast<std::size_t>(pred.data[i]) * k_ + gt.data[i]];
  }

  IouReport report(std::span<const LabelGroup> groups = {}) const {
    IouReport rep;
    rep.per_label.assign(k_, 0.0);
    rep.included.assign(k_, 0);
    std::vector<long long> pred_n(k_, 0), gt_n(k_, 0);
    for (int a = 0; a < k_; ++a)
      for (int b = 0; b < k_; ++b) {
        const long long c = confusion_[static_cast<std::size_t>(a) * k_ + b];
        pred_n[a] += c;
        gt_n[b] += c;
      }
    std::vector<double> kept;
    for (int k = 0; k < k_; ++k) {
      const long long inter = confusion_[static_cast<std::size_t>(k) * k_ + k];
      const long long uni = pred_n[k] + gt_n[k] - inter;
      if (uni > 0) {
        rep.per_label[k] = static_cast<double>(inter) / static_cast<double>(uni);
        rep.included[k] = 1;
        kept.push_back(rep.per_label[k]);
      }
    }
    rep.mean = kept.empty() ? 0.0 : mean_of(kept);
    for (const LabelGroup& g : groups) {
      std::vector<std::uint8_t> in(k_, 0);
      for (int l : g.labels) {
        detail::require(l >= 0 && l < k_, "iou_report: group label out of range");
        in[l] = 1;
      }
      long long inter = 0, pred_g = 0, gt_g = 0;
      for (int a = 0; a < k_; ++a)
        for (int b = 0; b < k_; ++b) {
          const long long c = confusion_[static_cast<std::size_t>(a) * k_ + b];
          if (in[a] && in[b]) inter += c;
          if (in[a]) pred_g += c;
          if (in[b]) gt_g += c;
        }
      const long long uni = pred_g + gt_g - inter;
      rep.merged.emplace_back(g.name, uni > 0 ? static_cast<double>(inter) / uni : 0.0);
    }
    return rep;
  }

 private:
  int k_;
  std::vector<long long> confusion_;  // [pred * K + gt]
};

inline IouReport iou_report(const LabelMap& pred, const LabelMap& gt,
                            std::span<const LabelGroup> groups = {}) {
  detail::require(pred.num_labels == gt.num_labels, "iou_report: label count mismatch");
  IouAccumulator acc(pred.num_labels);
  acc.add(pred, gt);
  return acc.report(groups);
}

inline double pixel_accuracy(const LabelMap& pred, const LabelMap& gt) {
  detail::require(pred.height == gt.height && pred.width == gt.width,
                  "pixel_accuracy: dimension mismatch");
  long long match = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i)
    if (pred.data[i] == gt.data[i]) ++match;
  return static_cast<double>(match) / static_cast<double>(pred.data.size());
}

// Mask variant: only pixels with a nonzero mask entry count.
inline double pixel_accuracy(const LabelMap& pred, const LabelMap& gt,
                             const std::vector<std::uint8_t>& mask) {
  detail::require(pred.height == gt.height && pred.width == gt.width,
                  "pixel_accuracy: dimension mismatch");
  detail::require(mask.size() == pred.data.size(), "pixel_accuracy: mask size mismatch");
  long long match = 0, total = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    if (!mask[i]) continue;
    ++total;
    if (pred.data[i] == gt.data[i]) ++match;
  }
  detail::require(total > 0, "pixel_accuracy: empty mask");
  return static_cast<double>(match) / static_cast<double>(total);
}

struct SuperpixelMap {
  int height = 0;
  int width = 0;
  int num_superpixels = 0;
  std::vector<int> ids;  // H*W, row-major

  void validate() const {
    detail::require(height >= 1 && width >= 1, "SuperpixelMap: empty dimensions");
    detail::require(num_superpixels >= 1, "SuperpixelMap: need at least one superpixel");
    detail::require(ids.size() == static_cast<std::size_t>(height) * width,
                    "SuperpixelMap: id buffer size mismatch");
    std::vector<std::uint8_t> seen(num_superpixels, 0);
    for (int id : ids) {
      detail::require(id >= 0 && id < num_superpixels, "SuperpixelMap: id out of range");
      seen[id] = 1;
    }
    for (std::uint8_t s : seen)
      detail::require(s, "SuperpixelMap: empty superpixel");
  }
};

// Majority-vote label per superpixel; ties go to the smallest label.
inline std::vector<std::uint8_t> superpixel_project(const LabelMap& pred,
                                                    const SuperpixelMap& sp) {
  sp.validate();
  detail::require(pred.height == sp.height && pred.width == sp.width,
                  "superpixel_project: dimension mismatch");
  std::vector<int> hist(static_cast<std::size_t>(sp.num_superpixels) * pred.num_labels, 0);
  for (std::size_t i = 0; i < pred.data.size(); ++i)
    ++hist[static_cast<std::size_t>(sp.ids[i]) * pred.num_labels + pred.data[i]];
  std::vector<std::uint8_t> out(sp.num_superpixels, 0);
  for (int s = 0; s < sp.num_superpixels; ++s) {
    const int* h = hist.data() + static_cast<std::size_t>(s) * pred.num_labels;
    int best = 0;
    for (int k = 1; k < pred.num_labels; ++k)
      if (h[k] > h[best]) best = k;
    out[s] = static_cast<std::uint8_t>(best);
  }
  return out;
}

inline double superpixel_accuracy(const LabelMap& pred,
                                  const std::vector<std::uint8_t>& gt_sp_labels,
                                  const SuperpixelMap& sp) {
  detail::require(gt_sp_labels.size() == static_cast<std::size_t>(sp.num_superpixels),
                  "superpixel_accuracy: superpixel id mismatch");
  const std::vector<std::uint8_t> proj = superpixel_project(pred, sp);
  long long match = 0;
  for (int s = 0; s < sp.num_superpixels; ++s)
    if (proj[s] == gt_sp_labels[s]) ++match;
  return static_cast<double>(match) / static_cast<double>(sp.num_superpixels);
}

struct EmptyMaskError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tightest axis-aligned box around all pixels of the target label.
inline DetectionBox mask_to_bbox(const LabelMap& labels, int target) {
  detail::require(target >= 0 && target < labels.num_labels,
                  "mask_to_bbox: target label out of range");
  int x0 = labels.width, y0 = labels.height, x1 = -1, y1 = -1;
  for (int r = 0; r < labels.height; ++r)
    for (int c = 0; c < labels.width; ++c)
      if (labels.at(r, c) == target) {
        x0 = std::min(x0, c);
        x1 = std::max(x1, c);
        y0 = std::min(y0, r);
        y1 = std::max(y1, r);
      }
  if (x1 < 0)
    throw EmptyMaskError("mask_to_bbox: empty mask for label " + std::to_string(target));
  return DetectionBox{x0, y0, x1, y1, 1.0, target};
}

inline double box_iou(const DetectionBox& a, const DetectionBox& b) {
  const long long iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0) + 1;
  const long long ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0) + 1;
  const long long inter = std::max<long long>(iw, 0) * std::max<long long>(ih, 0);
  const long long uni = a.area() + b.area() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Percentage of correctly localized parts: a part counts when its
// predicted box reaches the IoU threshold; absent predictions miss.
inline double pcp(std::span<const std::optional<DetectionBox>> pred_boxes,
                  std::span<const DetectionBox> gt_boxes,
                  double iou_threshold = 0.5) {
  detail::require(!gt_boxes.empty(), "pcp: no ground-truth parts");
  detail::require(pred_boxes.size() == gt_boxes.size(),
                  "pcp: prediction/ground-truth pairing mismatch");
  detail::require(iou_threshold > 0.0 && iou_threshold < 1.0,
                  "pcp: threshold must lie in (0, 1)");
  long long correct = 0;
  for (std::size_t i = 0; i < gt_boxes.size(); ++i)
    if (pred_boxes[i] && box_iou(*pred_boxes[i], gt_boxes[i]) >= iou_threshold)
      ++correct;
  return static_cast<double>(correct) / static_cast<double>(gt_boxes.size());
}

}  // namespace partseg
