#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "partseg/io.hpp"
#include "partseg/metrics.hpp"
#include "partseg/ops.hpp"
#include "partseg/types.hpp"

namespace partseg {

// Score maps of one image resampled at several scales; scale s has
// dimensions round(s*H) x round(s*W). `nominal` is the side length the
// scale-selection rule steers detected boxes toward.
struct ScalePyramid {
  std::vector<double> scales;
  std::vector<ScoreMap> maps;
  int nominal = 321;

  void validate() const {
    detail::require(!scales.empty(), "ScalePyramid: empty pyramid");
    detail::require(scales.size() == maps.size(),
                    "ScalePyramid: scale/map count mismatch");
    detail::require(nominal >= 1, "ScalePyramid: nominal size must be positive");
    for (std::size_t s = 0; s < scales.size(); ++s) {
      detail::require(scales[s] > 0.0, "ScalePyramid: scales must be positive");
      if (s > 0)
        detail::require(scales[s] > scales[s - 1],
                        "ScalePyramid: scales must be strictly increasing");
      detail::require(maps[s].num_labels == maps[0].num_labels,
                      "ScalePyramid: label count mismatch across scales");
    }
  }

  // Checks each map's dimensions against round(s * base) within one pixel.
  void validate_against(int base_h, int base_w) const {
    validate();
    for (std::size_t s = 0; s < scales.size(); ++s) {
      const long eh = std::lround(scales[s] * base_h);
      const long ew = std::lround(scales[s] * base_w);
      detail::require(std::abs(maps[s].height - eh) <= 1 && std::abs(maps[s].width - ew) <= 1,
                      "ScalePyramid: map dimensions inconsistent with base size");
    }
  }
};

// argmin_s |s*h_b - nominal| + |s*w_b - nominal|, box sides measured in
// the rescaled image; ties go to the smallest scale.
inline int optimal_scale(const DetectionBox& box, const ScalePyramid& pyramid) {
  detail::require(!pyramid.scales.empty(), "optimal_scale: empty pyramid");
  pyramid.validate();
  box.validate();
  const double hb = box.box_height();
  const double wb = box.box_width();
  int best = 0;
  double best_obj = std::abs(pyramid.scales[0] * hb - pyramid.nominal) +
                    std::abs(pyramid.scales[0] * wb - pyramid.nominal);
  for (std::size_t s = 1; s < pyramid.scales.size(); ++s) {
    const double obj = std::abs(pyramid.scales[s] * hb - pyramid.nominal) +
                       std::abs(pyramid.scales[s] * wb - pyramid.nominal);
    if (obj < best_obj) {
      best = static_cast<int>(s);
      best_obj = obj;
    }
  }
  return best;
}

// Per-pixel fused score map at base resolution. Each pixel follows the
// highest-confidence box containing it (ties: earliest box) and reads that
// box's optimal-scale map bilinearly at the corner-aligned coordinate;
// pixels in no box read the scale-1.0 map.
inline ScoreMap fuse_scores(const ScalePyramid& pyramid,
                            const std::vector<DetectionBox>& boxes,
                            int base_h, int base_w) {
  detail::require(base_h >= 1 && base_w >= 1, "fuse_scores: base dimensions must be positive");
  pyramid.validate_against(base_h, base_w);

  int unit_scale = -1;
  for (std::size_t s = 0; s < pyramid.scales.size(); ++s)
    if (pyramid.scales[s] == 1.0) unit_scale = static_cast<int>(s);

  std::vector<DetectionBox> clamped = boxes;
  std::vector<std::uint8_t> live(boxes.size(), 0);
  std::vector<int> scale_of(boxes.size(), 0);
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    boxes[b].validate();
    live[b] = clamp_box(clamped[b], base_h, base_w) ? 1 : 0;
    if (live[b]) scale_of[b] = optimal_scale(clamped[b], pyramid);
  }

  const int kn = pyramid.maps[0].num_labels;
  ScoreMap out(base_h, base_w, kn);
  for (int r = 0; r < base_h; ++r)
    for (int c = 0; c < base_w; ++c) {
      int pick = -1;
      for (std::size_t b = 0; b < clamped.size(); ++b) {
        if (!live[b] || !clamped[b].contains(r, c)) continue;
        if (pick < 0 || clamped[b].confidence > clamped[pick].confidence)
          pick = static_cast<int>(b);
      }
      int s;
      if (pick >= 0) {
        s = scale_of[pick];
      } else {
        detail::require(unit_scale >= 0,
                        "fuse_scores: uncovered pixel but the pyramid has no scale 1.0");
        s = unit_scale;
      }
      const ScoreMap& m = pyramid.maps[s];
      const double sr = detail::sample_coord(r, base_h, m.height);
      const double sc = detail::sample_coord(c, base_w, m.width);
      detail::bilinear_read(m, sr, sc,
                            out.data.data() + (static_cast<std::size_t>(r) * base_w + c) * kn);
    }
  return out;
}

// Pixel accuracy restricted to the union of the boxes.
inline double box_pixel_accuracy(const LabelMap& pred, const LabelMap& gt,
                                 const std::vector<DetectionBox>& boxes) {
  detail::require(pred.height == gt.height && pred.width == gt.width,
                  "box_pixel_accuracy: dimension mismatch");
  std::vector<std::uint8_t> mask(pred.data.size(), 0);
  bool any = false;
  for (DetectionBox b : boxes) {
    b.validate();
    if (!clamp_box(b, pred.height, pred.width)) continue;
    for (int r = b.y0; r <= b.y1; ++r)
      for (int c = b.x0; c <= b.x1; ++c) {
        mask[static_cast<std::size_t>(r) * pred.width + c] = 1;
        any = true;
      }
  }
  detail::require(any, "box_pixel_accuracy: empty box union");
  return pixel_accuracy(pred, gt, mask);
}

// Pyramid manifest: one `scale<TAB>path` line per level, paths relative
// to the manifest's directory.
inline ScalePyramid read_pyramid(const std::string& manifest_path, int nominal = 321) {
  const std::string text = detail::read_file_bytes(manifest_path);
  const std::filesystem::path dir = std::filesystem::path(manifest_path).parent_path();
  ScalePyramid pyr;
  pyr.nominal = nominal;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos)
      detail::io_fail(manifest_path, "malformed line " + std::to_string(lineno) +
                                         " (expected scale<TAB>path)");
    const double scale = parse_double(line.substr(0, tab),
                                      manifest_path + ":" + std::to_string(lineno));
    std::filesystem::path p(line.substr(tab + 1));
    if (p.is_relative()) p = dir / p;
    pyr.scales.push_back(scale);
    pyr.maps.push_back(read_score_map(p.string()));
  }
  pyr.validate();
  return pyr;
}

}  // namespace partseg
