#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "partseg/types.hpp"

namespace partseg {

namespace detail {

// In-place softmax of one logit row, max-subtracted for stability.
inline void softmax_row(std::span<double> row) {
  double m = row[0];
  for (double v : row) m = std::max(m, v);
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

// Corner-aligned source coordinate for resampling; the centre of the
// source axis when the target axis has a single sample.
inline double sample_coord(int out_pos, int out_dim, int in_dim) {
  if (out_dim <= 1) return (in_dim - 1) / 2.0;
  return static_cast<double>(out_pos) * (in_dim - 1) / (out_dim - 1);
}

// Bilinear read of all channels at fractional coordinates (sr, sc),
// clamped to the map; out must hold num_labels values.
inline void bilinear_read(const ScoreMap& src, double sr, double sc, double* out) {
  const int r0 = static_cast<int>(sr);
  const int r1 = std::min(r0 + 1, src.height - 1);
  const double fr = sr - r0;
  const int c0 = static_cast<int>(sc);
  const int c1 = std::min(c0 + 1, src.width - 1);
  const double fc = sc - c0;
  for (int j = 0; j < src.num_labels; ++j) {
    const double top = (1.0 - fc) * src.at(r0, c0, j) + fc * src.at(r0, c1, j);
    const double bot = (1.0 - fc) * src.at(r1, c0, j) + fc * src.at(r1, c1, j);
    out[j] = (1.0 - fr) * top + fr * bot;
  }
}

}  // namespace detail

// Per-pixel softmax over the label axis.
inline ScoreMap softmax(const ScoreMap& scores) {
  detail::require(scores.all_finite(), "softmax: non-finite input score");
  ScoreMap out = scores;
  const int k = out.num_labels;
  for (std::size_t i = 0; i < out.pixel_count(); ++i)
    detail::softmax_row({out.data.data() + i * k, static_cast<std::size_t>(k)});
  return out;
}

// Per-pixel argmax; ties break toward the smallest label index.
inline LabelMap argmax_labels(const ScoreMap& scores) {
  detail::require(scores.all_finite(), "argmax_labels: non-finite input score");
  LabelMap out(scores.height, scores.width, scores.num_labels);
  const int k = scores.num_labels;
  for (std::size_t i = 0; i < scores.pixel_count(); ++i) {
    const double* row = scores.data.data() + i * k;
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    out.data[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// Channel-wise bilinear resampling with corner-aligned sample positions.
// Identity (bit-exact) when the dimensions are unchanged.
inline ScoreMap resize_scores(const ScoreMap& src, int new_h, int new_w) {
  detail::require(new_h >= 1 && new_w >= 1,
                  "resize_scores: target dimensions must be positive");
  if (new_h == src.height && new_w == src.width) return src;
  ScoreMap out(new_h, new_w, src.num_labels);
  const int k = src.num_labels;
  for (int r = 0; r < new_h; ++r) {
    const double sr = detail::sample_coord(r, new_h, src.height);
    for (int c = 0; c < new_w; ++c) {
      const double sc = detail::sample_coord(c, new_w, src.width);
      detail::bilinear_read(src, sr, sc, out.data.data() + (static_cast<std::size_t>(r) * new_w + c) * k);
    }
  }
  return out;
}

// Nearest-neighbour resampling; never introduces labels absent from the input.
inline LabelMap resize_labels(const LabelMap& src, int new_h, int new_w) {
  detail::require(new_h >= 1 && new_w >= 1,
                  "resize_labels: target dimensions must be positive");
  if (new_h == src.height && new_w == src.width) return src;
  LabelMap out(new_h, new_w, src.num_labels);
  for (int r = 0; r < new_h; ++r) {
    const int sr = std::min(
        static_cast<int>(detail::sample_coord(r, new_h, src.height) + 0.5),
        src.height - 1);
    for (int c = 0; c < new_w; ++c) {
      const int sc = std::min(
          static_cast<int>(detail::sample_coord(c, new_w, src.width) + 0.5),
          src.width - 1);
      out.at(r, c) = src.at(sr, sc);
    }
  }
  return out;
}

}  // namespace partseg
