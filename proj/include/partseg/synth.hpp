#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "partseg/io.hpp"
#include "partseg/rng.hpp"
#include "partseg/types.hpp"

namespace partseg {

// Label layout of the generated figures.
enum : int {
  kSynthBackground = 0,
  kSynthHead = 1,
  kSynthTorso = 2,
  kSynthUpperLimbs = 3,
  kSynthLowerLimbs = 4,
};

struct SynthConfig {
  int grid_h = 32;
  int grid_w = 32;
  int num_labels = 5;  // background, head, torso, upper limbs, lower limbs
  double arm_angle_jitter = 0.5;   // radians, +- around the canonical pose
  double leg_angle_jitter = 0.35;  // radians
  double translation_jitter = 3.0; // pixels, +- around the canonical centre
  double noise_sigma = 1.0;        // i.i.d. Gaussian noise on every score
  double margin = 2.0;             // logit gap of the true label
  double part_dropout = 0.3;       // chance that one part loses its margin
  double color_noise = 8.0;        // pixel intensity noise when rendering
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(grid_h >= 16 && grid_w >= 16,
                    "SynthConfig: grid must be at least 16x16 to hold all five parts");
    detail::require(num_labels >= 5 && num_labels <= 256,
                    "SynthConfig: need labels for background plus four parts");
    detail::require(noise_sigma >= 0.0, "SynthConfig: negative noise sigma");
    detail::require(margin > 0.0, "SynthConfig: margin must be positive");
    detail::require(part_dropout >= 0.0 && part_dropout <= 1.0,
                    "SynthConfig: part_dropout must lie in [0, 1]");
    detail::require(arm_angle_jitter >= 0.0 && leg_angle_jitter >= 0.0 &&
                        translation_jitter >= 0.0 && color_noise >= 0.0,
                    "SynthConfig: negative jitter");
  }
};

namespace detail {

constexpr std::uint64_t kStreamLayout = 0x51;
constexpr std::uint64_t kStreamScores = 0x52;
constexpr std::uint64_t kStreamImage = 0x53;

// Paints a rotated thick segment by dense sampling; samples falling off
// the grid are clamped to the border (parts are clamped, never dropped).
inline void paint_limb(LabelMap& m, double r0, double c0, double dr, double dc,
                       double length, double half_width, std::uint8_t label) {
  const double nr = -dc, nc = dr;
  for (double t = 0.0; t <= length; t += 0.25)
    for (double s = -half_width; s <= half_width; s += 0.25) {
      const double pr = r0 + t * dr + s * nr;
      const double pc = c0 + t * dc + s * nc;
      const int r = std::clamp(static_cast<int>(std::lround(pr)), 0, m.height - 1);
      const int c = std::clamp(static_cast<int>(std::lround(pc)), 0, m.width - 1);
      m.at(r, c) = label;
    }
}

inline bool head_touches_torso(const LabelMap& m) {
  static constexpr int dr[4] = {-1, 1, 0, 0};
  static constexpr int dc[4] = {0, 0, -1, 1};
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      if (m.at(r, c) != kSynthHead) continue;
      for (int d = 0; d < 4; ++d) {
        const int rr = r + dr[d], cc = c + dc[d];
        if (rr < 0 || rr >= m.height || cc < 0 || cc >= m.width) continue;
        if (m.at(rr, cc) == kSynthTorso) return true;
      }
    }
  return false;
}

// Fallback for rare rasterizations where the head disc and torso ellipse
// miss each other by a pixel: carve an L-shaped torso path from the
// bottom-most head pixel to the nearest torso pixel.
inline void bridge_head_to_torso(LabelMap& m) {
  if (head_touches_torso(m)) return;
  int hr = -1, hc = -1;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c) == kSynthHead && r >= hr) {
        if (r > hr) {
          hr = r;
          hc = c;
        }
      }
  int tr = -1, tc = -1, best = 1 << 30;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c) == kSynthTorso) {
        const int d = std::abs(r - hr) + std::abs(c - hc);
        if (d < best) {
          best = d;
          tr = r;
          tc = c;
        }
      }
  require(hr >= 0 && tr >= 0, "gen_layout: figure lost its head or torso");
  int r = hr, c = hc;
  while (r != tr) {
    r += tr > r ? 1 : -1;
    if (m.at(r, c) != kSynthHead) m.at(r, c) = kSynthTorso;
  }
  while (c != tc) {
    c += tc > c ? 1 : -1;
    if (m.at(r, c) != kSynthHead) m.at(r, c) = kSynthTorso;
  }
}

}  // namespace detail

// Deterministic articulated figure for (config.seed, index): torso
// ellipse, head disc tangent to its top, two arms and two legs hinged on
// the torso with jittered angles; raster occlusion order is
// head > limbs > torso > background.
inline LabelMap gen_layout(const SynthConfig& config, int index) {
  config.validate();
  Rng rng(derive_seed(config.seed, detail::kStreamLayout, static_cast<std::uint64_t>(index)));
  const double gh = config.grid_h, gw = config.grid_w;

  const double ar = 0.20 * gh;                 // torso semi-axes
  const double ac = 0.13 * gw;
  const double rad = 0.11 * std::min(gh, gw);  // head radius
  const double cy0 = 0.52 * gh;
  const double cx0 = 0.5 * gw;

  const double t = config.translation_jitter;
  double dy = rng.uniform(-t, t);
  double dx = rng.uniform(-t, t);
  // keep head and torso fully inside the grid
  const double head_off = ar + rad - 1.0;  // head centre sits this far above cy
  const double reach = std::max(ac, rad);
  dy = std::clamp(dy, rad - (cy0 - head_off), (gh - 1.0) - ar - cy0);
  dx = std::clamp(dx, reach - cx0, (gw - 1.0) - reach - cx0);
  const double cy = cy0 + dy, cx = cx0 + dx;
  const double hy = cy - head_off, hx = cx;

  const double arm_l = 1.1 + rng.uniform(-config.arm_angle_jitter, config.arm_angle_jitter);
  const double arm_r = 1.1 + rng.uniform(-config.arm_angle_jitter, config.arm_angle_jitter);
  const double leg_l = 0.25 + rng.uniform(-config.leg_angle_jitter, config.leg_angle_jitter);
  const double leg_r = 0.25 + rng.uniform(-config.leg_angle_jitter, config.leg_angle_jitter);

  LabelMap m(config.grid_h, config.grid_w, config.num_labels, kSynthBackground);

  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const double er = (r - cy) / ar, ec = (c - cx) / ac;
      if (er * er + ec * ec <= 1.0) m.at(r, c) = kSynthTorso;
    }

  const double arm_len = 0.30 * gh, arm_hw = std::max(0.03 * gw, 0.8);
  const double leg_len = 0.34 * gh, leg_hw = std::max(0.045 * gw, 1.0);
  const double sy = cy - 0.55 * ar, hipy = cy + 0.75 * ar;
  detail::paint_limb(m, sy, cx - 0.9 * ac, std::cos(arm_l), -std::sin(arm_l),
                     arm_len, arm_hw, kSynthUpperLimbs);
  detail::paint_limb(m, sy, cx + 0.9 * ac, std::cos(arm_r), std::sin(arm_r),
                     arm_len, arm_hw, kSynthUpperLimbs);
  detail::paint_limb(m, hipy, cx - 0.5 * ac, std::cos(leg_l), -std::sin(leg_l),
                     leg_len, leg_hw, kSynthLowerLimbs);
  detail::paint_limb(m, hipy, cx + 0.5 * ac, std::cos(leg_r), std::sin(leg_r),
                     leg_len, leg_hw, kSynthLowerLimbs);

  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const double qr = r - hy, qc = c - hx;
      if (qr * qr + qc * qc <= rad * rad) m.at(r, c) = kSynthHead;
    }

  detail::bridge_head_to_torso(m);
  return m;
}

// DCNN-like corrupted scores: v_{i,k} = margin * [k = label_i] + noise,
// with one present part's margin erased with probability part_dropout.
inline ScoreMap corrupt_to_scores(const LabelMap& labels, const SynthConfig& config,
                                  int index) {
  config.validate();
  labels.validate();
  Rng rng(derive_seed(config.seed, detail::kStreamScores, static_cast<std::uint64_t>(index)));

  int dropped = -1;
  if (rng.uniform() < config.part_dropout) {
    std::vector<int> present;
    for (int k = 1; k < labels.num_labels; ++k) present.push_back(k);
    std::vector<std::uint8_t> seen(labels.num_labels, 0);
    for (std::uint8_t l : labels.data) seen[l] = 1;
    std::erase_if(present, [&](int k) { return !seen[k]; });
    if (!present.empty()) dropped = present[rng.below(present.size())];
  }

  ScoreMap v(labels.height, labels.width, labels.num_labels);
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    const int li = labels.data[i];
    double* row = v.data.data() + i * labels.num_labels;
    for (int k = 0; k < labels.num_labels; ++k) {
      row[k] = (k == li && li != dropped) ? config.margin : 0.0;
      row[k] += rng.normal(0.0, config.noise_sigma);
    }
  }
  return v;
}

// Flat part colors plus pixel noise, so image color correlates with the
// underlying label (the appearance signal the dense CRF exploits).
inline Image render_image(const LabelMap& labels, const SynthConfig& config, int index) {
  config.validate();
  labels.validate();
  Rng rng(derive_seed(config.seed, detail::kStreamImage, static_cast<std::uint64_t>(index)));
  static constexpr int palette[5][3] = {
      {60, 60, 70},    // background
      {200, 170, 150}, // head
      {180, 60, 60},   // torso
      {70, 160, 70},   // upper limbs
      {70, 90, 180},   // lower limbs
  };
  Image img;
  img.height = labels.height;
  img.width = labels.width;
  img.data.resize(static_cast<std::size_t>(labels.height) * labels.width * 3);
  for (std::size_t i = 0; i < labels.data.size(); ++i) {
    const int part = std::min<int>(labels.data[i], 4);
    for (int ch = 0; ch < 3; ++ch) {
      const double val = palette[part][ch] + rng.normal(0.0, config.color_noise);
      img.data[i * 3 + ch] =
          static_cast<std::uint8_t>(std::clamp<long>(std::lround(val), 0, 255));
    }
  }
  return img;
}

enum class Split { train, val, test };

// Deterministic 70/15/15 split, exact within every block of 20 indices.
inline Split split_of_index(int index) {
  const int m = index % 20;
  if (m < 14) return Split::train;
  if (m < 17) return Split::val;
  return Split::test;
}

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

struct ManifestEntry {
  int index = 0;
  std::string label_path;
  std::string score_path;
};

struct GenResult {
  std::string manifest_path;
  int n_train = 0;
  int n_val = 0;
  int n_test = 0;
};

namespace detail {

inline std::string indexed_name(const char* stem, int index, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05d.%s", stem, index, ext);
  return buf;
}

}  // namespace detail

// Sibling image file written by gen_dataset for a manifest entry.
inline std::string image_path_for(const ManifestEntry& e) {
  const std::filesystem::path dir = std::filesystem::path(e.score_path).parent_path();
  return (dir / detail::indexed_name("image", e.index, "ppm")).string();
}

// Writes n (label, score, image) triples plus a `index<TAB>label<TAB>score`
// manifest; byte-identical on regeneration with the same config.
inline GenResult gen_dataset(int n, const SynthConfig& config, const std::string& out_dir) {
  config.validate();
  detail::require(n >= 1, "gen_dataset: need at least one example");
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  std::string manifest;
  GenResult res;
  for (int i = 0; i < n; ++i) {
    const LabelMap labels = gen_layout(config, i);
    const ScoreMap scores = corrupt_to_scores(labels, config, i);
    const Image image = render_image(labels, config, i);
    const std::string lname = detail::indexed_name("labels", i, "pgm");
    const std::string sname = detail::indexed_name("scores", i, "spsm");
    const std::string iname = detail::indexed_name("image", i, "ppm");
    write_label_map((dir / lname).string(), labels);
    write_score_map((dir / sname).string(), scores);
    write_image((dir / iname).string(), image);
    manifest += std::to_string(i) + "\t" + lname + "\t" + sname + "\n";
    switch (split_of_index(i)) {
      case Split::train: ++res.n_train; break;
      case Split::val: ++res.n_val; break;
      case Split::test: ++res.n_test; break;
    }
  }
  res.manifest_path = (dir / "manifest.tsv").string();
  detail::write_file_bytes(res.manifest_path, manifest);
  return res;
}

// Reads a dataset manifest; relative paths resolve against its directory.
inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  const std::string text = detail::read_file_bytes(path);
  const std::filesystem::path dir = std::filesystem::path(path).parent_path();
  std::vector<ManifestEntry> entries;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::size_t t1 = line.find('\t');
    const std::size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      detail::io_fail(path, "malformed line " + std::to_string(lineno) +
                                " (expected index<TAB>label<TAB>score)");
    ManifestEntry e;
    e.index = static_cast<int>(parse_int(line.substr(0, t1),
                                         path + ":" + std::to_string(lineno)));
    auto resolve = [&](std::string rel) {
      std::filesystem::path p(std::move(rel));
      return (p.is_relative() ? dir / p : p).string();
    };
    e.label_path = resolve(line.substr(t1 + 1, t2 - t1 - 1));
    e.score_path = resolve(line.substr(t2 + 1));
    entries.push_back(e);
  }
  return entries;
}

}  // namespace partseg
