#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "partseg/metrics.hpp"
#include "partseg/ops.hpp"
#include "partseg/types.hpp"

namespace partseg {

enum class CrfUpdateMode { parallel, sequential };

// Fully-connected pairwise CRF with a bilateral appearance kernel and a
// spatial smoothness kernel under Potts compatibility:
//   k(i,j) = w_app    * exp(-|p_i-p_j|^2 / 2 theta_alpha^2
//                          -|I_i-I_j|^2 / 2 theta_beta^2)
//          + w_smooth * exp(-|p_i-p_j|^2 / 2 theta_gamma^2)
struct DenseCrfParams {
  double w_app = 1.0;
  double w_smooth = 1.0;
  double theta_alpha = 30.0;
  double theta_beta = 10.0;
  double theta_gamma = 3.0;
  int iterations = 10;
  CrfUpdateMode update_mode = CrfUpdateMode::parallel;
  double damping = 1.0;

  void validate() const {
    detail::require(w_app >= 0.0 && w_smooth >= 0.0,
                    "DenseCrfParams: kernel weights must be non-negative");
    detail::require(theta_alpha > 0.0 && theta_beta > 0.0 && theta_gamma > 0.0,
                    "DenseCrfParams: bandwidths must be positive");
    detail::require(iterations >= 1, "DenseCrfParams: iterations must be >= 1");
    detail::require(damping > 0.0 && damping <= 1.0,
                    "DenseCrfParams: damping must lie in (0, 1]");
  }
};

struct MeanFieldState {
  ScoreMap q;  // per-pixel label distributions, rows sum to 1
  int iteration = 0;
};

namespace detail {

inline void check_crf_dims(const ScoreMap& v, const Image& img, const char* who) {
  require(v.height == img.height && v.width == img.width,
          std::string(who) + ": score/image dimension mismatch");
}

inline void check_normalized(const ScoreMap& q, const char* who) {
  const int kn = q.num_labels;
  const int n = static_cast<int>(q.pixel_count());
  for (int i = 0; i < n; ++i) {
    const double* qi = q.data.data() + static_cast<std::size_t>(i) * kn;
    double s = 0.0;
    for (int k = 0; k < kn; ++k) {
      require(std::isfinite(qi[k]) && qi[k] >= 0.0,
              std::string(who) + ": state entries must be non-negative");
      s += qi[k];
    }
    require(std::abs(s - 1.0) <= 1e-9,
            std::string(who) + ": state rows must be normalized");
  }
}

// Pairwise kernel evaluations for one image. Small instances cache the
// full N*N matrix; larger ones recompute rows on demand.
class PairwiseKernel {
 public:
  PairwiseKernel(const Image& img, const DenseCrfParams& p)
      : n_(img.height * img.width),
        w_app_(p.w_app),
        w_smooth_(p.w_smooth),
        inv_alpha_(0.5 / (p.theta_alpha * p.theta_alpha)),
        inv_beta_(0.5 / (p.theta_beta * p.theta_beta)),
        inv_gamma_(0.5 / (p.theta_gamma * p.theta_gamma)) {
    feat_.resize(static_cast<std::size_t>(n_) * 5);
    for (int r = 0; r < img.height; ++r)
      for (int c = 0; c < img.width; ++c) {
        double* f = feat_.data() + static_cast<std::size_t>(r * img.width + c) * 5;
        f[0] = r;
        f[1] = c;
        f[2] = img.at(r, c, 0);
        f[3] = img.at(r, c, 1);
        f[4] = img.at(r, c, 2);
      }
    if (static_cast<std::size_t>(n_) * n_ <= kMaxCached) {
      cache_.resize(static_cast<std::size_t>(n_) * n_);
      for (int i = 0; i < n_; ++i) {
        cache_[static_cast<std::size_t>(i) * n_ + i] = 0.0;
        for (int j = i + 1; j < n_; ++j) {
          const double v = value(i, j);
          cache_[static_cast<std::size_t>(i) * n_ + j] = v;
          cache_[static_cast<std::size_t>(j) * n_ + i] = v;
        }
      }
    }
  }

  int size() const { return n_; }

  double value(int i, int j) const {
    const double* a = feat_.data() + static_cast<std::size_t>(i) * 5;
    const double* b = feat_.data() + static_cast<std::size_t>(j) * 5;
    const double dr = a[0] - b[0];
    const double dc = a[1] - b[1];
    const double d2 = dr * dr + dc * dc;
    double c2 = 0.0;
    for (int ch = 2; ch < 5; ++ch) {
      const double d = a[ch] - b[ch];
      c2 += d * d;
    }
    return w_app_ * std::exp(-d2 * inv_alpha_ - c2 * inv_beta_) +
           w_smooth_ * std::exp(-d2 * inv_gamma_);
  }

  // k(i, j) for every j, with row[i] = 0 (self-edges excluded).
  void row(int i, std::vector<double>& out) const {
    out.resize(n_);
    if (!cache_.empty()) {
      const double* src = cache_.data() + static_cast<std::size_t>(i) * n_;
      std::copy(src, src + n_, out.begin());
    } else {
      for (int j = 0; j < n_; ++j) out[j] = j == i ? 0.0 : value(i, j);
    }
  }

 private:
  static constexpr std::size_t kMaxCached = std::size_t(16) << 20;  // 128 MiB of doubles
  int n_;
  double w_app_, w_smooth_, inv_alpha_, inv_beta_, inv_gamma_;
  std::vector<double> feat_;
  std::vector<double> cache_;
};

// m_i(k) = sum_{j != i} k(i,j) (1 - Q_j(k)), the Potts mean-field message.
inline void message_at(const PairwiseKernel& kernel, const ScoreMap& q, int i,
                       std::vector<double>& krow, std::vector<double>& out) {
  const int kn = q.num_labels;
  kernel.row(i, krow);
  out.assign(kn, 0.0);
  double rowsum = 0.0;
  const int n = kernel.size();
  for (int j = 0; j < n; ++j) {
    const double w = krow[j];
    if (w == 0.0) continue;
    rowsum += w;
    const double* qj = q.data.data() + static_cast<std::size_t>(j) * kn;
    for (int k = 0; k < kn; ++k) out[k] += w * qj[k];
  }
  for (int k = 0; k < kn; ++k) out[k] = rowsum - out[k];
}

// Writes softmax(-u_i - m_i) into q's row i, geometrically damped against
// the previous row when damping < 1.
inline void apply_update(ScoreMap& q, const ScoreMap& unary, int i,
                         const std::vector<double>& msg, double damping,
                         std::vector<double>& logits) {
  const int kn = q.num_labels;
  double* qi = q.data.data() + static_cast<std::size_t>(i) * kn;
  logits.resize(kn);
  for (int k = 0; k < kn; ++k)
    logits[k] = -unary.data[static_cast<std::size_t>(i) * kn + k] - msg[k];
  if (damping < 1.0) {
    for (int k = 0; k < kn; ++k) {
      const double old_log = qi[k] > 0.0 ? std::log(qi[k])
                                         : -std::numeric_limits<double>::infinity();
      logits[k] = damping * logits[k] + (1.0 - damping) * old_log;
    }
  }
  softmax_row(logits);
  for (int k = 0; k < kn; ++k) qi[k] = logits[k];
}

}  // namespace detail

// u_i(k) = -log softmax(v_i)_k with the probability clamped at 1e-10.
inline ScoreMap unary_from_scores(const ScoreMap& v) {
  ScoreMap u = softmax(v);
  for (double& x : u.data) x = -std::log(std::max(x, 1e-10));
  return u;
}

// Pairwise kernel between two distinct pixels given by linear index.
inline double pairwise_kernel(int i, int j, const Image& img,
                              const DenseCrfParams& params) {
  params.validate();
  const int n = img.height * img.width;
  detail::require(i >= 0 && i < n && j >= 0 && j < n,
                  "pairwise_kernel: pixel index out of range");
  detail::require(i != j, "pairwise_kernel: self-edges excluded");
  detail::PairwiseKernel kernel(img, params);
  return kernel.value(i, j);
}

// One mean-field sweep. Parallel mode reads messages from the old Q for
// every pixel; sequential mode updates pixels in scan order against fresh
// values (coordinate descent on the mean-field free energy).
inline MeanFieldState meanfield_step(const MeanFieldState& state,
                                     const ScoreMap& unary, const Image& image,
                                     const DenseCrfParams& params) {
  params.validate();
  detail::require(state.q.same_shape(unary), "meanfield_step: state/unary dimension mismatch");
  detail::check_crf_dims(unary, image, "meanfield_step");
  detail::check_normalized(state.q, "meanfield_step");

  detail::PairwiseKernel kernel(image, params);
  MeanFieldState next = state;
  const int n = kernel.size();
  std::vector<double> krow, msg, logits;
  if (params.update_mode == CrfUpdateMode::parallel) {
    for (int i = 0; i < n; ++i) {
      detail::message_at(kernel, state.q, i, krow, msg);
      detail::apply_update(next.q, unary, i, msg, params.damping, logits);
    }
  } else {
    for (int i = 0; i < n; ++i) {
      detail::message_at(kernel, next.q, i, krow, msg);
      detail::apply_update(next.q, unary, i, msg, params.damping, logits);
    }
  }
  ++next.iteration;
  return next;
}

struct CrfResult {
  LabelMap labels;
  ScoreMap q;
};

// Runs `iterations` mean-field sweeps from Q0 = softmax(v) and decodes.
inline CrfResult crf_infer(const ScoreMap& v, const Image& image,
                           const DenseCrfParams& params) {
  params.validate();
  detail::check_crf_dims(v, image, "crf_infer");
  const ScoreMap unary = unary_from_scores(v);
  MeanFieldState state{softmax(v), 0};
  for (int it = 0; it < params.iterations; ++it)
    state = meanfield_step(state, unary, image, params);
  return CrfResult{argmax_labels(state.q), std::move(state.q)};
}

// Mean-field free energy: expected unary cost plus expected Potts
// disagreement plus negative entropy. Non-increasing under sequential
// updates with damping 1.
inline double free_energy(const ScoreMap& q, const ScoreMap& unary,
                          const Image& image, const DenseCrfParams& params) {
  params.validate();
  detail::require(q.same_shape(unary), "free_energy: state/unary dimension mismatch");
  detail::check_crf_dims(unary, image, "free_energy");
  detail::check_normalized(q, "free_energy");

  const int kn = q.num_labels;
  const int n = static_cast<int>(q.pixel_count());
  double e = 0.0;
  for (std::size_t idx = 0; idx < q.data.size(); ++idx) {
    e += q.data[idx] * unary.data[idx];
    if (q.data[idx] > 0.0) e += q.data[idx] * std::log(q.data[idx]);
  }
  detail::PairwiseKernel kernel(image, params);
  for (int i = 0; i < n; ++i) {
    const double* qi = q.data.data() + static_cast<std::size_t>(i) * kn;
    for (int j = i + 1; j < n; ++j) {
      const double* qj = q.data.data() + static_cast<std::size_t>(j) * kn;
      double dot = 0.0;
      for (int k = 0; k < kn; ++k) dot += qi[k] * qj[k];
      e += kernel.value(i, j) * (1.0 - dot);
    }
  }
  return e;
}

struct CrfExample {
  ScoreMap scores;
  Image image;
  LabelMap gt;
};

struct GridSearchResult {
  DenseCrfParams best;
  double best_score = 0.0;
  std::vector<double> scores;  // mean IOU per candidate, grid order
  std::string table;           // one line per candidate
};

// Default search ranges; enumeration order is theta_alpha, theta_beta,
// theta_gamma, w_app, w_smooth (outermost to innermost).
inline std::vector<DenseCrfParams> make_default_grid(const DenseCrfParams& base = {}) {
  std::vector<DenseCrfParams> grid;
  for (double ta : {10.0, 30.0, 50.0, 80.0})
    for (double tb : {3.0, 10.0, 20.0})
      for (double tg : {1.0, 3.0})
        for (double wa : {1.0, 3.0, 5.0, 10.0})
          for (double ws : {1.0, 3.0}) {
            DenseCrfParams p = base;
            p.theta_alpha = ta;
            p.theta_beta = tb;
            p.theta_gamma = tg;
            p.w_app = wa;
            p.w_smooth = ws;
            grid.push_back(p);
          }
  return grid;
}

// Mean IOU of crf_infer over the validation set, pooled over pixels of
// all images; ties keep the first candidate in grid order.
inline GridSearchResult grid_search(const std::vector<DenseCrfParams>& candidates,
                                    const std::vector<CrfExample>& validation) {
  detail::require(!candidates.empty(), "grid_search: empty candidate grid");
  detail::require(!validation.empty(), "grid_search: empty validation set");
  for (const CrfExample& ex : validation) {
    detail::require(ex.scores.height == ex.gt.height && ex.scores.width == ex.gt.width &&
                        ex.scores.num_labels == ex.gt.num_labels,
                    "grid_search: score/ground-truth dimension mismatch");
    detail::check_crf_dims(ex.scores, ex.image, "grid_search");
  }

  GridSearchResult result;
  result.scores.reserve(candidates.size());
  int best_idx = -1;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    candidates[c].validate();
    IouAccumulator acc(validation[0].gt.num_labels);
    for (const CrfExample& ex : validation) {
      const CrfResult r = crf_infer(ex.scores, ex.image, candidates[c]);
      acc.add(r.labels, ex.gt);
    }
    const double score = acc.report().mean;
    result.scores.push_back(score);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%g %g %g %g %g %.6f\n",
                  candidates[c].theta_alpha, candidates[c].theta_beta,
                  candidates[c].theta_gamma, candidates[c].w_app,
                  candidates[c].w_smooth, score);
    result.table += buf;
    if (best_idx < 0 || score > result.best_score) {
      best_idx = static_cast<int>(c);
      result.best_score = score;
    }
  }
  result.best = candidates[best_idx];
  return result;
}

}  // namespace partseg
