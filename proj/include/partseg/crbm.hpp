#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "partseg/ops.hpp"
#include "partseg/rng.hpp"
#include "partseg/types.hpp"

namespace partseg {

// Binary latent variables of the shape model.
struct HiddenState {
  std::vector<std::uint8_t> values;  // entries in {0, 1}
};

// Parameters of the conditional Boltzmann machine over a fixed canonical
// grid. The joint score of a configuration (y, h) given scores v is
//
//   S = sum_{i,k,k'} calib[k][k'] y_{i,k} v_{i,k'}
//     + sum_{i,j,k}  y_{i,k} interactions[i][j][k] h_j
//     + sum_{i,k}    y_{i,k} location_bias[i][k]
//     + sum_j        hidden_bias[j] h_j
//
// with P(y, h | v) proportional to exp(S): larger scores for a label raise
// its probability. Hidden biases sit behind a flag; with the flag off the
// energy has no hidden bias term at all.
struct CrbmParams {
  int grid_h = 0;
  int grid_w = 0;
  int num_labels = 0;
  int num_hidden = 0;
  bool has_hidden_bias = true;
  std::vector<double> calibration;    // K*K, [k*K + k']
  std::vector<double> interactions;   // P*J*K, [(i*J + j)*K + k]
  std::vector<double> location_bias;  // P*K, [i*K + k]
  std::vector<double> hidden_bias;    // J (all zero when the flag is off)

  int grid_pixels() const { return grid_h * grid_w; }

  double wc(int k, int kp) const { return calibration[static_cast<std::size_t>(k) * num_labels + kp]; }
  double& wc(int k, int kp) { return calibration[static_cast<std::size_t>(k) * num_labels + kp]; }
  double wr(int i, int j, int k) const {
    return interactions[(static_cast<std::size_t>(i) * num_hidden + j) * num_labels + k];
  }
  double& wr(int i, int j, int k) {
    return interactions[(static_cast<std::size_t>(i) * num_hidden + j) * num_labels + k];
  }
  double bias(int i, int k) const { return location_bias[static_cast<std::size_t>(i) * num_labels + k]; }
  double& bias(int i, int k) { return location_bias[static_cast<std::size_t>(i) * num_labels + k]; }

  void validate() const {
    detail::require(grid_h >= 1 && grid_w >= 1, "CrbmParams: invalid grid");
    detail::require(num_labels >= 2, "CrbmParams: need at least two labels");
    detail::require(num_hidden >= 0, "CrbmParams: negative hidden count");
    const std::size_t p = static_cast<std::size_t>(grid_pixels());
    detail::require(calibration.size() == static_cast<std::size_t>(num_labels) * num_labels,
                    "CrbmParams: calibration size mismatch");
    detail::require(interactions.size() == p * num_hidden * num_labels,
                    "CrbmParams: interactions size mismatch");
    detail::require(location_bias.size() == p * num_labels,
                    "CrbmParams: location bias size mismatch");
    detail::require(hidden_bias.size() == static_cast<std::size_t>(num_hidden),
                    "CrbmParams: hidden bias size mismatch");
    auto finite = [](const std::vector<double>& v) {
      for (double x : v)
        if (!std::isfinite(x)) return false;
      return true;
    };
    detail::require(finite(calibration) && finite(interactions) &&
                        finite(location_bias) && finite(hidden_bias),
                    "CrbmParams: non-finite parameter");
  }
};

inline CrbmParams make_crbm_params(int grid_h, int grid_w, int num_labels,
                                   int num_hidden, bool has_hidden_bias = true) {
  CrbmParams p;
  p.grid_h = grid_h;
  p.grid_w = grid_w;
  p.num_labels = num_labels;
  p.num_hidden = num_hidden;
  p.has_hidden_bias = has_hidden_bias;
  const std::size_t pix = detail::checked_extent(grid_h, grid_w, 1, "CrbmParams");
  detail::require(num_labels >= 2 && num_hidden >= 0, "CrbmParams: bad label/hidden counts");
  p.calibration.assign(static_cast<std::size_t>(num_labels) * num_labels, 0.0);
  p.interactions.assign(pix * num_hidden * num_labels, 0.0);
  p.location_bias.assign(pix * num_labels, 0.0);
  p.hidden_bias.assign(static_cast<std::size_t>(num_hidden), 0.0);
  return p;
}

// Training start point: small random interactions, identity calibration
// (trust the unaries initially), zero biases.
inline CrbmParams initial_crbm_params(int grid_h, int grid_w, int num_labels,
                                      int num_hidden, bool has_hidden_bias,
                                      Rng& rng) {
  CrbmParams p = make_crbm_params(grid_h, grid_w, num_labels, num_hidden, has_hidden_bias);
  for (double& w : p.interactions) w = rng.normal(0.0, 0.01);
  for (int k = 0; k < num_labels; ++k) p.wc(k, k) = 1.0;
  return p;
}

struct CrbmTrainConfig {
  int cd_steps = 10;
  double learning_rate = 0.01;
  double momentum_initial = 0.5;
  double momentum_final = 0.9;
  int momentum_switch_epoch = 5;
  double weight_decay = 1e-4;  // interactions and calibration only
  int epochs = 200;
  int minibatch = 20;
  std::uint64_t seed = 0;
  int hidden_units = 32;
  bool use_hidden_bias = true;
  int threads = 1;

  void validate() const {
    detail::require(cd_steps >= 1, "CrbmTrainConfig: cd_steps must be >= 1");
    detail::require(learning_rate > 0.0, "CrbmTrainConfig: learning_rate must be positive");
    detail::require(momentum_initial >= 0.0 && momentum_final >= 0.0,
                    "CrbmTrainConfig: negative momentum");
    detail::require(weight_decay >= 0.0, "CrbmTrainConfig: negative weight decay");
    detail::require(epochs >= 0, "CrbmTrainConfig: negative epoch count");
    detail::require(minibatch >= 1, "CrbmTrainConfig: minibatch must be >= 1");
    detail::require(hidden_units >= 0, "CrbmTrainConfig: negative hidden count");
    detail::require(threads >= 1, "CrbmTrainConfig: threads must be >= 1");
  }
};

struct CrbmInferConfig {
  int burn_in = 50;
  int samples = 200;
  std::uint64_t seed = 0;
  bool resize_to_grid = false;  // when set, inputs off the grid are resized
};

struct GibbsState {
  LabelMap labels;
  HiddenState hidden;
};

struct LabeledScores {
  LabelMap labels;
  ScoreMap scores;
};

struct CrbmTrainResult {
  CrbmParams params;
  std::vector<double> proxy_log;  // per epoch: mean positive minus negative score
};

namespace detail {

inline void check_labels_on_grid(const LabelMap& y, const CrbmParams& p, const char* who) {
  require(y.height == p.grid_h && y.width == p.grid_w && y.num_labels == p.num_labels,
          std::string(who) + ": label map dimension mismatch with params");
}

inline void check_scores_on_grid(const ScoreMap& v, const CrbmParams& p, const char* who) {
  require(v.height == p.grid_h && v.width == p.grid_w && v.num_labels == p.num_labels,
          std::string(who) + ": score map dimension mismatch with params");
}

inline void check_hidden(const HiddenState& h, const CrbmParams& p, const char* who) {
  require(static_cast<int>(h.values.size()) == p.num_hidden,
          std::string(who) + ": hidden state dimension mismatch with params");
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// base[i*K + k] = sum_k' calib[k][k'] v[i][k'] + location_bias[i][k]
inline void crbm_base_logits(const ScoreMap& v, const CrbmParams& p,
                             std::vector<double>& base) {
  const int pix = p.grid_pixels();
  const int kn = p.num_labels;
  base.assign(static_cast<std::size_t>(pix) * kn, 0.0);
  for (int i = 0; i < pix; ++i) {
    const double* vi = v.data.data() + static_cast<std::size_t>(i) * kn;
    double* bi = base.data() + static_cast<std::size_t>(i) * kn;
    for (int k = 0; k < kn; ++k) {
      double s = p.bias(i, k);
      const double* row = p.calibration.data() + static_cast<std::size_t>(k) * kn;
      for (int kp = 0; kp < kn; ++kp) s += row[kp] * vi[kp];
      bi[k] = s;
    }
  }
}

// net_j(y) = sum_i wr(i, j, y_i) + hidden_bias[j], for all j
inline void hidden_nets(const LabelMap& y, const CrbmParams& p,
                        std::vector<double>& nets) {
  const int pix = p.grid_pixels();
  const int jn = p.num_hidden;
  const int kn = p.num_labels;
  nets.assign(p.hidden_bias.begin(), p.hidden_bias.end());
  for (int i = 0; i < pix; ++i) {
    const double* wri = p.interactions.data() +
                        static_cast<std::size_t>(i) * jn * kn + y.data[i];
    for (int j = 0; j < jn; ++j) nets[j] += wri[static_cast<std::size_t>(j) * kn];
  }
}

struct CdWorkspace {
  std::vector<double> base;       // P*K calibrated unaries plus location bias
  std::vector<double> hprob;      // J
  std::vector<double> row;        // K scratch logits for one pixel
  std::vector<double> qstar;      // P*K mean label activations
  std::vector<int> active;        // indices of hidden units currently on
  LabelMap y;
  HiddenState h;
};

// One block-Gibbs sweep in place: h ~ P(h|y), then y ~ P(y|h, v). Draws
// are consumed in fixed scan order (hidden units ascending, then pixels
// row-major). When accum is given, the per-pixel conditional distribution
// used to sample each label is added into it first.
inline void sweep_inplace(LabelMap& y, HiddenState& h, const std::vector<double>& base,
                          const CrbmParams& p, Rng& rng, CdWorkspace& ws,
                          double* accum = nullptr) {
  const int pix = p.grid_pixels();
  const int jn = p.num_hidden;
  const int kn = p.num_labels;

  hidden_nets(y, p, ws.hprob);
  h.values.resize(jn);
  ws.active.clear();
  for (int j = 0; j < jn; ++j) {
    const double pr = sigmoid(ws.hprob[j]);
    h.values[j] = rng.bernoulli(pr) ? 1 : 0;
    if (h.values[j]) ws.active.push_back(j);
  }

  ws.row.resize(kn);
  for (int i = 0; i < pix; ++i) {
    const double* bi = base.data() + static_cast<std::size_t>(i) * kn;
    for (int k = 0; k < kn; ++k) ws.row[k] = bi[k];
    const double* wri = p.interactions.data() + static_cast<std::size_t>(i) * jn * kn;
    for (int j : ws.active) {
      const double* wj = wri + static_cast<std::size_t>(j) * kn;
      for (int k = 0; k < kn; ++k) ws.row[k] += wj[k];
    }
    softmax_row(ws.row);
    if (accum) {
      double* ai = accum + static_cast<std::size_t>(i) * kn;
      for (int k = 0; k < kn; ++k) ai[k] += ws.row[k];
    }
    y.data[i] = static_cast<std::uint8_t>(rng.categorical(ws.row));
  }
}

}  // namespace detail

// Joint score S(y, h, v); P(y, h | v) is proportional to exp(S).
inline double model_score(const LabelMap& y, const HiddenState& h,
                          const ScoreMap& v, const CrbmParams& p) {
  p.validate();
  detail::check_labels_on_grid(y, p, "model_score");
  detail::check_scores_on_grid(v, p, "model_score");
  detail::check_hidden(h, p, "model_score");
  const int pix = p.grid_pixels();
  const int kn = p.num_labels;
  const int jn = p.num_hidden;
  double s = 0.0;
  for (int i = 0; i < pix; ++i) {
    const int k = y.data[i];
    const double* vi = v.data.data() + static_cast<std::size_t>(i) * kn;
    const double* row = p.calibration.data() + static_cast<std::size_t>(k) * kn;
    for (int kp = 0; kp < kn; ++kp) s += row[kp] * vi[kp];
    s += p.bias(i, k);
    for (int j = 0; j < jn; ++j)
      if (h.values[j]) s += p.wr(i, j, k);
  }
  for (int j = 0; j < jn; ++j)
    if (h.values[j]) s += p.hidden_bias[j];
  return s;
}

// Analytic posterior P(h_j = 1 | y); independent across units.
inline std::vector<double> hidden_posterior(const LabelMap& y, const CrbmParams& p) {
  detail::check_labels_on_grid(y, p, "hidden_posterior");
  std::vector<double> nets;
  detail::hidden_nets(y, p, nets);
  for (double& x : nets) x = detail::sigmoid(x);
  return nets;
}

// Exact per-pixel conditionals P(y_i = k | h, v); independent across pixels.
inline ScoreMap label_conditional(const HiddenState& h, const ScoreMap& v,
                                  const CrbmParams& p) {
  detail::check_scores_on_grid(v, p, "label_conditional");
  detail::check_hidden(h, p, "label_conditional");
  std::vector<double> base;
  detail::crbm_base_logits(v, p, base);
  ScoreMap q(p.grid_h, p.grid_w, p.num_labels);
  const int pix = p.grid_pixels();
  const int kn = p.num_labels;
  const int jn = p.num_hidden;
  for (int i = 0; i < pix; ++i) {
    double* qi = q.data.data() + static_cast<std::size_t>(i) * kn;
    const double* bi = base.data() + static_cast<std::size_t>(i) * kn;
    for (int k = 0; k < kn; ++k) qi[k] = bi[k];
    const double* wri = p.interactions.data() + static_cast<std::size_t>(i) * jn * kn;
    for (int j = 0; j < jn; ++j) {
      if (!h.values[j]) continue;
      const double* wj = wri + static_cast<std::size_t>(j) * kn;
      for (int k = 0; k < kn; ++k) qi[k] += wj[k];
    }
    detail::softmax_row({qi, static_cast<std::size_t>(kn)});
  }
  return q;
}

// One block-Gibbs sweep: samples h from P(h|y), then y from P(y|h, v).
inline GibbsState gibbs_sweep(const GibbsState& state, const ScoreMap& v,
                              const CrbmParams& p, Rng& rng) {
  detail::check_labels_on_grid(state.labels, p, "gibbs_sweep");
  detail::check_scores_on_grid(v, p, "gibbs_sweep");
  detail::check_hidden(state.hidden, p, "gibbs_sweep");
  GibbsState out = state;
  detail::CdWorkspace ws;
  detail::crbm_base_logits(v, p, ws.base);
  detail::sweep_inplace(out.labels, out.hidden, ws.base, p, rng, ws);
  return out;
}

namespace detail {

// Adds the contrastive-divergence statistics of one example into grad.
// Positive phase is closed form given (y, v); the negative phase runs
// cd_steps block-Gibbs sweeps from y and reduces variance with mean
// activations at the chain end wherever that leaves the statistic
// unbiased under the stationary distribution: label conditionals of the
// final hidden state for the calibration and location terms, the hidden
// posterior of the final labels for the hidden terms, and that posterior
// paired with the sampled final labels for the interaction terms.
inline void accumulate_cd(const LabelMap& y, const ScoreMap& v, const CrbmParams& p,
                          int cd_steps, Rng& rng, CrbmParams& grad, CdWorkspace& ws) {
  const int pix = p.grid_pixels();
  const int kn = p.num_labels;
  const int jn = p.num_hidden;

  crbm_base_logits(v, p, ws.base);

  // positive phase
  hidden_nets(y, p, ws.hprob);
  for (double& x : ws.hprob) x = sigmoid(x);
  for (int i = 0; i < pix; ++i) {
    const int k = y.data[i];
    const double* vi = v.data.data() + static_cast<std::size_t>(i) * kn;
    double* wrow = grad.calibration.data() + static_cast<std::size_t>(k) * kn;
    for (int kp = 0; kp < kn; ++kp) wrow[kp] += vi[kp];
    grad.bias(i, k) += 1.0;
    double* gri = grad.interactions.data() + static_cast<std::size_t>(i) * jn * kn + k;
    for (int j = 0; j < jn; ++j) gri[static_cast<std::size_t>(j) * kn] += ws.hprob[j];
  }
  if (p.has_hidden_bias)
    for (int j = 0; j < jn; ++j) grad.hidden_bias[j] += ws.hprob[j];

  // negative phase: CD chain initialised at the data
  ws.y = y;
  ws.h.values.assign(jn, 0);
  for (int step = 0; step < cd_steps; ++step)
    sweep_inplace(ws.y, ws.h, ws.base, p, rng, ws);

  hidden_nets(ws.y, p, ws.hprob);
  for (double& x : ws.hprob) x = sigmoid(x);

  ws.qstar.resize(static_cast<std::size_t>(pix) * kn);
  for (int i = 0; i < pix; ++i) {
    double* qi = ws.qstar.data() + static_cast<std::size_t>(i) * kn;
    const double* bi = ws.base.data() + static_cast<std::size_t>(i) * kn;
    for (int k = 0; k < kn; ++k) qi[k] = bi[k];
    const double* wri = p.interactions.data() + static_cast<std::size_t>(i) * jn * kn;
    for (int j = 0; j < jn; ++j) {
      if (!ws.h.values[j]) continue;
      const double* wj = wri + static_cast<std::size_t>(j) * kn;
      for (int k = 0; k < kn; ++k) qi[k] += wj[k];
    }
    softmax_row({qi, static_cast<std::size_t>(kn)});
  }

  for (int i = 0; i < pix; ++i) {
    const double* qi = ws.qstar.data() + static_cast<std::size_t>(i) * kn;
    const double* vi = v.data.data() + static_cast<std::size_t>(i) * kn;
    for (int k = 0; k < kn; ++k) {
      const double qk = qi[k];
      double* wrow = grad.calibration.data() + static_cast<std::size_t>(k) * kn;
      for (int kp = 0; kp < kn; ++kp) wrow[kp] -= qk * vi[kp];
      grad.bias(i, k) -= qk;
    }
    // The interaction statistic pairs the hidden posterior with the sampled
    // final labels, mirroring the positive phase. Pairing two conditional
    // means (hidden posterior x label conditional) would bias the estimate
    // even at stationarity, because the factors are dependent.
    const int ke = ws.y.data[i];
    double* gri = grad.interactions.data() + static_cast<std::size_t>(i) * jn * kn + ke;
    for (int j = 0; j < jn; ++j) gri[static_cast<std::size_t>(j) * kn] -= ws.hprob[j];
  }
  if (p.has_hidden_bias)
    for (int j = 0; j < jn; ++j) grad.hidden_bias[j] -= ws.hprob[j];
}

inline void zero_params(CrbmParams& a) {
  std::fill(a.calibration.begin(), a.calibration.end(), 0.0);
  std::fill(a.interactions.begin(), a.interactions.end(), 0.0);
  std::fill(a.location_bias.begin(), a.location_bias.end(), 0.0);
  std::fill(a.hidden_bias.begin(), a.hidden_bias.end(), 0.0);
}

inline void scale_params(CrbmParams& a, double s) {
  for (double& x : a.calibration) x *= s;
  for (double& x : a.interactions) x *= s;
  for (double& x : a.location_bias) x *= s;
  for (double& x : a.hidden_bias) x *= s;
}

inline void add_scaled(CrbmParams& a, const CrbmParams& b, double s) {
  for (std::size_t i = 0; i < a.calibration.size(); ++i) a.calibration[i] += s * b.calibration[i];
  for (std::size_t i = 0; i < a.interactions.size(); ++i) a.interactions[i] += s * b.interactions[i];
  for (std::size_t i = 0; i < a.location_bias.size(); ++i) a.location_bias[i] += s * b.location_bias[i];
  for (std::size_t i = 0; i < a.hidden_bias.size(); ++i) a.hidden_bias[i] += s * b.hidden_bias[i];
}

inline double dot_params(const CrbmParams& a, const CrbmParams& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.calibration.size(); ++i) s += a.calibration[i] * b.calibration[i];
  for (std::size_t i = 0; i < a.interactions.size(); ++i) s += a.interactions[i] * b.interactions[i];
  for (std::size_t i = 0; i < a.location_bias.size(); ++i) s += a.location_bias[i] * b.location_bias[i];
  for (std::size_t i = 0; i < a.hidden_bias.size(); ++i) s += a.hidden_bias[i] * b.hidden_bias[i];
  return s;
}

constexpr std::uint64_t kStreamInit = 0x11;
constexpr std::uint64_t kStreamShuffle = 0x22;
constexpr std::uint64_t kStreamCd = 0x33;

}  // namespace detail

// Contrastive-divergence gradient of the conditional log-likelihood,
// averaged over the batch. Ascending this gradient raises the likelihood.
inline CrbmParams cd_gradient(std::span<const LabeledScores> batch,
                              const CrbmParams& p, const CrbmTrainConfig& config,
                              Rng& rng) {
  detail::require(!batch.empty(), "cd_gradient: empty batch");
  detail::require(config.cd_steps >= 1, "cd_gradient: cd_steps must be >= 1");
  CrbmParams grad = make_crbm_params(p.grid_h, p.grid_w, p.num_labels,
                                     p.num_hidden, p.has_hidden_bias);
  detail::CdWorkspace ws;
  for (const LabeledScores& ex : batch) {
    detail::check_labels_on_grid(ex.labels, p, "cd_gradient");
    detail::check_scores_on_grid(ex.scores, p, "cd_gradient");
    detail::accumulate_cd(ex.labels, ex.scores, p, config.cd_steps, rng, grad, ws);
  }
  detail::scale_params(grad, 1.0 / static_cast<double>(batch.size()));
  return grad;
}

// SGD with momentum and weight decay over minibatches of cd_gradient.
// Every example in a minibatch draws from an independent stream derived
// from (seed, epoch, dataset index), and gradients are reduced in slot
// order, so results are bit-identical regardless of thread count.
inline CrbmTrainResult train_crbm(const std::vector<LabeledScores>& dataset,
                                  const CrbmTrainConfig& config) {
  config.validate();
  detail::require(!dataset.empty(), "train_crbm: empty dataset");
  const int gh = dataset[0].labels.height;
  const int gw = dataset[0].labels.width;
  const int kn = dataset[0].labels.num_labels;
  for (const LabeledScores& ex : dataset) {
    detail::require(ex.labels.height == gh && ex.labels.width == gw &&
                        ex.labels.num_labels == kn,
                    "train_crbm: inconsistent label map dimensions across dataset");
    detail::require(ex.scores.height == gh && ex.scores.width == gw &&
                        ex.scores.num_labels == kn,
                    "train_crbm: inconsistent score map dimensions across dataset");
  }

  Rng init_rng(derive_seed(config.seed, detail::kStreamInit));
  CrbmTrainResult result;
  result.params = initial_crbm_params(gh, gw, kn, config.hidden_units,
                                      config.use_hidden_bias, init_rng);
  CrbmParams& params = result.params;
  CrbmParams velocity = make_crbm_params(gh, gw, kn, config.hidden_units,
                                         config.use_hidden_bias);
  CrbmParams batch_grad = make_crbm_params(gh, gw, kn, config.hidden_units,
                                           config.use_hidden_bias);

  const int n = static_cast<int>(dataset.size());
  std::vector<int> order(dataset.size());
  CrbmTrainConfig exconf = config;  // per-example cd settings

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double momentum = epoch < config.momentum_switch_epoch
                                ? config.momentum_initial
                                : config.momentum_final;
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(config.seed, detail::kStreamShuffle, epoch));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.below_int(i + 1)]);

    double proxy_sum = 0.0;
    for (int start = 0; start < n; start += config.minibatch) {
      const int bs = std::min(config.minibatch, n - start);
      detail::zero_params(batch_grad);

      if (config.threads > 1 && bs > 1) {
        std::vector<CrbmParams> slot(bs);
        std::atomic<int> next{0};
        auto worker = [&] {
          for (;;) {
            const int s = next.fetch_add(1);
            if (s >= bs) return;
            const int e = order[start + s];
            Rng ex_rng(derive_seed(config.seed, detail::kStreamCd,
                                   static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(e)));
            slot[s] = cd_gradient({&dataset[e], 1}, params, exconf, ex_rng);
          }
        };
        std::vector<std::thread> pool;
        const int nt = std::min(config.threads, bs);
        pool.reserve(nt);
        for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
        for (int s = 0; s < bs; ++s) detail::add_scaled(batch_grad, slot[s], 1.0);
      } else {
        // Same per-example gradients and slot-order reduction as the
        // threaded path, so results match bit for bit at any thread count.
        detail::CdWorkspace ws;
        CrbmParams exgrad = make_crbm_params(gh, gw, kn, config.hidden_units,
                                             config.use_hidden_bias);
        for (int s = 0; s < bs; ++s) {
          const int e = order[start + s];
          Rng ex_rng(derive_seed(config.seed, detail::kStreamCd,
                                 static_cast<std::uint64_t>(epoch),
                                 static_cast<std::uint64_t>(e)));
          detail::zero_params(exgrad);
          detail::accumulate_cd(dataset[e].labels, dataset[e].scores, params,
                                config.cd_steps, ex_rng, exgrad, ws);
          detail::add_scaled(batch_grad, exgrad, 1.0);
        }
      }
      detail::scale_params(batch_grad, 1.0 / bs);
      proxy_sum += detail::dot_params(batch_grad, params) * bs;

      for (std::size_t i = 0; i < batch_grad.interactions.size(); ++i)
        batch_grad.interactions[i] -= config.weight_decay * params.interactions[i];
      for (std::size_t i = 0; i < batch_grad.calibration.size(); ++i)
        batch_grad.calibration[i] -= config.weight_decay * params.calibration[i];

      detail::scale_params(velocity, momentum);
      detail::add_scaled(velocity, batch_grad, 1.0);
      detail::add_scaled(params, velocity, config.learning_rate);
    }
    result.proxy_log.push_back(proxy_sum / n);
  }
  return result;
}

// Rao-Blackwellised Gibbs estimate of the label marginals P(y_i | v):
// averages the exact per-pixel conditionals used by each post-burn-in
// sweep. Output rows sum to one.
inline ScoreMap predict_marginals(const ScoreMap& v, const CrbmParams& p,
                                  const CrbmInferConfig& cfg) {
  p.validate();
  detail::require(cfg.samples >= 1, "predict_marginals: samples must be positive");
  detail::require(cfg.burn_in >= 0, "predict_marginals: negative burn-in");
  ScoreMap grid_v = v;
  if (v.height != p.grid_h || v.width != p.grid_w) {
    detail::require(cfg.resize_to_grid,
                    "predict_marginals: scores not on the canonical grid "
                    "(set resize_to_grid to resample)");
    grid_v = resize_scores(v, p.grid_h, p.grid_w);
  }
  detail::check_scores_on_grid(grid_v, p, "predict_marginals");

  detail::CdWorkspace ws;
  detail::crbm_base_logits(grid_v, p, ws.base);
  LabelMap y = argmax_labels(grid_v);
  HiddenState h;
  h.values.assign(p.num_hidden, 0);
  Rng rng(cfg.seed);

  ScoreMap accum(p.grid_h, p.grid_w, p.num_labels, 0.0);
  for (int t = 0; t < cfg.burn_in + cfg.samples; ++t) {
    double* acc = t >= cfg.burn_in ? accum.data.data() : nullptr;
    detail::sweep_inplace(y, h, ws.base, p, rng, ws, acc);
  }
  for (double& x : accum.data) x /= cfg.samples;
  return accum;
}

// ---- exact enumeration (tiny instances only) -------------------------------

namespace detail {

inline void check_enumerable(const CrbmParams& p, const char* who) {
  const double log2_states = p.grid_pixels() * std::log2(static_cast<double>(p.num_labels)) +
                             p.num_hidden;
  if (log2_states > 21.0 + 1e-9)
    throw std::invalid_argument(
        std::string(who) + ": state space too large for enumeration (2^" +
        std::to_string(log2_states) + " states, limit 2^21)");
}

// Iterates all label configurations as base-K counters, invoking
// f(labels, base_score, nets) for each; nets hold the hidden unit inputs.
template <typename F>
inline void enumerate_labelings(const std::vector<double>& base, const CrbmParams& p,
                                F&& f) {
  const int pix = p.grid_pixels();
  const int kn = p.num_labels;
  LabelMap y(p.grid_h, p.grid_w, kn, 0);
  std::vector<double> nets;
  for (;;) {
    double score = 0.0;
    for (int i = 0; i < pix; ++i) score += base[static_cast<std::size_t>(i) * kn + y.data[i]];
    hidden_nets(y, p, nets);
    f(static_cast<const LabelMap&>(y), score, nets);
    int pos = pix - 1;
    while (pos >= 0) {
      if (++y.data[pos] < kn) break;
      y.data[pos] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
}

}  // namespace detail

// Exact conditional log-likelihood log P(y | v) by enumeration; hidden
// units are collapsed analytically, so the sum runs over K^P labelings.
inline double exact_log_likelihood(const LabelMap& y, const ScoreMap& v,
                                   const CrbmParams& p) {
  p.validate();
  detail::check_labels_on_grid(y, p, "exact_log_likelihood");
  detail::check_scores_on_grid(v, p, "exact_log_likelihood");
  detail::check_enumerable(p, "exact_log_likelihood");

  std::vector<double> base;
  detail::crbm_base_logits(v, p, base);

  double running_max = -std::numeric_limits<double>::infinity();
  double running_sum = 0.0;
  double target = 0.0;
  detail::enumerate_labelings(base, p, [&](const LabelMap& yy, double score,
                                           const std::vector<double>& nets) {
    double f = score;
    for (double net : nets) f += detail::softplus(net);
    if (yy.data == y.data) target = f;
    if (f > running_max) {
      running_sum = running_sum * std::exp(running_max - f) + 1.0;
      running_max = f;
    } else {
      running_sum += std::exp(f - running_max);
    }
  });
  return target - (running_max + std::log(running_sum));
}

// Exact gradient of log P(y | v) with respect to every parameter group.
inline CrbmParams exact_gradient(const LabelMap& y, const ScoreMap& v,
                                 const CrbmParams& p) {
  p.validate();
  detail::check_labels_on_grid(y, p, "exact_gradient");
  detail::check_scores_on_grid(v, p, "exact_gradient");
  detail::check_enumerable(p, "exact_gradient");

  std::vector<double> base;
  detail::crbm_base_logits(v, p, base);
  const int pix = p.grid_pixels();
  const int kn = p.num_labels;
  const int jn = p.num_hidden;

  // pass 1: log partition
  double running_max = -std::numeric_limits<double>::infinity();
  double running_sum = 0.0;
  detail::enumerate_labelings(base, p, [&](const LabelMap&, double score,
                                           const std::vector<double>& nets) {
    double f = score;
    for (double net : nets) f += detail::softplus(net);
    if (f > running_max) {
      running_sum = running_sum * std::exp(running_max - f) + 1.0;
      running_max = f;
    } else {
      running_sum += std::exp(f - running_max);
    }
  });
  const double log_z = running_max + std::log(running_sum);

  CrbmParams grad = make_crbm_params(p.grid_h, p.grid_w, kn, jn, p.has_hidden_bias);

  auto add_stats = [&](const LabelMap& yy, const std::vector<double>& nets, double w) {
    for (int i = 0; i < pix; ++i) {
      const int k = yy.data[i];
      const double* vi = v.data.data() + static_cast<std::size_t>(i) * kn;
      double* wrow = grad.calibration.data() + static_cast<std::size_t>(k) * kn;
      for (int kp = 0; kp < kn; ++kp) wrow[kp] += w * vi[kp];
      grad.bias(i, k) += w;
      double* gri = grad.interactions.data() + static_cast<std::size_t>(i) * jn * kn + k;
      for (int j = 0; j < jn; ++j)
        gri[static_cast<std::size_t>(j) * kn] += w * detail::sigmoid(nets[j]);
    }
    if (p.has_hidden_bias)
      for (int j = 0; j < jn; ++j) grad.hidden_bias[j] += w * detail::sigmoid(nets[j]);
  };

  // pass 2: positive statistics minus model expectation
  std::vector<double> target_nets;
  detail::hidden_nets(y, p, target_nets);
  add_stats(y, target_nets, 1.0);
  detail::enumerate_labelings(base, p, [&](const LabelMap& yy, double score,
                                           const std::vector<double>& nets) {
    double f = score;
    for (double net : nets) f += detail::softplus(net);
    add_stats(yy, nets, -std::exp(f - log_z));
  });
  return grad;
}

// Shape-prior refinement of a score map at any resolution: resample to the
// canonical grid, estimate label marginals, and return their (floored)
// logs resampled back to the input resolution.
inline ScoreMap rbm_refine(const ScoreMap& v_full, const CrbmParams& p,
                           const CrbmInferConfig& cfg) {
  p.validate();
  ScoreMap grid_v = resize_scores(v_full, p.grid_h, p.grid_w);
  ScoreMap marg = predict_marginals(grid_v, p, cfg);
  for (double& x : marg.data) x = std::log(std::max(x, 1e-8));
  return resize_scores(marg, v_full.height, v_full.width);
}

}  // namespace partseg
