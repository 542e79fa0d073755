// Command-line front end: data generation, CRBM training and inference,
// dense-CRF refinement, multi-scale fusion, evaluation, and the composed
// pipeline. Every subcommand is deterministic given its seeds.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "partseg/partseg.hpp"

namespace {

using namespace partseg;

std::vector<double> parse_double_list(const std::string& text, const std::string& context) {
  std::vector<double> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) out.push_back(parse_double(tok, context));
  if (out.empty()) throw std::runtime_error(context + ": empty value list");
  return out;
}

SynthConfig synth_config_from_kv(const KeyValues& kv) {
  kv.require_known({"n", "seed", "out", "grid_h", "grid_w", "num_labels",
                    "arm_angle_jitter", "leg_angle_jitter", "translation_jitter",
                    "noise_sigma", "margin", "part_dropout", "color_noise"});
  SynthConfig c;
  c.grid_h = static_cast<int>(kv.get_int("grid_h", c.grid_h));
  c.grid_w = static_cast<int>(kv.get_int("grid_w", c.grid_w));
  c.num_labels = static_cast<int>(kv.get_int("num_labels", c.num_labels));
  c.arm_angle_jitter = kv.get_double("arm_angle_jitter", c.arm_angle_jitter);
  c.leg_angle_jitter = kv.get_double("leg_angle_jitter", c.leg_angle_jitter);
  c.translation_jitter = kv.get_double("translation_jitter", c.translation_jitter);
  c.noise_sigma = kv.get_double("noise_sigma", c.noise_sigma);
  c.margin = kv.get_double("margin", c.margin);
  c.part_dropout = kv.get_double("part_dropout", c.part_dropout);
  c.color_noise = kv.get_double("color_noise", c.color_noise);
  c.seed = kv.get_u64("seed");  // required: every run must pin its stream
  c.validate();
  return c;
}

CrbmTrainConfig train_config_from_kv(const KeyValues& kv) {
  kv.require_known({"cd_steps", "learning_rate", "momentum_initial", "momentum_final",
                    "momentum_switch_epoch", "weight_decay", "epochs", "minibatch",
                    "seed", "hidden_units", "use_hidden_bias", "grid_h", "grid_w",
                    "threads"});
  CrbmTrainConfig c;
  c.cd_steps = static_cast<int>(kv.get_int("cd_steps", c.cd_steps));
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.momentum_initial = kv.get_double("momentum_initial", c.momentum_initial);
  c.momentum_final = kv.get_double("momentum_final", c.momentum_final);
  c.momentum_switch_epoch =
      static_cast<int>(kv.get_int("momentum_switch_epoch", c.momentum_switch_epoch));
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs));
  c.minibatch = static_cast<int>(kv.get_int("minibatch", c.minibatch));
  c.seed = kv.get_u64("seed", c.seed);
  c.hidden_units = static_cast<int>(kv.get_int("hidden_units", c.hidden_units));
  c.use_hidden_bias = kv.get_bool("use_hidden_bias", c.use_hidden_bias);
  c.threads = static_cast<int>(kv.get_int("threads", c.threads));
  return c;
}

// ---- gen --------------------------------------------------------------------

struct GenArgs {
  std::string config;
  std::string out;
};

int run_gen(const GenArgs& a) {
  const KeyValues kv = KeyValues::parse_file(a.config);
  const SynthConfig config = synth_config_from_kv(kv);
  const int n = static_cast<int>(kv.get_int("n"));
  std::string out = a.out.empty() ? kv.get_string("out", "") : a.out;
  if (out.empty())
    throw std::runtime_error(a.config + ": missing key 'out' (or pass --out)");
  const GenResult res = gen_dataset(n, config, out);
  std::cout << res.manifest_path << "\n";
  std::cout << "train=" << res.n_train << " val=" << res.n_val
            << " test=" << res.n_test << "\n";
  return 0;
}

// ---- train-rbm --------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

std::vector<LabeledScores> load_split(const std::string& manifest_path, Split split,
                                      int grid_h, int grid_w) {
  std::vector<LabeledScores> data;
  for (const ManifestEntry& e : read_manifest(manifest_path)) {
    if (split_of_index(e.index) != split) continue;
    LabeledScores ex;
    ex.labels = resize_labels(read_label_map(e.label_path), grid_h, grid_w);
    ex.scores = resize_scores(read_score_map(e.score_path), grid_h, grid_w);
    data.push_back(std::move(ex));
  }
  return data;
}

int run_train_rbm(const TrainArgs& a) {
  KeyValues kv = a.config.empty() ? KeyValues::parse_text("", "<defaults>")
                                  : KeyValues::parse_file(a.config);
  CrbmTrainConfig config = train_config_from_kv(kv);
  if (a.seed) config.seed = *a.seed;
  if (a.threads) config.threads = *a.threads;
  const int grid_h = static_cast<int>(kv.get_int("grid_h", 32));
  const int grid_w = static_cast<int>(kv.get_int("grid_w", 32));

  const std::vector<LabeledScores> train = load_split(a.manifest, Split::train, grid_h, grid_w);
  if (train.empty())
    throw std::runtime_error(a.manifest + ": train split is empty");

  const CrbmTrainResult res = train_crbm(train, config);

  std::filesystem::create_directories(a.out);
  const std::filesystem::path dir(a.out);
  write_crbm_params((dir / "crbm.params").string(), res.params);
  std::string log;
  for (std::size_t e = 0; e < res.proxy_log.size(); ++e)
    log += std::to_string(e) + "\t" + format_double(res.proxy_log[e]) + "\n";
  detail::write_file_bytes((dir / "train.log").string(), log);
  std::cout << (dir / "crbm.params").string() << "\n";
  return 0;
}

// ---- rbm-infer --------------------------------------------------------------

struct RbmInferArgs {
  std::string scores;
  std::string params;
  std::string out;
  int burn_in = 50;
  int samples = 200;
  std::uint64_t seed = 0;
};

int run_rbm_infer(const RbmInferArgs& a) {
  const ScoreMap v = read_score_map(a.scores);
  const CrbmParams p = read_crbm_params(a.params);
  CrbmInferConfig cfg;
  cfg.burn_in = a.burn_in;
  cfg.samples = a.samples;
  cfg.seed = a.seed;
  write_score_map(a.out, rbm_refine(v, p, cfg));
  std::cout << a.out << "\n";
  return 0;
}

// ---- crf --------------------------------------------------------------------

struct CrfArgs {
  std::string scores;
  std::string image;
  std::string params;
  std::string out;
  std::string q_out;
};

int run_crf(const CrfArgs& a) {
  const ScoreMap v = read_score_map(a.scores);
  const Image img = read_image(a.image);
  const DenseCrfParams p = read_crf_params(a.params);
  const CrfResult res = crf_infer(v, img, p);
  write_label_map(a.out, res.labels);
  if (!a.q_out.empty()) write_score_map(a.q_out, res.q);
  std::cout << a.out << "\n";
  return 0;
}

// ---- fuse -------------------------------------------------------------------

struct FuseArgs {
  std::string scales;
  std::string boxes;
  std::string out;
  int base_h = 0;
  int base_w = 0;
  int nominal = 321;
};

int run_fuse(const FuseArgs& a) {
  const ScalePyramid pyr = read_pyramid(a.scales, a.nominal);
  const std::vector<DetectionBox> boxes = read_boxes(a.boxes);
  int base_h = a.base_h, base_w = a.base_w;
  if (base_h == 0 || base_w == 0) {
    int unit = -1;
    for (std::size_t s = 0; s < pyr.scales.size(); ++s)
      if (pyr.scales[s] == 1.0) unit = static_cast<int>(s);
    if (unit < 0)
      throw std::runtime_error(a.scales +
                               ": base dimensions required (no scale 1.0 to infer them from)");
    base_h = pyr.maps[unit].height;
    base_w = pyr.maps[unit].width;
  }
  write_score_map(a.out, fuse_scores(pyr, boxes, base_h, base_w));
  std::cout << a.out << "\n";
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string pred;
  std::string gt;
};

std::string iou_table(const IouReport& rep, long long match, long long total) {
  std::string out = "# IOU pooled over pixels\n";
  for (std::size_t k = 0; k < rep.per_label.size(); ++k) {
    out += std::to_string(k);
    out += '\t';
    out += rep.included[k] ? format_double(rep.per_label[k]) : "excluded";
    out += '\n';
  }
  out += "mean_iou=" + format_double(rep.mean) + "\n";
  out += "pixel_accuracy=" +
         format_double(static_cast<double>(match) / static_cast<double>(total)) + "\n";
  return out;
}

int run_eval(const EvalArgs& a) {
  LabelMap pred = read_label_map(a.pred);
  LabelMap gt = read_label_map(a.gt);
  if (pred.num_labels != gt.num_labels) {
    // PGM maxval reflects the largest stored label, not K; align the pair.
    const int k = std::max(pred.num_labels, gt.num_labels);
    pred.num_labels = k;
    gt.num_labels = k;
  }
  const IouReport rep = iou_report(pred, gt);
  long long match = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i)
    if (pred.data[i] == gt.data[i]) ++match;
  std::cout << iou_table(rep, match, static_cast<long long>(pred.data.size()));
  return 0;
}

// ---- gridsearch -------------------------------------------------------------

struct GridArgs {
  std::string set;
  std::string grid;
  std::string out;
  std::string table_out;
};

std::vector<DenseCrfParams> grid_from_kv(const KeyValues& kv) {
  kv.require_known({"theta_alpha", "theta_beta", "theta_gamma", "w_app", "w_smooth",
                    "iterations", "update_mode", "damping"});
  DenseCrfParams base;
  base.iterations = static_cast<int>(kv.get_int("iterations", base.iterations));
  base.damping = kv.get_double("damping", base.damping);
  const std::string mode = kv.get_string("update_mode", "parallel");
  if (mode == "sequential") {
    base.update_mode = CrfUpdateMode::sequential;
  } else if (mode != "parallel") {
    throw std::runtime_error(kv.source() + " key 'update_mode': expected parallel or sequential");
  }
  auto axis = [&](const char* key, std::initializer_list<double> fallback) {
    if (!kv.has(key)) return std::vector<double>(fallback);
    return parse_double_list(kv.get_string(key), kv.source() + " key '" + std::string(key) + "'");
  };
  const auto tas = axis("theta_alpha", {10, 30, 50, 80});
  const auto tbs = axis("theta_beta", {3, 10, 20});
  const auto tgs = axis("theta_gamma", {1, 3});
  const auto was = axis("w_app", {1, 3, 5, 10});
  const auto wss = axis("w_smooth", {1, 3});
  std::vector<DenseCrfParams> grid;
  for (double ta : tas)
    for (double tb : tbs)
      for (double tg : tgs)
        for (double wa : was)
          for (double ws : wss) {
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

std::vector<CrfExample> read_crf_set(const std::string& path) {
  const std::string text = detail::read_file_bytes(path);
  const std::filesystem::path dir = std::filesystem::path(path).parent_path();
  auto resolve = [&](std::string rel) {
    std::filesystem::path p(std::move(rel));
    return (p.is_relative() ? dir / p : p).string();
  };
  std::vector<CrfExample> set;
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
                                " (expected scores<TAB>image<TAB>gt)");
    CrfExample ex;
    ex.scores = read_score_map(resolve(line.substr(0, t1)));
    ex.image = read_image(resolve(line.substr(t1 + 1, t2 - t1 - 1)));
    ex.gt = read_label_map(resolve(line.substr(t2 + 1)));
    ex.gt.num_labels = ex.scores.num_labels;
    ex.gt.validate();
    set.push_back(std::move(ex));
  }
  return set;
}

int run_gridsearch(const GridArgs& a) {
  const std::vector<DenseCrfParams> grid =
      a.grid.empty() ? make_default_grid() : grid_from_kv(KeyValues::parse_file(a.grid));
  const std::vector<CrfExample> set = read_crf_set(a.set);
  const GridSearchResult res = grid_search(grid, set);
  std::cout << res.table;
  std::cout << "best mean_iou=" << format_double(res.best_score) << "\n";
  if (!a.table_out.empty()) detail::write_file_bytes(a.table_out, res.table);
  write_crf_params(a.out, res.best);
  return 0;
}

// ---- pipeline ---------------------------------------------------------------

struct PipelineArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

[[noreturn]] void stage_fail(const std::string& stage, const std::string& file,
                             const std::string& what) {
  throw std::runtime_error("stage " + stage + " failed on " + file + ": " + what);
}

int run_pipeline(const PipelineArgs& a) {
  const KeyValues kv = KeyValues::parse_file(a.config);
  kv.require_known({"manifest", "split", "rbm", "crf", "rbm_params", "crf_params",
                    "burn_in", "samples", "seed", "out"});
  const std::string manifest = kv.get_string("manifest");
  const std::string split_name_str = kv.get_string("split", "test");
  const bool use_rbm = kv.get_bool("rbm", false);
  const bool use_crf = kv.get_bool("crf", false);
  CrbmInferConfig infer;
  infer.burn_in = static_cast<int>(kv.get_int("burn_in", infer.burn_in));
  infer.samples = static_cast<int>(kv.get_int("samples", infer.samples));
  infer.seed = a.seed ? *a.seed : kv.get_u64("seed", 0);
  std::string out = a.out.empty() ? kv.get_string("out", "") : a.out;
  if (out.empty())
    throw std::runtime_error(a.config + ": missing key 'out' (or pass --out)");

  std::optional<Split> split;
  if (split_name_str == "train") split = Split::train;
  else if (split_name_str == "val") split = Split::val;
  else if (split_name_str == "test") split = Split::test;
  else if (split_name_str != "all")
    throw std::runtime_error(a.config + ": key 'split' must be train, val, test, or all");

  CrbmParams rbm_params;
  if (use_rbm) {
    const std::string path = kv.get_string("rbm_params");
    try {
      rbm_params = read_crbm_params(path);
    } catch (const std::exception& e) {
      stage_fail("rbm", path, e.what());
    }
  }
  DenseCrfParams crf_params;
  if (use_crf) {
    const std::string path = kv.get_string("crf_params");
    try {
      crf_params = read_crf_params(path);
    } catch (const std::exception& e) {
      stage_fail("crf", path, e.what());
    }
  }

  std::filesystem::create_directories(out);
  const std::filesystem::path out_dir(out);

  std::optional<IouAccumulator> acc;
  long long match = 0, total = 0;
  int count = 0;

  for (const ManifestEntry& e : read_manifest(manifest)) {
    if (split && split_of_index(e.index) != *split) continue;
    ScoreMap scores = [&] {
      try {
        return read_score_map(e.score_path);
      } catch (const std::exception& ex) {
        stage_fail("input", e.score_path, ex.what());
      }
    }();
    LabelMap gt = [&] {
      try {
        return read_label_map(e.label_path);
      } catch (const std::exception& ex) {
        stage_fail("input", e.label_path, ex.what());
      }
    }();
    gt.num_labels = scores.num_labels;
    gt.validate();

    if (use_rbm) {
      try {
        // every image draws from its own stream so manifest order is free
        CrbmInferConfig per = infer;
        per.seed = derive_seed(infer.seed, 0x7e, static_cast<std::uint64_t>(e.index));
        scores = rbm_refine(scores, rbm_params, per);
      } catch (const std::exception& ex) {
        stage_fail("rbm", e.score_path, ex.what());
      }
    }
    LabelMap pred;
    if (use_crf) {
      const std::string image_path = image_path_for(e);
      try {
        const Image img = read_image(image_path);
        pred = crf_infer(scores, img, crf_params).labels;
      } catch (const std::exception& ex) {
        stage_fail("crf", image_path, ex.what());
      }
    } else {
      pred = argmax_labels(scores);
    }

    char name[32];
    std::snprintf(name, sizeof name, "pred_%05d.pgm", e.index);
    write_label_map((out_dir / name).string(), pred);

    if (!acc) acc.emplace(scores.num_labels);
    acc->add(pred, gt);
    for (std::size_t i = 0; i < pred.data.size(); ++i)
      if (pred.data[i] == gt.data[i]) ++match;
    total += static_cast<long long>(pred.data.size());
    ++count;
  }
  if (count == 0)
    throw std::runtime_error(manifest + ": split '" + split_name_str + "' is empty");

  std::string report = "# pipeline report\n";
  report += "# split=" + split_name_str + " rbm=" + (use_rbm ? "on" : "off") +
            " crf=" + (use_crf ? "on" : "off") + "\n";
  report += "images=" + std::to_string(count) + "\n";
  report += iou_table(acc->report(), match, total);
  detail::write_file_bytes((out_dir / "report.txt").string(), report);
  std::cout << report;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"structured segmentation refinement toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  CLI::App* c_gen = app.add_subcommand("gen", "generate a synthetic dataset");
  c_gen->add_option("--config", gen.config, "generator config file")->required();
  c_gen->add_option("--out", gen.out, "output directory (overrides config)");

  TrainArgs train;
  CLI::App* c_train = app.add_subcommand("train-rbm", "train the shape prior");
  c_train->add_option("--manifest", train.manifest, "dataset manifest")->required();
  c_train->add_option("--config", train.config, "training config file");
  c_train->add_option("--out", train.out, "output directory")->required();
  std::uint64_t train_seed = 0;
  int train_threads = 0;
  CLI::Option* o_tseed = c_train->add_option("--seed", train_seed, "override config seed");
  CLI::Option* o_tthreads = c_train->add_option("--threads", train_threads, "worker threads");

  RbmInferArgs rinf;
  CLI::App* c_rinf = app.add_subcommand("rbm-infer", "refine scores with the shape prior");
  c_rinf->add_option("--scores", rinf.scores, "input score map")->required();
  c_rinf->add_option("--rbm-params", rinf.params, "CRBM parameter file")->required();
  c_rinf->add_option("--out", rinf.out, "output score map")->required();
  c_rinf->add_option("--burn-in", rinf.burn_in, "Gibbs burn-in sweeps");
  c_rinf->add_option("--samples", rinf.samples, "Gibbs sample sweeps");
  c_rinf->add_option("--seed", rinf.seed, "sampler seed");

  CrfArgs crf;
  CLI::App* c_crf = app.add_subcommand("crf", "dense-CRF refinement of one image");
  c_crf->add_option("--scores", crf.scores, "input score map")->required();
  c_crf->add_option("--image", crf.image, "input image (PPM)")->required();
  c_crf->add_option("--crf-params", crf.params, "CRF parameter file")->required();
  c_crf->add_option("--out", crf.out, "output label map (PGM)")->required();
  c_crf->add_option("--q-out", crf.q_out, "also write the final Q map");

  FuseArgs fuse;
  CLI::App* c_fuse = app.add_subcommand("fuse", "fuse a score pyramid over detection boxes");
  c_fuse->add_option("--scales", fuse.scales, "pyramid manifest (scale<TAB>path)")->required();
  c_fuse->add_option("--boxes", fuse.boxes, "detection box file")->required();
  c_fuse->add_option("--out", fuse.out, "output score map")->required();
  c_fuse->add_option("--base-h", fuse.base_h, "base height (default: scale-1.0 map)");
  c_fuse->add_option("--base-w", fuse.base_w, "base width (default: scale-1.0 map)");
  c_fuse->add_option("--nominal", fuse.nominal, "nominal training size");

  EvalArgs eval;
  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a prediction against ground truth");
  c_eval->add_option("--pred", eval.pred, "predicted label map")->required();
  c_eval->add_option("--gt", eval.gt, "ground-truth label map")->required();

  GridArgs grid;
  CLI::App* c_grid = app.add_subcommand("gridsearch", "grid-search CRF hyperparameters");
  c_grid->add_option("--set", grid.set, "validation set file (scores<TAB>image<TAB>gt)")->required();
  c_grid->add_option("--grid", grid.grid, "grid config (value lists per key)");
  c_grid->add_option("--out", grid.out, "output CRF parameter file")->required();
  c_grid->add_option("--table-out", grid.table_out, "also write the score table");

  PipelineArgs pipe;
  CLI::App* c_pipe = app.add_subcommand("pipeline", "composed refinement + evaluation");
  c_pipe->add_option("--config", pipe.config, "pipeline config file")->required();
  c_pipe->add_option("--out", pipe.out, "output directory (overrides config)");
  std::uint64_t pipe_seed = 0;
  CLI::Option* o_pseed = c_pipe->add_option("--seed", pipe_seed, "override config seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_gen) return run_gen(gen);
    if (*c_train) {
      if (o_tseed->count()) train.seed = train_seed;
      if (o_tthreads->count()) train.threads = train_threads;
      return run_train_rbm(train);
    }
    if (*c_rinf) return run_rbm_infer(rinf);
    if (*c_crf) return run_crf(crf);
    if (*c_fuse) return run_fuse(fuse);
    if (*c_eval) return run_eval(eval);
    if (*c_grid) return run_gridsearch(grid);
    if (*c_pipe) {
      if (o_pseed->count()) pipe.seed = pipe_seed;
      return run_pipeline(pipe);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
