#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "partseg/partseg.hpp"
#include "test_util.hpp"

using namespace partseg;

namespace {

// Runs the installed binary with stdout/stderr captured to files.
int run_cli(const std::string& args, const std::string& out_file = "",
            const std::string& err_file = "") {
  std::string cmd = std::string(PARTSEG_CLI_PATH) + " " + args;
  cmd += out_file.empty() ? " > /dev/null" : " > " + out_file;
  cmd += err_file.empty() ? " 2> /dev/null" : " 2> " + err_file;
  return std::system(cmd.c_str());
}

std::string gen_config(std::uint64_t seed, int n, const std::string& out_dir) {
  std::string cfg;
  cfg += "n = " + std::to_string(n) + "\n";
  cfg += "seed = " + std::to_string(seed) + "\n";
  cfg += "grid_h = 16\n";
  cfg += "grid_w = 16\n";
  cfg += "out = " + out_dir + "\n";
  return cfg;
}

// Generates a dataset and trains a tiny shape prior; both steps go
// through the executable so the fixtures match real usage.
struct CliFixture {
  testutil::TempDir dir;
  std::string manifest;
  std::string rbm_params;

  explicit CliFixture(const std::string& name) : dir("cli_" + name) {
    testutil::spit(dir.file("gen.cfg"), gen_config(21, 20, dir.file("data")));
    REQUIRE(run_cli("gen --config " + dir.file("gen.cfg")) == 0);
    manifest = dir.file("data") + "/manifest.tsv";
    REQUIRE(std::filesystem::exists(manifest));

    testutil::spit(dir.file("train.cfg"),
                   "epochs = 2\nhidden_units = 4\nminibatch = 7\ncd_steps = 2\n"
                   "seed = 3\ngrid_h = 16\ngrid_w = 16\n");
    REQUIRE(run_cli("train-rbm --manifest " + manifest + " --config " +
                    dir.file("train.cfg") + " --out " + dir.file("rbm")) == 0);
    rbm_params = dir.file("rbm") + "/crbm.params";
    REQUIRE(std::filesystem::exists(rbm_params));
  }
};

}  // namespace

TEST_CASE("gen subcommand writes a dataset and reruns byte-identically") {
  testutil::TempDir dir("cli_gen");
  testutil::spit(dir.file("gen.cfg"), gen_config(5, 25, dir.file("data")));

  REQUIRE(run_cli("gen --config " + dir.file("gen.cfg"), dir.file("out.txt")) == 0);
  const std::string stdout_text = testutil::slurp(dir.file("out.txt"));
  CHECK(stdout_text.find("train=19 val=3 test=3") != std::string::npos);

  const std::string manifest = dir.file("data") + "/manifest.tsv";
  REQUIRE(std::filesystem::exists(manifest));
  const std::string m1 = testutil::slurp(manifest);
  const std::string s1 = testutil::slurp(dir.file("data") + "/scores_00007.spsm");
  const std::string l1 = testutil::slurp(dir.file("data") + "/labels_00007.pgm");
  const std::string i1 = testutil::slurp(dir.file("data") + "/image_00007.ppm");

  REQUIRE(run_cli("gen --config " + dir.file("gen.cfg")) == 0);
  CHECK(testutil::slurp(manifest) == m1);
  CHECK(testutil::slurp(dir.file("data") + "/scores_00007.spsm") == s1);
  CHECK(testutil::slurp(dir.file("data") + "/labels_00007.pgm") == l1);
  CHECK(testutil::slurp(dir.file("data") + "/image_00007.ppm") == i1);
}

TEST_CASE("gen without a seed fails and names the missing key") {
  testutil::TempDir dir("cli_gen_noseed");
  testutil::spit(dir.file("gen.cfg"), "n = 3\nout = " + dir.file("data") + "\n");
  REQUIRE(run_cli("gen --config " + dir.file("gen.cfg"), "", dir.file("err.txt")) != 0);
  const std::string err = testutil::slurp(dir.file("err.txt"));
  CHECK(err.find("error:") != std::string::npos);
  CHECK(err.find("seed") != std::string::npos);
}

TEST_CASE("config files reject unknown keys") {
  testutil::TempDir dir("cli_badkey");
  testutil::spit(dir.file("gen.cfg"),
                 "n = 3\nseed = 1\nnoise_sgima = 2\nout = " + dir.file("d") + "\n");
  REQUIRE(run_cli("gen --config " + dir.file("gen.cfg"), "", dir.file("err.txt")) != 0);
  CHECK(testutil::slurp(dir.file("err.txt")).find("unknown key 'noise_sgima'") !=
        std::string::npos);
}

TEST_CASE("train-rbm writes parameters and a per-epoch log deterministically") {
  CliFixture fx("train");

  const CrbmParams p = read_crbm_params(fx.rbm_params);
  CHECK(p.grid_h == 16);
  CHECK(p.grid_w == 16);
  CHECK(p.num_labels == 5);
  CHECK(p.num_hidden == 4);

  const std::string log = testutil::slurp(fx.dir.file("rbm") + "/train.log");
  CHECK(std::count(log.begin(), log.end(), '\n') == 2);
  CHECK(log.rfind("0\t", 0) == 0);

  // a second run with the same seed reproduces the parameter file exactly
  REQUIRE(run_cli("train-rbm --manifest " + fx.manifest + " --config " +
                  fx.dir.file("train.cfg") + " --out " + fx.dir.file("rbm2")) == 0);
  CHECK(testutil::slurp(fx.dir.file("rbm2") + "/crbm.params") ==
        testutil::slurp(fx.rbm_params));
  CHECK(testutil::slurp(fx.dir.file("rbm2") + "/train.log") == log);

  // a different seed moves the parameters
  REQUIRE(run_cli("train-rbm --manifest " + fx.manifest + " --config " +
                  fx.dir.file("train.cfg") + " --seed 99 --out " + fx.dir.file("rbm3")) == 0);
  CHECK(testutil::slurp(fx.dir.file("rbm3") + "/crbm.params") !=
        testutil::slurp(fx.rbm_params));
}

TEST_CASE("rbm-infer refines a score map deterministically") {
  CliFixture fx("infer");
  const std::string scores = fx.dir.file("data") + "/scores_00000.spsm";

  REQUIRE(run_cli("rbm-infer --scores " + scores + " --rbm-params " + fx.rbm_params +
                  " --burn-in 5 --samples 10 --seed 4 --out " + fx.dir.file("r1.spsm")) == 0);
  const ScoreMap refined = read_score_map(fx.dir.file("r1.spsm"));
  CHECK(refined.height == 16);
  CHECK(refined.width == 16);
  CHECK(refined.num_labels == 5);

  REQUIRE(run_cli("rbm-infer --scores " + scores + " --rbm-params " + fx.rbm_params +
                  " --burn-in 5 --samples 10 --seed 4 --out " + fx.dir.file("r2.spsm")) == 0);
  CHECK(testutil::slurp(fx.dir.file("r2.spsm")) == testutil::slurp(fx.dir.file("r1.spsm")));

  REQUIRE(run_cli("rbm-infer --scores " + scores + " --rbm-params " + fx.rbm_params +
                  " --burn-in 5 --samples 10 --seed 5 --out " + fx.dir.file("r3.spsm")) == 0);
  CHECK(testutil::slurp(fx.dir.file("r3.spsm")) != testutil::slurp(fx.dir.file("r1.spsm")));
}

TEST_CASE("crf subcommand decodes labels from scores and image") {
  CliFixture fx("crf");
  const std::string scores = fx.dir.file("data") + "/scores_00001.spsm";
  const std::string image = fx.dir.file("data") + "/image_00001.ppm";

  // zero pairwise weights: the decoding must equal the raw argmax
  DenseCrfParams p;
  p.w_app = 0.0;
  p.w_smooth = 0.0;
  p.iterations = 2;
  write_crf_params(fx.dir.file("crf.params"), p);

  REQUIRE(run_cli("crf --scores " + scores + " --image " + image + " --crf-params " +
                  fx.dir.file("crf.params") + " --out " + fx.dir.file("pred.pgm") +
                  " --q-out " + fx.dir.file("q.spsm")) == 0);
  const LabelMap pred = read_label_map(fx.dir.file("pred.pgm"));
  const LabelMap expect = argmax_labels(read_score_map(scores));
  CHECK(pred.data == expect.data);

  const ScoreMap q = read_score_map(fx.dir.file("q.spsm"));
  CHECK(q.height == 16);
  CHECK(q.num_labels == 5);
}

TEST_CASE("eval reports perfect scores for identical maps") {
  CliFixture fx("eval");
  const std::string labels = fx.dir.file("data") + "/labels_00002.pgm";
  REQUIRE(run_cli("eval --pred " + labels + " --gt " + labels, fx.dir.file("out.txt")) == 0);
  const std::string out = testutil::slurp(fx.dir.file("out.txt"));
  CHECK(out.find("mean_iou=1\n") != std::string::npos);
  CHECK(out.find("pixel_accuracy=1\n") != std::string::npos);
}

TEST_CASE("fuse with a unit pyramid and full-image box reproduces the input") {
  testutil::TempDir dir("cli_fuse");
  Rng rng(71);
  const ScoreMap base = testutil::random_scores(rng, 12, 10, 3);
  write_score_map(dir.file("base.spsm"), base);
  testutil::spit(dir.file("pyr.tsv"), "1.0\tbase.spsm\n");
  write_boxes(dir.file("boxes.txt"), {DetectionBox{0, 0, 9, 11, 1.0, 0}});

  REQUIRE(run_cli("fuse --scales " + dir.file("pyr.tsv") + " --boxes " +
                  dir.file("boxes.txt") + " --nominal 12 --out " + dir.file("fused.spsm")) == 0);
  CHECK(testutil::slurp(dir.file("fused.spsm")) == testutil::slurp(dir.file("base.spsm")));
}

TEST_CASE("gridsearch writes the winning parameter file and table") {
  CliFixture fx("grid");

  // one-line validation set referencing dataset files by relative path
  testutil::spit(fx.dir.file("data") + "/val.tsv",
                 "scores_00014.spsm\timage_00014.ppm\tlabels_00014.pgm\n");
  testutil::spit(fx.dir.file("grid.cfg"),
                 "theta_alpha = 30\ntheta_beta = 10\ntheta_gamma = 3\n"
                 "w_app = 0\nw_smooth = 0\niterations = 2\n");

  REQUIRE(run_cli("gridsearch --set " + fx.dir.file("data") + "/val.tsv --grid " +
                      fx.dir.file("grid.cfg") + " --out " + fx.dir.file("best.params") +
                      " --table-out " + fx.dir.file("table.txt"),
                  fx.dir.file("out.txt")) == 0);

  const DenseCrfParams best = read_crf_params(fx.dir.file("best.params"));
  CHECK(best.theta_alpha == 30.0);
  CHECK(best.w_app == 0.0);
  CHECK(best.iterations == 2);

  const std::string table = testutil::slurp(fx.dir.file("table.txt"));
  CHECK(std::count(table.begin(), table.end(), '\n') == 1);
  CHECK(testutil::slurp(fx.dir.file("out.txt")).find("best mean_iou=") != std::string::npos);
}

TEST_CASE("pipeline composes the stages and reruns byte-identically") {
  CliFixture fx("pipe");

  DenseCrfParams crfp;
  crfp.iterations = 2;
  write_crf_params(fx.dir.file("crf.params"), crfp);

  auto pipeline_cfg = [&](bool rbm, bool crf) {
    std::string cfg;
    cfg += "manifest = " + fx.manifest + "\n";
    cfg += "split = test\n";
    cfg += std::string("rbm = ") + (rbm ? "on" : "off") + "\n";
    cfg += std::string("crf = ") + (crf ? "on" : "off") + "\n";
    if (rbm) cfg += "rbm_params = " + fx.rbm_params + "\nburn_in = 5\nsamples = 10\n";
    if (crf) cfg += "crf_params = " + fx.dir.file("crf.params") + "\n";
    cfg += "seed = 11\n";
    return cfg;
  };

  int variant = 0;
  for (const bool rbm : {false, true})
    for (const bool crf : {false, true}) {
      const std::string tag = "v" + std::to_string(variant++);
      testutil::spit(fx.dir.file(tag + ".cfg"), pipeline_cfg(rbm, crf));
      REQUIRE(run_cli("pipeline --config " + fx.dir.file(tag + ".cfg") + " --out " +
                          fx.dir.file(tag),
                      fx.dir.file(tag + ".txt")) == 0);

      const std::string report = testutil::slurp(fx.dir.file(tag) + "/report.txt");
      CHECK(report.find("images=3") != std::string::npos);  // test split of 20
      CHECK(report.find("mean_iou=") != std::string::npos);
      // predictions exist for exactly the test-split indices
      for (int idx : {17, 18, 19}) {
        char name[32];
        std::snprintf(name, sizeof name, "/pred_%05d.pgm", idx);
        REQUIRE(std::filesystem::exists(fx.dir.file(tag) + name));
      }
      REQUIRE(!std::filesystem::exists(fx.dir.file(tag) + "/pred_00000.pgm"));
    }

  // the full composition is reproducible byte for byte
  testutil::spit(fx.dir.file("again.cfg"), pipeline_cfg(true, true));
  REQUIRE(run_cli("pipeline --config " + fx.dir.file("again.cfg") + " --out " +
                  fx.dir.file("again")) == 0);
  CHECK(testutil::slurp(fx.dir.file("again") + "/report.txt") ==
        testutil::slurp(fx.dir.file("v3") + "/report.txt"));
  CHECK(testutil::slurp(fx.dir.file("again") + "/pred_00017.pgm") ==
        testutil::slurp(fx.dir.file("v3") + "/pred_00017.pgm"));
}

TEST_CASE("pipeline fails with a stage-tagged error on a corrupt input") {
  CliFixture fx("pipefail");
  // truncate one score file of the test split
  const std::string victim = fx.dir.file("data") + "/scores_00018.spsm";
  const std::string bytes = testutil::slurp(victim);
  testutil::spit(victim, bytes.substr(0, bytes.size() / 2));

  testutil::spit(fx.dir.file("p.cfg"), "manifest = " + fx.manifest +
                                           "\nsplit = test\nout = " + fx.dir.file("out") + "\n");
  REQUIRE(run_cli("pipeline --config " + fx.dir.file("p.cfg"), "", fx.dir.file("err.txt")) != 0);
  const std::string err = testutil::slurp(fx.dir.file("err.txt"));
  CHECK(err.find("stage input failed on") != std::string::npos);
  CHECK(err.find("scores_00018.spsm") != std::string::npos);
  CHECK(err.find("truncated") != std::string::npos);
}

TEST_CASE("the binary rejects unknown subcommands and missing flags") {
  testutil::TempDir dir("cli_bad");
  CHECK(run_cli("frobnicate", "", dir.file("e1.txt")) != 0);
  CHECK(run_cli("eval --pred only.pgm", "", dir.file("e2.txt")) != 0);
}
