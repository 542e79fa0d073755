#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "partseg/partseg.hpp"
#include "test_util.hpp"

using namespace partseg;

namespace {

ScalePyramid dummy_pyramid(std::vector<double> scales, int nominal) {
  ScalePyramid pyr;
  pyr.scales = std::move(scales);
  pyr.maps.assign(pyr.scales.size(), ScoreMap(1, 1, 2));
  pyr.nominal = nominal;
  return pyr;
}

DetectionBox box_hw(int h, int w, double conf = 1.0) {
  return DetectionBox{0, 0, w - 1, h - 1, conf, 0};
}

ScalePyramid pyramid_for_base(Rng& rng, const std::vector<double>& scales,
                              int base_h, int base_w, int k, int nominal) {
  ScalePyramid pyr;
  pyr.scales = scales;
  pyr.nominal = nominal;
  for (double s : scales)
    pyr.maps.push_back(testutil::random_scores(
        rng, static_cast<int>(std::lround(s * base_h)),
        static_cast<int>(std::lround(s * base_w)), k));
  return pyr;
}

// Independent bilinear interpolation with clamped corner indices.
void oracle_bilerp(const ScoreMap& m, double sr, double sc, std::vector<double>& out) {
  const int r0 = static_cast<int>(sr), c0 = static_cast<int>(sc);
  const int r1 = std::min(r0 + 1, m.height - 1), c1 = std::min(c0 + 1, m.width - 1);
  const double fr = sr - r0, fc = sc - c0;
  out.resize(m.num_labels);
  for (int k = 0; k < m.num_labels; ++k)
    out[k] = (1 - fr) * ((1 - fc) * m.at(r0, c0, k) + fc * m.at(r0, c1, k)) +
             fr * ((1 - fc) * m.at(r1, c0, k) + fc * m.at(r1, c1, k));
}

}  // namespace

TEST_CASE("optimal_scale steers boxes toward the nominal size") {
  const ScalePyramid pyr = dummy_pyramid({1.0, 1.5, 2.0}, 321);

  // a box already at nominal size stays at scale 1.0
  CHECK(optimal_scale(box_hw(321, 321), pyr) == 0);
  // a half-size box is doubled
  CHECK(optimal_scale(box_hw(160, 160), pyr) == 2);
  // one long side anchors an elongated box at scale 1.0
  CHECK(optimal_scale(box_hw(321, 160), pyr) == 0);
}

TEST_CASE("optimal_scale ties resolve to the smallest scale") {
  const ScalePyramid pyr = dummy_pyramid({1.0, 2.0}, 15);
  // 10x10 box: both scales miss the nominal by 10 in total
  CHECK(optimal_scale(box_hw(10, 10), pyr) == 0);
}

TEST_CASE("optimal_scale agrees with exhaustive enumeration") {
  Rng rng(61);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> scales;
    double s = 0.25 + rng.uniform() * 0.5;
    const int levels = 2 + rng.below_int(4);
    for (int i = 0; i < levels; ++i) {
      scales.push_back(s);
      s += 0.25 + rng.uniform();
    }
    const int nominal = 5 + rng.below_int(400);
    const ScalePyramid pyr = dummy_pyramid(scales, nominal);
    const DetectionBox box = box_hw(1 + rng.below_int(400), 1 + rng.below_int(400));

    int best = -1;
    double best_obj = 0.0;
    for (int i = 0; i < levels; ++i) {
      const double obj = std::abs(scales[i] * box.box_height() - nominal) +
                         std::abs(scales[i] * box.box_width() - nominal);
      if (best < 0 || obj < best_obj) {
        best = i;
        best_obj = obj;
      }
    }
    REQUIRE(optimal_scale(box, pyr) == best);
  }
}

TEST_CASE("pyramid validation catches bad structure") {
  CHECK_THROWS_WITH(dummy_pyramid({}, 321).validate(),
                    Catch::Matchers::ContainsSubstring("empty pyramid"));
  CHECK_THROWS_WITH(dummy_pyramid({2.0, 1.0}, 321).validate(),
                    Catch::Matchers::ContainsSubstring("strictly increasing"));

  Rng rng(62);
  ScalePyramid pyr = pyramid_for_base(rng, {1.0, 2.0}, 8, 8, 2, 16);
  pyr.maps[1] = testutil::random_scores(rng, 19, 16, 2);  // 3 pixels off
  CHECK_THROWS_WITH(pyr.validate_against(8, 8),
                    Catch::Matchers::ContainsSubstring("inconsistent with base size"));
}

TEST_CASE("fuse_scores with a unit pyramid is the identity") {
  Rng rng(63);
  ScalePyramid pyr;
  pyr.scales = {1.0};
  pyr.maps = {testutil::random_scores(rng, 9, 7, 3)};
  pyr.nominal = 9;

  // no boxes: every pixel falls back to the scale-1.0 map
  const ScoreMap bare = fuse_scores(pyr, {}, 9, 7);
  CHECK(bare.data == pyr.maps[0].data);

  // one full-image box picks the only scale
  const std::vector<DetectionBox> boxes = {box_hw(9, 7)};
  const ScoreMap fused = fuse_scores(pyr, boxes, 9, 7);
  CHECK(fused.data == pyr.maps[0].data);
}

TEST_CASE("a full-image box reproduces plain resampling of its scale") {
  Rng rng(64);
  const int bh = 16, bw = 12;
  // nominal 28 pulls the 16x12 full-image box to scale 2.0
  const ScalePyramid pyr = pyramid_for_base(rng, {1.0, 2.0}, bh, bw, 4, 28);
  REQUIRE(optimal_scale(box_hw(bh, bw), pyr) == 1);

  const ScoreMap fused = fuse_scores(pyr, {box_hw(bh, bw)}, bh, bw);
  const ScoreMap direct = resize_scores(pyr.maps[1], bh, bw);
  CHECK(fused.data == direct.data);  // bit-identical resampling path
}

TEST_CASE("overlap follows the higher-confidence box") {
  const int bh = 20, bw = 20;
  // constant maps labelled by scale make the chosen level observable
  ScalePyramid pyr;
  pyr.scales = {1.0, 2.0};
  pyr.nominal = 24;
  pyr.maps = {ScoreMap(20, 20, 2, 1.0), ScoreMap(40, 40, 2, 2.0)};

  // big box wants scale 1.0 (24 close to 20), small box wants 2.0
  DetectionBox big{0, 0, 19, 19, 0.5, 0};
  DetectionBox small{2, 2, 11, 11, 0.9, 0};
  REQUIRE(optimal_scale(big, pyr) == 0);
  REQUIRE(optimal_scale(small, pyr) == 1);

  const ScoreMap fused = fuse_scores(pyr, {big, small}, bh, bw);
  CHECK(fused.at(3, 3, 0) == 2.0);    // inside both: confident box wins
  CHECK(fused.at(15, 15, 0) == 1.0);  // big box only

  // equal confidence: the earlier box keeps the pixel
  big.confidence = 0.9;
  const ScoreMap tied = fuse_scores(pyr, {big, small}, bh, bw);
  CHECK(tied.at(3, 3, 0) == 1.0);
  const ScoreMap swapped = fuse_scores(pyr, {small, big}, bh, bw);
  CHECK(swapped.at(3, 3, 0) == 2.0);
}

TEST_CASE("fuse_scores matches a per-pixel oracle on random instances") {
  Rng rng(66);
  for (int trial = 0; trial < 25; ++trial) {
    const int bh = 6 + rng.below_int(10);
    const int bw = 6 + rng.below_int(10);
    const int kn = 2 + rng.below_int(3);
    std::vector<double> scales = {1.0};
    if (rng.uniform() < 0.7) scales.push_back(1.5 + rng.uniform());
    if (rng.uniform() < 0.4) scales.insert(scales.begin(), 0.5);
    const int nominal = 4 + rng.below_int(30);
    const ScalePyramid pyr = pyramid_for_base(rng, scales, bh, bw, kn, nominal);

    std::vector<DetectionBox> boxes;
    const int nb = rng.below_int(4);
    for (int b = 0; b < nb; ++b) {
      DetectionBox box;
      box.x0 = rng.below_int(bw) - 2;
      box.y0 = rng.below_int(bh) - 2;
      box.x1 = box.x0 + rng.below_int(bw);
      box.y1 = box.y0 + rng.below_int(bh);
      box.confidence = rng.below_int(4) * 0.25;  // collisions exercise ties
      boxes.push_back(box);
    }

    const ScoreMap fused = fuse_scores(pyr, boxes, bh, bw);

    std::vector<double> row;
    for (int r = 0; r < bh; ++r)
      for (int c = 0; c < bw; ++c) {
        int pick = -1;
        DetectionBox picked;
        for (std::size_t b = 0; b < boxes.size(); ++b) {
          DetectionBox cl = boxes[b];
          if (!clamp_box(cl, bh, bw)) continue;
          if (!cl.contains(r, c)) continue;
          if (pick < 0 || cl.confidence > picked.confidence) {
            pick = static_cast<int>(b);
            picked = cl;
          }
        }
        int s = -1;
        if (pick >= 0) {
          double best_obj = 0.0;
          for (std::size_t i = 0; i < pyr.scales.size(); ++i) {
            const double obj =
                std::abs(pyr.scales[i] * picked.box_height() - nominal) +
                std::abs(pyr.scales[i] * picked.box_width() - nominal);
            if (s < 0 || obj < best_obj) {
              s = static_cast<int>(i);
              best_obj = obj;
            }
          }
        } else {
          for (std::size_t i = 0; i < pyr.scales.size(); ++i)
            if (pyr.scales[i] == 1.0) s = static_cast<int>(i);
        }
        REQUIRE(s >= 0);
        const ScoreMap& m = pyr.maps[s];
        oracle_bilerp(m, detail::sample_coord(r, bh, m.height),
                      detail::sample_coord(c, bw, m.width), row);
        for (int k = 0; k < kn; ++k)
          REQUIRE(fused.at(r, c, k) == Catch::Approx(row[k]).margin(1e-9));
      }
  }
}

TEST_CASE("fuse_scores needs scale 1.0 only for uncovered pixels") {
  Rng rng(67);
  ScalePyramid pyr;
  pyr.scales = {2.0};
  pyr.maps = {testutil::random_scores(rng, 16, 16, 2)};
  pyr.nominal = 16;

  CHECK_THROWS_WITH(fuse_scores(pyr, {box_hw(4, 4)}, 8, 8),
                    Catch::Matchers::ContainsSubstring("no scale 1.0"));
  // full cover: no fallback needed
  const ScoreMap ok = fuse_scores(pyr, {box_hw(8, 8)}, 8, 8);
  CHECK(ok.height == 8);
}

TEST_CASE("box_pixel_accuracy restricts scoring to the box union") {
  Rng rng(68);
  const LabelMap gt = testutil::random_labels(rng, 10, 10, 3);
  LabelMap pred = gt;
  const std::vector<DetectionBox> boxes = {DetectionBox{1, 1, 4, 4, 1.0, 0}};
  CHECK(box_pixel_accuracy(pred, gt, boxes) == 1.0);

  // corrupt only pixels outside the box: accuracy inside stays perfect
  for (int r = 0; r < 10; ++r)
    for (int c = 0; c < 10; ++c)
      if (!boxes[0].contains(r, c)) pred.at(r, c) = static_cast<std::uint8_t>((gt.at(r, c) + 1) % 3);
  CHECK(box_pixel_accuracy(pred, gt, boxes) == 1.0);
  CHECK(pixel_accuracy(pred, gt) < 1.0);

  // corrupt half the box rows
  pred = gt;
  for (int r = 1; r <= 2; ++r)
    for (int c = 1; c <= 4; ++c) pred.at(r, c) = static_cast<std::uint8_t>((gt.at(r, c) + 1) % 3);
  CHECK(box_pixel_accuracy(pred, gt, boxes) == 0.5);

  // boxes falling outside the frame are dropped; an empty union is an error
  const std::vector<DetectionBox> outside = {DetectionBox{30, 30, 35, 35, 1.0, 0}};
  CHECK_THROWS_WITH(box_pixel_accuracy(pred, gt, outside),
                    Catch::Matchers::ContainsSubstring("empty box union"));
}

TEST_CASE("read_pyramid round trip") {
  testutil::TempDir dir("pyramid");
  Rng rng(69);
  const ScoreMap s1 = testutil::random_scores(rng, 8, 6, 3);
  const ScoreMap s2 = testutil::random_scores(rng, 16, 12, 3);
  write_score_map(dir.file("s1.spsm"), s1);
  write_score_map(dir.file("s2.spsm"), s2);
  testutil::spit(dir.file("pyr.tsv"), "1.0\ts1.spsm\n2.0\ts2.spsm\n");

  const ScalePyramid pyr = read_pyramid(dir.file("pyr.tsv"), 12);
  REQUIRE(pyr.scales == std::vector<double>{1.0, 2.0});
  CHECK(pyr.nominal == 12);
  CHECK(pyr.maps[0].data == s1.data);
  CHECK(pyr.maps[1].data == s2.data);
  pyr.validate_against(8, 6);

  testutil::spit(dir.file("bad.tsv"), "1.0 s1.spsm\n");
  CHECK_THROWS_WITH(read_pyramid(dir.file("bad.tsv")),
                    Catch::Matchers::ContainsSubstring("expected scale<TAB>path"));
}
