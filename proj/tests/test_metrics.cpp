#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <optional>

#include "partseg/partseg.hpp"
#include "test_util.hpp"

using namespace partseg;

namespace {

// Independent IOU oracle: direct mask counting per label.
double oracle_iou(const LabelMap& pred, const LabelMap& gt, int label) {
  long long inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] == label, g = gt.data[i] == label;
    if (p && g) ++inter;
    if (p || g) ++uni;
  }
  return uni == 0 ? -1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

SuperpixelMap random_superpixels(Rng& rng, int h, int w, int s) {
  SuperpixelMap sp;
  sp.height = h;
  sp.width = w;
  sp.num_superpixels = s;
  sp.ids.resize(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < sp.ids.size(); ++i)
    sp.ids[i] = i < static_cast<std::size_t>(s) ? static_cast<int>(i) : rng.below_int(s);
  return sp;
}

}  // namespace

TEST_CASE("iou_report basics") {
  Rng rng(21);
  const LabelMap m = testutil::random_labels(rng, 6, 7, 4);
  const IouReport perfect = iou_report(m, m);
  CHECK(perfect.mean == 1.0);
  for (std::size_t k = 0; k < perfect.per_label.size(); ++k)
    if (perfect.included[k]) CHECK(perfect.per_label[k] == 1.0);

  // two 2x4 strips overlapping in a 2x2 patch: IOU = 4 / 12
  LabelMap a(4, 6, 2, 0), b(4, 6, 2, 0);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 4; ++c) a.at(r, c) = 1;
  for (int r = 0; r < 2; ++r)
    for (int c = 2; c < 6; ++c) b.at(r, c) = 1;
  const IouReport rep = iou_report(a, b);
  CHECK(rep.per_label[1] == Catch::Approx(1.0 / 3.0).margin(1e-15));

  LabelMap small(2, 2, 2);
  CHECK_THROWS_WITH(iou_report(small, a), Catch::Matchers::ContainsSubstring("dimension mismatch"));
}

TEST_CASE("iou_report excludes labels absent from both maps") {
  LabelMap a(2, 2, 5, 0), b(2, 2, 5, 0);
  a.at(0, 0) = 1;
  b.at(0, 0) = 1;
  const IouReport rep = iou_report(a, b);
  CHECK(rep.included[0]);
  CHECK(rep.included[1]);
  CHECK(!rep.included[2]);
  CHECK(!rep.included[3]);
  CHECK(!rep.included[4]);
  CHECK(rep.mean == 1.0);  // only labels 0 and 1 count
}

TEST_CASE("iou_report matches the mask-counting oracle") {
  Rng rng(22);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + rng.below_int(5);
    const LabelMap pred = testutil::random_labels(rng, 5, 5, k);
    const LabelMap gt = testutil::random_labels(rng, 5, 5, k);
    const IouReport rep = iou_report(pred, gt);
    std::vector<double> kept;
    for (int l = 0; l < k; ++l) {
      const double oracle = oracle_iou(pred, gt, l);
      if (oracle < 0) {
        REQUIRE(!rep.included[l]);
      } else {
        REQUIRE(rep.included[l]);
        REQUIRE(rep.per_label[l] == oracle);
        kept.push_back(oracle);
      }
    }
    REQUIRE(rep.mean == mean_of(kept));
  }
}

TEST_CASE("merged label groups use union masks") {
  Rng rng(23);
  const std::vector<LabelGroup> groups = {{"upper", {1, 2}}, {"all", {0, 1, 2, 3}}};
  for (int trial = 0; trial < 50; ++trial) {
    const LabelMap pred = testutil::random_labels(rng, 6, 6, 4);
    const LabelMap gt = testutil::random_labels(rng, 6, 6, 4);
    const IouReport rep = iou_report(pred, gt, groups);
    REQUIRE(rep.merged.size() == 2);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      long long inter = 0, uni = 0;
      auto in = [&](int l) {
        for (int x : groups[g].labels)
          if (x == l) return true;
        return false;
      };
      for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = in(pred.data[i]), t = in(gt.data[i]);
        if (p && t) ++inter;
        if (p || t) ++uni;
      }
      REQUIRE(rep.merged[g].second == static_cast<double>(inter) / uni);
    }
  }
}

TEST_CASE("pixel accuracy counts matches") {
  Rng rng(24);
  const LabelMap m = testutil::random_labels(rng, 5, 5, 3);
  CHECK(pixel_accuracy(m, m) == 1.0);

  LabelMap a(2, 2, 2, 0), b(2, 2, 2, 1);
  CHECK(pixel_accuracy(a, b) == 0.0);

  LabelMap c(2, 2, 2, 0);
  c.at(1, 1) = 1;  // 3 of 4 agree with all-zero
  CHECK(pixel_accuracy(a, c) == 0.75);

  std::vector<std::uint8_t> mask(4, 0);
  mask[3] = 1;  // only the mismatching pixel
  CHECK(pixel_accuracy(a, c, mask) == 0.0);
  CHECK_THROWS_WITH(pixel_accuracy(a, c, std::vector<std::uint8_t>(4, 0)),
                    Catch::Matchers::ContainsSubstring("empty mask"));
}

TEST_CASE("superpixel projection majority vote") {
  SuperpixelMap sp;
  sp.height = 2;
  sp.width = 4;
  sp.num_superpixels = 2;
  sp.ids = {0, 0, 1, 1, 0, 0, 1, 1};

  LabelMap pred(2, 4, 3, 0);
  // superpixel 1 gets a 50/50 split of labels 0 and 2: tie goes to 0
  pred.at(0, 2) = 2;
  pred.at(1, 2) = 2;
  const auto proj = superpixel_project(pred, sp);
  REQUIRE(proj.size() == 2);
  CHECK(proj[0] == 0);
  CHECK(proj[1] == 0);

  pred.at(0, 3) = 2;  // now 3 of 4 say label 2
  CHECK(superpixel_project(pred, sp)[1] == 2);
}

TEST_CASE("superpixel projection matches a histogram oracle") {
  Rng rng(25);
  for (int trial = 0; trial < 50; ++trial) {
    const int s = 1 + rng.below_int(10);
    const SuperpixelMap sp = random_superpixels(rng, 6, 6, s);
    const LabelMap pred = testutil::random_labels(rng, 6, 6, 5);
    const auto proj = superpixel_project(pred, sp);
    for (int id = 0; id < s; ++id) {
      std::map<int, int> hist;
      for (std::size_t i = 0; i < sp.ids.size(); ++i)
        if (sp.ids[i] == id) ++hist[pred.data[i]];
      int best = -1, best_n = -1;
      for (const auto& [label, n] : hist)
        if (n > best_n) {
          best = label;
          best_n = n;
        }
      REQUIRE(proj[id] == best);
    }
  }
}

TEST_CASE("superpixel accuracy") {
  Rng rng(26);
  const SuperpixelMap sp = random_superpixels(rng, 4, 4, 4);
  const LabelMap pred = testutil::random_labels(rng, 4, 4, 3);
  const auto proj = superpixel_project(pred, sp);

  CHECK(superpixel_accuracy(pred, proj, sp) == 1.0);

  std::vector<std::uint8_t> wrong(proj);
  for (auto& v : wrong) v = static_cast<std::uint8_t>((v + 1) % 3);
  CHECK(superpixel_accuracy(pred, wrong, sp) == 0.0);

  std::vector<std::uint8_t> half(proj);
  half[0] = static_cast<std::uint8_t>((half[0] + 1) % 3);
  half[1] = static_cast<std::uint8_t>((half[1] + 1) % 3);
  CHECK(superpixel_accuracy(pred, half, sp) == 0.5);

  std::vector<std::uint8_t> short_gt(proj.begin(), proj.end() - 1);
  CHECK_THROWS_WITH(superpixel_accuracy(pred, short_gt, sp),
                    Catch::Matchers::ContainsSubstring("id mismatch"));
}

TEST_CASE("mask_to_bbox finds the tight hull") {
  LabelMap m(8, 10, 3, 0);
  m.at(3, 5) = 1;
  DetectionBox b = mask_to_bbox(m, 1);
  CHECK(b.x0 == 5);
  CHECK(b.y0 == 3);
  CHECK(b.x1 == 5);
  CHECK(b.y1 == 3);

  LabelMap full(4, 6, 2, 1);
  b = mask_to_bbox(full, 1);
  CHECK(b.x0 == 0);
  CHECK(b.y0 == 0);
  CHECK(b.x1 == 5);
  CHECK(b.y1 == 3);

  // L shape: vertical arm plus horizontal arm
  LabelMap ell(6, 6, 2, 0);
  for (int r = 1; r < 5; ++r) ell.at(r, 1) = 1;
  for (int c = 1; c < 5; ++c) ell.at(4, c) = 1;
  b = mask_to_bbox(ell, 1);
  CHECK(b.x0 == 1);
  CHECK(b.y0 == 1);
  CHECK(b.x1 == 4);
  CHECK(b.y1 == 4);

  CHECK_THROWS_AS(mask_to_bbox(m, 2), EmptyMaskError);
}

TEST_CASE("mask_to_bbox minimality on random fixtures") {
  Rng rng(27);
  for (int trial = 0; trial < 50; ++trial) {
    LabelMap m = testutil::random_labels(rng, 7, 7, 3);
    m.at(rng.below_int(7), rng.below_int(7)) = 1;  // guarantee presence
    const DetectionBox b = mask_to_bbox(m, 1);
    bool on_left = false, on_right = false, on_top = false, on_bottom = false;
    for (int r = 0; r < 7; ++r)
      for (int c = 0; c < 7; ++c) {
        if (m.at(r, c) != 1) continue;
        REQUIRE(b.contains(r, c));
        on_left |= c == b.x0;
        on_right |= c == b.x1;
        on_top |= r == b.y0;
        on_bottom |= r == b.y1;
      }
    REQUIRE((on_left && on_right && on_top && on_bottom));
  }
}

TEST_CASE("pcp scores localized parts") {
  const DetectionBox g1{0, 0, 9, 9, 1.0, 0};
  const DetectionBox g2{20, 20, 29, 29, 1.0, 1};
  std::vector<DetectionBox> gt = {g1, g2};
  std::vector<std::optional<DetectionBox>> pred = {g1, g2};
  CHECK(pcp(pred, gt) == 1.0);

  // 10x10 box shifted by 4 columns: inter 6x10=60, union 140 -> IoU 3/7 < 0.5
  pred[0] = DetectionBox{4, 0, 13, 9, 1.0, 0};
  CHECK(box_iou(*pred[0], g1) == Catch::Approx(60.0 / 140.0));
  CHECK(pcp(pred, gt) == 0.5);
  CHECK(pcp(pred, gt, 0.4) == 1.0);

  pred[0].reset();  // missing prediction counts as incorrect
  CHECK(pcp(pred, gt) == 0.5);

  CHECK_THROWS_WITH(pcp(pred, std::vector<DetectionBox>{}),
                    Catch::Matchers::ContainsSubstring("no ground-truth parts"));
  CHECK_THROWS_WITH(pcp(pred, gt, 1.0), Catch::Matchers::ContainsSubstring("threshold"));
  std::vector<std::optional<DetectionBox>> shorter = {g1};
  CHECK_THROWS_WITH(pcp(shorter, gt), Catch::Matchers::ContainsSubstring("pairing"));
}

TEST_CASE("box_iou symmetry and range") {
  Rng rng(28);
  for (int trial = 0; trial < 100; ++trial) {
    auto rand_box = [&] {
      const int x0 = rng.below_int(20), y0 = rng.below_int(20);
      return DetectionBox{x0, y0, x0 + rng.below_int(10), y0 + rng.below_int(10), 1.0, 0};
    };
    const DetectionBox a = rand_box(), b = rand_box();
    const double ab = box_iou(a, b);
    REQUIRE(ab == box_iou(b, a));
    REQUIRE(ab >= 0.0);
    REQUIRE(ab <= 1.0);
    REQUIRE(box_iou(a, a) == 1.0);
  }
}
