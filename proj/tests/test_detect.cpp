#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "oracles.hpp"
#include "uavd/detect.hpp"

using namespace uavd;
using namespace uavd::detect;
using D = Tensor<double>;

namespace {

DetectionBox box(double cx, double cy, double w, double h, int cls = 0, double conf = 1.0) {
  DetectionBox b;
  b.cx = cx, b.cy = cy, b.w = w, b.h = h, b.class_id = cls, b.confidence = conf;
  return b;
}

DetectionBox random_box(CounterRng& rng, int classes) {
  const double w = rng.uniform(0.05, 0.4), h = rng.uniform(0.05, 0.4);
  return box(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h, static_cast<int>(rng.below(classes)),
             rng.uniform(0.01, 1));
}

std::array<double, 4> corners(const DetectionBox& b) { return {b.x1(), b.y1(), b.x2(), b.y2()}; }

/// Three levels with the given square grids, one image, zero logits.
RawPredictions<double> zero_predictions(std::array<Index, 3> sides, Index classes, Index bins) {
  RawPredictions<double> p;
  for (int l = 0; l < 3; ++l) {
    p.levels[l].cls = D::zeros({1, classes, sides[l], sides[l]});
    p.levels[l].box = D::zeros({1, 4 * bins, sides[l], sides[l]});
    p.levels[l].stride = kLevelStrides[l];
  }
  return p;
}

void set_box_logits(RawPredictions<double>& p, int level, Index y, Index x, const std::vector<double>& per_side) {
  auto& t = p.levels[level].box;
  const Index bins = static_cast<Index>(per_side.size()), W = t.dim(3), HW = t.dim(2) * W;
  std::vector<double> v(t.data().begin(), t.data().end());
  for (Index s = 0; s < 4; ++s)
    for (Index i = 0; i < bins; ++i) v[(s * bins + i) * HW + y * W + x] = per_side[i];
  t = D::leaf(t.shape(), v);
}

std::vector<DetectionBox> nms_oracle(const std::vector<DetectionBox>& boxes, double thr) {
  std::map<int, std::vector<DetectionBox>> by_class;
  for (const auto& b : boxes) by_class[b.class_id].push_back(b);
  std::vector<DetectionBox> kept;
  for (auto& [cls, list] : by_class) {
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.confidence > b.confidence; });
    std::vector<DetectionBox> mine;
    for (const auto& b : list) {
      bool keep = true;
      for (const auto& k : mine) keep = keep && oracle::box_iou(k, b) <= thr;
      if (keep) mine.push_back(b);
    }
    kept.insert(kept.end(), mine.begin(), mine.end());
  }
  return kept;
}

std::vector<std::tuple<int, double, double>> keys(const std::vector<DetectionBox>& v) {
  std::vector<std::tuple<int, double, double>> k;
  for (const auto& b : v) k.emplace_back(b.class_id, b.confidence, b.cx);
  std::sort(k.begin(), k.end());
  return k;
}

/// Per GT: the first level at or below its routed one holding an anchor center
/// inside the box, else the finest-level cell containing its center; each anchor
/// then takes its nearest candidate GT, ties to the lower index.
Assignment assign_oracle(const std::vector<DetectionBox>& gt, const std::array<LevelGrid, 3>& grids) {
  auto center = [&](int l, Index y, Index x) {
    return std::pair{(double(x) + 0.5) / double(grids[l].width), (double(y) + 0.5) / double(grids[l].height)};
  };
  auto inside = [&](const DetectionBox& b, int l, Index y, Index x) {
    const auto [ax, ay] = center(l, y, x);
    return ax >= b.x1() && ax <= b.x2() && ay >= b.y1() && ay <= b.y2();
  };
  std::vector<int> level(gt.size(), -1);
  std::vector<std::pair<Index, Index>> fallback(gt.size());
  for (std::size_t g = 0; g < gt.size(); ++g) {
    const double side = std::max(gt[g].w, gt[g].h);
    const int routed = side < 0.1 ? 0 : side < 0.25 ? 1 : 2;
    for (int l = routed; l >= 0 && level[g] < 0; --l)
      for (Index y = 0; y < grids[l].height; ++y)
        for (Index x = 0; x < grids[l].width; ++x)
          if (inside(gt[g], l, y, x)) level[g] = l;
    if (level[g] < 0) {
      fallback[g] = {std::min<Index>(Index(gt[g].cy * double(grids[0].height)), grids[0].height - 1),
                     std::min<Index>(Index(gt[g].cx * double(grids[0].width)), grids[0].width - 1)};
    }
  }
  Assignment a;
  for (int l = 0; l < 3; ++l) {
    a.matched[l].assign(static_cast<std::size_t>(grids[l].height * grids[l].width), -1);
    for (Index y = 0; y < grids[l].height; ++y)
      for (Index x = 0; x < grids[l].width; ++x) {
        double best = INFINITY;
        for (std::size_t g = 0; g < gt.size(); ++g) {
          const bool cand = level[g] == l ? inside(gt[g], l, y, x)
                                          : (level[g] < 0 && l == 0 && fallback[g] == std::pair{y, x});
          if (!cand) continue;
          const auto [ax, ay] = center(l, y, x);
          const double d = (ax - gt[g].cx) * (ax - gt[g].cx) + (ay - gt[g].cy) * (ay - gt[g].cy);
          if (d < best) best = d, a.matched[l][y * grids[l].width + x] = static_cast<int>(g);
        }
      }
  }
  return a;
}

}  // namespace

TEST_CASE("box validity") {
  CHECK_NOTHROW(box(0.5, 0.5, 1, 1).validate(1));
  CHECK_THROWS_AS(box(1.2, 0.5, 0.1, 0.1).validate(1), ConfigError);
  CHECK_THROWS_AS(box(0.5, 0.5, 0, 0.1).validate(1), ConfigError);
  CHECK_THROWS_AS(box(0.5, 0.5, 0.1, 0.1, 3).validate(3), ConfigError);
  CHECK(iou(box(0.25, 0.5, 0.5, 1), box(0.75, 0.5, 0.5, 1)) == 0.0);
  CHECK(iou(box(0.5, 0.5, 0.4, 0.4), box(0.6, 0.5, 0.4, 0.4)) == doctest::Approx(0.3 * 0.4 / (2 * 0.16 - 0.12)));
}

TEST_CASE("CIoU") {
  CounterRng rng(60);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_box(rng, 1), b = random_box(rng, 1);
    CHECK(ciou(corners(a), corners(a)) == doctest::Approx(1.0).epsilon(1e-12));
    const double c = ciou(corners(a), corners(b));
    CHECK(c <= 1.0);
    CHECK(1.0 - c >= 0.0);
    CHECK(c <= oracle::box_iou(a, b) + 1e-12);
  }
}

TEST_CASE("distribution focal decoding") {
  std::vector<double> uniform(8, 0.3);
  CHECK(dfl_expectation(uniform.data(), 8) == doctest::Approx(3.5).epsilon(1e-14));
  for (int d = 0; d < 8; ++d) {
    std::vector<double> peaked(8, -20.0);
    peaked[d] = 20.0;
    CHECK(std::abs(dfl_expectation(peaked.data(), 8) - d) < 1e-3);
  }
  const double strided[6]{0, 9, 0, 9, 5, 9};
  CHECK(dfl_expectation(strided, 3, 2) == doctest::Approx((1 + 2 * std::exp(5.0)) / (2 + std::exp(5.0))));
}

TEST_CASE("loss on a hand-built single-anchor case") {
  // Level 2 is a 4x4 grid; the GT spans one cell on each side of anchor (1, 1),
  // so every side's target distance is exactly 1 bin of 3.
  auto preds = zero_predictions({1, 1, 4}, 1, 3);
  const std::vector<double> side{0.2, 1.0, -0.5};
  set_box_logits(preds, 2, 1, 1, side);
  const std::vector<std::vector<DetectionBox>> gts{{box(0.375, 0.375, 0.5, 0.5)}};
  Assignment a;
  a.matched[0] = {-1};
  a.matched[1] = {-1};
  a.matched[2].assign(16, -1);
  a.matched[2][5] = 0;
  const LossWeights w;
  const auto r = total_loss(preds, {a}, gts, w);
  CHECK(r.foreground == 1);

  const double z = std::exp(0.2) + std::exp(1.0) + std::exp(-0.5);
  CHECK(r.dfl == doctest::Approx(-std::log(std::exp(1.0) / z)).epsilon(1e-12));
  CHECK(r.cls == doctest::Approx(18 * std::log(2.0)).epsilon(1e-12));

  const double e = (std::exp(1.0) + 2 * std::exp(-0.5)) / z;  // expected distance per side
  const double ax = 1.5, ay = 1.5;
  CHECK(r.box == doctest::Approx(1 - ciou({ax - e, ay - e, ax + e, ay + e}, {0.5, 0.5, 2.5, 2.5})).epsilon(1e-12));
  CHECK(r.total.item() == doctest::Approx(w.cls * r.cls + w.box * r.box + w.dfl * r.dfl).epsilon(1e-14));

  SUBCASE("an exact decode has zero box loss") {
    set_box_logits(preds, 2, 1, 1, {-30, 30, -30});
    CHECK(total_loss(preds, {a}, gts, w).box < 1e-12);
  }
  SUBCASE("the total is linear in each weight") {
    LossWeights twice = w;
    twice.cls *= 2;
    const auto r2 = total_loss(preds, {a}, gts, twice);
    CHECK(r2.cls == r.cls);
    CHECK(r2.total.item() - r.total.item() == doctest::Approx(w.cls * r.cls).epsilon(1e-12));
  }
  SUBCASE("no ground truth leaves only the classification term") {
    Assignment none = a;
    none.matched[2][5] = -1;
    const auto r0 = total_loss(preds, {none}, {{}}, w);
    CHECK(r0.foreground == 0);
    CHECK(r0.box == 0.0);
    CHECK(r0.dfl == 0.0);
    CHECK(r0.cls == doctest::Approx(18 * std::log(2.0)));
  }
  SUBCASE("mismatched assignments are rejected") {
    Assignment bad = a;
    bad.matched[2].resize(9);
    CHECK_THROWS_AS(total_loss(preds, {bad}, gts, w), ConfigError);
    CHECK_THROWS_AS(total_loss(preds, {a, a}, gts, w), ConfigError);
  }
}

TEST_CASE("target assignment") {
  const std::array<LevelGrid, 3> grids{LevelGrid{8, 8}, LevelGrid{4, 4}, LevelGrid{2, 2}};
  SUBCASE("empty ground truth is all background") {
    const auto a = assign_targets({}, grids);
    CHECK(a.foreground() == 0);
  }
  SUBCASE("a box around exactly one anchor center") {
    // 0.2-wide routes to level 1 (4x4); it holds only the center (0.375, 0.625).
    const auto a = assign_targets({box(0.375, 0.625, 0.2, 0.2)}, grids);
    CHECK(a.foreground() == 1);
    CHECK(a.matched[1][2 * 4 + 1] == 0);
  }
  SUBCASE("tiny boxes fall back to the cell holding their center") {
    const auto a = assign_targets({box(0.01, 0.99, 0.01, 0.01)}, grids);
    CHECK(a.foreground() == 1);
    CHECK(a.matched[0][7 * 8 + 0] == 0);
  }
  SUBCASE("overlapping boxes match the brute-force rule") {
    CounterRng rng(61);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<DetectionBox> gt;
      const auto n = 1 + rng.below(4);
      for (int i = 0; i < n; ++i) gt.push_back(random_box(rng, 1));
      if (trial % 2 == 0) gt.push_back(box(gt[0].cx + 0.02, gt[0].cy, gt[0].w, gt[0].h));
      const auto got = assign_targets(gt, grids), want = assign_oracle(gt, grids);
      for (int l = 0; l < 3; ++l) CHECK(got.matched[l] == want.matched[l]);
    }
  }
}

TEST_CASE("non-maximum suppression") {
  const auto a = box(0.30, 0.5, 0.2, 0.2, 0, 0.9), b = box(0.35, 0.5, 0.2, 0.2, 0, 0.8),
             c = box(0.41, 0.5, 0.2, 0.2, 0, 0.7);
  REQUIRE(iou(a, b) > 0.5);
  REQUIRE(iou(b, c) > 0.5);
  REQUIRE(iou(a, c) < 0.5);
  const auto kept = nms({c, b, a}, 0.5);
  CHECK(keys(kept) == keys({a, c}));
  CHECK(keys(nms({a, box(0.35, 0.5, 0.2, 0.2, 1, 0.8)}, 0.5)).size() == 2);

  CounterRng rng(62);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<DetectionBox> boxes;
    for (int i = 0; i < 20; ++i) boxes.push_back(random_box(rng, 2));
    const auto once = nms(boxes, 0.45);
    CHECK(keys(once) == keys(nms_oracle(boxes, 0.45)));
    CHECK(keys(nms(once, 0.45)) == keys(once));
  }
}

TEST_CASE("box decoding") {
  auto preds = zero_predictions({2, 1, 1}, 2, 8);
  SUBCASE("zero logits give confidence one half and the uniform distance") {
    const auto out = decode_boxes(preds, 0.0, 1.0);
    REQUIRE(out.size() == 1);
    CHECK(out[0].size() == 6);
    for (const auto& d : out[0]) CHECK(d.confidence == 0.5);
  }
  SUBCASE("threshold above every confidence gives nothing") {
    CHECK(decode_boxes(preds, 0.5 + 1e-9, 0.5)[0].empty());
  }
  SUBCASE("distances decode in grid cells") {
    auto p = zero_predictions({4, 1, 1}, 1, 8);
    std::vector<double> peak(8, -30.0);
    peak[1] = 30.0;
    set_box_logits(p, 0, 2, 1, peak);
    auto cls = std::vector<double>(16, -10.0);
    cls[2 * 4 + 1] = 3.0;
    p.levels[0].cls = D::from({1, 1, 4, 4}, cls);
    p.levels[1].cls = D::full({1, 1, 1, 1}, -10.0);
    p.levels[2].cls = D::full({1, 1, 1, 1}, -10.0);
    const auto out = decode_boxes(p, 0.5, 0.5)[0];
    REQUIRE(out.size() == 1);
    CHECK(out[0].cx == doctest::Approx(1.5 / 4).epsilon(1e-9));
    CHECK(out[0].cy == doctest::Approx(2.5 / 4).epsilon(1e-9));
    CHECK(out[0].w == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(out[0].confidence == doctest::Approx(1 / (1 + std::exp(-3.0))));
  }
}

TEST_CASE("mean average precision") {
  SUBCASE("perfect detections") {
    const std::vector<std::vector<DetectionBox>> gts{{box(0.3, 0.3, 0.2, 0.2), box(0.7, 0.7, 0.2, 0.3, 1)}, {box(0.5, 0.5, 0.4, 0.4, 2)}};
    CHECK(eval_map(gts, gts, 0.5).map == 1.0);
    CHECK(eval_map({{}, {}}, gts, 0.5).map == 0.0);
    CHECK_THROWS_AS(eval_map({{}}, gts, 0.5), ConfigError);
  }
  SUBCASE("hand-built precision-recall curve gives 5/6") {
    const std::vector<std::vector<DetectionBox>> gts{{box(0.2, 0.2, 0.2, 0.2), box(0.7, 0.7, 0.2, 0.2)}};
    const std::vector<std::vector<DetectionBox>> dets{
        {box(0.2, 0.2, 0.2, 0.2, 0, 0.9), box(0.5, 0.2, 0.1, 0.1, 0, 0.8), box(0.7, 0.7, 0.2, 0.2, 0, 0.7)}};
    const auto r = eval_map(dets, gts, 0.5);
    CHECK(r.map == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
    CHECK(oracle::average_precision(dets, gts, 0, 0.5) == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  }
  SUBCASE("randomized instances agree with the brute-force oracle") {
    CounterRng rng(63);
    for (int trial = 0; trial < 50; ++trial) {
      const int images = 1 + static_cast<int>(rng.below(3));
      std::vector<std::vector<DetectionBox>> gts(images), dets(images);
      for (int i = 0; i < images; ++i) {
        for (auto n = rng.below(5); n >= 0; --n) gts[i].push_back(random_box(rng, 3));
        for (const auto& g : gts[i])
          if (rng.uniform() < 0.7) {
            auto d = g;
            d.cx = std::clamp(d.cx + rng.uniform(-0.05, 0.05), 0.0, 1.0);
            d.confidence = rng.uniform(0.01, 1);
            dets[i].push_back(d);
          }
        for (auto n = rng.below(4); n > 0; --n) dets[i].push_back(random_box(rng, 3));
      }
      const auto r = eval_map(dets, gts, 0.5);
      double sum = 0;
      for (std::size_t k = 0; k < r.classes.size(); ++k) {
        const double want = oracle::average_precision(dets, gts, r.classes[k], 0.5);
        CHECK(r.ap[k] == doctest::Approx(want).epsilon(1e-12));
        sum += want;
      }
      CHECK(r.map == doctest::Approx(r.classes.empty() ? 0.0 : sum / double(r.classes.size())).epsilon(1e-12));
    }
  }
}

TEST_CASE("detection lines round-trip") {
  const auto b = box(0.25, 0.75, 0.125, 0.5, 3, 0.875);
  const auto parsed = parse_detections(format_detection("scene_0001", b) + "\n");
  REQUIRE(parsed.size() == 1);
  CHECK(parsed[0].first == "scene_0001");
  CHECK(parsed[0].second.class_id == 3);
  CHECK(parsed[0].second.cx == 0.25);
  CHECK(parsed[0].second.confidence == 0.875);
  CHECK_THROWS_AS(parse_detections("scene 1 0.5\n"), ConfigError);
}

TEST_CASE("detector") {
  CounterRng rng(64);
  auto cfg = network::ModelConfig::tiny();
  cfg.input_size = 128;  // stage 4 needs more than one token for A to matter
  cfg.widths = {4, 4, 8, 8, 8};
  cfg.ssm.state = 2;
  cfg.num_classes = 2;
  ParameterStore<double> store;
  add_detector_params(store, cfg, rng);
  const network::ImagePair<double> pair{D::from({1, 3, 128, 128}, rng.uniform_vector<double>(3 * 128 * 128, 0, 1)),
                                        D::from({1, 1, 128, 128}, rng.uniform_vector<double>(128 * 128, 0, 1))};

  const auto preds = detector_forward(pair, store, cfg);
  for (int l = 0; l < 3; ++l) {
    const Index side = 128 / kLevelStrides[l];
    CHECK(preds.levels[l].cls.shape() == Shape{1, 2, side, side});
    CHECK(preds.levels[l].box.shape() == Shape{1, 4 * 8, side, side});
    CHECK(preds.levels[l].stride == kLevelStrides[l]);
  }

  SUBCASE("every backbone parameter receives gradient") {
    const std::vector<std::vector<DetectionBox>> gts{{box(0.3, 0.4, 0.3, 0.2, 1), box(0.7, 0.6, 0.5, 0.6, 0)}};
    const auto a = assign_targets(gts[0], grids_of(preds));
    REQUIRE(a.foreground() > 0);
    const auto grads = backward(total_loss(preds, {a}, gts, LossWeights{}).total, store);
    int checked = 0;
    for (const auto& [name, g] : grads) {
      if (name.rfind("ffar.", 0) != 0 && name.rfind("mdtmb.", 0) != 0) continue;
      double norm = 0;
      for (double v : g.data()) norm += v * v;
      CHECK_MESSAGE(norm > 0, name);
      ++checked;
    }
    CHECK(checked > 50);
  }
  SUBCASE("a silenced head predicts confidence one half everywhere") {
    for (const auto& [name, t] : store.entries()) {
      if (name.rfind("head.", 0) != 0) continue;
      D leaf = t;
      for (auto& v : leaf.mutable_data()) v = 0;
    }
    NoGradGuard off;
    const auto silent = detector_forward(pair, store, cfg);
    for (const auto& lv : silent.levels)
      for (double v : lv.cls.data()) CHECK(v == 0.0);
    const auto decoded = decode_boxes(silent, 0.0, 1.0);
    for (const auto& d : decoded[0]) CHECK(d.confidence == 0.5);
  }
}
