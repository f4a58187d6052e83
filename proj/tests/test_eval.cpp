#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "pseg/eval.hpp"
#include "pseg/util.hpp"

using namespace pseg;
namespace fs = std::filesystem;

namespace {

BinMask random_mask(int h, int w, Rng& rng, double fill = 0.3) {
  BinMask m = BinMask::zeros(h, w);
  for (auto& v : m.v) v = rng.uniform() < fill ? 1 : 0;
  return m;
}

// Exhaustive AP oracle for small fixtures: per threshold, the maximum
// achievable true-positive count for every confidence-ordered prefix is
// found by enumerating all record subsets, then the same 101-point
// interpolation is applied.
double ap_oracle(std::vector<EvalRecord> records,
                 const std::vector<GtEntry>& gts) {
  std::sort(records.begin(), records.end(),
            [](const EvalRecord& a, const EvalRecord& b) {
              if (a.confidence != b.confidence)
                return a.confidence > b.confidence;
              if (a.scene != b.scene) return a.scene < b.scene;
              if (a.instance != b.instance) return a.instance < b.instance;
              if (a.iou != b.iou) return a.iou > b.iou;
              return a.prompt < b.prompt;
            });
  const std::size_t n = records.size();
  double acc_thr = 0;
  for (int t = 0; t < 10; ++t) {
    double thr = 0.5 + 0.05 * t;
    std::vector<double> precision(n), recall(n);
    for (std::size_t k = 0; k < n; ++k) {
      // max matching over all subsets of the first k+1 records
      std::size_t best = 0;
      for (std::uint32_t bits = 0; bits < (1u << (k + 1)); ++bits) {
        std::set<std::pair<int, int>> used;
        bool valid = true;
        std::size_t count = 0;
        for (std::size_t i = 0; i <= k && valid; ++i) {
          if (!(bits & (1u << i))) continue;
          const auto& r = records[i];
          if (r.iou < thr || used.count({r.scene, r.instance})) valid = false;
          used.insert({r.scene, r.instance});
          ++count;
        }
        if (valid) best = std::max(best, count);
      }
      precision[k] = static_cast<double>(best) / (k + 1);
      recall[k] = static_cast<double>(best) / gts.size();
    }
    for (std::size_t k = n; k-- > 1;)
      precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double acc = 0;
    for (int i = 0; i <= 100; ++i) {
      double want = i / 100.0;
      double best = 0;
      for (std::size_t k = 0; k < n; ++k)
        if (recall[k] >= want) {
          best = precision[k];
          break;
        }
      acc += best;
    }
    acc_thr += acc / 101.0;
  }
  return acc_thr / 10.0;
}

Segmenter oracle_model(const Corpus& corpus) {
  return [&corpus](const Image& img, const Prompt& prompt) -> MaskPrediction {
    // find the scene by pointer identity, then return the GT instance that
    // matches the prompt best: for boxes, the instance whose tightest box
    // is the prompt box (the protocol's source instance)
    const SceneData* scene = nullptr;
    for (const auto& s : corpus.scenes)
      if (&s.image == &img) scene = &s;
    REQUIRE(scene != nullptr);
    const BinMask* best = nullptr;
    double best_v = -1;
    for (const auto& inst : scene->instances) {
      double v;
      if (prompt.kind == Prompt::Kind::box) {
        v = tightest_box(inst) == prompt.box
                ? 2.0
                : iou(inst, box_mask(prompt.box, img.h, img.w));
      } else {
        v = inst.at(prompt.points[0].r, prompt.points[0].c) ? 1.0 : 0.0;
      }
      if (v > best_v) {
        best_v = v;
        best = &inst;
      }
    }
    MaskPrediction pred;
    pred.h = img.h;
    pred.w = img.w;
    std::vector<float> logits(best->v.size());
    for (std::size_t i = 0; i < logits.size(); ++i)
      logits[i] = best->v[i] ? 10.f : -10.f;
    pred.logits = {logits};
    pred.scores = {1.0f};
    return pred;
  };
}

Segmenter empty_model() {
  return [](const Image& img, const Prompt&) {
    MaskPrediction pred;
    pred.h = img.h;
    pred.w = img.w;
    pred.logits = {std::vector<float>(img.h * img.w, -5.f)};
    pred.scores = {0.5f};
    return pred;
  };
}

Corpus small_corpus(int scenes, std::uint64_t seed = 42) {
  auto dir =
      fs::temp_directory_path() / ("pseg_eval_corpus_" + std::to_string(seed));
  fs::remove_all(dir);
  SceneConfig cfg;
  write_corpus(dir.string(), scenes, seed, cfg);
  return Corpus::load(dir.string());
}

}  // namespace

TEST_CASE("iou analytic cases and oracle sweep") {
  BinMask a = BinMask::zeros(8, 8);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a.set(r, c, 1);
  CHECK(iou(a, a) == 1.0);

  BinMask b = BinMask::zeros(8, 8);
  for (int r = 4; r < 7; ++r)
    for (int c = 4; c < 7; ++c) b.set(r, c, 1);
  CHECK(iou(a, b) == 0.0);

  // side-3 squares offset by 1: intersection 4, union 14
  BinMask c = BinMask::zeros(8, 8);
  for (int r = 1; r < 4; ++r)
    for (int cc = 1; cc < 4; ++cc) c.set(r, cc, 1);
  CHECK(iou(a, c) == doctest::Approx(2.0 / 7).epsilon(1e-12));

  // side-2 squares offset by 2: disjoint
  BinMask d1 = BinMask::zeros(8, 8), d2 = BinMask::zeros(8, 8);
  for (int r = 0; r < 2; ++r)
    for (int cc = 0; cc < 2; ++cc) {
      d1.set(r, cc, 1);
      d2.set(r + 2, cc + 2, 1);
    }
  CHECK(iou(d1, d2) == 0.0);

  BinMask e1 = BinMask::zeros(4, 4), e2 = BinMask::zeros(4, 4);
  CHECK(iou(e1, e2) == 1.0);  // both empty: documented convention
  e1.set(0, 0, 1);
  CHECK(iou(e1, e2) == 0.0);  // exactly one empty

  CHECK_THROWS_AS(iou(BinMask::zeros(2, 2), BinMask::zeros(3, 3)),
                  ContractError);

  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    auto m1 = random_mask(12, 12, rng);
    auto m2 = random_mask(12, 12, rng);
    std::size_t inter = 0, uni = 0;
    for (int i = 0; i < 144; ++i) {
      inter += m1.v[i] && m2.v[i];
      uni += m1.v[i] || m2.v[i];
    }
    double expect = uni == 0 ? 1.0 : double(inter) / uni;
    CHECK(iou(m1, m2) == expect);
    CHECK(iou(m2, m1) == iou(m1, m2));
    CHECK(iou(m1, m2) >= 0.0);
    CHECK(iou(m1, m2) <= 1.0);
  }
}

TEST_CASE("tightest_box analytic and oracle sweep") {
  BinMask m = BinMask::zeros(8, 8);
  m.set(1, 2, 1);
  m.set(3, 4, 1);
  CHECK(tightest_box(m) == Box{1, 2, 3, 4});

  BinMask full = BinMask::zeros(5, 7);
  for (auto& v : full.v) v = 1;
  CHECK(tightest_box(full) == Box{0, 0, 4, 6});

  CHECK_THROWS_AS(tightest_box(BinMask::zeros(4, 4)), InputError);

  Rng rng(2);
  for (int t = 0; t < 1000; ++t) {
    auto mask = random_mask(10, 14, rng, 0.15);
    if (mask.empty()) continue;
    // oracle: exhaustive min/max scan
    int r0 = 99, c0 = 99, r1 = -1, c1 = -1;
    for (int r = 0; r < 10; ++r)
      for (int c = 0; c < 14; ++c)
        if (mask.at(r, c)) {
          r0 = std::min(r0, r);
          c0 = std::min(c0, c);
          r1 = std::max(r1, r);
          c1 = std::max(c1, c);
        }
    auto box = tightest_box(mask);
    CHECK(box == Box{r0, c0, r1, c1});
    // every foreground pixel inside; shrinking any side excludes one
    bool row_top = false, row_bot = false, col_l = false, col_r = false;
    for (int r = 0; r < 10; ++r)
      for (int c = 0; c < 14; ++c)
        if (mask.at(r, c)) {
          CHECK(r >= box[0]);
          CHECK(c >= box[1]);
          CHECK(r <= box[2]);
          CHECK(c <= box[3]);
          row_top |= r == box[0];
          row_bot |= r == box[2];
          col_l |= c == box[1];
          col_r |= c == box[3];
        }
    CHECK(row_top);
    CHECK(row_bot);
    CHECK(col_l);
    CHECK(col_r);
  }
}

TEST_CASE("sample_points_in_mask") {
  BinMask single = BinMask::zeros(6, 6);
  single.set(2, 3, 1);
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    auto pts = sample_points_in_mask(single, 1, rng);
    CHECK(pts[0] == std::pair<int, int>{2, 3});
  }

  BinMask blob = random_mask(10, 10, rng, 0.4);
  auto pts = sample_points_in_mask(blob, 25, rng);
  CHECK(pts.size() == 25);
  for (auto [r, c] : pts) CHECK(blob.at(r, c) == 1);

  BinMask two = BinMask::zeros(4, 4);
  two.set(0, 0, 1);
  two.set(3, 3, 1);
  int first = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i)
    if (sample_points_in_mask(two, 1, rng)[0] == std::pair<int, int>{0, 0})
      ++first;
  CHECK(static_cast<double>(first) / draws ==
        doctest::Approx(0.5).epsilon(0.04));

  CHECK_THROWS_AS(sample_points_in_mask(BinMask::zeros(4, 4), 1, rng),
                  InputError);
  CHECK_THROWS_AS(sample_points_in_mask(two, 0, rng), InputError);

  SUBCASE("replacement-free mode draws distinct pixels") {
    auto distinct = sample_points_in_mask(two, 2, rng, false);
    CHECK(distinct[0] != distinct[1]);
  }
}

TEST_CASE("average precision: analytic fixtures") {
  std::vector<GtEntry> one_gt{{0, 0, 100}};

  SUBCASE("single perfect detection") {
    std::vector<EvalRecord> recs{{0, 0, "box", 0.9, 1.0, 100}};
    auto ap = average_precision(recs, one_gt, 4096);
    CHECK(ap.ap == 1.0);
  }

  SUBCASE("detection matching nothing") {
    std::vector<EvalRecord> recs{{0, 0, "box", 0.9, 0.0, 100}};
    auto ap = average_precision(recs, one_gt, 4096);
    CHECK(ap.ap == 0.0);
  }

  SUBCASE("empty record set is NaN with a warning") {
    auto ap = average_precision({}, one_gt, 4096);
    CHECK(ap.ap == 0.0);  // no detections: zero precision everywhere
    auto none = average_precision({}, {}, 4096);
    CHECK(std::isnan(none.ap));
  }
}

TEST_CASE("average precision: five-record fixture equals the oracle") {
  std::vector<GtEntry> gts{{0, 0, 30}, {0, 1, 400}, {1, 0, 900}};
  std::vector<EvalRecord> recs{
      {0, 0, "a", 0.95, 0.85, 30},  {0, 1, "b", 0.90, 0.55, 400},
      {1, 0, "c", 0.80, 0.45, 900}, {0, 1, "d", 0.70, 0.95, 400},
      {1, 0, "e", 0.60, 0.75, 900},
  };
  auto ours = average_precision(recs, gts, 4096);
  double expect = ap_oracle(recs, gts);
  CHECK(std::abs(ours.ap - expect) < 1e-9);
  // frozen from the enumeration oracle above
  CHECK(expect == doctest::Approx(0.54217821782178155).epsilon(1e-12));
}

TEST_CASE("average precision invariants") {
  Rng rng(9);
  std::vector<GtEntry> gts;
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < 2; ++i)
      gts.push_back({s, i, static_cast<long>(20 + rng.uniform_int(800))});
  std::vector<EvalRecord> recs;
  for (int k = 0; k < 8; ++k) {
    const auto& g = gts[rng.uniform_int(gts.size())];
    recs.push_back({g.scene, g.instance, cat("p", k), rng.uniform(),
                    rng.uniform(), g.area});
  }

  auto base = average_precision(recs, gts, 4096);

  SUBCASE("input order does not matter") {
    auto shuffled = recs;
    for (std::size_t i = shuffled.size(); i > 1; --i)
      std::swap(shuffled[i - 1], shuffled[rng.uniform_int(i)]);
    auto again = average_precision(shuffled, gts, 4096);
    CHECK(again.ap == base.ap);
    bool small_same = again.ap_s == base.ap_s ||
                      (std::isnan(again.ap_s) && std::isnan(base.ap_s));
    CHECK(small_same);
  }

  SUBCASE("per-threshold AP is monotonically non-increasing") {
    for (std::size_t t = 1; t < base.per_threshold.size(); ++t)
      CHECK(base.per_threshold[t] <= base.per_threshold[t - 1] + 1e-12);
  }
}

TEST_CASE("protocols with the oracle and empty models") {
  auto corpus = small_corpus(3);

  SUBCASE("oracle model scores perfectly on both protocols") {
    auto rep_pt = eval_point_protocol(oracle_model(corpus), corpus, 1, 7);
    CHECK(rep_pt.miou == 1.0);
    auto rep_3pt = eval_point_protocol(oracle_model(corpus), corpus, 3, 7);
    CHECK(rep_3pt.miou == 1.0);
    auto rep_box = eval_box_protocol(oracle_model(corpus), corpus, nullptr);
    CHECK(rep_box.miou == 1.0);
    CHECK(rep_box.ap.ap == 1.0);
  }

  SUBCASE("empty-mask model scores zero mIoU") {
    auto rep = eval_point_protocol(empty_model(), corpus, 1, 7);
    CHECK(rep.miou == 0.0);
  }

  SUBCASE("fixed seed reproduces the report bytes; threads do not matter") {
    auto a = eval_point_protocol(oracle_model(corpus), corpus, 3, 11);
    auto b = eval_point_protocol(oracle_model(corpus), corpus, 3, 11);
    auto c = eval_point_protocol(oracle_model(corpus), corpus, 3, 11, 4);
    CHECK(a.to_csv() == b.to_csv());
    CHECK(a.to_csv() == c.to_csv());
    auto d = eval_point_protocol(oracle_model(corpus), corpus, 3, 12);
    CHECK(a.to_csv() != d.to_csv());
  }

  SUBCASE("3-click prompts carry three points") {
    auto rep = eval_point_protocol(oracle_model(corpus), corpus, 3, 5);
    for (const auto& r : rep.records)
      CHECK(std::count(r.prompt.begin(), r.prompt.end(), '|') == 2);
  }
}

TEST_CASE("external detections: validation and order invariance") {
  auto corpus = small_corpus(2, 43);
  auto dir = fs::temp_directory_path() / "pseg_eval_det";
  fs::create_directories(dir);

  std::string file = "scene,r0,c0,r1,c1,score\n";
  std::vector<std::string> rows;
  Rng rng(5);
  for (std::size_t s = 0; s < corpus.scenes.size(); ++s)
    for (const auto& inst : corpus.scenes[s].instances) {
      auto b = tightest_box(inst);
      rows.push_back(cat(s, ",", b[0], ",", b[1], ",", b[2], ",", b[3], ",",
                         fmt_g(0.5 + 0.5 * rng.uniform())));
    }
  std::string path = (dir / "dets.csv").string();
  std::string body;
  for (const auto& r : rows) body += r + "\n";
  write_text_file(path, file + body);

  auto dets = load_detections(path, corpus);
  CHECK(dets.size() == rows.size());
  auto rep = eval_box_protocol(oracle_model(corpus), corpus, &dets);
  CHECK(rep.ap.ap == 1.0);

  SUBCASE("shuffling detection rows leaves AP unchanged") {
    auto shuffled = rows;
    std::reverse(shuffled.begin(), shuffled.end());
    std::string body2;
    for (const auto& r : shuffled) body2 += r + "\n";
    std::string path2 = (dir / "dets2.csv").string();
    write_text_file(path2, file + body2);
    auto dets2 = load_detections(path2, corpus);
    auto rep2 = eval_box_protocol(oracle_model(corpus), corpus, &dets2);
    CHECK(rep2.ap.ap == rep.ap.ap);
    CHECK(rep2.ap.ap_s == rep.ap.ap_s);
    CHECK(rep2.miou == rep.miou);
  }

  SUBCASE("unknown scene is an input error") {
    std::string bad = file + "7,0,0,5,5,0.9\n";
    std::string path3 = (dir / "dets3.csv").string();
    write_text_file(path3, bad);
    CHECK_THROWS_AS(load_detections(path3, corpus), InputError);
  }
}

TEST_CASE("report save/load and self-consistency") {
  auto corpus = small_corpus(2, 44);
  auto rep = eval_box_protocol(oracle_model(corpus), corpus, nullptr);
  CHECK(rep.self_consistent());

  auto dir = fs::temp_directory_path() / "pseg_eval_rep";
  fs::create_directories(dir);
  auto path = (dir / "metrics.csv").string();
  rep.save_csv(path);
  auto loaded = EvalReport::load_csv(path);
  CHECK(loaded.self_consistent());
  CHECK(loaded.records.size() == rep.records.size());
  CHECK(loaded.miou == rep.miou);
  CHECK(loaded.ap.ap == rep.ap.ap);
  CHECK(loaded.to_csv() == rep.to_csv());

  SUBCASE("tampering with an aggregate is detected") {
    loaded.miou += 0.25;
    CHECK_FALSE(loaded.self_consistent());
  }
}
