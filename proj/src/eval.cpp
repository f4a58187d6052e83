#include "pseg/eval.hpp"

#include <algorithm>
#include <chrono>
#include <map>
#include <set>

#include "pseg/util.hpp"

namespace pseg {

namespace {

constexpr double kSmallFrac = 0.007;
constexpr double kMediumFrac = 0.067;

enum class Bucket { small, medium, large };

Bucket bucket_of(long area, long image_pixels) {
  double frac = static_cast<double>(area) / image_pixels;
  if (frac < kSmallFrac) return Bucket::small;
  if (frac < kMediumFrac) return Bucket::medium;
  return Bucket::large;
}

// Canonical record order: input permutation must not affect AP.
bool canonical_less(const EvalRecord& a, const EvalRecord& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.scene != b.scene) return a.scene < b.scene;
  if (a.instance != b.instance) return a.instance < b.instance;
  if (a.iou != b.iou) return a.iou > b.iou;
  return a.prompt < b.prompt;
}

// AP at one threshold over a GT subset; records pre-filtered to that
// subset and canonically sorted.
double ap_at_threshold(const std::vector<EvalRecord>& sorted, double thr,
                       std::size_t n_gt) {
  if (n_gt == 0) return std::nan("");
  std::set<std::pair<int, int>> claimed;
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    const auto& r = sorted[k];
    std::pair<int, int> key{r.scene, r.instance};
    if (r.iou >= thr && !claimed.count(key)) {
      claimed.insert(key);
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / (k + 1));
    recall.push_back(static_cast<double>(tp) / n_gt);
  }
  // precision envelope, then 101-point interpolation
  for (std::size_t k = precision.size(); k-- > 1;)
    precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double acc = 0;
  for (int i = 0; i <= 100; ++i) {
    double want = i / 100.0;
    double best = 0;
    for (std::size_t k = 0; k < recall.size(); ++k)
      if (recall[k] >= want) {
        best = precision[k];
        break;
      }
    acc += best;
  }
  return acc / 101.0;
}

double ap_over_thresholds(const std::vector<EvalRecord>& sorted,
                          std::size_t n_gt, std::vector<double>* per_thr) {
  if (n_gt == 0) return std::nan("");
  double acc = 0;
  int n = 0;
  for (int t = 0; t < 10; ++t) {
    double thr = 0.5 + 0.05 * t;
    double v = ap_at_threshold(sorted, thr, n_gt);
    if (per_thr) per_thr->push_back(v);
    acc += v;
    ++n;
  }
  return acc / n;
}

}  // namespace

APResult average_precision(const std::vector<EvalRecord>& records,
                           const std::vector<GtEntry>& gts,
                           long image_pixels) {
  APResult out;
  if (gts.empty()) {
    log_warn("average_precision: empty ground-truth set, AP undefined");
    return out;
  }
  std::map<std::pair<int, int>, long> gt_area;
  for (const auto& g : gts) gt_area[{g.scene, g.instance}] = g.area;

  auto compute = [&](auto in_bucket, std::vector<double>* per_thr) {
    std::vector<EvalRecord> sel;
    std::size_t n_gt = 0;
    for (const auto& g : gts)
      if (in_bucket(g.area)) ++n_gt;
    for (const auto& r : records) {
      auto it = gt_area.find({r.scene, r.instance});
      long area = it != gt_area.end() ? it->second : r.gt_area;
      if (in_bucket(area)) sel.push_back(r);
    }
    std::sort(sel.begin(), sel.end(), canonical_less);
    return ap_over_thresholds(sel, n_gt, per_thr);
  };

  out.ap = compute([](long) { return true; }, &out.per_threshold);
  out.ap_s = compute(
      [&](long a) { return bucket_of(a, image_pixels) == Bucket::small; },
      nullptr);
  out.ap_m = compute(
      [&](long a) { return bucket_of(a, image_pixels) == Bucket::medium; },
      nullptr);
  out.ap_l = compute(
      [&](long a) { return bucket_of(a, image_pixels) == Bucket::large; },
      nullptr);
  if (records.empty())
    log_warn("average_precision: no detection records, AP is 0/NaN");
  return out;
}

void EvalReport::recompute_aggregates() {
  if (records.empty()) {
    miou = std::nan("");
  } else {
    double acc = 0;
    for (const auto& r : records) acc += r.iou;
    miou = acc / records.size();
  }
  if (with_ap) ap = average_precision(records, gt_index, image_pixels);
}

std::string EvalReport::to_csv() const {
  std::string s;
  s += cat("meta,protocol,", protocol, "\n");
  s += cat("meta,image_pixels,", image_pixels, "\n");
  for (const auto& g : gt_index)
    s += cat("gt,", g.scene, ",", g.instance, ",", g.area, "\n");
  s += "header,scene,instance,prompt,confidence,iou,gt_area\n";
  for (const auto& r : records)
    s += cat("record,", r.scene, ",", r.instance, ",", r.prompt, ",",
             fmt_exact(r.confidence), ",", fmt_exact(r.iou), ",", r.gt_area,
             "\n");
  s += cat("aggregate,n_records,", records.size(), "\n");
  s += cat("aggregate,miou,", fmt_exact(miou), "\n");
  if (with_ap) {
    s += cat("aggregate,ap,", fmt_exact(ap.ap), "\n");
    s += cat("aggregate,ap_s,", fmt_exact(ap.ap_s), "\n");
    s += cat("aggregate,ap_m,", fmt_exact(ap.ap_m), "\n");
    s += cat("aggregate,ap_l,", fmt_exact(ap.ap_l), "\n");
  }
  return s;
}

void EvalReport::save_csv(const std::string& path) const {
  write_text_file(path, to_csv());
}

EvalReport EvalReport::load_csv(const std::string& path) {
  EvalReport rep;
  double stored_miou = std::nan(""), stored_ap = std::nan("");
  double stored_ap_s = std::nan(""), stored_ap_m = std::nan("");
  double stored_ap_l = std::nan("");
  bool saw_ap = false;
  for (const auto& line : split(read_text_file(path), '\n')) {
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (f[0] == "meta" && f.size() == 3) {
      if (f[1] == "protocol") rep.protocol = f[2];
      if (f[1] == "image_pixels") rep.image_pixels = std::stol(f[2]);
    } else if (f[0] == "gt" && f.size() == 4) {
      rep.gt_index.push_back(
          {std::stoi(f[1]), std::stoi(f[2]), std::stol(f[3])});
    } else if (f[0] == "record" && f.size() == 7) {
      EvalRecord r;
      r.scene = std::stoi(f[1]);
      r.instance = std::stoi(f[2]);
      r.prompt = f[3];
      r.confidence = std::stod(f[4]);
      r.iou = std::stod(f[5]);
      r.gt_area = std::stol(f[6]);
      rep.records.push_back(std::move(r));
    } else if (f[0] == "aggregate" && f.size() == 3) {
      if (f[1] == "miou") stored_miou = std::stod(f[2]);
      if (f[1] == "ap") {
        stored_ap = std::stod(f[2]);
        saw_ap = true;
      }
      if (f[1] == "ap_s") stored_ap_s = std::stod(f[2]);
      if (f[1] == "ap_m") stored_ap_m = std::stod(f[2]);
      if (f[1] == "ap_l") stored_ap_l = std::stod(f[2]);
    } else if (f[0] == "header") {
      // column description, nothing to parse
    } else {
      throw ParseError(cat(path, ": unrecognized report row '", line, "'"));
    }
  }
  rep.with_ap = saw_ap;
  rep.miou = stored_miou;
  rep.ap.ap = stored_ap;
  rep.ap.ap_s = stored_ap_s;
  rep.ap.ap_m = stored_ap_m;
  rep.ap.ap_l = stored_ap_l;
  return rep;
}

bool EvalReport::self_consistent() const {
  EvalReport copy = *this;
  copy.recompute_aggregates();
  auto eq = [](double a, double b) {
    return (std::isnan(a) && std::isnan(b)) || a == b;
  };
  return eq(copy.miou, miou) &&
         (!with_ap || (eq(copy.ap.ap, ap.ap) && eq(copy.ap.ap_s, ap.ap_s) &&
                       eq(copy.ap.ap_m, ap.ap_m) && eq(copy.ap.ap_l, ap.ap_l)));
}

namespace {

struct TimedRecords {
  std::vector<EvalRecord> records;
  std::vector<double> seconds;
};

void fill_wallclock(EvalReport& rep, std::vector<double> seconds) {
  if (seconds.empty()) return;
  std::sort(seconds.begin(), seconds.end());
  double total = 0;
  for (double s : seconds) total += s;
  rep.wall_total_s = total;
  rep.wall_median_s = seconds[seconds.size() / 2];
  rep.wall_p95_s = seconds[std::min(seconds.size() - 1,
                                    static_cast<std::size_t>(
                                        seconds.size() * 0.95))];
}

std::vector<GtEntry> gt_index_of(const Corpus& corpus) {
  std::vector<GtEntry> out;
  for (std::size_t s = 0; s < corpus.scenes.size(); ++s)
    for (std::size_t i = 0; i < corpus.scenes[s].instances.size(); ++i)
      out.push_back({static_cast<int>(s), static_cast<int>(i),
                     static_cast<long>(corpus.scenes[s].instances[i].count())});
  return out;
}

}  // namespace

EvalReport eval_point_protocol(const Segmenter& model, const Corpus& corpus,
                               int clicks, std::uint64_t seed, int threads,
                               bool with_replacement) {
  if (clicks < 1) throw InputError(cat("clicks must be >= 1, got ", clicks));
  EvalReport rep;
  rep.protocol = cat("point-", clicks, "click");
  rep.gt_index = gt_index_of(corpus);
  rep.image_pixels = corpus.scenes.empty()
                         ? 0
                         : static_cast<long>(corpus.scenes[0].image.h) *
                               corpus.scenes[0].image.w;
  rep.with_ap = false;

  const auto& gts = rep.gt_index;
  rep.records.resize(gts.size());
  std::vector<double> seconds(gts.size(), 0.0);
  Rng master(seed);
  parallel_for(gts.size(), threads, [&](std::size_t k) {
    const auto& g = gts[k];
    const auto& scene = corpus.scenes[g.scene];
    const auto& gt = scene.instances[g.instance];
    Rng rng = master.split(static_cast<std::uint64_t>(g.scene) * 1000003u +
                           g.instance);
    auto pts = sample_points_in_mask(gt, clicks, rng, with_replacement);
    std::vector<Prompt::Point> pp;
    for (auto [r, c] : pts) pp.push_back({r, c, true});
    Prompt prompt = Prompt::from_points(std::move(pp));
    auto t0 = std::chrono::steady_clock::now();
    auto pred = model(scene.image, prompt);
    seconds[k] = std::chrono::duration<double>(
                     std::chrono::steady_clock::now() - t0)
                     .count();
    int sel = select_most_confident(pred);
    EvalRecord rec;
    rec.scene = g.scene;
    rec.instance = g.instance;
    rec.prompt = prompt.describe();
    rec.confidence = pred.scores[sel];
    rec.iou = iou(pred.binarized(sel), gt);
    rec.gt_area = g.area;
    rep.records[k] = std::move(rec);
  });
  fill_wallclock(rep, std::move(seconds));
  rep.recompute_aggregates();
  return rep;
}

std::vector<Detection> load_detections(const std::string& path,
                                       const Corpus& corpus) {
  std::vector<Detection> out;
  auto lines = split(read_text_file(path), '\n');
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    if (line.empty() || line[0] == '#') continue;
    if (i == 0 && line.rfind("scene,", 0) == 0) continue;  // header
    auto f = split(line, ',');
    if (f.size() != 6)
      throw ParseError(cat(path, ": line ", i + 1,
                           ": expected scene,r0,c0,r1,c1,score"));
    Detection d;
    d.scene = std::stoi(f[0]);
    d.box = {std::stoi(f[1]), std::stoi(f[2]), std::stoi(f[3]),
             std::stoi(f[4])};
    d.score = std::stod(f[5]);
    if (d.scene < 0 || d.scene >= static_cast<int>(corpus.scenes.size()))
      throw InputError(cat(path, ": line ", i + 1, ": unknown scene ",
                           d.scene));
    out.push_back(d);
  }
  return out;
}

EvalReport eval_box_protocol(const Segmenter& model, const Corpus& corpus,
                             const std::vector<Detection>* external,
                             int threads) {
  EvalReport rep;
  rep.protocol = external ? "box-external" : "box-gt";
  rep.gt_index = gt_index_of(corpus);
  rep.image_pixels = corpus.scenes.empty()
                         ? 0
                         : static_cast<long>(corpus.scenes[0].image.h) *
                               corpus.scenes[0].image.w;
  rep.with_ap = true;

  struct Task {
    Detection det;
    int source_instance = -1;  // GT boxes score against their own instance
  };
  std::vector<Task> tasks;
  if (external) {
    for (const auto& d : *external) tasks.push_back({d, -1});
  } else {
    for (const auto& g : rep.gt_index)
      tasks.push_back(
          {{g.scene,
            tightest_box(corpus.scenes[g.scene].instances[g.instance]),
            -1.0},  // score filled from model confidence
           g.instance});
  }

  rep.records.resize(tasks.size());
  std::vector<double> seconds(tasks.size(), 0.0);
  parallel_for(tasks.size(), threads, [&](std::size_t k) {
    const auto& d = tasks[k].det;
    const auto& scene = corpus.scenes[d.scene];
    Prompt prompt = Prompt::from_box(d.box);
    auto t0 = std::chrono::steady_clock::now();
    auto pred = model(scene.image, prompt);
    seconds[k] = std::chrono::duration<double>(
                     std::chrono::steady_clock::now() - t0)
                     .count();
    int sel = select_best_iou_with_box(pred, d.box);
    auto mask = pred.binarized(sel);
    int inst;
    double matched_iou;
    if (tasks[k].source_instance >= 0) {
      inst = tasks[k].source_instance;
      matched_iou = iou(mask, scene.instances[inst]);
    } else {
      // external boxes carry no instance id; match to the best GT
      inst = 0;
      matched_iou = -1.0;
      for (std::size_t i = 0; i < scene.instances.size(); ++i) {
        double v = iou(mask, scene.instances[i]);
        if (v > matched_iou) {
          matched_iou = v;
          inst = static_cast<int>(i);
        }
      }
    }
    EvalRecord rec;
    rec.scene = d.scene;
    rec.instance = inst;
    rec.prompt = prompt.describe();
    rec.confidence = d.score >= 0 ? d.score : pred.scores[sel];
    rec.iou = matched_iou;
    rec.gt_area = static_cast<long>(scene.instances[inst].count());
    rep.records[k] = std::move(rec);
  });
  fill_wallclock(rep, std::move(seconds));
  rep.recompute_aggregates();
  return rep;
}

}  // namespace pseg
