#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pseg/mask.hpp"
#include "pseg/scene.hpp"
#include "pseg/segmodel.hpp"

namespace pseg {

// One evaluated (prompt -> selected mask) pair, pre-matched to its ground
// truth instance.
struct EvalRecord {
  int scene = 0;
  int instance = 0;
  std::string prompt;
  double confidence = 0;
  double iou = 0;    // selected mask vs matched GT
  long gt_area = 0;  // matched GT pixel count
};

struct GtEntry {
  int scene = 0;
  int instance = 0;
  long area = 0;
};

struct APResult {
  double ap = std::nan("");
  double ap_s = std::nan("");
  double ap_m = std::nan("");
  double ap_l = std::nan("");
  std::vector<double> per_threshold;  // overall AP at each IoU threshold
};

// COCO-style AP: greedy confidence-ordered matching per IoU threshold in
// {0.50 .. 0.95 step 0.05}, 101-point interpolated precision, mean over
// thresholds. Size buckets use ground-truth area as a fraction of the
// image: small < 0.7%, medium < 6.7%, large otherwise; records matched to
// out-of-bucket ground truth are ignored for that bucket. An empty ground
// truth set yields NaN.
APResult average_precision(const std::vector<EvalRecord>& records,
                           const std::vector<GtEntry>& gts,
                           long image_pixels);

// Evaluation output: per-sample records plus aggregates that are exactly
// recomputable from them. Wall-clock stats live outside metrics.csv so the
// metrics file stays byte-reproducible.
struct EvalReport {
  std::string protocol;
  long image_pixels = 0;
  std::vector<EvalRecord> records;
  std::vector<GtEntry> gt_index;
  double miou = std::nan("");
  APResult ap;
  bool with_ap = false;
  double wall_total_s = 0, wall_median_s = 0, wall_p95_s = 0;

  void recompute_aggregates();
  std::string to_csv() const;
  void save_csv(const std::string& path) const;
  static EvalReport load_csv(const std::string& path);
  // aggregates recomputed from records match the stored ones exactly
  bool self_consistent() const;
};

using Segmenter = std::function<MaskPrediction(const Image&, const Prompt&)>;

// Single/multi point valid-mask protocol: per GT instance, sample `clicks`
// foreground points uniformly from the mask (all up front), prompt, keep
// the most confident mask, score IoU against the GT. Reports mIoU.
EvalReport eval_point_protocol(const Segmenter& model, const Corpus& corpus,
                               int clicks, std::uint64_t seed,
                               int threads = 1,
                               bool with_replacement = true);

struct Detection {
  int scene = 0;
  Box box{};
  double score = 1.0;
};

// CSV rows: scene,r0,c0,r1,c1,score. Rejects rows for unknown scenes.
std::vector<Detection> load_detections(const std::string& path,
                                       const Corpus& corpus);

// Box-prompted instance segmentation: per box, prompt, select the mask
// with highest IoU against the filled box, match it to the best GT in the
// scene, report mIoU and AP. With no external detections the boxes are the
// GT tightest boxes (scored by model confidence); external detections keep
// their file scores.
EvalReport eval_box_protocol(const Segmenter& model, const Corpus& corpus,
                             const std::vector<Detection>* external,
                             int threads = 1);

}  // namespace pseg
