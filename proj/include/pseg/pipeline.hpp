#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pseg/pretrain.hpp"
#include "pseg/scene.hpp"
#include "pseg/segmodel.hpp"

namespace pseg {

// Ordered key=value list; the on-disk form of config.resolved and of the
// checkpoint config echo.
struct KvList {
  std::vector<std::pair<std::string, std::string>> items;

  void add(const std::string& k, const std::string& v) {
    items.emplace_back(k, v);
  }
  void add(const std::string& k, const char* v) { items.emplace_back(k, v); }
  void add(const std::string& k, double v) { items.emplace_back(k, fmt_g(v, 17)); }
  void add(const std::string& k, int v) { items.emplace_back(k, std::to_string(v)); }
  void add(const std::string& k, long v) { items.emplace_back(k, std::to_string(v)); }
  void add(const std::string& k, std::uint64_t v) {
    items.emplace_back(k, std::to_string(v));
  }
  void add(const std::string& k, bool v) {
    items.emplace_back(k, v ? "true" : "false");
  }

  std::string to_text() const;
};

std::map<std::string, std::string> parse_kv_text(const std::string& text);

// ---------------------------------------------------------------------------
// model assembly and persistence

struct EncoderSpec {
  std::string preset = "s-tiny";  // t-big / s-tiny / s-small
  ViTConfig config() const { return ViTConfig::preset(preset); }
};

struct DecoderSpec {
  int depth = 2;
  int heads = 4;
};

struct MaskHeadSpec {
  int dim = 64;
  int heads = 4;
  int depth = 2;
  int num_masks = 3;
};

void save_teacher(const std::string& path, const TeacherModel<float>& teacher,
                  const ViTConfig& cfg);
TeacherModel<float> load_teacher(const std::string& path);

void save_pretrained(const std::string& path, const PretrainModel<float>& m,
                     const std::string& encoder_preset, const DecoderSpec& dec,
                     int target_dim, const std::string& teacher_tag);

void save_segmodel(const std::string& path, const SegModel<float>& m,
                   const std::string& encoder_preset, const MaskHeadSpec& mh);
SegModel<float> load_segmodel(const std::string& path);

// Initializes a seg model, optionally loading encoder weights from a
// pretraining checkpoint.
SegModel<float> build_segmodel(const std::string& encoder_preset,
                               const MaskHeadSpec& mh, std::uint64_t seed,
                               const std::string& init_from_pretrain = "");

// ---------------------------------------------------------------------------
// subcommands (each writes metrics.csv into out_dir; the CLI writes
// config.resolved beforehand)

struct GenDataOpts {
  std::string out_dir;
  std::string corpus_dir;  // defaults to <out_dir>/corpus
  int scenes = 64;
  std::uint64_t seed = 1;
  int size = 64;
  int min_shapes = 2;
  int max_shapes = 5;
  double noise_sigma = 0.05;
  int threads = 1;
};
int cmd_gen_data(const GenDataOpts& o);

struct TrainCommonOpts {
  std::string out_dir;
  std::string corpus;
  int steps = 600;
  int batch = 8;
  double lr = 2.4e-3;
  double warmup_frac = 0.1;
  double weight_decay = 0.05;
  double beta2 = 0.95;
  std::uint64_t seed = 1;
  std::string out_ckpt;  // defaults to <out_dir>/model.ckpt
};

struct TeacherTrainOpts {
  TrainCommonOpts common;
  std::string encoder = "t-big";
  double mask_ratio = 0.75;
  DecoderSpec decoder;
  // Raw [0,1] pixel targets by default: synthetic scenes are mostly flat
  // patches, and per-patch standardization turns those into amplified
  // sensor noise that nothing can reconstruct.
  bool normalize_target = false;
};
int cmd_teacher_train(const TeacherTrainOpts& o);

struct PretrainOpts {
  TrainCommonOpts common;
  std::string teacher_ckpt;
  std::string encoder = "s-tiny";
  double mask_ratio = 0.75;
  std::string loss = "mse";            // mse | cosine
  std::string decode = "masked-only";  // masked-only | all-tokens
  DecoderSpec decoder;
  bool normalize_target = false;
};
int cmd_pretrain(const PretrainOpts& o);

struct FinetuneOpts {
  TrainCommonOpts common;  // lr default overridden by the CLI
  std::string from_ckpt;   // pretraining checkpoint; empty = from scratch
  std::string encoder = "s-tiny";
  MaskHeadSpec mask_head;
  double point_prompt_frac = 0.5;
};
int cmd_finetune(const FinetuneOpts& o);

struct EvalOpts {
  std::string out_dir;
  std::string corpus;
  std::string model_ckpt;
  int clicks = 1;              // point protocol
  std::string detections;      // box protocol; empty = gt-tightest
  std::uint64_t seed = 1;
  int threads = 1;
  int overlays = 4;  // qualitative overlay PPMs to render
};
int cmd_eval_point(const EvalOpts& o);
int cmd_eval_box(const EvalOpts& o);

struct SegmentOpts {
  std::string out_dir;
  std::string model_ckpt;
  std::string image;
  std::vector<std::string> points;  // "r,c" or "r,c,fg|bg"
  std::string box;                  // "r0,c0,r1,c1"
  int grid = 0;                     // k x k point-prompt demo mode
  std::string out_mask;             // defaults to <out_dir>/mask.pgm
  std::string overlay;              // defaults to <out_dir>/overlay.ppm
};
int cmd_segment(const SegmentOpts& o);

struct AblateOpts {
  std::string out_dir;
  std::string corpus;
  std::string teacher_ckpt;
  std::string axis;  // mask-ratio | loss | decode-mode | teacher
  std::vector<std::string> values;
  int steps = 120;  // budget per cell
  int batch = 8;
  std::string encoder = "s-tiny";
  std::uint64_t seed = 1;
  int probe_steps = 0;  // optional finetune probe per cell
  std::string probe_corpus;
};
int cmd_ablate(const AblateOpts& o);

struct BenchOpts {
  std::string out_dir;
  std::string corpus;
  std::string model_ckpt;  // empty: random-init from encoder preset
  std::string encoder = "s-tiny";
  int warmup = 3;
  int iters = 20;
  std::uint64_t seed = 1;
};
int cmd_bench(const BenchOpts& o);

struct GradCheckOpts {
  std::string out_dir;
  std::uint64_t seed = 7;
  double h = 1e-5;
  double tolerance = 1e-4;
};
int cmd_grad_check(const GradCheckOpts& o);

}  // namespace pseg
