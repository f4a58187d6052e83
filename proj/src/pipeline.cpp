#include "pseg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <tuple>

#include "pseg/checkpoint.hpp"
#include "pseg/eval.hpp"
#include "pseg/gradcheck.hpp"
#include "pseg/util.hpp"

namespace fs = std::filesystem;

namespace pseg {

std::string KvList::to_text() const {
  std::string s;
  for (const auto& [k, v] : items) s += cat(k, " = ", v, "\n");
  return s;
}

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> out;
  for (auto& line : split(text, '\n')) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
        s.erase(s.begin());
      while (!s.empty() && (s.back() == ' ' || s.back() == '\t' ||
                            s.back() == '\r'))
        s.pop_back();
      return s;
    };
    std::string k = trim(line.substr(0, eq));
    std::string v = trim(line.substr(eq + 1));
    if (!k.empty()) out[k] = v;
  }
  return out;
}

namespace {

void ensure_dir(const std::string& dir) {
  if (!dir.empty()) fs::create_directories(dir);
}

std::string in_dir(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

KvList vit_kv(const ViTConfig& c) {
  KvList kv;
  kv.add("image_size", c.image_size);
  kv.add("patch_size", c.patch_size);
  kv.add("embed_dim", c.embed_dim);
  kv.add("depth", c.depth);
  kv.add("num_heads", c.num_heads);
  kv.add("mlp_ratio", c.mlp_ratio);
  kv.add("in_channels", c.in_channels);
  return kv;
}

ViTConfig vit_from_kv(const std::map<std::string, std::string>& m) {
  ViTConfig c;
  c.image_size = std::stoi(m.at("image_size"));
  c.patch_size = std::stoi(m.at("patch_size"));
  c.embed_dim = std::stoi(m.at("embed_dim"));
  c.depth = std::stoi(m.at("depth"));
  c.num_heads = std::stoi(m.at("num_heads"));
  c.mlp_ratio = std::stoi(m.at("mlp_ratio"));
  c.in_channels = std::stoi(m.at("in_channels"));
  c.validate();
  return c;
}

// Loss-log rows shared by all training subcommands.
struct MetricsLog {
  std::string csv = "step,lr,loss\n";
  void row(long step, double lr, double loss) {
    csv += cat(step, ",", fmt_g(lr, 10), ",", fmt_g(loss, 10), "\n");
  }
};

std::vector<const Image*> batch_images(const Corpus& corpus,
                                       const std::vector<int>& idx) {
  std::vector<const Image*> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(&corpus.scenes[i].image);
  return out;
}

std::vector<int> sample_indices(Rng& rng, int n, int count) {
  std::vector<int> idx(count);
  for (int i = 0; i < count; ++i)
    idx[i] = static_cast<int>(rng.uniform_int(n));
  return idx;
}

}  // namespace

// ---------------------------------------------------------------------------
// persistence

void save_teacher(const std::string& path, const TeacherModel<float>& teacher,
                  const ViTConfig& cfg) {
  KvList kv = vit_kv(cfg);
  kv.add("kind", "teacher");
  kv.add("tag", teacher.tag);
  auto ck = Checkpoint::from_params(teacher.enc.params("enc"), kv.to_text());
  save_checkpoint(path, ck);
}

TeacherModel<float> load_teacher(const std::string& path) {
  auto ck = load_checkpoint(path);
  auto m = parse_kv_text(ck.config_echo);
  if (m.count("kind") && m.at("kind") != "teacher")
    throw ConfigError(cat(path, ": checkpoint kind '", m.at("kind"),
                          "' is not a teacher"));
  TeacherModel<float> teacher;
  Rng rng(0);
  teacher.enc = ViTEncoder<float>(vit_from_kv(m), rng);
  auto params = teacher.enc.params("enc");
  ck.apply_to(params);
  teacher.tag = m.count("tag") ? m.at("tag") : path;
  teacher.freeze();
  return teacher;
}

void save_pretrained(const std::string& path, const PretrainModel<float>& model,
                     const std::string& encoder_preset, const DecoderSpec& dec,
                     int target_dim, const std::string& teacher_tag) {
  KvList kv = vit_kv(model.encoder.cfg);
  kv.add("kind", "pretrain");
  kv.add("encoder_preset", encoder_preset);
  kv.add("dec_depth", dec.depth);
  kv.add("dec_heads", dec.heads);
  kv.add("target_dim", target_dim);
  kv.add("teacher_tag", teacher_tag);
  auto ck = Checkpoint::from_params(model.params(), kv.to_text());
  save_checkpoint(path, ck);
}

void save_segmodel(const std::string& path, const SegModel<float>& model,
                   const std::string& encoder_preset, const MaskHeadSpec& mh) {
  KvList kv = vit_kv(model.encoder.cfg);
  kv.add("kind", "segmodel");
  kv.add("encoder_preset", encoder_preset);
  kv.add("mask_dim", mh.dim);
  kv.add("mask_heads", mh.heads);
  kv.add("mask_depth", mh.depth);
  kv.add("num_masks", mh.num_masks);
  auto ck = Checkpoint::from_params(model.params(), kv.to_text());
  save_checkpoint(path, ck);
}

SegModel<float> load_segmodel(const std::string& path) {
  auto ck = load_checkpoint(path);
  auto m = parse_kv_text(ck.config_echo);
  if (!m.count("kind") || m.at("kind") != "segmodel")
    throw ConfigError(cat(path, ": not a segmentation model checkpoint"));
  SegModel<float> model;
  Rng rng(0);
  model.encoder = ViTEncoder<float>(vit_from_kv(m), rng);
  model.prompt_enc = PromptEncoder<float>(std::stoi(m.at("mask_dim")), rng);
  model.head = MaskHead<float>(model.encoder.cfg.embed_dim,
                               std::stoi(m.at("mask_dim")),
                               std::stoi(m.at("mask_heads")),
                               std::stoi(m.at("mask_depth")),
                               std::stoi(m.at("num_masks")),
                               model.encoder.cfg, rng);
  auto params = model.params();
  ck.apply_to(params);
  return model;
}

SegModel<float> build_segmodel(const std::string& encoder_preset,
                               const MaskHeadSpec& mh, std::uint64_t seed,
                               const std::string& init_from_pretrain) {
  Rng rng(seed);
  SegModel<float> model;
  model.encoder = ViTEncoder<float>(ViTConfig::preset(encoder_preset), rng);
  model.prompt_enc = PromptEncoder<float>(mh.dim, rng);
  model.head = MaskHead<float>(model.encoder.cfg.embed_dim, mh.dim, mh.heads,
                               mh.depth, mh.num_masks, model.encoder.cfg, rng);
  if (!init_from_pretrain.empty()) {
    auto ck = load_checkpoint(init_from_pretrain);
    auto meta = parse_kv_text(ck.config_echo);
    if (meta.count("kind") && meta.at("kind") == "segmodel")
      throw ConfigError(cat(init_from_pretrain,
                            ": expected a pretraining or teacher checkpoint"));
    auto enc_params = model.encoder.params("enc");
    ck.apply_to(enc_params);
  }
  return model;
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const GenDataOpts& o) {
  ensure_dir(o.out_dir);
  SceneConfig cfg;
  cfg.size = o.size;
  cfg.min_shapes = o.min_shapes;
  cfg.max_shapes = o.max_shapes;
  cfg.noise_sigma = o.noise_sigma;
  std::string corpus_dir =
      o.corpus_dir.empty() ? in_dir(o.out_dir, "corpus") : o.corpus_dir;
  write_corpus(corpus_dir, o.scenes, o.seed, cfg, o.threads);
  auto corpus = Corpus::load(corpus_dir);
  std::string csv = "key,value\n";
  csv += cat("scenes,", corpus.scenes.size(), "\n");
  csv += cat("instances,", corpus.total_instances(), "\n");
  write_text_file(in_dir(o.out_dir, "metrics.csv"), csv);
  log_info(cat("wrote ", corpus.scenes.size(), " scenes with ",
               corpus.total_instances(), " instances to ", corpus_dir));
  return 0;
}

// ---------------------------------------------------------------------------
// shared pretraining loop (teacher-train, pretrain, ablate cells)

namespace {

struct PretrainRun {
  double final_loss = 0;        // mean of the last up-to-10 steps
  std::vector<double> losses;   // per step
  MetricsLog log;
};

// Target provider: teacher features or raw patch pixels, cached per scene.
class TargetCache {
 public:
  TargetCache(const Corpus& corpus, const TeacherModel<float>* teacher,
              int patch_size, bool normalize)
      : corpus_(corpus),
        teacher_(teacher),
        patch_(patch_size),
        normalize_(normalize),
        cache_(corpus.scenes.size()) {}

  int target_dim() const {
    return teacher_ ? teacher_->enc.cfg.embed_dim
                    : patch_ * patch_ * corpus_.scenes[0].image.channels;
  }

  const Tensor<float>& get(int scene) {
    auto& slot = cache_[scene];
    if (!slot.defined()) {
      if (teacher_) {
        slot = teacher_features(corpus_.scenes[scene].image, *teacher_);
      } else {
        auto raw = extract_patch_rows(corpus_.scenes[scene].image, patch_);
        const int n = static_cast<int>(raw.size()) / target_dim();
        slot = Tensor<float>::from({std::size_t(n),
                                    std::size_t(target_dim())},
                                   std::move(raw));
      }
      if (normalize_) normalize_rows_inplace(slot);
    }
    return slot;
  }

 private:
  const Corpus& corpus_;
  const TeacherModel<float>* teacher_;
  int patch_;
  bool normalize_;
  std::vector<Tensor<float>> cache_;
};

PretrainRun run_pretrain_loop(PretrainModel<float>& model, const Corpus& corpus,
                              TargetCache& targets, const TrainCommonOpts& c,
                              double mask_ratio, LossKind kind,
                              DecodeMode mode) {
  AdamWConfig acfg;
  acfg.lr = c.lr;
  acfg.beta2 = c.beta2;
  acfg.weight_decay = c.weight_decay;
  AdamW<float> opt(model.params(), acfg);
  ScheduleConfig sched;
  sched.base_lr = c.lr;
  sched.total_steps = c.steps;
  sched.warmup_steps = static_cast<long>(c.warmup_frac * c.steps);
  Rng order_rng(c.seed);

  PretrainRun run;
  const int n = static_cast<int>(corpus.scenes.size());
  for (long step = 1; step <= c.steps; ++step) {
    Rng step_rng = order_rng.split(static_cast<std::uint64_t>(step));
    auto idx = sample_indices(step_rng, n, c.batch);
    std::vector<const Image*> images = batch_images(corpus, idx);
    std::vector<Tensor<float>> tgts;
    tgts.reserve(idx.size());
    for (int i : idx) tgts.push_back(targets.get(i));
    double lr = lr_at(step, sched);
    std::uint64_t plan_seed =
        Rng(c.seed).split(0x9e3779b9u + step).next_u64();
    PretrainStepStats stats;
    try {
      stats = pretrain_step(model, images, tgts, mask_ratio, kind, mode,
                            plan_seed, opt, lr);
    } catch (const NumericError& e) {
      throw NumericError(cat("step ", step, ": ", e.what()));
    }
    run.losses.push_back(stats.loss);
    run.log.row(step, lr, stats.loss);
  }
  const std::size_t tail = std::min<std::size_t>(10, run.losses.size());
  double acc = 0;
  for (std::size_t i = run.losses.size() - tail; i < run.losses.size(); ++i)
    acc += run.losses[i];
  run.final_loss = tail ? acc / tail : 0.0;
  return run;
}

}  // namespace

int cmd_teacher_train(const TeacherTrainOpts& o) {
  ensure_dir(o.common.out_dir);
  auto corpus = Corpus::load(o.common.corpus);
  auto cfg = ViTConfig::preset(o.encoder);
  Rng rng(o.common.seed);
  PretrainModel<float> model;
  model.encoder = ViTEncoder<float>(cfg, rng);
  model.decoder = FeatureDecoder<float>(cfg.embed_dim, o.decoder.depth,
                                        o.decoder.heads, rng);
  TargetCache targets(corpus, nullptr, cfg.patch_size, o.normalize_target);
  model.head = Linear<float>(cfg.embed_dim, targets.target_dim(), rng);

  auto run = run_pretrain_loop(model, corpus, targets, o.common, o.mask_ratio,
                               LossKind::mse, DecodeMode::all_tokens);

  TeacherModel<float> teacher;
  teacher.enc = model.encoder;
  teacher.tag = cat(o.encoder, "-mae-seed", o.common.seed);
  teacher.freeze();
  std::string ckpt = o.common.out_ckpt.empty()
                         ? in_dir(o.common.out_dir, "teacher.ckpt")
                         : o.common.out_ckpt;
  save_teacher(ckpt, teacher, cfg);
  write_text_file(in_dir(o.common.out_dir, "metrics.csv"), run.log.csv);
  log_info(cat("teacher final loss ", fmt_g(run.final_loss), ", saved ",
               ckpt));
  return 0;
}

int cmd_pretrain(const PretrainOpts& o) {
  ensure_dir(o.common.out_dir);
  auto corpus = Corpus::load(o.common.corpus);
  if (o.teacher_ckpt.empty())
    throw ConfigError("pretrain requires --teacher <checkpoint>");
  auto teacher = load_teacher(o.teacher_ckpt);
  const std::uint64_t teacher_hash_before = teacher.param_hash();

  auto cfg = ViTConfig::preset(o.encoder);
  if (cfg.image_size != teacher.enc.cfg.image_size ||
      cfg.patch_size != teacher.enc.cfg.patch_size)
    throw ConfigError("student and teacher must share image/patch geometry");
  Rng rng(o.common.seed);
  PretrainModel<float> model;
  model.encoder = ViTEncoder<float>(cfg, rng);
  model.decoder = FeatureDecoder<float>(cfg.embed_dim, o.decoder.depth,
                                        o.decoder.heads, rng);
  model.head =
      Linear<float>(cfg.embed_dim, teacher.enc.cfg.embed_dim, rng);
  TargetCache targets(corpus, &teacher, cfg.patch_size, o.normalize_target);

  auto run = run_pretrain_loop(model, corpus, targets, o.common, o.mask_ratio,
                               parse_loss_kind(o.loss),
                               parse_decode_mode(o.decode));

  if (teacher.param_hash() != teacher_hash_before)
    throw ContractError("teacher parameters changed during pretraining");

  std::string ckpt = o.common.out_ckpt.empty()
                         ? in_dir(o.common.out_dir, "model.ckpt")
                         : o.common.out_ckpt;
  save_pretrained(ckpt, model, o.encoder, o.decoder,
                  teacher.enc.cfg.embed_dim, teacher.tag);
  write_text_file(in_dir(o.common.out_dir, "metrics.csv"), run.log.csv);
  log_info(cat("pretrain final loss ", fmt_g(run.final_loss), ", saved ",
               ckpt));
  return 0;
}

// ---------------------------------------------------------------------------
// finetune

int cmd_finetune(const FinetuneOpts& o) {
  ensure_dir(o.common.out_dir);
  auto corpus = Corpus::load(o.common.corpus);
  auto model = build_segmodel(o.encoder, o.mask_head, o.common.seed,
                              o.from_ckpt);

  AdamWConfig acfg;
  acfg.lr = o.common.lr;
  acfg.beta2 = o.common.beta2;
  acfg.weight_decay = o.common.weight_decay;
  AdamW<float> opt(model.params(), acfg);
  ScheduleConfig sched;
  sched.base_lr = o.common.lr;
  sched.total_steps = o.common.steps;
  sched.warmup_steps = static_cast<long>(o.common.warmup_frac * o.common.steps);

  // flat (scene, instance) index
  std::vector<std::pair<int, int>> flat;
  for (std::size_t s = 0; s < corpus.scenes.size(); ++s)
    for (std::size_t i = 0; i < corpus.scenes[s].instances.size(); ++i)
      flat.emplace_back(static_cast<int>(s), static_cast<int>(i));
  if (flat.empty()) throw InputError("finetune corpus has no instances");

  Rng order_rng(o.common.seed ^ 0xfeedf00dull);
  MetricsLog log;
  for (long step = 1; step <= o.common.steps; ++step) {
    Rng step_rng = order_rng.split(static_cast<std::uint64_t>(step));
    std::vector<std::tuple<const Image*, const BinMask*, Prompt>> batch;
    for (int b = 0; b < o.common.batch; ++b) {
      auto [s, i] = flat[step_rng.uniform_int(flat.size())];
      const auto& scene = corpus.scenes[s];
      const auto& gt = scene.instances[i];
      Prompt prompt;
      if (step_rng.uniform() < o.point_prompt_frac) {
        auto pts = sample_points_in_mask(gt, 1, step_rng);
        prompt = Prompt::from_points({{pts[0].first, pts[0].second, true}});
      } else {
        prompt = Prompt::from_box(tightest_box(gt));
      }
      batch.emplace_back(&scene.image, &gt, std::move(prompt));
    }
    double lr = lr_at(step, sched);
    FinetuneStepStats stats;
    try {
      stats = finetune_step(model, batch, opt, lr);
    } catch (const NumericError& e) {
      throw NumericError(cat("step ", step, ": ", e.what()));
    }
    log.row(step, lr, stats.loss);
  }

  std::string ckpt = o.common.out_ckpt.empty()
                         ? in_dir(o.common.out_dir, "model.ckpt")
                         : o.common.out_ckpt;
  save_segmodel(ckpt, model, o.encoder, o.mask_head);
  write_text_file(in_dir(o.common.out_dir, "metrics.csv"), log.csv);
  log_info(cat("finetune done, saved ", ckpt));
  return 0;
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

Image render_overlay(const Image& img, const BinMask& mask) {
  Image out = img;
  if (out.channels == 1) {
    Image rgb = Image::blank(img.h, img.w, 3);
    for (int r = 0; r < img.h; ++r)
      for (int c = 0; c < img.w; ++c)
        for (int ch = 0; ch < 3; ++ch) rgb.at(r, c, ch) = img.at(r, c, 0);
    out = rgb;
  }
  for (int r = 0; r < out.h; ++r)
    for (int c = 0; c < out.w; ++c)
      if (mask.at(r, c)) {
        out.at(r, c, 0) = 0.55f * out.at(r, c, 0) + 0.45f;
        out.at(r, c, 1) = 0.55f * out.at(r, c, 1);
        out.at(r, c, 2) = 0.55f * out.at(r, c, 2);
      }
  return out;
}

void write_timing(const std::string& out_dir, const EvalReport& rep) {
  std::string csv = "key,value\n";
  csv += cat("wall_total_s,", fmt_g(rep.wall_total_s), "\n");
  csv += cat("wall_median_s,", fmt_g(rep.wall_median_s), "\n");
  csv += cat("wall_p95_s,", fmt_g(rep.wall_p95_s), "\n");
  write_text_file(in_dir(out_dir, "timing.csv"), csv);
}

void write_overlays(const std::string& out_dir, const Corpus& corpus,
                    const Segmenter& seg, const EvalReport& rep, int count) {
  for (int i = 0; i < count && i < static_cast<int>(rep.records.size()); ++i) {
    const auto& rec = rep.records[i];
    // re-run the recorded prompt to render the selected mask
    Prompt prompt;
    if (rec.prompt.rfind("box:", 0) == 0) {
      auto f = split(rec.prompt.substr(4), ';');
      prompt = Prompt::from_box({std::stoi(f[0]), std::stoi(f[1]),
                                 std::stoi(f[2]), std::stoi(f[3])});
    } else {
      std::vector<Prompt::Point> pts;
      for (const auto& p : split(rec.prompt.substr(3), '|')) {
        auto f = split(p, ';');
        pts.push_back({std::stoi(f[0]), std::stoi(f[1]), f[2] == "fg"});
      }
      prompt = Prompt::from_points(std::move(pts));
    }
    const auto& img = corpus.scenes[rec.scene].image;
    auto pred = seg(img, prompt);
    int sel = prompt.kind == Prompt::Kind::box
                  ? select_best_iou_with_box(pred, prompt.box)
                  : select_most_confident(pred);
    char name[64];
    std::snprintf(name, sizeof(name), "overlay_%03d.ppm", i);
    save_image(in_dir(out_dir, name),
               render_overlay(img, pred.binarized(sel)));
  }
}

Segmenter model_segmenter(const SegModel<float>& model) {
  return [&model](const Image& img, const Prompt& p) {
    return model.predict(img, p);
  };
}

}  // namespace

int cmd_eval_point(const EvalOpts& o) {
  ensure_dir(o.out_dir);
  if (o.clicks != 1 && o.clicks != 3)
    throw ConfigError(cat("point protocol supports 1 or 3 clicks, got ",
                          o.clicks));
  auto corpus = Corpus::load(o.corpus);
  auto model = load_segmodel(o.model_ckpt);
  auto seg = model_segmenter(model);
  auto rep = eval_point_protocol(seg, corpus, o.clicks, o.seed, o.threads);
  rep.save_csv(in_dir(o.out_dir, "metrics.csv"));
  write_timing(o.out_dir, rep);
  write_overlays(o.out_dir, corpus, seg, rep, o.overlays);
  log_info(cat(rep.protocol, " mIoU = ", fmt_g(rep.miou)));
  return 0;
}

int cmd_eval_box(const EvalOpts& o) {
  ensure_dir(o.out_dir);
  auto corpus = Corpus::load(o.corpus);
  auto model = load_segmodel(o.model_ckpt);
  auto seg = model_segmenter(model);
  std::vector<Detection> dets;
  const std::vector<Detection>* ext = nullptr;
  if (!o.detections.empty()) {
    dets = load_detections(o.detections, corpus);
    ext = &dets;
  }
  auto rep = eval_box_protocol(seg, corpus, ext, o.threads);
  rep.save_csv(in_dir(o.out_dir, "metrics.csv"));
  write_timing(o.out_dir, rep);
  write_overlays(o.out_dir, corpus, seg, rep, o.overlays);
  log_info(cat(rep.protocol, " mIoU = ", fmt_g(rep.miou), ", AP = ",
               fmt_g(rep.ap.ap)));
  return 0;
}

// ---------------------------------------------------------------------------
// segment

int cmd_segment(const SegmentOpts& o) {
  ensure_dir(o.out_dir);
  auto model = load_segmodel(o.model_ckpt);
  auto img = load_image(o.image);
  std::string csv = "key,value\n";

  if (o.grid > 0) {
    // k x k point-prompt sweep; one mask per cell plus a combined overlay
    Image overlay = img;
    for (int gi = 0; gi < o.grid; ++gi)
      for (int gj = 0; gj < o.grid; ++gj) {
        int r = static_cast<int>((gi + 0.5) * img.h / o.grid);
        int c = static_cast<int>((gj + 0.5) * img.w / o.grid);
        Prompt p = Prompt::from_points({{r, c, true}});
        auto pred = model.predict(img, p);
        int sel = select_most_confident(pred);
        char name[64];
        std::snprintf(name, sizeof(name), "mask_%02d_%02d.pgm", gi, gj);
        save_mask(in_dir(o.out_dir, name), pred.binarized(sel));
        overlay = render_overlay(overlay, pred.binarized(sel));
        csv += cat("grid_", gi, "_", gj, "_confidence,",
                   fmt_g(pred.scores[sel]), "\n");
      }
    save_image(o.overlay.empty() ? in_dir(o.out_dir, "overlay.ppm")
                                 : o.overlay,
               overlay);
    write_text_file(in_dir(o.out_dir, "metrics.csv"), csv);
    return 0;
  }

  Prompt prompt;
  if (!o.box.empty()) {
    auto f = split(o.box, ',');
    if (f.size() != 4) throw InputError("--box expects r0,c0,r1,c1");
    prompt = Prompt::from_box({std::stoi(f[0]), std::stoi(f[1]),
                               std::stoi(f[2]), std::stoi(f[3])});
  } else if (!o.points.empty()) {
    std::vector<Prompt::Point> pts;
    for (const auto& s : o.points) {
      auto f = split(s, ',');
      if (f.size() != 2 && f.size() != 3)
        throw InputError(cat("--point expects r,c[,fg|bg], got '", s, "'"));
      bool fg = f.size() < 3 || f[2] == "fg";
      if (f.size() == 3 && f[2] != "fg" && f[2] != "bg")
        throw InputError(cat("point label must be fg or bg, got '", f[2],
                             "'"));
      pts.push_back({std::stoi(f[0]), std::stoi(f[1]), fg});
    }
    prompt = Prompt::from_points(std::move(pts));
  } else {
    throw InputError("segment needs --point, --box or --grid");
  }
  prompt.validate(img.h, img.w);

  auto pred = model.predict(img, prompt);
  int sel = prompt.kind == Prompt::Kind::box
                ? select_best_iou_with_box(pred, prompt.box)
                : select_most_confident(pred);
  save_mask(o.out_mask.empty() ? in_dir(o.out_dir, "mask.pgm") : o.out_mask,
            pred.binarized(sel));
  save_image(o.overlay.empty() ? in_dir(o.out_dir, "overlay.ppm") : o.overlay,
             render_overlay(img, pred.binarized(sel)));
  csv += cat("selected,", sel, "\n");
  for (int k = 0; k < pred.k(); ++k)
    csv += cat("confidence_", k, ",", fmt_g(pred.scores[k]), "\n");
  write_text_file(in_dir(o.out_dir, "metrics.csv"), csv);
  log_info(cat("selected mask ", sel, " with confidence ",
               fmt_g(pred.scores[sel])));
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

int cmd_ablate(const AblateOpts& o) {
  ensure_dir(o.out_dir);
  auto corpus = Corpus::load(o.corpus);
  if (o.values.empty()) throw ConfigError("ablate needs at least one value");
  const std::vector<std::string> axes = {"mask-ratio", "loss", "decode-mode",
                                         "teacher"};
  if (std::find(axes.begin(), axes.end(), o.axis) == axes.end())
    throw ConfigError(cat("unknown ablation axis '", o.axis, "'"));

  std::string csv = "axis,value,steps,final_loss";
  if (o.probe_steps > 0) csv += ",probe_box_miou";
  csv += "\n";

  for (const auto& value : o.values) {
    // cell defaults mirror the main pretraining recipe
    double ratio = 0.75;
    LossKind kind = LossKind::mse;
    DecodeMode mode = DecodeMode::masked_only;
    std::string teacher_path = o.teacher_ckpt;
    if (o.axis == "mask-ratio") ratio = std::stod(value);
    else if (o.axis == "loss") kind = parse_loss_kind(value);
    else if (o.axis == "decode-mode") mode = parse_decode_mode(value);
    else teacher_path = value;
    if (teacher_path.empty())
      throw ConfigError("ablate requires --teacher <checkpoint>");

    auto teacher = load_teacher(teacher_path);
    auto cfg = ViTConfig::preset(o.encoder);
    Rng rng(o.seed);
    PretrainModel<float> model;
    model.encoder = ViTEncoder<float>(cfg, rng);
    model.decoder = FeatureDecoder<float>(cfg.embed_dim, 2, 4, rng);
    model.head = Linear<float>(cfg.embed_dim, teacher.enc.cfg.embed_dim, rng);
    TargetCache targets(corpus, &teacher, cfg.patch_size, false);

    TrainCommonOpts c;
    c.steps = o.steps;
    c.batch = o.batch;
    c.seed = o.seed;
    auto run = run_pretrain_loop(model, corpus, targets, c, ratio, kind, mode);

    std::string cell_dir = in_dir(o.out_dir, cat("cell_", o.axis, "_",
                                                 fs::path(value).filename().string()));
    ensure_dir(cell_dir);
    write_text_file(in_dir(cell_dir, "loss_log.csv"), run.log.csv);

    csv += cat(o.axis, ",", value, ",", o.steps, ",",
               fmt_g(run.final_loss, 10));
    if (o.probe_steps > 0) {
      std::string cell_ckpt = in_dir(cell_dir, "pretrain.ckpt");
      save_pretrained(cell_ckpt, model, o.encoder, {2, 4},
                      teacher.enc.cfg.embed_dim, teacher.tag);
      FinetuneOpts fo;
      fo.common.out_dir = cell_dir;
      fo.common.corpus = o.probe_corpus.empty() ? o.corpus : o.probe_corpus;
      fo.common.steps = o.probe_steps;
      fo.common.batch = o.batch;
      fo.common.lr = 1e-3;
      fo.common.weight_decay = 0.01;
      fo.common.beta2 = 0.999;
      fo.common.seed = o.seed;
      fo.common.out_ckpt = in_dir(cell_dir, "probe.ckpt");
      fo.from_ckpt = cell_ckpt;
      fo.encoder = o.encoder;
      cmd_finetune(fo);
      auto seg_model = load_segmodel(fo.common.out_ckpt);
      auto rep = eval_box_protocol(model_segmenter(seg_model), corpus, nullptr);
      csv += cat(",", fmt_g(rep.miou, 10));
    }
    csv += "\n";
  }
  write_text_file(in_dir(o.out_dir, "metrics.csv"), csv);
  log_info(cat("ablation over ", o.axis, " finished (", o.values.size(),
               " cells)"));
  return 0;
}

// ---------------------------------------------------------------------------
// bench

int cmd_bench(const BenchOpts& o) {
  ensure_dir(o.out_dir);
  auto corpus = Corpus::load(o.corpus);
  SegModel<float> model;
  if (!o.model_ckpt.empty()) {
    model = load_segmodel(o.model_ckpt);
  } else {
    model = build_segmodel(o.encoder, MaskHeadSpec{}, o.seed);
  }
  const long analytic = model.param_count_analytic();
  const long actual = model.actual_param_count();
  if (analytic != actual)
    throw ContractError(cat("parameter count mismatch: analytic ", analytic,
                            " vs actual ", actual));

  // one box prompt per image, single request at a time
  std::vector<double> seconds;
  int n = static_cast<int>(corpus.scenes.size());
  for (int i = 0; i < o.warmup + o.iters; ++i) {
    const auto& scene = corpus.scenes[i % n];
    Prompt p = Prompt::from_box(tightest_box(scene.instances[0]));
    auto t0 = std::chrono::steady_clock::now();
    auto pred = model.predict(scene.image, p);
    double dt = std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    if (i >= o.warmup) seconds.push_back(dt);
    (void)pred;
  }
  std::sort(seconds.begin(), seconds.end());
  double median = seconds[seconds.size() / 2];
  double p95 = seconds[std::min(seconds.size() - 1,
                                static_cast<std::size_t>(seconds.size() *
                                                         0.95))];

  // deterministic facts in metrics.csv, wall-clock in timing.csv
  std::string csv = "key,value\n";
  csv += cat("encoder,", o.encoder, "\n");
  csv += cat("params_analytic,", analytic, "\n");
  csv += cat("params_actual,", actual, "\n");
  csv += cat("iters,", o.iters, "\n");
  write_text_file(in_dir(o.out_dir, "metrics.csv"), csv);

  std::string timing = "key,value\n";
  timing += cat("median_s_per_image,", fmt_g(median), "\n");
  timing += cat("p95_s_per_image,", fmt_g(p95), "\n");
  timing += cat("images_per_s,", fmt_g(1.0 / median), "\n");
  write_text_file(in_dir(o.out_dir, "timing.csv"), timing);
  log_info(cat("bench ", o.encoder, ": ", fmt_g(1.0 / median),
               " images/s, ", actual, " params"));
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check

int cmd_grad_check(const GradCheckOpts& o) {
  ensure_dir(o.out_dir);
  Rng rng(o.seed);

  // Small randomized encoder + decoder + projection pipeline in 64-bit.
  ViTConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.embed_dim = 16;
  cfg.depth = 2;
  cfg.num_heads = 2;
  cfg.in_channels = 3;
  const int teacher_dim = 24;

  ViTEncoder<double> enc(cfg, rng);
  FeatureDecoder<double> dec(cfg.embed_dim, 1, 2, rng);
  Linear<double> head(cfg.embed_dim, teacher_dim, rng);

  Image img = Image::blank(cfg.image_size, cfg.image_size, 3);
  for (auto& v : img.px) v = static_cast<float>(rng.uniform());
  std::vector<double> target(cfg.n_tokens() * teacher_dim);
  for (auto& v : target) v = rng.normal(0.0, 1.0);
  auto target_t = Tensor<double>::from({std::size_t(cfg.n_tokens()),
                                        std::size_t(teacher_dim)},
                                       std::move(target));
  auto plan = make_mask_plan(cfg.n_tokens(), 0.5, o.seed + 17);

  std::vector<NamedParam<double>> params = enc.params("enc");
  auto dp = dec.params("dec");
  params.insert(params.end(), dp.begin(), dp.end());
  head.collect(params, "head");

  double worst = 0;
  std::string worst_detail;
  std::size_t checked = 0;
  for (LossKind kind : {LossKind::mse, LossKind::cosine}) {
    auto loss_fn = [&]() {
      auto tokens = patchify(img, enc);
      std::vector<std::size_t> uidx(plan.unmasked.begin(),
                                    plan.unmasked.end());
      auto enc_out = encode_tokens(enc, gather_rows(tokens.tokens, uidx));
      auto queries = mask_queries(dec, enc.pos_table_, plan);
      auto dec_out = cross_attention_decode(queries, enc_out, plan, dec);
      auto merged = merge_and_reorder(enc_out, dec_out, plan);
      return reconstruction_loss(head(merged), target_t, kind);
    };
    auto res = finite_diff_check(params, loss_fn, o.h);
    checked += res.n_checked;
    if (res.max_rel_err > worst) {
      worst = res.max_rel_err;
      worst_detail = cat(res.worst_param, "[", res.worst_index, "] (",
                         kind == LossKind::mse ? "mse" : "cosine", ")");
    }
  }

  std::string csv = "key,value\n";
  csv += cat("max_rel_err,", fmt_g(worst, 12), "\n");
  csv += cat("entries_checked,", checked, "\n");
  csv += cat("h,", fmt_g(o.h), "\n");
  csv += cat("tolerance,", fmt_g(o.tolerance), "\n");
  write_text_file(in_dir(o.out_dir, "metrics.csv"), csv);

  std::printf("max relative error %s over %zu entries (worst: %s)\n",
              fmt_g(worst, 6).c_str(), checked, worst_detail.c_str());
  if (worst >= o.tolerance) {
    log_warn(cat("gradient check failed: ", fmt_g(worst, 12), " >= ",
                 fmt_g(o.tolerance)));
    return 2;
  }
  return 0;
}

}  // namespace pseg
