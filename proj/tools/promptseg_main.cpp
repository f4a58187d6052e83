// promptseg: train and evaluate a desk-scale promptable segmentation
// pipeline (masked-feature pretraining of a small ViT against a frozen
// teacher, prompt-driven mask decoding, zero-shot point/box protocols).
//
// Logs go to stderr; every run writes config.resolved and metrics.csv into
// its output directory.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <functional>

#include "pseg/pipeline.hpp"
#include "pseg/util.hpp"

namespace fs = std::filesystem;
using namespace pseg;

namespace {

// Writes the fully resolved option set of a subcommand; the file reloads
// through --config, so a run can be replayed from its output directory.
// Execution-environment knobs (--threads, --config itself) stay out.
void write_resolved_config(CLI::App* sub, const std::string& out_dir) {
  KvList kv;
  for (const CLI::Option* opt : sub->get_options()) {
    auto lnames = opt->get_lnames();
    if (lnames.empty()) continue;
    const std::string& name = lnames[0];
    if (name == "config" || name == "help") continue;
    std::string value;
    if (opt->count() > 0) {
      const auto& rs = opt->results();
      for (std::size_t i = 0; i < rs.size(); ++i)
        value += (i ? " " : "") + rs[i];
    } else {
      value = opt->get_default_str();
    }
    kv.add(name, value);
  }
  fs::create_directories(out_dir);
  write_text_file((fs::path(out_dir) / "config.resolved").string(),
                  kv.to_text());
}

void add_config_option(CLI::App* sub, std::string& slot) {
  sub->add_option("--config", slot,
                  "flat key = value config file; explicit flags win");
  sub->fallthrough();
}

// Precedence is: explicit flags, then config file entries, then defaults.
// Implemented by injecting file entries as argv tokens for every key not
// already present on the command line. Values are split on spaces, which
// also feeds list-valued options.
std::vector<std::string> expand_config_args(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  if (args.size() < 2 || args[1].empty() || args[1][0] == '-') return args;
  std::string config_path;
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size())
      config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0)
      config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;

  auto kv = parse_kv_text(read_text_file(config_path));
  auto given = [&](const std::string& key) {
    std::string flag = "--" + key;
    for (std::size_t i = 2; i < args.size(); ++i)
      if (args[i] == flag || args[i].rfind(flag + "=", 0) == 0) return true;
    return false;
  };
  std::vector<std::string> out{args[0], args[1]};
  for (const auto& [key, value] : kv) {
    if (key == "config" || key == "help" || value.empty() || given(key))
      continue;
    out.push_back("--" + key);
    for (const auto& tok : split(value, ' '))
      if (!tok.empty()) out.push_back(tok);
  }
  out.insert(out.end(), args.begin() + 2, args.end());
  return out;
}

int run_guarded(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "[error] config: %s\n", e.what());
    return 1;
  } catch (const InputError& e) {
    std::fprintf(stderr, "[error] input: %s\n", e.what());
    return 1;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "[error] parse: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "[error] internal: %s\n", e.what());
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"promptseg: desk-scale promptable segmentation pipeline"};
  app.require_subcommand(0, 1);

  int threads = 1;
  std::string config_path;
  app.add_option("--threads", threads,
                 "worker count; 1 is the deterministic mode")
      ->capture_default_str();

  // ---- gen-data ----
  GenDataOpts gen;
  gen.out_dir = "runs/gen-data";
  auto* sub_gen = app.add_subcommand("gen-data",
                                     "generate a synthetic shape corpus");
  add_config_option(sub_gen, config_path);
  sub_gen->add_option("--out-dir", gen.out_dir)->capture_default_str();
  sub_gen->add_option("--corpus-dir", gen.corpus_dir,
                      "defaults to <out-dir>/corpus");
  sub_gen->add_option("--scenes", gen.scenes)->capture_default_str();
  sub_gen->add_option("--seed", gen.seed)->capture_default_str();
  sub_gen->add_option("--size", gen.size)->capture_default_str();
  sub_gen->add_option("--min-shapes", gen.min_shapes)->capture_default_str();
  sub_gen->add_option("--max-shapes", gen.max_shapes)->capture_default_str();
  sub_gen->add_option("--noise", gen.noise_sigma)->capture_default_str();

  // ---- teacher-train ----
  TeacherTrainOpts tt;
  tt.common.out_dir = "runs/teacher-train";
  tt.common.steps = 300;
  auto* sub_tt = app.add_subcommand(
      "teacher-train", "pixel-reconstruction pretraining of the teacher");
  add_config_option(sub_tt, config_path);
  sub_tt->add_option("--out-dir", tt.common.out_dir)->capture_default_str();
  sub_tt->add_option("--corpus", tt.common.corpus)->required();
  sub_tt->add_option("--encoder", tt.encoder)->capture_default_str();
  sub_tt->add_option("--steps", tt.common.steps)->capture_default_str();
  sub_tt->add_option("--batch", tt.common.batch)->capture_default_str();
  sub_tt->add_option("--lr", tt.common.lr)->capture_default_str();
  sub_tt->add_option("--warmup-frac", tt.common.warmup_frac)
      ->capture_default_str();
  sub_tt->add_option("--weight-decay", tt.common.weight_decay)
      ->capture_default_str();
  sub_tt->add_option("--seed", tt.common.seed)->capture_default_str();
  sub_tt->add_option("--mask-ratio", tt.mask_ratio)->capture_default_str();
  sub_tt->add_option("--decoder-depth", tt.decoder.depth)
      ->capture_default_str();
  sub_tt->add_option("--decoder-heads", tt.decoder.heads)
      ->capture_default_str();
  sub_tt->add_option("--out", tt.common.out_ckpt,
                     "checkpoint path, defaults to <out-dir>/teacher.ckpt");
  sub_tt->add_option("--normalize-target", tt.normalize_target,
                     "standardize patch pixels per token (true|false)")
      ->capture_default_str();

  // ---- pretrain ----
  PretrainOpts pt;
  pt.common.out_dir = "runs/pretrain";
  auto* sub_pt = app.add_subcommand(
      "pretrain", "masked pretraining against frozen teacher features");
  add_config_option(sub_pt, config_path);
  sub_pt->add_option("--out-dir", pt.common.out_dir)->capture_default_str();
  sub_pt->add_option("--corpus", pt.common.corpus)->required();
  sub_pt->add_option("--teacher", pt.teacher_ckpt)->required();
  sub_pt->add_option("--encoder", pt.encoder)->capture_default_str();
  sub_pt->add_option("--mask-ratio", pt.mask_ratio)->capture_default_str();
  sub_pt->add_option("--loss", pt.loss, "mse | cosine")
      ->capture_default_str();
  sub_pt->add_option("--decode", pt.decode, "masked-only | all-tokens")
      ->capture_default_str();
  sub_pt->add_option("--steps", pt.common.steps)->capture_default_str();
  sub_pt->add_option("--batch", pt.common.batch)->capture_default_str();
  sub_pt->add_option("--lr", pt.common.lr)->capture_default_str();
  sub_pt->add_option("--warmup-frac", pt.common.warmup_frac)
      ->capture_default_str();
  sub_pt->add_option("--weight-decay", pt.common.weight_decay)
      ->capture_default_str();
  sub_pt->add_option("--seed", pt.common.seed)->capture_default_str();
  sub_pt->add_option("--decoder-depth", pt.decoder.depth)
      ->capture_default_str();
  sub_pt->add_option("--decoder-heads", pt.decoder.heads)
      ->capture_default_str();
  sub_pt->add_option("--out", pt.common.out_ckpt,
                     "checkpoint path, defaults to <out-dir>/model.ckpt");
  sub_pt->add_option("--normalize-target", pt.normalize_target,
                     "standardize teacher features per token (true|false)")
      ->capture_default_str();

  // ---- finetune ----
  FinetuneOpts ft;
  ft.common.out_dir = "runs/finetune";
  ft.common.steps = 2000;
  ft.common.lr = 1e-3;
  ft.common.weight_decay = 0.01;
  ft.common.beta2 = 0.999;
  ft.common.warmup_frac = 0.05;
  auto* sub_ft = app.add_subcommand(
      "finetune", "prompt-driven segmentation finetuning");
  add_config_option(sub_ft, config_path);
  sub_ft->add_option("--out-dir", ft.common.out_dir)->capture_default_str();
  sub_ft->add_option("--corpus", ft.common.corpus)->required();
  sub_ft->add_option("--from", ft.from_ckpt,
                     "pretraining checkpoint for encoder init");
  sub_ft->add_option("--encoder", ft.encoder)->capture_default_str();
  sub_ft->add_option("--steps", ft.common.steps)->capture_default_str();
  sub_ft->add_option("--batch", ft.common.batch)->capture_default_str();
  sub_ft->add_option("--lr", ft.common.lr)->capture_default_str();
  sub_ft->add_option("--warmup-frac", ft.common.warmup_frac)
      ->capture_default_str();
  sub_ft->add_option("--weight-decay", ft.common.weight_decay)
      ->capture_default_str();
  sub_ft->add_option("--seed", ft.common.seed)->capture_default_str();
  sub_ft->add_option("--mask-dim", ft.mask_head.dim)->capture_default_str();
  sub_ft->add_option("--mask-depth", ft.mask_head.depth)
      ->capture_default_str();
  sub_ft->add_option("--num-masks", ft.mask_head.num_masks)
      ->capture_default_str();
  sub_ft->add_option("--point-frac", ft.point_prompt_frac,
                     "fraction of point prompts during training")
      ->capture_default_str();
  sub_ft->add_option("--out", ft.common.out_ckpt,
                     "checkpoint path, defaults to <out-dir>/model.ckpt");

  // ---- eval-point / eval-box ----
  EvalOpts ep;
  ep.out_dir = "runs/eval-point";
  auto* sub_ep = app.add_subcommand(
      "eval-point", "zero-shot point-prompt valid-mask evaluation");
  add_config_option(sub_ep, config_path);
  sub_ep->add_option("--out-dir", ep.out_dir)->capture_default_str();
  sub_ep->add_option("--corpus", ep.corpus)->required();
  sub_ep->add_option("--model", ep.model_ckpt)->required();
  sub_ep->add_option("--clicks", ep.clicks, "1 or 3")->capture_default_str();
  sub_ep->add_option("--seed", ep.seed)->capture_default_str();
  sub_ep->add_option("--overlays", ep.overlays)->capture_default_str();

  EvalOpts eb;
  eb.out_dir = "runs/eval-box";
  auto* sub_eb = app.add_subcommand(
      "eval-box", "zero-shot box-prompt instance segmentation evaluation");
  add_config_option(sub_eb, config_path);
  sub_eb->add_option("--out-dir", eb.out_dir)->capture_default_str();
  sub_eb->add_option("--corpus", eb.corpus)->required();
  sub_eb->add_option("--model", eb.model_ckpt)->required();
  sub_eb->add_option("--detections", eb.detections,
                     "CSV scene,r0,c0,r1,c1,score; default: GT tightest boxes");
  sub_eb->add_option("--seed", eb.seed)->capture_default_str();
  sub_eb->add_option("--overlays", eb.overlays)->capture_default_str();

  // ---- segment ----
  SegmentOpts sg;
  sg.out_dir = "runs/segment";
  auto* sub_sg = app.add_subcommand("segment",
                                    "segment one image from a prompt");
  add_config_option(sub_sg, config_path);
  sub_sg->add_option("--out-dir", sg.out_dir)->capture_default_str();
  sub_sg->add_option("--model", sg.model_ckpt)->required();
  sub_sg->add_option("--image", sg.image)->required();
  sub_sg->add_option("--point", sg.points, "r,c[,fg|bg]; repeatable");
  sub_sg->add_option("--box", sg.box, "r0,c0,r1,c1");
  sub_sg->add_option("--grid", sg.grid,
                     "k: prompt a k x k point grid instead");
  sub_sg->add_option("--out", sg.out_mask, "mask PGM path");
  sub_sg->add_option("--overlay", sg.overlay, "overlay PPM path");

  // ---- ablate ----
  AblateOpts ab;
  ab.out_dir = "runs/ablate";
  auto* sub_ab = app.add_subcommand(
      "ablate", "pretraining ablation sweep over one axis");
  add_config_option(sub_ab, config_path);
  sub_ab->add_option("--out-dir", ab.out_dir)->capture_default_str();
  sub_ab->add_option("--corpus", ab.corpus)->required();
  sub_ab->add_option("--teacher", ab.teacher_ckpt);
  sub_ab->add_option("--axis", ab.axis,
                     "mask-ratio | loss | decode-mode | teacher")
      ->required();
  sub_ab->add_option("--values", ab.values, "one cell per value")
      ->required();
  sub_ab->add_option("--steps", ab.steps, "pretraining budget per cell")
      ->capture_default_str();
  sub_ab->add_option("--batch", ab.batch)->capture_default_str();
  sub_ab->add_option("--encoder", ab.encoder)->capture_default_str();
  sub_ab->add_option("--seed", ab.seed)->capture_default_str();
  sub_ab->add_option("--probe-steps", ab.probe_steps,
                     "optional finetune probe budget per cell")
      ->capture_default_str();
  sub_ab->add_option("--probe-corpus", ab.probe_corpus);

  // ---- bench ----
  BenchOpts bn;
  bn.out_dir = "runs/bench";
  auto* sub_bn = app.add_subcommand(
      "bench", "single-prompt throughput and parameter report");
  add_config_option(sub_bn, config_path);
  sub_bn->add_option("--out-dir", bn.out_dir)->capture_default_str();
  sub_bn->add_option("--corpus", bn.corpus)->required();
  sub_bn->add_option("--model", bn.model_ckpt,
                     "optional checkpoint; default random init");
  sub_bn->add_option("--encoder", bn.encoder)->capture_default_str();
  sub_bn->add_option("--warmup", bn.warmup)->capture_default_str();
  sub_bn->add_option("--iters", bn.iters)->capture_default_str();
  sub_bn->add_option("--seed", bn.seed)->capture_default_str();

  // ---- grad-check ----
  GradCheckOpts gc;
  gc.out_dir = "runs/grad-check";
  auto* sub_gc = app.add_subcommand(
      "grad-check", "verify gradients against central finite differences");
  add_config_option(sub_gc, config_path);
  sub_gc->add_option("--out-dir", gc.out_dir)->capture_default_str();
  sub_gc->add_option("--seed", gc.seed)->capture_default_str();
  sub_gc->add_option("--fd-step", gc.h)->capture_default_str();
  sub_gc->add_option("--tolerance", gc.tolerance)->capture_default_str();

  std::vector<std::string> expanded;
  try {
    expanded = expand_config_args(argc, argv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "[error] %s\n", e.what());
    return 1;
  }
  try {
    // CLI11's vector overload wants the args reversed, program name dropped
    std::vector<std::string> rev(expanded.rbegin(), expanded.rend() - 1);
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    std::fprintf(stderr, "%s\n", app.help().c_str());
    return 1;
  }

  if (app.get_subcommands().empty()) {
    std::fprintf(stderr, "%s\n", app.help().c_str());
    return 1;
  }
  CLI::App* sub = app.get_subcommands()[0];

  return run_guarded([&]() -> int {
    if (sub == sub_gen) {
      gen.threads = threads;
      write_resolved_config(sub, gen.out_dir);
      return cmd_gen_data(gen);
    }
    if (sub == sub_tt) {
      write_resolved_config(sub, tt.common.out_dir);
      return cmd_teacher_train(tt);
    }
    if (sub == sub_pt) {
      write_resolved_config(sub, pt.common.out_dir);
      return cmd_pretrain(pt);
    }
    if (sub == sub_ft) {
      write_resolved_config(sub, ft.common.out_dir);
      return cmd_finetune(ft);
    }
    if (sub == sub_ep) {
      ep.threads = threads;
      write_resolved_config(sub, ep.out_dir);
      return cmd_eval_point(ep);
    }
    if (sub == sub_eb) {
      eb.threads = threads;
      write_resolved_config(sub, eb.out_dir);
      return cmd_eval_box(eb);
    }
    if (sub == sub_sg) {
      write_resolved_config(sub, sg.out_dir);
      return cmd_segment(sg);
    }
    if (sub == sub_ab) {
      write_resolved_config(sub, ab.out_dir);
      return cmd_ablate(ab);
    }
    if (sub == sub_bn) {
      write_resolved_config(sub, bn.out_dir);
      return cmd_bench(bn);
    }
    if (sub == sub_gc) {
      write_resolved_config(sub, gc.out_dir);
      return cmd_grad_check(gc);
    }
    throw ContractError("unhandled subcommand");
  });
}
