#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "pseg/mask.hpp"
#include "pseg/optim.hpp"
#include "pseg/pretrain.hpp"
#include "pseg/vit.hpp"

namespace pseg {

// A point set or a box conditioning the mask decoder.
struct Prompt {
  enum class Kind { points, box };

  struct Point {
    int r = 0;
    int c = 0;
    bool fg = true;
  };

  Kind kind = Kind::points;
  std::vector<Point> points;
  Box box{0, 0, 0, 0};

  static Prompt from_points(std::vector<Point> pts) {
    Prompt p;
    p.kind = Kind::points;
    p.points = std::move(pts);
    return p;
  }

  static Prompt from_box(const Box& b) {
    Prompt p;
    p.kind = Kind::box;
    p.box = b;
    return p;
  }

  void validate(int h, int w) const {
    if (kind == Kind::points) {
      if (points.empty()) throw InputError("point prompt with no points");
      for (const auto& pt : points)
        if (pt.r < 0 || pt.r >= h || pt.c < 0 || pt.c >= w)
          throw InputError(cat("prompt point (", pt.r, ",", pt.c,
                               ") outside ", h, "x", w, " image"));
    } else {
      if (box[0] > box[2] || box[1] > box[3])
        throw InputError(cat("degenerate prompt box (", box[0], ",", box[1],
                             ",", box[2], ",", box[3], ")"));
      if (box[0] < 0 || box[1] < 0 || box[2] >= h || box[3] >= w)
        throw InputError(cat("prompt box (", box[0], ",", box[1], ",",
                             box[2], ",", box[3], ") outside ", h, "x", w,
                             " image"));
    }
  }

  // Compact, comma-free form for CSV fields.
  std::string describe() const {
    if (kind == Kind::box)
      return cat("box:", box[0], ";", box[1], ";", box[2], ";", box[3]);
    std::string s = "pt:";
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (i) s += "|";
      s += cat(points[i].r, ";", points[i].c, ";",
               points[i].fg ? "fg" : "bg");
    }
    return s;
  }
};

// K candidate mask logit grids at image resolution with one confidence
// score each.
struct MaskPrediction {
  int h = 0;
  int w = 0;
  std::vector<std::vector<float>> logits;  // K grids, h*w each
  std::vector<float> scores;               // K, in [0,1]

  int k() const { return static_cast<int>(logits.size()); }

  // Binarization threshold is logit 0 (probability one half).
  BinMask binarized(int idx) const {
    BinMask m = BinMask::zeros(h, w);
    const auto& g = logits.at(idx);
    for (std::size_t i = 0; i < g.size(); ++i) m.v[i] = g[i] > 0.f ? 1 : 0;
    return m;
  }
};

// Argmax confidence; ties break to the lowest index.
inline int select_most_confident(const MaskPrediction& pred) {
  if (pred.k() < 1) throw ContractError("select on empty prediction");
  int best = 0;
  for (int i = 1; i < pred.k(); ++i)
    if (pred.scores[i] > pred.scores[best]) best = i;
  return best;
}

// Highest IoU between the binarized mask and the filled box; ties break to
// the lowest index. All-empty masks fall through to index 0 with IoU 0.
inline int select_best_iou_with_box(const MaskPrediction& pred,
                                    const Box& box) {
  if (pred.k() < 1) throw ContractError("select on empty prediction");
  BinMask bm = box_mask(box, pred.h, pred.w);
  int best = 0;
  double best_iou = -1.0;
  for (int i = 0; i < pred.k(); ++i) {
    double v = iou(pred.binarized(i), bm);
    if (v > best_iou) {
      best_iou = v;
      best = i;
    }
  }
  return best;
}

// Turns a prompt into decoder tokens: one per point, two per box. Each
// token is the sinusoidal embedding of its coordinates plus a learned type
// embedding (foreground, background, top-left, bottom-right).
template <typename T>
struct PromptEncoder {
  int dim = 0;
  Tensor<T> type_emb;  // [4 x D]: fg, bg, tl, br

  PromptEncoder() = default;
  PromptEncoder(int dim_, Rng& rng) : dim(dim_) {
    type_emb =
        Tensor<T>::randn({4, static_cast<std::size_t>(dim)}, rng, T(0.02));
    type_emb.set_requires_grad(true);
  }

  std::vector<NamedParam<T>> params(const std::string& prefix = "prompt") const {
    std::vector<NamedParam<T>> out;
    collect_param(out, prefix + ".type_emb", type_emb);
    return out;
  }
};

template <typename T>
Tensor<T> encode_prompt(const Prompt& prompt, const PromptEncoder<T>& pe,
                        const ViTConfig& img_cfg) {
  prompt.validate(img_cfg.image_size, img_cfg.image_size);
  const double p = img_cfg.patch_size;
  std::vector<double> coords;  // (row, col) pairs in patch units
  std::vector<std::size_t> types;
  if (prompt.kind == Prompt::Kind::points) {
    for (const auto& pt : prompt.points) {
      coords.push_back((pt.r + 0.5) / p);
      coords.push_back((pt.c + 0.5) / p);
      types.push_back(pt.fg ? 0 : 1);
    }
  } else {
    coords.push_back((prompt.box[0] + 0.5) / p);
    coords.push_back((prompt.box[1] + 0.5) / p);
    types.push_back(2);
    coords.push_back((prompt.box[2] + 0.5) / p);
    coords.push_back((prompt.box[3] + 0.5) / p);
    types.push_back(3);
  }
  const std::size_t n = types.size();
  std::vector<T> pos;
  pos.reserve(n * pe.dim);
  for (std::size_t i = 0; i < n; ++i) {
    auto e = sincos_2d<T>(coords[2 * i], coords[2 * i + 1], pe.dim);
    pos.insert(pos.end(), e.begin(), e.end());
  }
  auto pos_t = Tensor<T>::from({n, static_cast<std::size_t>(pe.dim)},
                               std::move(pos));
  return add(pos_t, gather_rows(pe.type_emb, types));
}

// Miniature SAM-style mask decoder: learned output tokens, two two-way
// attention blocks, a final token-to-image attention, a 4x transposed
// convolution upsampler (stride-2 kernel-2, realized as linear +
// pixel shuffle), per-mask hypernetwork MLPs and a confidence head.
template <typename T>
struct MaskHead {
  int dim = 0;
  int num_masks = 3;
  Linear<T> neck;         // encoder dim -> decoder dim
  Tensor<T> out_tokens;   // [(K+1) x D]: K mask tokens + 1 confidence token
  Tensor<T> img_pos;      // [N x D] fixed sinusoidal

  struct TwoWayBlock {
    Norm<T> n_self, n_q1, n_kv1, n_mlp, n_q2, n_kv2;
    MultiHeadAttention<T> self_attn, token_to_image, image_to_token;
    Linear<T> fc1, fc2;

    TwoWayBlock() = default;
    TwoWayBlock(int dim, int heads, Rng& rng)
        : n_self(dim),
          n_q1(dim),
          n_kv1(dim),
          n_mlp(dim),
          n_q2(dim),
          n_kv2(dim),
          self_attn(dim, heads, rng),
          token_to_image(dim, heads, rng),
          image_to_token(dim, heads, rng),
          fc1(dim, dim * 4, rng),
          fc2(dim * 4, dim, rng) {}

    void collect(std::vector<NamedParam<T>>& out,
                 const std::string& prefix) const {
      n_self.collect(out, prefix + ".n_self");
      self_attn.collect(out, prefix + ".self");
      n_q1.collect(out, prefix + ".n_q1");
      n_kv1.collect(out, prefix + ".n_kv1");
      token_to_image.collect(out, prefix + ".t2i");
      n_mlp.collect(out, prefix + ".n_mlp");
      fc1.collect(out, prefix + ".fc1");
      fc2.collect(out, prefix + ".fc2");
      n_q2.collect(out, prefix + ".n_q2");
      n_kv2.collect(out, prefix + ".n_kv2");
      image_to_token.collect(out, prefix + ".i2t");
    }
  };

  std::vector<TwoWayBlock> blocks;
  Norm<T> n_final_q, n_final_kv;
  MultiHeadAttention<T> final_t2i;
  Norm<T> final_norm;
  Linear<T> up1;      // D -> 4*(D/2), then pixel shuffle
  Norm<T> up_norm;    // on D/2
  Linear<T> up2;      // D/2 -> 4*(D/4)
  std::vector<std::array<Linear<T>, 3>> hyper;  // per mask: D -> D -> D/4
  Linear<T> conf1, conf2;                       // D -> D -> K

  MaskHead() = default;
  MaskHead(int enc_dim, int dim_, int heads, int depth, int n_masks,
           const ViTConfig& img_cfg, Rng& rng)
      : dim(dim_), num_masks(n_masks) {
    if (dim % 4 != 0 || dim % heads != 0)
      throw ConfigError(cat("mask head dim ", dim,
                            " must be divisible by 4 and by ", heads));
    neck = Linear<T>(enc_dim, dim, rng);
    out_tokens = Tensor<T>::randn(
        {static_cast<std::size_t>(num_masks + 1),
         static_cast<std::size_t>(dim)},
        rng, T(0.02));
    out_tokens.set_requires_grad(true);
    {
      ViTConfig c = img_cfg;
      c.embed_dim = dim;
      img_pos = ViTEncoder<T>::make_pos_table(c);
    }
    blocks.reserve(depth);
    for (int i = 0; i < depth; ++i) blocks.emplace_back(dim, heads, rng);
    n_final_q = Norm<T>(dim);
    n_final_kv = Norm<T>(dim);
    final_t2i = MultiHeadAttention<T>(dim, heads, rng);
    final_norm = Norm<T>(dim);
    up1 = Linear<T>(dim, 4 * (dim / 2), rng);
    up_norm = Norm<T>(dim / 2);
    up2 = Linear<T>(dim / 2, 4 * (dim / 4), rng);
    hyper.resize(num_masks);
    for (auto& h : hyper) {
      h[0] = Linear<T>(dim, dim, rng);
      h[1] = Linear<T>(dim, dim, rng);
      h[2] = Linear<T>(dim, dim / 4, rng);
    }
    conf1 = Linear<T>(dim, dim, rng);
    conf2 = Linear<T>(dim, num_masks, rng);
  }

  std::vector<NamedParam<T>> params(const std::string& prefix = "mask") const {
    std::vector<NamedParam<T>> out;
    neck.collect(out, prefix + ".neck");
    collect_param(out, prefix + ".out_tokens", out_tokens);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(out, prefix + ".blk" + std::to_string(i));
    n_final_q.collect(out, prefix + ".n_final_q");
    n_final_kv.collect(out, prefix + ".n_final_kv");
    final_t2i.collect(out, prefix + ".final_t2i");
    final_norm.collect(out, prefix + ".final_norm");
    up1.collect(out, prefix + ".up1");
    up_norm.collect(out, prefix + ".up_norm");
    up2.collect(out, prefix + ".up2");
    for (std::size_t k = 0; k < hyper.size(); ++k)
      for (std::size_t l = 0; l < 3; ++l)
        hyper[k][l].collect(out,
                            prefix + ".hyper" + std::to_string(k) + ".fc" +
                                std::to_string(l));
    conf1.collect(out, prefix + ".conf1");
    conf2.collect(out, prefix + ".conf2");
    return out;
  }
};

template <typename T>
struct SegForward {
  std::vector<Tensor<T>> mask_logits;  // K grids [H x W]
  Tensor<T> confidence;                // [K], sigmoid outputs
};

// Assembled promptable segmenter: image encoder (initialized from a
// pretrained checkpoint when finetuning), prompt encoder, mask head.
template <typename T>
struct SegModel {
  ViTEncoder<T> encoder;
  PromptEncoder<T> prompt_enc;
  MaskHead<T> head;

  std::vector<NamedParam<T>> params() const {
    auto out = encoder.params("enc");
    auto p = prompt_enc.params("prompt");
    out.insert(out.end(), p.begin(), p.end());
    auto h = head.params("mask");
    out.insert(out.end(), h.begin(), h.end());
    return out;
  }

  long param_count_analytic() const {
    auto linear = [](long in, long out) { return in * out + out; };
    const long d = head.dim, k = head.num_masks, e = encoder.cfg.embed_dim;
    long two_way = 6 * (2 * d)                       // six norms
                   + 3 * 4 * linear(d, d)            // three attentions
                   + linear(d, 4 * d) + linear(4 * d, d);
    long head_count = linear(e, d) + (k + 1) * d +
                      static_cast<long>(head.blocks.size()) * two_way +
                      2 * (2 * d) + 4 * linear(d, d) + 2 * d +
                      linear(d, 4 * (d / 2)) + 2 * (d / 2) +
                      linear(d / 2, 4 * (d / 4)) +
                      k * (linear(d, d) + linear(d, d) + linear(d, d / 4)) +
                      linear(d, d) + linear(d, k);
    return encoder.cfg.param_count() + 4 * d + head_count;
  }

  long actual_param_count() const {
    long n = 0;
    for (const auto& p : params()) n += static_cast<long>(p.tensor.numel());
    return n;
  }

  SegForward<T> forward(const Image& img, const Prompt& prompt) const {
    auto tokens = patchify(img, encoder);
    auto enc_out = encode_tokens(encoder, tokens.tokens);
    return decode_masks(enc_out, encode_prompt(prompt, prompt_enc,
                                               encoder.cfg));
  }

  // Prompt-conditioned mask decoding from a full-image embedding. Returns
  // K logit grids at image resolution plus K confidence scores.
  SegForward<T> decode_masks(const Tensor<T>& image_embedding,
                             const Tensor<T>& prompt_tokens) const {
    const auto& mh = head;
    const int g = encoder.cfg.grid();
    auto img = add(mh.neck(image_embedding), mh.img_pos);
    auto tok = concat_rows(mh.out_tokens, prompt_tokens);
    for (const auto& blk : mh.blocks) {
      auto ts = blk.n_self(tok);
      tok = add(tok, blk.self_attn(ts, ts));
      tok = add(tok, blk.token_to_image(blk.n_q1(tok), blk.n_kv1(img)));
      tok = add(tok, blk.fc2(gelu(blk.fc1(blk.n_mlp(tok)))));
      img = add(img, blk.image_to_token(blk.n_q2(img), blk.n_kv2(tok)));
    }
    tok = add(tok, mh.final_t2i(mh.n_final_q(tok), mh.n_final_kv(img)));
    tok = mh.final_norm(tok);

    auto up = pixel_shuffle2(mh.up1(img), g);
    up = gelu(mh.up_norm(up));
    up = gelu(pixel_shuffle2(mh.up2(up), 2 * g));  // [(4g)^2 x D/4]

    SegForward<T> out;
    const int img_size = encoder.cfg.image_size;
    for (int k = 0; k < mh.num_masks; ++k) {
      auto t = gather_rows(tok, std::vector<std::size_t>{std::size_t(k)});
      auto w = mh.hyper[k][2](relu(mh.hyper[k][1](relu(mh.hyper[k][0](t)))));
      auto logits = matmul(up, transpose(w));  // [(4g)^2 x 1]
      auto grid = reshape(logits, Shape{std::size_t(4 * g), std::size_t(4 * g)});
      int side = 4 * g;
      while (side < img_size) {
        grid = upsample_bilinear2x(grid);
        side *= 2;
      }
      if (side != img_size)
        throw ConfigError(cat("mask grid ", side,
                              " cannot reach image size ", img_size));
      out.mask_logits.push_back(grid);
    }
    auto conf_tok = gather_rows(tok, std::vector<std::size_t>{
                                         std::size_t(mh.num_masks)});
    out.confidence = reshape(sigmoid(mh.conf2(relu(mh.conf1(conf_tok)))),
                             Shape{std::size_t(mh.num_masks)});
    return out;
  }

  // Inference entry point; builds no tape.
  MaskPrediction predict(const Image& img, const Prompt& prompt) const {
    NoGrad ng;
    auto fwd = forward(img, prompt);
    MaskPrediction pred;
    pred.h = img.h;
    pred.w = img.w;
    for (const auto& grid : fwd.mask_logits) {
      std::vector<float> g(grid.numel());
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = static_cast<float>(grid.value()[i]);
      pred.logits.push_back(std::move(g));
    }
    for (std::size_t i = 0; i < fwd.confidence.numel(); ++i)
      pred.scores.push_back(static_cast<float>(fwd.confidence.value()[i]));
    return pred;
  }
};

// Dice loss on probabilities with additive smoothing.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const BinMask& gt) {
  auto p = sigmoid(logits);
  std::vector<T> gv(gt.v.begin(), gt.v.end());
  auto g = Tensor<T>::from(logits.shape(), std::move(gv));
  auto inter = sum(mul(p, g));
  auto denom = add_scalar(add(sum(p), sum(g)), 1.0);
  auto ratio = div(add_scalar(scale(inter, 2.0), 1.0), denom);
  return add_scalar(neg(ratio), 1.0);
}

// Cross-entropy with the foreground and background halves weighted to
// contribute equally regardless of mask size.
template <typename T>
Tensor<T> balanced_bce_loss(const Tensor<T>& logits, const BinMask& gt) {
  const std::size_t n = gt.v.size();
  const std::size_t fg = gt.count();
  const std::size_t bg = n - fg;
  std::vector<T> target(n), weight(n);
  const double wf = fg ? 0.5 / fg : 0.0;
  const double wb = bg ? 0.5 / bg : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    target[i] = gt.v[i] ? T(1) : T(0);
    weight[i] = static_cast<T>(gt.v[i] ? wf : wb);
  }
  return bce_with_logits(logits, target, weight);
}

// Segmentation objective: min over the K candidates of (dice + balanced
// cross-entropy), plus MSE between every candidate's confidence and its
// realized IoU with the ground truth (targets are constants).
template <typename T>
Tensor<T> finetune_loss(const SegForward<T>& fwd, const BinMask& gt) {
  if (gt.empty()) throw ContractError("finetune_loss on empty ground truth");
  const int k = static_cast<int>(fwd.mask_logits.size());
  Tensor<T> best_seg;
  double best_val = 0;
  std::vector<T> iou_targets(k);
  for (int i = 0; i < k; ++i) {
    auto seg = add(dice_loss(fwd.mask_logits[i], gt),
                   balanced_bce_loss(fwd.mask_logits[i], gt));
    double v = static_cast<double>(seg.item());
    if (i == 0 || v < best_val) {
      best_val = v;
      best_seg = seg;
    }
    BinMask bin = BinMask::zeros(gt.h, gt.w);
    const auto& lv = fwd.mask_logits[i].value();
    for (std::size_t j = 0; j < lv.size(); ++j) bin.v[j] = lv[j] > 0 ? 1 : 0;
    iou_targets[i] = static_cast<T>(iou(bin, gt));
  }
  auto target = Tensor<T>::from({std::size_t(k)}, std::move(iou_targets));
  auto diff = sub(fwd.confidence, target);
  auto conf_loss = mean(mul(diff, diff));
  return add(best_seg, conf_loss);
}

struct FinetuneStepStats {
  double loss = 0;
  double grad_norm = 0;
  int skipped = 0;  // samples with empty ground truth
};

// One finetuning step over a batch of (image, instance mask, prompt)
// samples; encoder and decoder update together.
template <typename T>
FinetuneStepStats finetune_step(
    SegModel<T>& model,
    const std::vector<std::tuple<const Image*, const BinMask*, Prompt>>& batch,
    AdamW<T>& opt, double lr) {
  Tensor<T> total;
  int used = 0;
  FinetuneStepStats stats;
  for (const auto& [img, gt, prompt] : batch) {
    if (gt->empty()) {
      log_warn("finetune: skipping sample with empty ground-truth mask");
      ++stats.skipped;
      continue;
    }
    auto loss = finetune_loss(model.forward(*img, prompt), *gt);
    total = used == 0 ? loss : add(total, loss);
    ++used;
  }
  if (used == 0) throw ContractError("finetune_step: all samples skipped");
  total = scale(total, 1.0 / used);
  stats.loss = static_cast<double>(total.item());
  opt.zero_grad();
  backward(total);
  stats.grad_norm = grad_norm(opt.params());
  if (!std::isfinite(stats.loss) || !std::isfinite(stats.grad_norm))
    throw NumericError(cat("non-finite finetuning state: loss=", stats.loss,
                           " grad_norm=", stats.grad_norm, " lr=", lr));
  opt.step_with_lr(lr);
  return stats;
}

}  // namespace pseg
