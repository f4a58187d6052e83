#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "pseg/optim.hpp"
#include "pseg/rng.hpp"
#include "pseg/tensor.hpp"
#include "pseg/vit.hpp"

namespace pseg {

// Partition of token indices into an unmasked set U and masked set M.
struct MaskPlan {
  int n_tokens = 0;
  double ratio = 0.0;
  std::vector<int> unmasked;  // sorted
  std::vector<int> masked;    // sorted
  std::uint64_t rng_seed = 0;
};

// |masked| = round(ratio * n), drawn uniformly; fully reproducible from
// the seed.
inline MaskPlan make_mask_plan(int n_tokens, double ratio,
                               std::uint64_t seed) {
  if (n_tokens < 1) throw ConfigError(cat("mask plan: n_tokens ", n_tokens));
  if (!(ratio >= 0.0 && ratio < 1.0))
    throw ConfigError(cat("mask ratio ", ratio, " outside [0, 1)"));
  MaskPlan plan;
  plan.n_tokens = n_tokens;
  plan.ratio = ratio;
  plan.rng_seed = seed;
  const int m = static_cast<int>(std::llround(ratio * n_tokens));
  Rng rng(seed);
  std::vector<int> idx(n_tokens);
  for (int i = 0; i < n_tokens; ++i) idx[i] = i;
  for (int i = 0; i < m; ++i) {
    std::size_t j = i + rng.uniform_int(n_tokens - i);
    std::swap(idx[i], idx[j]);
  }
  plan.masked.assign(idx.begin(), idx.begin() + m);
  plan.unmasked.assign(idx.begin() + m, idx.end());
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.unmasked.begin(), plan.unmasked.end());
  return plan;
}

// Frozen encoder providing reconstruction targets. Parameters never change
// after freezing; the hash pins that down.
template <typename T>
struct TeacherModel {
  ViTEncoder<T> enc;
  std::string tag;

  void freeze() {
    for (auto& p : enc.params()) p.tensor.set_requires_grad(false);
  }

  std::uint64_t param_hash() const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (const auto& p : enc.params())
      for (T v : p.tensor.value()) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
        for (std::size_t b = 0; b < sizeof(T); ++b) {
          h ^= bytes[b];
          h *= 1099511628211ull;
        }
      }
    return h;
  }
};

// Full-token feature extraction from the frozen teacher. No tape is built,
// so no gradient can reach teacher weights.
template <typename T>
Tensor<T> teacher_features(const Image& img, const TeacherModel<T>& teacher) {
  NoGrad ng;
  auto tokens = patchify(img, teacher.enc);
  return encode_tokens(teacher.enc, tokens.tokens);
}

// Transformer decoder for the masked positions. In the default mode the
// queries are the masked tokens only and the keys/values are the encoder
// outputs (anchors) concatenated with the current query stream; the
// all-token mode instead self-attends over the full merged sequence.
template <typename T>
struct FeatureDecoder {
  int dim = 0;
  int depth = 0;
  int heads = 0;
  Tensor<T> mask_token;  // [1 x D], shared across positions

  struct DecBlock {
    Norm<T> nq, nkv, n2;
    MultiHeadAttention<T> attn;
    Linear<T> fc1, fc2;

    DecBlock() = default;
    DecBlock(int dim, int heads, int mlp_ratio, Rng& rng)
        : nq(dim),
          nkv(dim),
          n2(dim),
          attn(dim, heads, rng),
          fc1(dim, dim * mlp_ratio, rng),
          fc2(dim * mlp_ratio, dim, rng) {}

    void collect(std::vector<NamedParam<T>>& out,
                 const std::string& prefix) const {
      nq.collect(out, prefix + ".nq");
      nkv.collect(out, prefix + ".nkv");
      attn.collect(out, prefix + ".attn");
      n2.collect(out, prefix + ".n2");
      fc1.collect(out, prefix + ".fc1");
      fc2.collect(out, prefix + ".fc2");
    }
  };

  std::vector<DecBlock> blocks;
  Norm<T> final_norm;

  FeatureDecoder() = default;
  FeatureDecoder(int dim_, int depth_, int heads_, Rng& rng)
      : dim(dim_), depth(depth_), heads(heads_) {
    if (dim <= 0 || heads <= 0 || dim % heads != 0 || depth < 0)
      throw ConfigError(cat("decoder config dim ", dim, " depth ", depth,
                            " heads ", heads));
    mask_token =
        Tensor<T>::randn({1, static_cast<std::size_t>(dim)}, rng, T(0.02));
    mask_token.set_requires_grad(true);
    blocks.reserve(depth);
    for (int i = 0; i < depth; ++i) blocks.emplace_back(dim, heads, 4, rng);
    final_norm = Norm<T>(dim);
  }

  std::vector<NamedParam<T>> params(const std::string& prefix = "dec") const {
    std::vector<NamedParam<T>> out;
    collect_param(out, prefix + ".mask_token", mask_token);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(out, prefix + ".blk" + std::to_string(i));
    final_norm.collect(out, prefix + ".norm");
    return out;
  }

  long param_count_analytic(int mlp_ratio = 4) const {
    auto linear = [](long in, long out) { return in * out + out; };
    const long d = dim, r = mlp_ratio;
    long block = 3 * (2 * d) + 4 * linear(d, d) + linear(d, r * d) +
                 linear(r * d, d);
    return d + depth * block + 2 * d;
  }
};

// Learned mask-token embedding plus each masked position's sinusoidal
// embedding, one query row per element of plan.masked.
template <typename T>
Tensor<T> mask_queries(const FeatureDecoder<T>& dec, const Tensor<T>& pos_table,
                       const MaskPlan& plan) {
  if (plan.masked.empty())
    return Tensor<T>::zeros({0, static_cast<std::size_t>(dec.dim)});
  std::vector<std::size_t> idx(plan.masked.begin(), plan.masked.end());
  auto pos = gather_rows(pos_table, idx);
  return add(tile_rows(dec.mask_token, idx.size()), pos);
}

// Decoder pass over the masked queries; row order matches plan.masked.
// An empty plan short-circuits to an empty block without touching the
// decoder.
template <typename T>
Tensor<T> cross_attention_decode(const Tensor<T>& masked_queries,
                                 const Tensor<T>& encoder_out,
                                 const MaskPlan& plan,
                                 const FeatureDecoder<T>& dec) {
  if (plan.masked.empty())
    return Tensor<T>::zeros({0, static_cast<std::size_t>(dec.dim)});
  if (masked_queries.dim(0) != plan.masked.size())
    throw ContractError(cat("decode: ", masked_queries.dim(0),
                            " queries for ", plan.masked.size(),
                            " masked slots"));
  Tensor<T> x = masked_queries;
  for (const auto& blk : dec.blocks) {
    auto kv = concat_rows(encoder_out, x);
    x = add(x, blk.attn(blk.nq(x), blk.nkv(kv)));
    x = add(x, blk.fc2(gelu(blk.fc1(blk.n2(x)))));
  }
  return dec.final_norm(x);
}

// MAE-style ablation path: the whole merged sequence goes through the
// decoder with self-attention.
template <typename T>
Tensor<T> all_token_decode(const Tensor<T>& merged,
                           const FeatureDecoder<T>& dec) {
  Tensor<T> x = merged;
  for (const auto& blk : dec.blocks) {
    x = add(x, blk.attn(blk.nq(x), blk.nkv(x)));
    x = add(x, blk.fc2(gelu(blk.fc1(blk.n2(x)))));
  }
  return dec.final_norm(x);
}

// Slot i of the output takes the encoder feature when i is unmasked and
// the decoder feature otherwise: merge, then reorder to original positions.
template <typename T>
Tensor<T> merge_and_reorder(const Tensor<T>& encoder_out,
                            const Tensor<T>& decoder_out,
                            const MaskPlan& plan) {
  if (encoder_out.dim(0) != plan.unmasked.size() ||
      decoder_out.dim(0) != plan.masked.size())
    throw ContractError(cat("merge: got ", encoder_out.dim(0), "+",
                            decoder_out.dim(0), " rows for plan ",
                            plan.unmasked.size(), "+", plan.masked.size()));
  std::vector<std::size_t> perm(plan.n_tokens);
  for (std::size_t u = 0; u < plan.unmasked.size(); ++u)
    perm[plan.unmasked[u]] = u;
  for (std::size_t m = 0; m < plan.masked.size(); ++m)
    perm[plan.masked[m]] = plan.unmasked.size() + m;
  if (plan.masked.empty()) return gather_rows(encoder_out, perm);
  return gather_rows(concat_rows(encoder_out, decoder_out), perm);
}

enum class LossKind { mse, cosine };

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "cosine") return LossKind::cosine;
  throw ConfigError(cat("unknown loss kind '", s, "'"));
}

// Reconstruction objective over all N tokens. MSE: mean over tokens of the
// squared l2 norm of the per-token difference. Cosine: mean over tokens of
// (1 - cosine similarity).
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& student_out,
                              const Tensor<T>& target, LossKind kind) {
  if (student_out.shape() != target.shape())
    throw ContractError(cat("reconstruction_loss: student ",
                            shape_str(student_out.shape()), " vs target ",
                            shape_str(target.shape())));
  const std::size_t n = student_out.dim(0);
  if (kind == LossKind::mse) {
    auto d = sub(student_out, target);
    return scale(sum(mul(d, d)), 1.0 / static_cast<double>(n));
  }
  auto dots = row_sums(mul(student_out, target));
  auto denom = sqrt(add_scalar(
      mul(row_sums(mul(student_out, student_out)),
          row_sums(mul(target, target))),
      1e-12));
  auto cos = div(dots, denom);
  auto ones = Tensor<T>::full({n}, T(1));
  return scale(sum(sub(ones, cos)), 1.0 / static_cast<double>(n));
}

enum class DecodeMode { masked_only, all_tokens };

inline DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "masked-only") return DecodeMode::masked_only;
  if (s == "all-tokens") return DecodeMode::all_tokens;
  throw ConfigError(cat("unknown decode mode '", s, "'"));
}

// Student under pretraining: encoder, masked-token decoder and the linear
// projection head that aligns student features with the target dimension.
template <typename T>
struct PretrainModel {
  ViTEncoder<T> encoder;
  FeatureDecoder<T> decoder;
  Linear<T> head;  // projection to target dim

  std::vector<NamedParam<T>> params() const {
    auto out = encoder.params("enc");
    auto d = decoder.params("dec");
    out.insert(out.end(), d.begin(), d.end());
    head.collect(out, "head");
    return out;
  }

  // Student-side forward for one image: encode unmasked tokens, decode the
  // masked ones, merge back to original order, project every token.
  Tensor<T> forward_one(const Image& img, const MaskPlan& plan,
                        DecodeMode mode) const {
    auto tokens = patchify(img, encoder);
    std::vector<std::size_t> uidx(plan.unmasked.begin(), plan.unmasked.end());
    auto enc_out = encode_tokens(encoder, gather_rows(tokens.tokens, uidx));
    auto queries = mask_queries(decoder, encoder.pos_table_, plan);
    if (mode == DecodeMode::masked_only) {
      auto dec_out = cross_attention_decode(queries, enc_out, plan, decoder);
      return head(merge_and_reorder(enc_out, dec_out, plan));
    }
    auto merged = merge_and_reorder(enc_out, queries, plan);
    return head(all_token_decode(merged, decoder));
  }
};

// Per-token standardization of a target feature block (optional flag).
template <typename T>
void normalize_rows_inplace(Tensor<T>& t) {
  const std::size_t r = t.dim(0), c = t.dim(1);
  auto& v = t.value();
  for (std::size_t i = 0; i < r; ++i) {
    T* row = v.data() + i * c;
    double mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= c;
    double var = 0;
    for (std::size_t j = 0; j < c; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= c;
    double istd = 1.0 / std::sqrt(var + 1e-6);
    for (std::size_t j = 0; j < c; ++j)
      row[j] = static_cast<T>((row[j] - mean) * istd);
  }
}

struct PretrainStepStats {
  double loss = 0;
  double grad_norm = 0;
};

// One optimization step over a batch: fresh mask plan per image, loss over
// all tokens, update of encoder / decoder / head only. Targets are
// constants supplied by the caller (teacher features or patch pixels).
template <typename T>
PretrainStepStats pretrain_step(PretrainModel<T>& model,
                                const std::vector<const Image*>& batch,
                                const std::vector<Tensor<T>>& targets,
                                double mask_ratio, LossKind kind,
                                DecodeMode mode, std::uint64_t plan_seed,
                                AdamW<T>& opt, double lr) {
  if (batch.empty() || batch.size() != targets.size())
    throw ContractError("pretrain_step: batch/target size mismatch");
  Tensor<T> total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto plan = make_mask_plan(model.encoder.cfg.n_tokens(), mask_ratio,
                               plan_seed + i);
    auto out = model.forward_one(*batch[i], plan, mode);
    auto loss = reconstruction_loss(out, targets[i], kind);
    total = i == 0 ? loss : add(total, loss);
  }
  total = scale(total, 1.0 / static_cast<double>(batch.size()));
  PretrainStepStats stats;
  stats.loss = static_cast<double>(total.item());
  opt.zero_grad();
  backward(total);
  stats.grad_norm = grad_norm(opt.params());
  if (!std::isfinite(stats.loss) || !std::isfinite(stats.grad_norm))
    throw NumericError(cat("non-finite pretraining state: loss=", stats.loss,
                           " grad_norm=", stats.grad_norm, " lr=", lr));
  opt.step_with_lr(lr);
  return stats;
}

}  // namespace pseg
