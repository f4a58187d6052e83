#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pseg/image.hpp"
#include "pseg/optim.hpp"
#include "pseg/rng.hpp"
#include "pseg/tensor.hpp"

namespace pseg {

struct ViTConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 64;
  int depth = 6;
  int num_heads = 4;
  int mlp_ratio = 4;
  int in_channels = 3;

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw ConfigError(cat("image size ", image_size,
                            " not divisible by patch size ", patch_size));
    if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
      throw ConfigError(cat("embed dim ", embed_dim,
                            " not divisible by head count ", num_heads));
    if (depth < 0 || mlp_ratio <= 0 || in_channels <= 0)
      throw ConfigError("invalid vit config");
  }

  int grid() const { return image_size / patch_size; }
  int n_tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * in_channels; }

  // Exact learned-parameter count for this config (positional embeddings
  // are fixed and carry none).
  long param_count() const {
    auto linear = [](long in, long out) { return in * out + out; };
    const long d = embed_dim, r = mlp_ratio;
    long block = 2 * (2 * d)              // two layer norms
                 + 4 * linear(d, d)       // q, k, v, out projections
                 + linear(d, r * d) + linear(r * d, d);
    return linear(patch_dim(), d) + depth * block + 2 * d;
  }

  static ViTConfig preset(const std::string& name) {
    if (name == "t-big") return {64, 8, 128, 6, 4, 4, 3};
    if (name == "s-tiny") return {64, 8, 48, 4, 4, 4, 3};
    if (name == "s-small") return {64, 8, 64, 6, 4, 4, 3};
    throw ConfigError(cat("unknown encoder preset '", name,
                          "' (expected t-big, s-tiny or s-small)"));
  }
};

// 1-D sinusoidal embedding of a continuous position, dim entries.
template <typename T>
void sincos_1d(double pos, int dim, T* out) {
  for (int i = 0; i < dim / 2; ++i) {
    double freq = std::pow(10000.0, -2.0 * i / dim);
    out[2 * i] = static_cast<T>(std::sin(pos * freq));
    out[2 * i + 1] = static_cast<T>(std::cos(pos * freq));
  }
  if (dim % 2) out[dim - 1] = T(0);
}

// 2-D embedding: first half encodes the row coordinate, second half the
// column. Shared by patch tokens and point prompts so both live in the
// same positional space (units of one patch).
template <typename T>
std::vector<T> sincos_2d(double row, double col, int dim) {
  std::vector<T> v(dim, T(0));
  const int half = dim / 2;
  sincos_1d(row, half, v.data());
  sincos_1d(col, dim - half, v.data() + half);
  return v;
}

template <typename T>
struct Linear {
  Tensor<T> w, b;

  Linear() = default;
  Linear(int in, int out, Rng& rng, double init_std = 0.02) {
    w = Tensor<T>::randn({static_cast<std::size_t>(in),
                          static_cast<std::size_t>(out)},
                         rng, static_cast<T>(init_std));
    w.set_requires_grad(true);
    b = Tensor<T>::zeros({static_cast<std::size_t>(out)});
    b.set_requires_grad(true);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return add_rowvec(matmul(x, w), b);
  }

  int in_dim() const { return static_cast<int>(w.dim(0)); }
  int out_dim() const { return static_cast<int>(w.dim(1)); }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) const {
    collect_param(out, prefix + ".w", w);
    collect_param(out, prefix + ".b", b);
  }
};

template <typename T>
struct Norm {
  Tensor<T> gain, bias;
  double eps = 1e-5;

  Norm() = default;
  explicit Norm(int dim) {
    gain = Tensor<T>::full({static_cast<std::size_t>(dim)}, T(1));
    gain.set_requires_grad(true);
    bias = Tensor<T>::zeros({static_cast<std::size_t>(dim)});
    bias.set_requires_grad(true);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return layer_norm(x, gain, bias, eps);
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) const {
    collect_param(out, prefix + ".g", gain);
    collect_param(out, prefix + ".b", bias);
  }
};

template <typename T>
struct MultiHeadAttention {
  int heads = 1;
  Linear<T> wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int n_heads, Rng& rng)
      : heads(n_heads),
        wq(dim, dim, rng),
        wk(dim, dim, rng),
        wv(dim, dim, rng),
        wo(dim, dim, rng) {}

  // q_in [S x D] attends over kv_in [L x D]. An optional additive bias
  // [S x L] is applied to the scores before softmax; -inf entries mask
  // positions out entirely.
  Tensor<T> operator()(const Tensor<T>& q_in, const Tensor<T>& kv_in,
                       const Tensor<T>* score_bias = nullptr) const {
    const int dim = wq.out_dim();
    const int hd = dim / heads;
    auto q = wq(q_in);
    auto k = wk(kv_in);
    auto v = wv(kv_in);
    Tensor<T> out;
    for (int h = 0; h < heads; ++h) {
      auto qh = slice_cols(q, h * hd, (h + 1) * hd);
      auto kh = slice_cols(k, h * hd, (h + 1) * hd);
      auto vh = slice_cols(v, h * hd, (h + 1) * hd);
      auto scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(hd));
      if (score_bias) scores = add(scores, *score_bias);
      auto oh = matmul(softmax_rows(scores), vh);
      out = h == 0 ? oh : concat_cols(out, oh);
    }
    return wo(out);
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) const {
    wq.collect(out, prefix + ".q");
    wk.collect(out, prefix + ".k");
    wv.collect(out, prefix + ".v");
    wo.collect(out, prefix + ".o");
  }
};

// Pre-norm transformer block: self-attention and MLP, both residual.
template <typename T>
struct Block {
  Norm<T> n1, n2;
  MultiHeadAttention<T> attn;
  Linear<T> fc1, fc2;

  Block() = default;
  Block(int dim, int heads, int mlp_ratio, Rng& rng)
      : n1(dim),
        n2(dim),
        attn(dim, heads, rng),
        fc1(dim, dim * mlp_ratio, rng),
        fc2(dim * mlp_ratio, dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto h = n1(x);
    auto y = add(x, attn(h, h));
    return add(y, fc2(gelu(fc1(n2(y)))));
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) const {
    n1.collect(out, prefix + ".n1");
    attn.collect(out, prefix + ".attn");
    n2.collect(out, prefix + ".n2");
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

// Patch tokens with their grid positions. A batch is a vector of these,
// one per image.
template <typename T>
struct TokenBatch {
  Tensor<T> tokens;            // [N x D]
  std::vector<int> positions;  // row-major patch index per token
};

template <typename T>
struct ViTEncoder {
  ViTConfig cfg;
  Linear<T> patch_embed;
  std::vector<Block<T>> blocks;
  Norm<T> final_norm;
  Tensor<T> pos_table_;  // [N x D], fixed sinusoidal, not learned

  ViTEncoder() = default;
  ViTEncoder(const ViTConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    patch_embed = Linear<T>(cfg.patch_dim(), cfg.embed_dim, rng);
    blocks.reserve(cfg.depth);
    for (int i = 0; i < cfg.depth; ++i)
      blocks.emplace_back(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng);
    final_norm = Norm<T>(cfg.embed_dim);
    pos_table_ = make_pos_table(cfg);
  }

  static Tensor<T> make_pos_table(const ViTConfig& cfg) {
    const int g = cfg.grid(), d = cfg.embed_dim;
    std::vector<T> v;
    v.reserve(static_cast<std::size_t>(g) * g * d);
    for (int i = 0; i < g; ++i)
      for (int j = 0; j < g; ++j) {
        auto e = sincos_2d<T>(i + 0.5, j + 0.5, d);
        v.insert(v.end(), e.begin(), e.end());
      }
    return Tensor<T>::from({static_cast<std::size_t>(g) * g,
                            static_cast<std::size_t>(d)},
                           std::move(v));
  }

  std::vector<NamedParam<T>> params(const std::string& prefix = "enc") const {
    std::vector<NamedParam<T>> out;
    patch_embed.collect(out, prefix + ".patch");
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(out, prefix + ".blk" + std::to_string(i));
    final_norm.collect(out, prefix + ".norm");
    return out;
  }

  long actual_param_count() const {
    long n = 0;
    for (const auto& p : params()) n += static_cast<long>(p.tensor.numel());
    return n;
  }
};

// Flattens the image into row-major patch vectors, [N x patch_dim].
inline std::vector<float> extract_patch_rows(const Image& img, int patch) {
  const int g = img.h / patch;
  const int pd = patch * patch * img.channels;
  std::vector<float> rows(static_cast<std::size_t>(g) * g * pd);
  std::size_t o = 0;
  for (int pi = 0; pi < g; ++pi)
    for (int pj = 0; pj < g; ++pj)
      for (int r = 0; r < patch; ++r)
        for (int c = 0; c < patch; ++c)
          for (int ch = 0; ch < img.channels; ++ch)
            rows[o++] = img.at(pi * patch + r, pj * patch + c, ch);
  return rows;
}

// Linear projection of each flattened patch plus its fixed positional
// embedding, in row-major patch order.
template <typename T>
TokenBatch<T> patchify(const Image& img, const ViTEncoder<T>& enc) {
  const auto& cfg = enc.cfg;
  if (img.h != cfg.image_size || img.w != cfg.image_size ||
      img.channels != cfg.in_channels)
    throw ConfigError(cat("patchify: image ", img.h, "x", img.w, "x",
                          img.channels, " does not match config ",
                          cfg.image_size, "x", cfg.image_size, "x",
                          cfg.in_channels));
  auto raw = extract_patch_rows(img, cfg.patch_size);
  std::vector<T> data(raw.begin(), raw.end());
  auto patches = Tensor<T>::from({static_cast<std::size_t>(cfg.n_tokens()),
                                  static_cast<std::size_t>(cfg.patch_dim())},
                                 std::move(data));
  TokenBatch<T> tb;
  tb.tokens = add(enc.patch_embed(patches), enc.pos_table_);
  tb.positions.resize(cfg.n_tokens());
  for (int i = 0; i < cfg.n_tokens(); ++i) tb.positions[i] = i;
  return tb;
}

// Runs the block stack plus final norm over a (sub)sequence of tokens.
// Output row i corresponds to input row i; positional information travels
// with the tokens, so any subset order is valid.
template <typename T>
Tensor<T> encode_tokens(const ViTEncoder<T>& enc, const Tensor<T>& tokens) {
  if (tokens.ndim() != 2 || tokens.dim(0) == 0)
    throw ContractError(cat("encode: token subset must be nonempty, got ",
                            shape_str(tokens.shape())));
  Tensor<T> x = tokens;
  for (const auto& blk : enc.blocks) x = blk(x);
  return enc.final_norm(x);
}

// Convenience: gather a subset of token rows, then encode.
template <typename T>
Tensor<T> encode_subset(const ViTEncoder<T>& enc, const TokenBatch<T>& tb,
                        const std::vector<int>& subset) {
  std::vector<std::size_t> idx(subset.begin(), subset.end());
  return encode_tokens(enc, gather_rows(tb.tokens, idx));
}

}  // namespace pseg
