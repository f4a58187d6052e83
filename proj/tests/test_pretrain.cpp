#include <doctest.h>

#include <map>
#include <set>

#include "pseg/gradcheck.hpp"
#include "pseg/pretrain.hpp"

using namespace pseg;
using T64 = Tensor<double>;

namespace {

ViTConfig mini_cfg(int dim = 16, int depth = 1) {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.embed_dim = dim;
  c.depth = depth;
  c.num_heads = 2;
  c.in_channels = 3;
  return c;
}

Image random_image(int size, Rng& rng) {
  Image img = Image::blank(size, size, 3);
  for (auto& v : img.px) v = static_cast<float>(rng.uniform());
  return img;
}

void check_plan(const MaskPlan& plan) {
  CHECK(plan.masked.size() ==
        static_cast<std::size_t>(std::llround(plan.ratio * plan.n_tokens)));
  CHECK(plan.masked.size() + plan.unmasked.size() ==
        static_cast<std::size_t>(plan.n_tokens));
  std::set<int> seen(plan.masked.begin(), plan.masked.end());
  seen.insert(plan.unmasked.begin(), plan.unmasked.end());
  CHECK(seen.size() == static_cast<std::size_t>(plan.n_tokens));
  CHECK(*seen.begin() == 0);
  CHECK(*seen.rbegin() == plan.n_tokens - 1);
}

}  // namespace

TEST_CASE("mask plan cardinality at the reference ratio") {
  auto plan = make_mask_plan(16, 0.75, 9);
  CHECK(plan.masked.size() == 12);
  CHECK(plan.unmasked.size() == 4);
  check_plan(plan);
}

TEST_CASE("mask plan degenerate and error cases") {
  auto plan = make_mask_plan(16, 0.0, 9);
  CHECK(plan.masked.empty());
  CHECK(plan.unmasked.size() == 16);
  CHECK_THROWS_AS(make_mask_plan(16, 1.0, 9), ConfigError);
  CHECK_THROWS_AS(make_mask_plan(16, -0.1, 9), ConfigError);
  CHECK_THROWS_AS(make_mask_plan(0, 0.5, 9), ConfigError);
}

TEST_CASE("mask plan invariants across sizes and ratios") {
  Rng rng(100);
  for (double ratio : {0.0, 0.5, 0.75, 0.85}) {
    for (int n : {1, 2, 3, 5, 16, 64, 255, 1024}) {
      auto plan = make_mask_plan(n, ratio, rng.next_u64());
      check_plan(plan);
    }
  }
}

TEST_CASE("mask plan reproducible from seed, uniform over indices") {
  auto a = make_mask_plan(32, 0.5, 77);
  auto b = make_mask_plan(32, 0.5, 77);
  CHECK(a.masked == b.masked);
  CHECK(a.unmasked == b.unmasked);

  std::vector<int> hits(16, 0);
  const int draws = 10000;
  Rng seeds(4);
  for (int d = 0; d < draws; ++d) {
    auto plan = make_mask_plan(16, 0.5, seeds.next_u64());
    for (int i : plan.masked) ++hits[i];
  }
  for (int i = 0; i < 16; ++i) {
    double freq = static_cast<double>(hits[i]) / draws;
    CHECK(freq == doctest::Approx(0.5).epsilon(0.04));  // 0.5 +- 0.02
  }
}

TEST_CASE("teacher features: frozen, deterministic, right shape") {
  Rng rng(5);
  TeacherModel<double> teacher;
  teacher.enc = ViTEncoder<double>(mini_cfg(24), rng);
  teacher.freeze();
  auto img = random_image(16, rng);

  auto f1 = teacher_features(img, teacher);
  auto f2 = teacher_features(img, teacher);
  CHECK(f1.shape() == Shape{4, 24});
  CHECK(f1.value() == f2.value());  // bit identical
  CHECK_FALSE(f1.requires_grad());

  // no gradient reaches the teacher through a downstream loss
  auto w = T64::from({24, 1}, std::vector<double>(24, 0.1));
  w.set_requires_grad(true);
  auto loss = sum(matmul(f1, w));
  backward(loss);
  for (const auto& p : teacher.enc.params())
    CHECK(p.tensor.grad().empty());
  CHECK(w.grad().size() == 24);

  auto hash_before = teacher.param_hash();
  CHECK(hash_before == teacher.param_hash());
}

TEST_CASE("teacher config mismatch is a config error") {
  Rng rng(6);
  TeacherModel<double> teacher;
  teacher.enc = ViTEncoder<double>(mini_cfg(), rng);
  teacher.freeze();
  auto img = Image::blank(32, 32, 3);
  CHECK_THROWS_AS(teacher_features(img, teacher), ConfigError);
}

TEST_CASE("cross-attention decode shapes and empty plan") {
  Rng rng(7);
  FeatureDecoder<double> dec(16, 1, 2, rng);
  ViTEncoder<double> enc(mini_cfg(), rng);

  auto empty_plan = make_mask_plan(4, 0.0, 3);
  auto q0 = mask_queries(dec, enc.pos_table_, empty_plan);
  CHECK(q0.dim(0) == 0);
  auto out0 = cross_attention_decode(q0, T64::zeros({4, 16}), empty_plan, dec);
  CHECK(out0.dim(0) == 0);

  auto plan = make_mask_plan(4, 0.5, 3);
  auto queries = mask_queries(dec, enc.pos_table_, plan);
  CHECK(queries.shape() == Shape{2, 16});
  std::vector<double> ev(2 * 16, 0.3);
  auto enc_out = T64::from({2, 16}, std::move(ev));
  auto out = cross_attention_decode(queries, enc_out, plan, dec);
  CHECK(out.shape() == Shape{2, 16});
}

TEST_CASE("decode modes differ on the same weights") {
  Rng rng(8);
  PretrainModel<double> model;
  model.encoder = ViTEncoder<double>(mini_cfg(), rng);
  model.decoder = FeatureDecoder<double>(16, 1, 2, rng);
  model.head = Linear<double>(16, 24, rng);
  auto img = random_image(16, rng);
  auto plan = make_mask_plan(4, 0.5, 11);

  auto a = model.forward_one(img, plan, DecodeMode::masked_only);
  auto b = model.forward_one(img, plan, DecodeMode::all_tokens);
  CHECK(a.shape() == b.shape());
  double diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    diff = std::max(diff, std::abs(a.value()[i] - b.value()[i]));
  CHECK(diff > 1e-6);
}

TEST_CASE("ratio-0 pipeline reduces to encoder plus projection") {
  Rng rng(9);
  PretrainModel<double> model;
  model.encoder = ViTEncoder<double>(mini_cfg(), rng);
  model.decoder = FeatureDecoder<double>(16, 1, 2, rng);
  model.head = Linear<double>(16, 24, rng);
  auto img = random_image(16, rng);
  auto plan = make_mask_plan(4, 0.0, 11);

  auto full = model.forward_one(img, plan, DecodeMode::masked_only);
  auto tokens = patchify(img, model.encoder);
  auto direct = model.head(encode_tokens(model.encoder, tokens.tokens));
  for (std::size_t i = 0; i < full.numel(); ++i)
    CHECK(full.value()[i] == doctest::Approx(direct.value()[i]));
}

TEST_CASE("merge_and_reorder: identity, multiset, slot audit, inverse") {
  Rng rng(10);

  SUBCASE("ratio 0 is the identity") {
    auto plan = make_mask_plan(4, 0.0, 1);
    std::vector<double> ev(4 * 3);
    for (std::size_t i = 0; i < ev.size(); ++i) ev[i] = i;
    auto enc_out = T64::from({4, 3}, ev);
    auto merged = merge_and_reorder(enc_out, T64::zeros({0, 3}), plan);
    CHECK(merged.value() == ev);
  }

  SUBCASE("random plans: multiset equality and slot-index audit") {
    for (int trial = 0; trial < 50; ++trial) {
      int n = 3 + static_cast<int>(rng.uniform_int(20));
      double ratio = rng.uniform(0.0, 0.95);
      auto plan = make_mask_plan(n, ratio, rng.next_u64());
      const int d = 4;
      auto enc_out = T64::randn({plan.unmasked.size(), d}, rng, 1.0);
      auto dec_out = T64::randn({plan.masked.size(), d}, rng, 1.0);
      auto merged = merge_and_reorder(enc_out, dec_out, plan);

      // slot audit + exact inverse recovery
      std::multiset<std::vector<double>> in_rows, out_rows;
      auto row_of = [d](const T64& t, std::size_t i) {
        return std::vector<double>(t.value().begin() + i * d,
                                   t.value().begin() + (i + 1) * d);
      };
      for (std::size_t u = 0; u < plan.unmasked.size(); ++u) {
        CHECK(row_of(merged, plan.unmasked[u]) == row_of(enc_out, u));
        in_rows.insert(row_of(enc_out, u));
      }
      for (std::size_t m = 0; m < plan.masked.size(); ++m) {
        CHECK(row_of(merged, plan.masked[m]) == row_of(dec_out, m));
        in_rows.insert(row_of(dec_out, m));
      }
      for (int i = 0; i < n; ++i) out_rows.insert(row_of(merged, i));
      CHECK(in_rows == out_rows);
    }
  }

  SUBCASE("size mismatch is a contract error") {
    auto plan = make_mask_plan(4, 0.5, 1);
    CHECK_THROWS_AS(
        merge_and_reorder(T64::zeros({3, 2}), T64::zeros({2, 2}), plan),
        ContractError);
  }
}

TEST_CASE("projection head basics and gradient") {
  Rng rng(12);
  SUBCASE("zero head maps to zero") {
    Linear<double> head(4, 6, rng);
    for (auto& v : head.w.value()) v = 0;
    auto out = head(T64::from({2, 4}, std::vector<double>(8, 1.0)));
    for (double v : out.value()) CHECK(v == 0.0);
  }
  SUBCASE("identity passthrough when dims match") {
    Linear<double> head(3, 3, rng);
    auto& w = head.w.value();
    std::fill(w.begin(), w.end(), 0.0);
    w[0] = w[4] = w[8] = 1.0;
    std::vector<double> x{1, 2, 3, 4, 5, 6};
    auto out = head(T64::from({2, 3}, x));
    CHECK(out.value() == x);
  }
  SUBCASE("head weight gradient vs finite differences") {
    Linear<double> head(4, 6, rng);
    auto x = T64::randn({5, 4}, rng, 1.0);
    auto target = T64::randn({5, 6}, rng, 1.0);
    std::vector<NamedParam<double>> params;
    head.collect(params, "head");
    auto loss_fn = [&]() {
      return reconstruction_loss(head(x), target, LossKind::mse);
    };
    auto res = finite_diff_check(params, loss_fn, 1e-5);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("reconstruction loss fixtures") {
  SUBCASE("exact match gives zero for both kinds") {
    Rng rng(13);
    auto x = T64::randn({4, 6}, rng, 1.0);
    auto y = T64::from(x.shape(), x.value());
    CHECK(reconstruction_loss(x, y, LossKind::mse).item() == 0.0);
    CHECK(reconstruction_loss(x, y, LossKind::cosine).item() ==
          doctest::Approx(0.0).epsilon(1e-9));
  }

  SUBCASE("all ones vs all zeros gives exactly D under mse") {
    const std::size_t n = 5, d = 7;
    auto student = T64::zeros({n, d});
    auto target = T64::full({n, d}, 1.0);
    CHECK(reconstruction_loss(student, target, LossKind::mse).item() ==
          doctest::Approx(double(d)).epsilon(1e-12));
  }

  SUBCASE("parallel unequal magnitudes: cosine 0, mse positive") {
    auto a = T64::from({2, 3}, {1, 2, 3, 0.5, 0.5, 1});
    auto b = T64::from({2, 3}, {2, 4, 6, 1.5, 1.5, 3});
    CHECK(reconstruction_loss(a, b, LossKind::cosine).item() ==
          doctest::Approx(0.0).epsilon(1e-7));
    CHECK(reconstruction_loss(a, b, LossKind::mse).item() > 0.0);
  }

  SUBCASE("both kinds are nonnegative on random input") {
    Rng rng(14);
    for (int t = 0; t < 20; ++t) {
      auto a = T64::randn({3, 5}, rng, 2.0);
      auto b = T64::randn({3, 5}, rng, 2.0);
      CHECK(reconstruction_loss(a, b, LossKind::mse).item() >= 0.0);
      CHECK(reconstruction_loss(a, b, LossKind::cosine).item() >= -1e-12);
    }
  }

  SUBCASE("shape mismatch is a contract error") {
    CHECK_THROWS_AS(reconstruction_loss(T64::zeros({2, 3}), T64::zeros({3, 2}),
                                        LossKind::mse),
                    ContractError);
  }
}

TEST_CASE("self-reconstruction: identical teacher, identity head, ratio 0") {
  Rng rng(15);
  auto cfg = mini_cfg();
  TeacherModel<double> teacher;
  teacher.enc = ViTEncoder<double>(cfg, rng);
  teacher.freeze();

  PretrainModel<double> model;
  model.encoder = ViTEncoder<double>(cfg, rng);
  // copy teacher weights into the student
  {
    auto src = teacher.enc.params();
    auto dst = model.encoder.params();
    for (std::size_t i = 0; i < src.size(); ++i)
      dst[i].tensor.value() = src[i].tensor.value();
  }
  model.decoder = FeatureDecoder<double>(cfg.embed_dim, 1, 2, rng);
  model.head = Linear<double>(cfg.embed_dim, cfg.embed_dim, rng);
  auto& w = model.head.w.value();
  std::fill(w.begin(), w.end(), 0.0);
  for (int i = 0; i < cfg.embed_dim; ++i) w[i * cfg.embed_dim + i] = 1.0;

  auto img = random_image(16, rng);
  auto target = teacher_features(img, teacher);
  AdamWConfig acfg;
  acfg.weight_decay = 0.0;
  AdamW<double> opt(model.params(), acfg);
  auto before = model.encoder.patch_embed.w.value();
  auto stats = pretrain_step(model, {&img}, {target}, 0.0, LossKind::mse,
                             DecodeMode::masked_only, 99, opt, 1e-3);
  CHECK(stats.loss == 0.0);
  CHECK(stats.grad_norm == 0.0);
  CHECK(model.encoder.patch_embed.w.value() == before);
}

TEST_CASE("pretrain step: determinism and gradient flow per group") {
  Rng seed_rng(16);
  auto make_model = [&](std::uint64_t seed) {
    Rng rng(seed);
    PretrainModel<double> model;
    model.encoder = ViTEncoder<double>(mini_cfg(), rng);
    model.decoder = FeatureDecoder<double>(16, 1, 2, rng);
    model.head = Linear<double>(16, 24, rng);
    return model;
  };
  Rng rng(17);
  TeacherModel<double> teacher;
  teacher.enc = ViTEncoder<double>(mini_cfg(24, 1), rng);
  teacher.freeze();
  auto img = random_image(16, rng);
  auto target = teacher_features(img, teacher);
  auto hash_before = teacher.param_hash();

  auto run = [&](std::uint64_t seed) {
    auto model = make_model(seed);
    AdamW<double> opt(model.params(), {});
    std::vector<double> losses;
    for (int s = 0; s < 3; ++s) {
      auto stats = pretrain_step(model, {&img}, {target}, 0.5, LossKind::mse,
                                 DecodeMode::masked_only, 100 + s, opt, 1e-3);
      losses.push_back(stats.loss);
    }
    return losses;
  };
  CHECK(run(5) == run(5));
  CHECK(teacher.param_hash() == hash_before);

  // gradient flow: each of W_e, W_d, W_theta sees a nonzero gradient
  auto model = make_model(5);
  auto plan = make_mask_plan(4, 0.5, 2);
  auto loss = reconstruction_loss(
      model.forward_one(img, plan, DecodeMode::masked_only), target,
      LossKind::mse);
  backward(loss);
  auto group_max = [&](const std::vector<NamedParam<double>>& ps) {
    double mx = 0;
    for (const auto& p : ps)
      for (double g : p.tensor.grad()) mx = std::max(mx, std::abs(g));
    return mx;
  };
  CHECK(group_max(model.encoder.params()) > 0.0);
  CHECK(group_max(model.decoder.params()) > 0.0);
  std::vector<NamedParam<double>> head_params;
  model.head.collect(head_params, "head");
  CHECK(group_max(head_params) > 0.0);
}

TEST_CASE("full pretraining graph gradients vs finite differences") {
  Rng rng(18);
  PretrainModel<double> model;
  model.encoder = ViTEncoder<double>(mini_cfg(), rng);
  model.decoder = FeatureDecoder<double>(16, 1, 2, rng);
  model.head = Linear<double>(16, 24, rng);
  auto img = random_image(16, rng);
  auto target = T64::randn({4, 24}, rng, 1.0);
  auto plan = make_mask_plan(4, 0.5, 21);

  auto params = model.params();
  for (LossKind kind : {LossKind::mse, LossKind::cosine}) {
    for (DecodeMode mode : {DecodeMode::masked_only, DecodeMode::all_tokens}) {
      auto loss_fn = [&]() {
        return reconstruction_loss(model.forward_one(img, plan, mode), target,
                                   kind);
      };
      auto res = finite_diff_check(params, loss_fn, 1e-5, 6);
      INFO(cat("kind=", kind == LossKind::mse ? "mse" : "cosine",
               " mode=", mode == DecodeMode::masked_only ? "masked" : "all"));
      CHECK(res.max_rel_err < 1e-4);
    }
  }
}
