#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace lorahar;
using namespace lorahar::testing;

namespace {

void zero_out(Parameter& p) { p.value.fill(0.0); }

Matrix layer_norm_ref(const Matrix& x, double eps) {
  Matrix y = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double m = 0, v = 0;
    for (double a : x.row(r)) m += a;
    m /= static_cast<double>(x.cols());
    for (double a : x.row(r)) v += (a - m) * (a - m);
    v /= static_cast<double>(x.cols());
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - m) / std::sqrt(v + eps);
  }
  return y;
}

Matrix add_bias(Matrix x, const Matrix& b) {
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) += b(0, c);
  return x;
}

Matrix gelu_ref(Matrix x) {
  for (auto& v : x.values()) v = gelu_value(v);
  return x;
}

EncoderBlock random_block(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  EncoderBlock b = EncoderBlock::create(cfg, rng, "blk");
  // non-trivial biases and norm affine terms so their gradients are exercised
  for (Parameter* p : {&b.ln1_gain, &b.ln1_bias, &b.ln2_gain, &b.ln2_bias, &b.ffn1_bias, &b.ffn2_bias}) {
    for (auto& v : p->value.values()) v += rng.normal(0.0, 0.3);
  }
  return b;
}

}  // namespace

TEST(Patchify, TokenCountAndWidth) {
  Rng rng(1);
  Matrix w = rng.normal_matrix(128, 6, 1.0);
  Matrix p = patchify(w, 16);
  EXPECT_EQ(p.rows(), 8u);
  EXPECT_EQ(p.cols(), 96u);
  EXPECT_EQ(patchify(w, 128).rows(), 1u);
  EXPECT_THROW(patchify(w, 24), ConfigError);
}

TEST(Patchify, RoundTripIsExactAndTimeMajor) {
  Rng rng(2);
  Matrix w = rng.normal_matrix(32, 3, 1.0);
  Matrix p = patchify(w, 8);
  EXPECT_EQ(max_abs_diff(unpatchify(p, 8, 3), w), 0.0);
  // token 1 starts with sample 8, channel 0
  EXPECT_EQ(p(1, 0), w(8, 0));
  EXPECT_EQ(p(1, 4), w(9, 1));
}

TEST(Config, ValidationRejectsBadShapes) {
  ModelConfig c;
  c.patch_len = 24;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.n_heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.mask_ratio = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(ModelConfig{}.validate());
  EXPECT_EQ(ModelConfig{}.n_enc_layers, 6u);
}

TEST(Embedding, ZeroProjectionGivesPositionsOnly) {
  Tape t;
  Rng rng(1);
  Parameter w("w", Matrix(96, 32)), b("b", Matrix(1, 32));
  Matrix pos = sinusoidal_positions(8, 32);
  Var z = embed_patches(t.constant(rng.normal_matrix(8, 96, 1.0)), t.parameter(w), t.parameter(b), pos);
  EXPECT_EQ(z.rows(), 8u);
  EXPECT_EQ(z.cols(), 32u);
  EXPECT_EQ(max_abs_diff(z.value(), pos), 0.0);
}

TEST(Embedding, IdenticalPatchesDifferByPosition) {
  Tape t;
  Rng rng(1);
  Parameter w("w", rng.normal_matrix(12, 16, 1.0)), b("b", Matrix(1, 16));
  Matrix patch = rng.normal_matrix(1, 12, 1.0);
  Matrix patches(4, 12);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 12; ++c) patches(r, c) = patch(0, c);
  Var z = embed_patches(t.constant(patches), t.parameter(w), t.parameter(b), sinusoidal_positions(4, 16));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) {
      double diff = 0;
      for (std::size_t c = 0; c < 16; ++c) diff = std::max(diff, std::abs(z.value()(i, c) - z.value()(j, c)));
      EXPECT_GT(diff, 1e-3);
    }
}

TEST(Embedding, ShapeMismatch) {
  Tape t;
  Parameter w("w", Matrix(10, 16)), b("b", Matrix(1, 16));
  EXPECT_THROW(embed_patches(t.constant(Matrix(4, 12)), t.parameter(w), t.parameter(b), sinusoidal_positions(4, 16)), DimensionError);
}

TEST(Attention, SingleTokenReducesToValueProjection) {
  ModelConfig cfg = tiny_config(8, 1);
  EncoderBlock b = random_block(cfg, 3);
  Rng rng(4);
  Matrix z = rng.normal_matrix(1, 8, 1.0);
  Tape t;
  Var out = multi_head_attention(t.constant(z), b, 1, cfg.n_heads);
  Matrix expect = matmul(matmul(z, b.v.weight.value), b.o.weight.value);
  EXPECT_LT(max_abs_diff(out.value(), expect), 1e-13);
}

TEST(Attention, ConstantScoresAverageValues) {
  ModelConfig cfg = tiny_config(8, 1);
  EncoderBlock b = random_block(cfg, 3);
  zero_out(b.q.weight);
  Rng rng(5);
  Matrix z = rng.normal_matrix(5, 8, 1.0);
  Tape t;
  Var out = multi_head_attention(t.constant(z), b, 5, cfg.n_heads);
  Matrix v = matmul(z, b.v.weight.value);
  Matrix mean(1, 8);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) mean(0, c) += v(r, c) / 5.0;
  Matrix row = matmul(mean, b.o.weight.value);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.value()(r, c), row(0, c), 1e-13);
}

TEST(Attention, PermutationEquivariant) {
  ModelConfig cfg = tiny_config(8, 1);
  EncoderBlock b = random_block(cfg, 3);
  Rng rng(6);
  Matrix z = rng.normal_matrix(6, 8, 1.0);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Matrix zp(6, 8);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 8; ++c) zp(r, c) = z(perm[r], c);
  Tape t;
  Matrix y = multi_head_attention(t.constant(z), b, 6, cfg.n_heads).value();
  Matrix yp = multi_head_attention(t.constant(zp), b, 6, cfg.n_heads).value();
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(yp(r, c), y(perm[r], c), 1e-13);
}

TEST(Attention, BatchedSequencesDoNotInteract) {
  ModelConfig cfg = tiny_config(8, 1);
  EncoderBlock b = random_block(cfg, 3);
  Rng rng(7);
  Matrix z = rng.normal_matrix(8, 8, 1.0);
  Tape t;
  Matrix both = multi_head_attention(t.constant(z), b, 4, cfg.n_heads).value();
  Var first = slice_rows(t.constant(z), 0, 4);
  Matrix alone = multi_head_attention(first, b, 4, cfg.n_heads).value();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(both(r, c), alone(r, c), 1e-14);
}

TEST(FeedForward, ZeroWeightsGiveZero) {
  ModelConfig cfg = tiny_config(8, 1);
  EncoderBlock b = random_block(cfg, 3);
  zero_out(b.ffn1.weight);
  zero_out(b.ffn2.weight);
  zero_out(b.ffn2_bias);
  Tape t;
  Var y = feed_forward(t.constant(Rng(1).normal_matrix(3, 8, 1.0)), b);
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(FeedForward, IdentityWeightsGiveGelu) {
  ModelConfig cfg = tiny_config(8, 1);
  cfg.ffn_hidden = 8;
  EncoderBlock b = random_block(cfg, 3);
  b.ffn1.weight.value = Matrix::identity(8);
  b.ffn2.weight.value = Matrix::identity(8);
  zero_out(b.ffn1_bias);
  zero_out(b.ffn2_bias);
  Matrix z = Rng(2).normal_matrix(3, 8, 1.0);
  Tape t;
  EXPECT_EQ(max_abs_diff(feed_forward(t.constant(z), b).value(), gelu_ref(z)), 0.0);
}

TEST(Encoder, ZeroBranchesLeaveInputUnchanged) {
  ModelConfig cfg = tiny_config(8, 3);
  Rng rng(1);
  std::vector<EncoderBlock> blocks;
  for (int i = 0; i < 3; ++i) {
    blocks.push_back(EncoderBlock::create(cfg, rng, "b"));
    for (Parameter* p : {&blocks.back().o.weight, &blocks.back().ffn2.weight, &blocks.back().ffn2_bias}) zero_out(*p);
  }
  Matrix z = rng.normal_matrix(8, 8, 1.0);
  Tape t;
  Var y = encoder_forward(t.constant(z), blocks, 4, cfg.n_heads, cfg.ln_eps);
  EXPECT_EQ(max_abs_diff(y.value(), z), 0.0);
  EXPECT_EQ(y.rows(), 8u);
  std::vector<EncoderBlock> none;
  EXPECT_THROW(encoder_forward(t.constant(z), none, 4, 2, 1e-5), ConfigError);
}

TEST(Encoder, SingleTokenMatchesHandComposition) {
  ModelConfig cfg = tiny_config(8, 1);
  EncoderBlock b = random_block(cfg, 5);
  Matrix z = Rng(9).normal_matrix(1, 8, 1.0);
  auto affine = [](const Matrix& x, const Parameter& g, const Parameter& bias) {
    Matrix y = x;
    for (std::size_t c = 0; c < x.cols(); ++c) y(0, c) = x(0, c) * g.value(0, c) + bias.value(0, c);
    return y;
  };
  Matrix ln1 = affine(layer_norm_ref(z, cfg.ln_eps), b.ln1_gain, b.ln1_bias);
  Matrix attn = matmul(matmul(ln1, b.v.weight.value), b.o.weight.value);
  Matrix zh = z;
  zh += attn;
  Matrix ln2 = affine(layer_norm_ref(zh, cfg.ln_eps), b.ln2_gain, b.ln2_bias);
  Matrix ffn = add_bias(matmul(gelu_ref(add_bias(matmul(ln2, b.ffn1.weight.value), b.ffn1_bias.value)), b.ffn2.weight.value), b.ffn2_bias.value);
  Matrix expect = zh;
  expect += ffn;
  Tape t;
  std::vector<EncoderBlock> blocks{b};
  EXPECT_LT(max_abs_diff(encoder_forward(t.constant(z), blocks, 1, cfg.n_heads, cfg.ln_eps).value(), expect), 1e-12);
}

TEST(Encoder, BlockGradientsMatchFiniteDifferences) {
  ModelConfig cfg = tiny_config(8, 1);
  EncoderBlock b = random_block(cfg, 5);
  Parameter x("x", Rng(3).normal_matrix(8, 8, 1.0));
  std::vector<Parameter*> params{&x};
  b.for_each_parameter([&](Parameter& p) { params.push_back(&p); });
  const double err = grad_check(params, [&](Tape& t) { return probe_loss(encoder_block_forward(t.parameter(x), b, 4, cfg.n_heads, cfg.ln_eps)); });
  EXPECT_LT(err, 1e-4);
}

TEST(Mask, CountsAndPartition) {
  Rng rng(1);
  MaskSpec m = random_mask(16, 0.75, rng);
  EXPECT_EQ(m.masked.size(), 12u);
  EXPECT_EQ(m.visible.size(), 4u);
  std::set<std::size_t> all(m.masked.begin(), m.masked.end());
  for (std::size_t v : m.visible) EXPECT_TRUE(all.insert(v).second);
  EXPECT_EQ(all.size(), 16u);
  EXPECT_EQ(*all.rbegin(), 15u);
  EXPECT_TRUE(std::is_sorted(m.visible.begin(), m.visible.end()));
}

TEST(Mask, RoundHalfUpAndDegenerateRejected) {
  EXPECT_EQ(mask_count(8, 0.75), 6u);
  EXPECT_EQ(mask_count(10, 0.25), 3u);  // 2.5 rounds up
  EXPECT_EQ(mask_count(2, 0.75), 2u);
  Rng rng(1);
  EXPECT_THROW(random_mask(2, 0.75, rng), ConfigError);
  EXPECT_THROW(random_mask(8, 0.01, rng), ConfigError);
  EXPECT_THROW(random_mask(1, 0.5, rng), ConfigError);
  EXPECT_THROW(random_mask(8, 0.0, rng), ConfigError);
}

TEST(Mask, PropertyAcrossSizes) {
  Rng rng(3);
  for (std::size_t t = 2; t <= 40; ++t)
    for (double m : {0.1, 0.25, 0.5, 0.75, 0.9}) {
      const std::size_t n = mask_count(t, m);
      if (n == 0 || n == t) continue;
      MaskSpec s = random_mask(t, m, rng);
      ASSERT_EQ(s.masked.size(), n);
      ASSERT_EQ(s.masked.size() + s.visible.size(), t);
    }
}

TEST(Mask, DeterministicUnderSeed) {
  Rng a(42), b(42);
  EXPECT_EQ(random_mask(16, 0.75, a), random_mask(16, 0.75, b));
}

TEST(Mask, EachIndexEquallyLikely) {
  Rng rng(7);
  std::vector<int> hits(8, 0);
  const int trials = 10000;
  for (int i = 0; i < trials; ++i)
    for (std::size_t m : random_mask(8, 0.5, rng).masked) ++hits[m];
  for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / trials, 0.5, 0.02);
}

TEST(MaeLoss, HandArithmetic) {
  Tape t;
  Matrix pred = Matrix::from_rows({{0, 0, 0, 0}, {2, 3, 4, 5}});
  Matrix target = Matrix::from_rows({{9, 9, 9, 9}, {1, 2, 3, 4}});
  MaskSpec m{{1}, {0}, 2};
  EXPECT_EQ(mae_loss(t.constant(pred), target, m).value()(0, 0), 4.0);
  EXPECT_EQ(mae_loss(t.constant(target), target, m).value()(0, 0), 0.0);
  EXPECT_THROW(mae_loss(t.constant(pred), target, MaskSpec{{}, {0, 1}, 2}), DataError);
}

TEST(MaeLoss, VisiblePositionsDoNotContribute) {
  Rng rng(2);
  Matrix pred = rng.normal_matrix(8, 6, 1.0), target = rng.normal_matrix(8, 6, 1.0);
  MaskSpec m = random_mask(8, 0.5, rng);
  Tape t;
  const double base = mae_loss(t.constant(pred), target, m).value()(0, 0);
  for (std::size_t v : m.visible) {
    Matrix p2 = pred;
    for (std::size_t c = 0; c < 6; ++c) p2(v, c) += 10.0;
    EXPECT_EQ(mae_loss(t.constant(p2), target, m).value()(0, 0), base);
  }
}

TEST(Mae, ReconstructionShapeAndDeterminism) {
  ModelConfig cfg = tiny_config();
  Rng r1(1), r2(1);
  MaeModel a = MaeModel::create(cfg, r1), b = MaeModel::create(cfg, r2);
  auto ws = random_windows(cfg, 3, 5);
  Matrix patches = stack_patches(ptrs(ws), cfg.patch_len);
  Rng m1(2);
  std::vector<MaskSpec> masks;
  for (int i = 0; i < 3; ++i) masks.push_back(random_mask(cfg.num_tokens(), cfg.mask_ratio, m1));
  Tape t1, t2;
  Var pa = a.reconstruct(t1, patches, masks);
  EXPECT_EQ(pa.rows(), 3 * cfg.num_tokens());
  EXPECT_EQ(pa.cols(), cfg.patch_dim());
  EXPECT_EQ(max_abs_diff(pa.value(), b.reconstruct(t2, patches, masks).value()), 0.0);
}

TEST(Mae, EncoderNeverSeesMaskedTokens) {
  ModelConfig cfg = tiny_config();
  Rng rng(1);
  MaeModel model = MaeModel::create(cfg, rng);
  auto ws = random_windows(cfg, 2, 5);
  Matrix patches = stack_patches(ptrs(ws), cfg.patch_len);
  std::vector<MaskSpec> masks{random_mask(4, 0.5, rng), random_mask(4, 0.5, rng)};
  Matrix scrambled = patches;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t m : masks[b].masked)
      for (std::size_t c = 0; c < scrambled.cols(); ++c) scrambled(b * 4 + m, c) = 1e3 * rng.normal();
  Tape t1, t2;
  EXPECT_EQ(max_abs_diff(model.reconstruct(t1, patches, masks).value(), model.reconstruct(t2, scrambled, masks).value()), 0.0);
}

TEST(Mae, SingleMaskedSlotLossIsLocal) {
  ModelConfig cfg = tiny_config();
  cfg.mask_ratio = 0.25;  // 1 of 4 tokens
  Rng rng(1);
  MaeModel model = MaeModel::create(cfg, rng);
  auto ws = random_windows(cfg, 1, 5);
  Matrix patches = stack_patches(ptrs(ws), cfg.patch_len);
  MaskSpec m = random_mask(4, 0.25, rng);
  ASSERT_EQ(m.masked.size(), 1u);
  Tape t;
  Var pred = model.reconstruct(t, patches, {m});
  Matrix target = patches;
  const double base = mae_loss(pred, target, m).value()(0, 0);
  for (std::size_t v : m.visible) target(v, 0) += 5.0;
  EXPECT_EQ(mae_loss(pred, target, m).value()(0, 0), base);
  target(m.masked[0], 0) += 5.0;
  EXPECT_NE(mae_loss(pred, target, m).value()(0, 0), base);
}

TEST(Mae, EndToEndGradientMatchesFiniteDifferences) {
  ModelConfig cfg = tiny_config(16, 2);
  Rng rng(3);
  MaeModel model = MaeModel::create(cfg, rng);
  auto ws = random_windows(cfg, 2, 8);
  Matrix patches = stack_patches(ptrs(ws), cfg.patch_len);
  std::vector<MaskSpec> masks{random_mask(4, 0.5, rng), random_mask(4, 0.5, rng)};
  std::vector<Parameter*> params;
  model.for_each_parameter([&](Parameter& p) { params.push_back(&p); });
  EXPECT_LT(grad_check(params, [&](Tape& t) { return model.loss(t, patches, masks); }), 1e-4);
}
