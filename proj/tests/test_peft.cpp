#include <gtest/gtest.h>

#include "support.hpp"

using namespace lorahar;
using namespace lorahar::testing;

namespace {

LoraConfig config(std::size_t r, double alpha, LoraInit init = LoraInit::AZeroBGaussian) {
  LoraConfig c;
  c.rank = r;
  c.alpha = alpha;
  c.init = init;
  return c;
}

/// Adapter with both factors random, as after some training.
LoraAdapter trained_adapter(Parameter& base, std::size_t r, double alpha, Rng& rng) {
  LoraAdapter ad = lora_init(base, config(r, alpha), rng);
  ad.a.value = rng.normal_matrix(ad.a.value.rows(), ad.a.value.cols(), 0.3);
  ad.b.value = rng.normal_matrix(ad.b.value.rows(), ad.b.value.cols(), 0.3);
  return ad;
}

std::uint8_t brute_nearest(double x) {
  const auto& lv = nf4_codebook().levels;
  std::size_t best = 0;
  for (std::size_t i = 1; i < lv.size(); ++i)
    if (std::abs(x - lv[i]) < std::abs(x - lv[best])) best = i;
  return static_cast<std::uint8_t>(best);
}

/// Matrix whose entries are level × float scale, with each block's absmax at a ±1 level.
Matrix representable_matrix(std::size_t rows, std::size_t cols, std::size_t block, Rng& rng) {
  const auto& lv = nf4_codebook().levels;
  Matrix w(rows, cols);
  for (std::size_t b = 0; b * block < w.size(); ++b) {
    const double s = static_cast<double>(static_cast<float>(rng.uniform(0.1, 3.0)));
    for (std::size_t i = b * block; i < std::min((b + 1) * block, w.size()); ++i) w[i] = lv[rng.below(16)] * s;
    w[b * block] = (rng.below(2) == 0 ? 1.0 : -1.0) * s;
  }
  return w;
}

}  // namespace

TEST(LoraInit, ZeroDeltaAndShapes) {
  Rng rng(1);
  for (LoraInit init : {LoraInit::AZeroBGaussian, LoraInit::BZeroAGaussian}) {
    Parameter base("w", rng.normal_matrix(64, 64, 1.0));
    LoraAdapter ad = lora_init(base, config(8, 16.0, init), rng);
    EXPECT_EQ(ad.a.value.rows(), 8u);
    EXPECT_EQ(ad.a.value.cols(), 64u);
    EXPECT_EQ(ad.b.value.rows(), 64u);
    EXPECT_EQ(ad.b.value.cols(), 8u);
    const Matrix delta = ad.delta();
    for (double v : delta.values()) EXPECT_EQ(v, 0.0);
    EXPECT_FALSE(base.trainable);
    EXPECT_TRUE(ad.a.trainable && ad.b.trainable);
  }
}

TEST(LoraInit, GaussianFactorDeterministicAndScaled) {
  Parameter b1("w", Matrix(64, 64)), b2("w", Matrix(64, 64));
  Rng r1(5), r2(5);
  LoraAdapter a1 = lora_init(b1, config(8, 16.0), r1), a2 = lora_init(b2, config(8, 16.0), r2);
  EXPECT_EQ(max_abs_diff(a1.b.value, a2.b.value), 0.0);
  double s2 = 0;
  for (double v : a1.b.value.values()) s2 += v * v;
  EXPECT_NEAR(s2 / a1.b.value.size(), 1.0 / 8.0, 0.03);
}

TEST(LoraInit, RankValidation) {
  Rng rng(1);
  Parameter base("w", Matrix(16, 8));
  EXPECT_THROW(lora_init(base, config(8, 16.0), rng), ConfigError);
  EXPECT_THROW(lora_init(base, config(0, 16.0), rng), ConfigError);
  EXPECT_THROW(lora_init(base, config(2, 0.0), rng), ConfigError);
  EXPECT_NO_THROW(lora_init(base, config(7, 16.0), rng));
}

TEST(LoraForward, ZeroInitIsBaseExactly) {
  Rng rng(2);
  Parameter base("w", rng.normal_matrix(12, 10, 1.0));
  LoraAdapter ad = lora_init(base, config(4, 8.0), rng);
  Tape t;
  Matrix x = rng.normal_matrix(5, 12, 1.0);
  EXPECT_EQ(max_abs_diff(lora_forward(t.constant(x), base, ad).value(), matmul(x, base.value)), 0.0);
}

TEST(LoraForward, HandExample) {
  Parameter base("w", Matrix::identity(2));
  Rng rng(1);
  LoraAdapter ad = lora_init(base, config(1, 2.0), rng);
  ad.b.value = Matrix::from_rows({{1}, {0}});
  ad.a.value = Matrix::from_rows({{0, 1}});
  Tape t;
  Matrix y = lora_forward(t.constant(Matrix::from_rows({{1, 1}})), base, ad).value();
  EXPECT_EQ(y(0, 0), 3.0);
  EXPECT_EQ(y(0, 1), 1.0);
}

TEST(LoraForward, EqualsDenseMaterialization) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Parameter base("w", rng.normal_matrix(10, 7, 1.0));
    LoraAdapter ad = trained_adapter(base, 3, 5.0, rng);
    Matrix dense = base.value;
    const Matrix d = ad.delta();
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = 0; j < 7; ++j) dense(i, j) += d(j, i);
    Matrix x = rng.normal_matrix(4, 10, 1.0);
    Tape t;
    EXPECT_LT(max_abs_diff(lora_forward(t.constant(x), base, ad).value(), matmul(x, dense)), 1e-12);
  }
}

TEST(LoraForward, GradientsReachOnlyFactors) {
  Rng rng(4);
  Parameter base("w", rng.normal_matrix(6, 5, 1.0));
  LoraAdapter ad = trained_adapter(base, 2, 4.0, rng);
  Matrix x = rng.normal_matrix(3, 6, 1.0);
  auto build = [&](Tape& t) { return probe_loss(lora_forward(t.constant(x), base, ad)); };
  EXPECT_LT(grad_check({&ad.a, &ad.b}, build), 1e-6);
  base.trainable = false;
  base.zero_grad();
  Tape t;
  t.backward(build(t));
  for (double g : base.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(LoraMerge, ZeroAdapterIsBitIdentical) {
  Rng rng(5);
  Parameter base("w", rng.normal_matrix(8, 6, 1.0));
  LoraAdapter ad = lora_init(base, config(2, 16.0), rng);
  EXPECT_EQ(max_abs_diff(lora_merge(base, ad), base.value), 0.0);
}

TEST(LoraMerge, MergedForwardMatchesAdapterForward) {
  Rng rng(6);
  Parameter base("w", rng.normal_matrix(16, 12, 1.0));
  LoraAdapter ad = trained_adapter(base, 4, 8.0, rng);
  Tape t;
  double worst = 0;
  std::vector<Matrix> ys;
  std::vector<Matrix> xs;
  for (int i = 0; i < 100; ++i) {
    xs.push_back(rng.normal_matrix(1, 16, 1.0));
    ys.push_back(lora_forward(t.constant(xs.back()), base, ad).value());
  }
  const Matrix merged = lora_merge(base, ad);
  for (int i = 0; i < 100; ++i) worst = std::max(worst, max_abs_diff(matmul(xs[i], merged), ys[i]));
  EXPECT_LE(worst, 1e-10);
  EXPECT_TRUE(ad.consumed);
  EXPECT_THROW(lora_merge(base, ad), ConfigError);
}

TEST(LoraParamCount, Arithmetic) {
  auto c = lora_param_count({{64, 64}}, 8);
  EXPECT_EQ(c.trainable, 1024u);
  EXPECT_EQ(c.full_equivalent, 4096u);
  EXPECT_THROW(lora_param_count({{64, 64}}, 0), ConfigError);
  auto many = lora_param_count({{64, 64}, {64, 128}, {128, 64}}, 4);
  EXPECT_EQ(many.trainable, 4u * (128 + 192 + 192));
  EXPECT_EQ(many.full_equivalent, 4096u + 8192 + 8192);
}

TEST(Nf4Codebook, FrozenLevels) {
  const std::array<double, 16> expect{-1.0,      -0.6961928, -0.5250731, -0.3949175, -0.2844414, -0.1847734, -0.0910500, 0.0,
                                      0.0795803, 0.1609302,  0.2461123,  0.3379152,  0.4407098,  0.5626170,  0.7229568,  1.0};
  const auto& lv = nf4_codebook().levels;
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(lv[i], expect[i], 1e-5) << i;
}

TEST(Nf4Codebook, StructuralInvariants) {
  const auto& lv = build_nf4_codebook().levels;
  EXPECT_EQ(lv.front(), -1.0);
  EXPECT_EQ(lv.back(), 1.0);
  EXPECT_EQ(std::count(lv.begin(), lv.end(), 0.0), 1);
  for (std::size_t i = 0; i + 1 < 16; ++i) EXPECT_LT(lv[i], lv[i + 1]);
}

TEST(Nf4Codebook, NearestMatchesBruteForceIncludingTies) {
  const auto& cb = nf4_codebook();
  Rng rng(1);
  for (int i = 0; i < 100000; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    ASSERT_EQ(cb.nearest(x), brute_nearest(x)) << x;
  }
  for (std::size_t i = 0; i + 1 < 16; ++i) {
    const double mid = 0.5 * (cb.levels[i] + cb.levels[i + 1]);
    EXPECT_EQ(cb.nearest(mid), brute_nearest(mid));
    EXPECT_EQ(cb.nearest(cb.levels[i]), i);
  }
}

TEST(Nf4, AllZeroBlock) {
  QuantizedMatrix q = quantize_nf4(Matrix(4, 32), 64);
  EXPECT_EQ(q.scales.at(0), 0.0F);
  const Matrix back = dequantize_nf4(q);
  for (double v : back.values()) EXPECT_EQ(v, 0.0);
}

TEST(Nf4, AbsmaxRoundTripsExactly) {
  Rng rng(2);
  Matrix w = rng.normal_matrix(1, 64, 1.0);
  w[17] = 6.5;  // float-representable absmax
  w[3] = -1.25;
  Matrix back = dequantize_nf4(quantize_nf4(w, 64));
  EXPECT_EQ(back[17], 6.5);
}

TEST(Nf4, ErrorBoundAgainstBruteForce) {
  Rng rng(3);
  const double half_gap = nf4_codebook().max_gap() / 2.0;
  for (std::size_t block : {64u, 7u, 2u}) {
    Matrix w = rng.normal_matrix(37, 29, 1.5);
    QuantizedMatrix q = quantize_nf4(w, block);
    Matrix back = dequantize_nf4(q);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double s = q.block_scale(i / block);
      ASSERT_EQ(q.code(i), brute_nearest(w[i] / s));
      ASSERT_LE(std::abs(w[i] - back[i]), s * half_gap + 1e-15);
    }
  }
}

TEST(Nf4, RepresentableMatricesRoundTrip) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix w = representable_matrix(9, 15, 16, rng);
    Matrix back = dequantize_nf4(quantize_nf4(w, 16));
    EXPECT_EQ(max_abs_diff(w, back), 0.0);
  }
}

TEST(Nf4, QuantizeOfDequantizeIsIdentity) {
  Rng rng(5);
  for (bool dq : {false, true}) {
    for (int trial = 0; trial < 20; ++trial) {
      Matrix w = rng.normal_matrix(33, 21, 0.7);
      QuantizedMatrix q = quantize_nf4(w, 8, dq, 4);
      EXPECT_TRUE(quantize_nf4(dequantize_nf4(q), 8, dq, 4) == q);
    }
  }
}

TEST(Nf4, ShapePackingAndStorageBytes) {
  Rng rng(6);
  QuantizedMatrix q = quantize_nf4(rng.normal_matrix(3, 5, 1.0), 4);
  EXPECT_EQ(q.codes.size(), 8u);
  EXPECT_EQ(q.codes.back() >> 4, 0);
  Matrix back = dequantize_nf4(q);
  EXPECT_EQ(back.rows(), 3u);
  EXPECT_EQ(back.cols(), 5u);
  EXPECT_EQ(quantize_nf4(Matrix(32, 32, 1.0), 64).storage_bytes(), 576u);
  // 1024 values, 16 blocks, 1 group: 512 + 16 + 4
  EXPECT_EQ(quantize_nf4(Matrix(32, 32, 1.0), 64, true).storage_bytes(), 532u);
}

TEST(Nf4, CorruptedCodesRejected) {
  QuantizedMatrix q = quantize_nf4(Rng(1).normal_matrix(1, 5, 1.0), 4);
  EXPECT_THROW(q.set_code(0, 16), DataError);
  QuantizedMatrix bad = q;
  bad.codes.back() |= 0xF0;
  EXPECT_THROW(dequantize_nf4(bad), DataError);
  bad = q;
  bad.codes.pop_back();
  EXPECT_THROW(dequantize_nf4(bad), DataError);
  bad = q;
  bad.scales[0] = -1.0F;
  EXPECT_THROW(dequantize_nf4(bad), DataError);
  EXPECT_THROW(quantize_nf4(Matrix(2, 2), 1), ConfigError);
}

TEST(Nf4, DoubleQuantKeepsCodesAndBoundsExtraError) {
  Rng rng(7);
  Matrix w = rng.normal_matrix(64, 80, 1.0);
  for (std::size_t i = 0; i < 64; ++i) w[i] *= 1e-4;  // a tiny block next to large ones
  QuantizedMatrix plain = quantize_nf4(w, 16);
  QuantizedMatrix dq = quantize_nf4(w, 16, true, 256);
  EXPECT_EQ(plain.codes, dq.codes);
  EXPECT_EQ(dq.num_groups(), 2u);
  Matrix a = dequantize_nf4(plain), b = dequantize_nf4(dq);
  for (std::size_t i = 0; i < w.size(); ++i) ASSERT_LE(std::abs(a[i] - b[i]), dq.scale_step(i / 16) + 1e-15);
  for (std::size_t blk = 0; blk < dq.num_blocks(); ++blk) EXPECT_GT(dq.block_scale(blk), 0.0);
}

TEST(QloraForward, LosslessBaseMatchesLora) {
  Rng rng(8);
  Parameter base("w", representable_matrix(16, 12, 64, rng));
  LoraAdapter ad = trained_adapter(base, 4, 8.0, rng);
  QuantizedMatrix q = quantize_nf4(base.value, 64);
  Matrix x = rng.normal_matrix(5, 16, 1.0);
  Tape t;
  EXPECT_LT(max_abs_diff(qlora_forward(t.constant(x), q, ad).value(), lora_forward(t.constant(x), base, ad).value()), 1e-12);
}

TEST(QloraForward, ZeroAdapterIsDequantizedBase) {
  Rng rng(9);
  Parameter base("w", rng.normal_matrix(16, 12, 1.0));
  LoraAdapter ad = lora_init(base, config(4, 8.0), rng);
  QuantizedMatrix q = quantize_nf4(base.value, 64);
  Matrix x = rng.normal_matrix(5, 16, 1.0);
  Tape t;
  EXPECT_EQ(max_abs_diff(qlora_forward(t.constant(x), q, ad).value(), matmul(x, dequantize_nf4(q))), 0.0);
}

TEST(QloraForward, ErrorPropagationBound) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    Parameter base("w", rng.normal_matrix(20, 9, 1.0));
    LoraAdapter ad = trained_adapter(base, 3, 6.0, rng);
    QuantizedMatrix q = quantize_nf4(base.value, 16, trial % 2 == 1);
    const double max_err = max_abs_diff(base.value, dequantize_nf4(q));
    Matrix x = rng.normal_matrix(1, 20, 1.0);
    double l1 = 0;
    for (double v : x.values()) l1 += std::abs(v);
    Tape t;
    EXPECT_LE(max_abs_diff(qlora_forward(t.constant(x), q, ad).value(), lora_forward(t.constant(x), base, ad).value()), l1 * max_err + 1e-12);
  }
}

TEST(QloraForward, GradientsAndBuffer) {
  Rng rng(11);
  Parameter base("w", rng.normal_matrix(8, 6, 1.0));
  LoraAdapter ad = trained_adapter(base, 2, 4.0, rng);
  QuantizedMatrix q = quantize_nf4(base.value, 16, true, 2);
  Matrix x = rng.normal_matrix(3, 8, 1.0);
  EXPECT_LT(grad_check({&ad.a, &ad.b}, [&](Tape& t) { return probe_loss(qlora_forward(t.constant(x), q, ad)); }), 1e-6);
  BufferMeter meter;
  meter.begin_pass();
  Tape t;
  qlora_forward(t.constant(x), q, ad, &meter);
  qlora_forward(t.constant(x), q, ad, &meter);
  EXPECT_EQ(meter.peak_bytes, 2u * 48 * sizeof(double));
  meter.begin_pass();
  qlora_forward(t.constant(x), q, ad, &meter);
  EXPECT_EQ(meter.peak_bytes, 2u * 48 * sizeof(double));
}

TEST(Wrap, CountsAdaptersAndFreezesBase) {
  ModelConfig cfg = tiny_config(16, 6);
  Rng rng(1);
  Backbone bb = Backbone::create(cfg, rng);
  wrap_model(bb, config(4, 8.0), false, rng);
  EXPECT_EQ(adapter_count(bb), 36u);
  bb.for_each_projection([](LoraTarget, Projection& p) { EXPECT_FALSE(p.weight.trainable); });
  EXPECT_THROW(wrap_model(bb, config(4, 8.0), false, rng), ConfigError);
}

TEST(Wrap, SubsetOfTargets) {
  ModelConfig cfg = tiny_config(16, 2);
  Rng rng(1);
  Backbone bb = Backbone::create(cfg, rng);
  LoraConfig c = config(4, 8.0);
  c.targets = {LoraTarget::Q, LoraTarget::V};
  wrap_model(bb, c, false, rng);
  EXPECT_EQ(adapter_count(bb), 4u);
  EXPECT_FALSE(bb.blocks[0].k.adapter.has_value());
}

TEST(Wrap, RankTooLargeForFfnRejectedBeforeMutation) {
  ModelConfig cfg = tiny_config(16, 2);
  Rng rng(1);
  Backbone bb = Backbone::create(cfg, rng);
  EXPECT_THROW(wrap_model(bb, config(16, 8.0), false, rng), ConfigError);
  EXPECT_FALSE(bb.wrapped);
  EXPECT_EQ(adapter_count(bb), 0u);
  EXPECT_TRUE(bb.patch_weight.trainable);
}

TEST(Wrap, FreshWrapKeepsForwardBitIdentical) {
  ModelConfig cfg = tiny_config(16, 2);
  Rng r1(1), r2(1);
  Backbone plain = Backbone::create(cfg, r1), wrapped = Backbone::create(cfg, r2);
  Rng lr(3);
  wrap_model(wrapped, config(4, 8.0), false, lr);
  auto ws = random_windows(cfg, 4, 2);
  Tape t;
  EXPECT_EQ(max_abs_diff(plain.forward(t, ptrs(ws)).value(), wrapped.forward(t, ptrs(ws)).value()), 0.0);
}

TEST(Wrap, QuantizedKeepsExceptionsInHighPrecision) {
  ModelConfig cfg = tiny_config(16, 2);
  Rng rng(1);
  Backbone bb = Backbone::create(cfg, rng);
  WrapOptions o;
  o.quantize = true;
  wrap_model(bb, config(4, 8.0), rng, o);
  EXPECT_TRUE(bb.quantized);
  EXPECT_EQ(bb.patch_weight.precision, PrecisionClass::HighPrecisionException);
  EXPECT_EQ(bb.blocks[0].ln1_gain.precision, PrecisionClass::HighPrecisionException);
  EXPECT_EQ(bb.blocks[1].ffn2_bias.precision, PrecisionClass::HighPrecisionException);
  bb.for_each_projection([](LoraTarget, Projection& p) {
    EXPECT_TRUE(p.quantized.has_value());
    EXPECT_EQ(p.weight.precision, PrecisionClass::QuantizedNf4);
    EXPECT_TRUE(p.weight.value.empty());
    EXPECT_EQ(p.adapter->a.precision, PrecisionClass::Full);
  });
  EXPECT_FALSE(bb.positions.empty());
  auto ws = random_windows(cfg, 2, 2);
  Tape t;
  EXPECT_TRUE(bb.forward(t, ptrs(ws)).value().all_finite());
  EXPECT_GT(bb.meter.peak_bytes, 0u);
}

TEST(Wrap, MergeAdaptersReproducesAdapterForward) {
  ModelConfig cfg = tiny_config(16, 2);
  Rng rng(1);
  Backbone bb = Backbone::create(cfg, rng);
  wrap_model(bb, config(4, 8.0), false, rng);
  bb.for_each_projection([&](LoraTarget, Projection& p) {
    p.adapter->a.value = rng.normal_matrix(p.adapter->a.value.rows(), p.adapter->a.value.cols(), 0.2);
  });
  auto ws = random_windows(cfg, 3, 2);
  Tape t;
  Matrix before = bb.forward(t, ptrs(ws)).value();
  merge_adapters(bb);
  EXPECT_FALSE(bb.wrapped);
  EXPECT_EQ(adapter_count(bb), 0u);
  EXPECT_LE(max_abs_diff(before, bb.forward(t, ptrs(ws)).value()), 1e-10);
}
