#include <gtest/gtest.h>

#include "support.hpp"

using namespace lorahar;
using namespace lorahar::testing;

namespace {

ExperimentConfig small_experiment() {
  ExperimentConfig c;
  c.model = tiny_config(16, 1);
  c.model.window_len = 128;
  c.model.channels = 6;
  c.model.patch_len = 32;
  c.pretrain.epochs = 1;
  c.pretrain.batch_size = 16;
  c.epochs = 1;
  c.batch_size = 16;
  c.learning_rate = 3e-3;
  c.lora.rank = 2;
  c.lora.alpha = 4.0;
  c.seed = 7;
  return c;
}

std::vector<DatasetBundle> small_domains(std::size_t n_domains) {
  SyntheticSpec s = default_synthetic_spec(n_domains, 3, 1);
  s.recordings_per_class = 2;
  s.samples_per_recording = 256;
  return split_by_domain(build_label_union(generate_synthetic(s)));
}

RunRecord fake(const std::string& kind, const std::string& domain, Strategy s, double acc, std::size_t rank = 0, double fraction = 0.7) {
  RunRecord r;
  r.kind = kind;
  r.target_domain = domain;
  r.strategy = s;
  r.rank = rank;
  r.train_fraction = fraction;
  r.metrics.accuracy = acc;
  r.metrics.macro_f1 = acc / 2;
  r.log.resources.trainable_params = 100 + rank;
  r.log.resources.total_params = 1000;
  r.log.resources.wall_seconds = 1.5;
  return r;
}

}  // namespace

TEST(Confusion, CountsAndErrors) {
  ConfusionMatrix cm = confusion({0, 1, 1, 2}, {0, 1, 2, 2}, 3);
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(2, 1), 1u);
  EXPECT_EQ(cm.at(2, 2), 1u);
  EXPECT_EQ(cm.total(), 4u);
  EXPECT_EQ(cm.trace(), 3u);
  EXPECT_THROW(confusion({0}, {0, 1}, 2), DimensionError);
  EXPECT_THROW(confusion({2}, {0}, 2), DataError);
  EXPECT_THROW(confusion({0}, {-1}, 2), DataError);
}

TEST(Metrics, PerfectPredictions) {
  MetricsReport m = metrics(confusion({0, 1, 2, 1}, {0, 1, 2, 1}, 3));
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.macro_f1, 1.0);
  EXPECT_EQ(m.macro_precision, 1.0);
  EXPECT_EQ(m.macro_recall, 1.0);
}

TEST(Metrics, AlwaysPredictingOneClass) {
  MetricsReport m = metrics(confusion({0, 0, 0, 0}, {0, 0, 1, 1}, 2));
  EXPECT_EQ(m.accuracy, 0.5);
  ASSERT_EQ(m.per_class_f1.size(), 2u);
  EXPECT_NEAR(m.per_class_f1[0], 2.0 / 3.0, 1e-15);
  EXPECT_EQ(m.per_class_f1[1], 0.0);
  EXPECT_NEAR(m.macro_f1, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(m.macro_precision, 0.25, 1e-15);
  EXPECT_NEAR(m.macro_recall, 0.5, 1e-15);
}

TEST(Metrics, AbsentClassStillCountsInMacroMean) {
  MetricsReport m = metrics(confusion({0, 1}, {0, 1}, 3));
  EXPECT_NEAR(m.macro_f1, 2.0 / 3.0, 1e-15);
  EXPECT_THROW(metrics(ConfusionMatrix(3)), DataError);
}

TEST(Metrics, MatchesDirectOracleOnRandomLabels) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 + rng.below(5), n = 1 + rng.below(60);
    std::vector<int> y, p;
    for (std::size_t i = 0; i < n; ++i) {
      y.push_back(static_cast<int>(rng.below(k)));
      p.push_back(static_cast<int>(rng.below(k)));
    }
    double f1 = 0, prec = 0, rec = 0, correct = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const bool is_y = y[i] == int(c), is_p = p[i] == int(c);
        tp += is_y && is_p;
        fp += !is_y && is_p;
        fn += is_y && !is_p;
      }
      const double pc = tp + fp > 0 ? tp / (tp + fp) : 0.0;
      const double rc = tp + fn > 0 ? tp / (tp + fn) : 0.0;
      prec += pc / double(k);
      rec += rc / double(k);
      f1 += (2 * tp + fp + fn > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0) / double(k);
    }
    for (std::size_t i = 0; i < n; ++i) correct += y[i] == p[i];
    MetricsReport m = metrics(confusion(p, y, k));
    EXPECT_NEAR(m.accuracy, correct / double(n), 1e-12);
    EXPECT_NEAR(m.macro_f1, f1, 1e-12);
    EXPECT_NEAR(m.macro_precision, prec, 1e-12);
    EXPECT_NEAR(m.macro_recall, rec, 1e-12);
  }
}

TEST(Accounting, HandEnumeratedCounts) {
  // d=8, h=16, one block, patch 8×3, head 8 hidden, 3 classes
  //   embed 24·8+8 = 200; block 4·64 + 2·16 + 8·16+16 + 16·8+8 = 568; head 64+8+8+8+24+3 = 115
  ModelConfig cfg = tiny_config(8, 1);
  Rng rng(1), head(2);
  Classifier m = Classifier::create(Backbone::create(cfg, rng), head);
  select_trainable(m, Strategy::Full);
  ParameterCount full = count_parameters(m);
  EXPECT_EQ(full.total, 883u);
  EXPECT_EQ(full.trainable, 883u);
  select_trainable(m, Strategy::FrozenHead);
  EXPECT_EQ(count_parameters(m).trainable, 115u);

  // r=2 adapters add 2·(8+8)·4 + 2·(8+16)·2 = 224
  LoraConfig l;
  l.rank = 2;
  l.alpha = 4.0;
  Rng lr(3);
  Classifier lm = Classifier::create(Backbone::create(cfg, rng), head);
  prepare_strategy(lm, Strategy::Lora, &l, lr);
  ParameterCount lora = count_parameters(lm);
  EXPECT_EQ(lora.trainable, 339u);
  EXPECT_EQ(lora.total, 1107u);
  EXPECT_GT(lora.total, full.total);

  Classifier qm = Classifier::create(Backbone::create(cfg, rng), head);
  prepare_strategy(qm, Strategy::Qlora, &l, lr);
  ParameterCount q = count_parameters(qm);
  EXPECT_EQ(q.total, 1107u);
  EXPECT_EQ(q.trainable, 339u);
}

TEST(Accounting, MemoryArithmetic) {
  ModelConfig cfg = tiny_config(16, 2);
  Rng rng(1), head(2), lr(3);
  LoraConfig l;
  l.rank = 2;
  l.alpha = 4.0;

  Classifier lm = Classifier::create(Backbone::create(cfg, rng), head);
  prepare_strategy(lm, Strategy::Lora, &l, lr);
  ResourceReport r = measure_memory(lm, 2.5);
  EXPECT_EQ(r.total_params, r.trainable_params + r.frozen_params);
  EXPECT_EQ(r.frozen_bytes_stored, 8 * r.frozen_params);
  EXPECT_EQ(r.frozen_bytes_fp32, 4 * r.frozen_params);
  EXPECT_EQ(r.trainable_bytes_fp32, 4 * r.trainable_params);
  EXPECT_EQ(r.nf4_values, 0u);
  EXPECT_EQ(r.wall_seconds, 2.5);

  Classifier qm = Classifier::create(Backbone::create(cfg, rng), head);
  prepare_strategy(qm, Strategy::Qlora, &l, lr);
  ResourceReport q = measure_memory(qm);
  std::size_t nf4_bytes = 0, nf4_values = 0;
  qm.backbone.for_each_projection([&](LoraTarget, Projection& p) {
    nf4_bytes += p.quantized->storage_bytes();
    nf4_values += p.quantized->count();
  });
  EXPECT_EQ(q.nf4_bytes, nf4_bytes);
  EXPECT_EQ(q.nf4_values, nf4_values);
  EXPECT_EQ(q.total_params, r.total_params);
  EXPECT_EQ(q.frozen_params, q.nf4_values + q.exception_values + q.full_values);
  EXPECT_EQ(q.frozen_bytes_fp32, 4 * (q.exception_values + q.full_values) + q.nf4_bytes);
  EXPECT_EQ(q.frozen_bytes_fp32_dense, 4 * q.frozen_params);
  EXPECT_EQ(q.full_values, 0u);
  EXPECT_LT(q.frozen_bytes_fp32, r.frozen_bytes_fp32);
  EXPECT_NEAR(to_mib(1024 * 1024 * 3), 3.0, 0.0);
}

TEST(Parallel, KeepsOrderAndPropagatesErrors) {
  auto out = run_parallel<int>(10, 3, [](std::size_t i) { return static_cast<int>(i * i); });
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(out[i], static_cast<int>(i * i));
  EXPECT_THROW(run_parallel<int>(5, 2,
                                 [](std::size_t i) -> int {
                                   if (i == 3) throw DataError("boom");
                                   return 0;
                                 }),
               DataError);
}

TEST(Experiments, LodoProducesOneRecordPerFoldAndStrategy) {
  auto per = small_domains(3);
  ExperimentConfig cfg = small_experiment();
  auto recs = run_lodo(per, {Strategy::Full, Strategy::Lora}, cfg);
  ASSERT_EQ(recs.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(recs[i].kind, "lodo");
    EXPECT_EQ(recs[i].target_domain, "domain" + std::to_string(i / 2));
    EXPECT_EQ(recs[i].strategy, i % 2 == 0 ? Strategy::Full : Strategy::Lora);
    EXPECT_GT(recs[i].eval_windows, 0u);
    EXPECT_GE(recs[i].metrics.accuracy, 0.0);
    EXPECT_LE(recs[i].metrics.accuracy, 1.0);
  }
  EXPECT_EQ(recs[1].rank, 2u);
  EXPECT_LT(recs[1].log.resources.trainable_params, recs[0].log.resources.trainable_params);
  EXPECT_THROW(run_lodo({per[0]}, {Strategy::Full}, cfg), ProtocolError);
}

TEST(Experiments, RankSweepTrainableGrowsLinearly) {
  auto per = small_domains(2);
  ExperimentConfig cfg = small_experiment();
  Backbone bb = pretrain_backbone(per[0], cfg);
  auto recs = rank_sweep(bb, per[1], {1, 2, 4}, cfg);
  ASSERT_EQ(recs.size(), 3u);
  // per unit of rank: 4·(16+16) + 2·(16+32) = 224
  EXPECT_EQ(recs[1].log.resources.trainable_params - recs[0].log.resources.trainable_params, 224u);
  EXPECT_EQ(recs[2].log.resources.trainable_params - recs[1].log.resources.trainable_params, 448u);
  EXPECT_THROW(rank_sweep(bb, per[1], {16}, cfg), ConfigError);
  EXPECT_THROW(rank_sweep(bb, per[1], {}, cfg), ConfigError);
}

TEST(Experiments, SplitSweepHonoursFractions) {
  auto per = small_domains(2);
  ExperimentConfig cfg = small_experiment();
  Backbone bb = pretrain_backbone(per[0], cfg);
  auto recs = split_sweep(bb, per[1], {0.7, 0.3}, {Strategy::Full, Strategy::Lora}, cfg);
  ASSERT_EQ(recs.size(), 4u);
  const std::size_t n = per[1].windows.size();
  EXPECT_EQ(recs[0].train_windows, static_cast<std::size_t>(std::floor(0.7 * double(n) + 0.5)));
  EXPECT_EQ(recs[3].train_windows, static_cast<std::size_t>(std::floor(0.3 * double(n) + 0.5)));
  EXPECT_EQ(recs[2].train_fraction, 0.3);
  EXPECT_THROW(split_sweep(bb, per[1], {1.0}, {Strategy::Full}, cfg), ConfigError);
}

TEST(Experiments, SameSeedSameResult) {
  auto per = small_domains(2);
  ExperimentConfig cfg = small_experiment();
  Backbone bb = pretrain_backbone(per[0], cfg);
  RunRecord a = finetune_and_evaluate(bb, per[1], Strategy::Qlora, cfg);
  RunRecord b = finetune_and_evaluate(bb, per[1], Strategy::Qlora, cfg);
  EXPECT_EQ(a.log.epochs[0].loss, b.log.epochs[0].loss);
  EXPECT_EQ(a.metrics.accuracy, b.metrics.accuracy);
}

TEST(Report, PerformanceAndParameterTables) {
  std::vector<RunRecord> recs{fake("lodo", "b", Strategy::Lora, 0.8, 8), fake("lodo", "a", Strategy::Full, 0.9),
                              fake("lodo", "a", Strategy::Lora, 0.7, 8), fake("rank", "a", Strategy::Lora, 0.5, 4)};
  Table perf = performance_table(recs);
  ASSERT_EQ(perf.rows.size(), 3u);
  EXPECT_EQ(perf.rows[0][0], "a");
  EXPECT_EQ(perf.rows[0][1], "Full FT");
  EXPECT_EQ(perf.rows[0][2], "0.9000");
  EXPECT_EQ(perf.rows[2][0], "b");
  EXPECT_FALSE(perf.notes.empty());
  Table params = parameter_table(recs);
  ASSERT_EQ(params.rows.size(), 2u);
  EXPECT_EQ(params.rows[1][1], "108");
  Table time = time_table(recs);
  EXPECT_EQ(time.headers, (std::vector<std::string>{"Target", "Full FT", "LoRA"}));
  EXPECT_EQ(time.rows[1][1], "-");
  EXPECT_EQ(all_tables(recs).size(), 5u);  // no split runs
}

TEST(Report, RankAndSplitTables) {
  std::vector<RunRecord> recs{fake("rank", "a", Strategy::Lora, 0.6, 16), fake("rank", "a", Strategy::Lora, 0.5, 8),
                              fake("split", "a", Strategy::Full, 0.8, 0, 0.3), fake("split", "a", Strategy::Lora, 0.6, 8, 0.3),
                              fake("split", "a", Strategy::Full, 0.9, 0, 0.7)};
  Table rank = rank_table(recs);
  ASSERT_EQ(rank.rows.size(), 2u);
  EXPECT_EQ(rank.rows[0][0], "8");
  Table split = split_table(recs);
  EXPECT_EQ(split.headers.back(), "LoRA / Full FT");
  ASSERT_EQ(split.rows.size(), 2u);
  EXPECT_EQ(split.rows[0][0], "70/30");
  EXPECT_EQ(split.rows[0].back(), "-");
  EXPECT_EQ(split.rows[1][0], "30/70");
  EXPECT_EQ(split.rows[1].back(), "0.7500");
  const std::string svg = rank_plot_svg(recs);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("polyline"), std::string::npos);
}

TEST(Report, CsvEscapingAndTextLayout) {
  Table t{"T", {"a", "b"}, {{"x,y", "say \"hi\""}, {"1", "2"}}, {"n"}};
  EXPECT_EQ(to_csv(t), "a,b\n\"x,y\",\"say \"\"hi\"\"\"\n1,2\n");
  const std::string text = to_text(t);
  EXPECT_NE(text.find("note: n"), std::string::npos);
  EXPECT_EQ(text.substr(0, 2), "T\n");
}
