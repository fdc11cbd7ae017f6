#pragma once

#include <algorithm>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorahar/finetune/trainer.hpp"
#include "lorahar/io/checkpoint.hpp"

namespace lorahar {

struct ExperimentConfig {
  ModelConfig model;
  PretrainConfig pretrain;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double train_fraction = 0.70;
  LoraConfig lora;
  WrapOptions wrap;
  std::uint64_t seed = 0;

  TrainConfig train_config(Strategy s) const {
    TrainConfig t;
    t.strategy = s;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.learning_rate = learning_rate;
    t.seed = seed;
    t.train_fraction = train_fraction;
    t.wrap = wrap;
    if (uses_adapters(s)) t.lora = lora;
    else t.lora.reset();
    return t;
  }
};

inline const std::vector<std::size_t>& default_sweep_ranks() {
  static const std::vector<std::size_t> r{8, 16, 20, 32, 48, 64};
  return r;
}

inline const std::vector<double>& default_sweep_fractions() {
  static const std::vector<double> f{0.7, 0.6, 0.5, 0.4, 0.3};
  return f;
}

/// Outcome of one fine-tuning run.
struct RunRecord {
  std::string kind;  // "lodo", "rank" or "split"
  std::string target_domain;
  Strategy strategy = Strategy::Full;
  std::size_t rank = 0;  // 0 when no adapters
  double alpha = 0.0;
  double train_fraction = 0.7;
  std::uint64_t seed = 0;
  std::size_t train_windows = 0;
  std::size_t eval_windows = 0;
  MetricsReport metrics;
  TrainLog log;
};

/// MAE-pretrain a fresh backbone on `pretrain`. The model config's class count is
/// taken from the bundle vocabulary.
inline Backbone pretrain_backbone(const DatasetBundle& pretrain, const ExperimentConfig& cfg, PretrainLog* log = nullptr) {
  ModelConfig mc = cfg.model;
  mc.n_classes = pretrain.n_classes();
  if (!pretrain.windows.empty()) mc.channels = pretrain.windows.front().values.cols();
  Rng init(derive_seed(cfg.seed, seed_stream::model_init));
  MaeModel mae = MaeModel::create(mc, init);
  PretrainConfig pc = cfg.pretrain;
  pc.seed = cfg.seed;
  PretrainLog l = pretrain_mae(mae, pretrain.windows, pc);
  if (log != nullptr) *log = std::move(l);
  return std::move(mae.backbone);
}

/// Attach a head to a copy of `backbone`, adapt it with `strategy` on the train part
/// of `target` and evaluate on the rest.
inline RunRecord finetune_and_evaluate(const Backbone& backbone, const DatasetBundle& target, Strategy strategy, const ExperimentConfig& cfg,
                                       Classifier* out_model = nullptr) {
  if (target.windows.empty()) throw DataError("target set is empty");
  RunRecord rec;
  rec.strategy = strategy;
  rec.seed = cfg.seed;
  rec.train_fraction = cfg.train_fraction;
  const auto domains = target.domains();
  rec.target_domain = domains.size() == 1 ? domains.front() : "mixed";
  const TrainConfig tc = cfg.train_config(strategy);
  tc.validate();
  Split split = split_train_eval(target, cfg.train_fraction, derive_seed(cfg.seed, seed_stream::split));
  if (split.eval.windows.empty()) throw DataError("evaluation split is empty; lower the train fraction");
  Rng head_rng(derive_seed(cfg.seed, seed_stream::head_init));
  Classifier model = Classifier::create(backbone, head_rng);
  if (model.config().n_classes != target.n_classes()) {
    throw DataError("backbone was built for " + std::to_string(model.config().n_classes) + " classes, target vocabulary has " +
                    std::to_string(target.n_classes()));
  }
  Rng lora_rng(derive_seed(cfg.seed, seed_stream::lora_init));
  prepare_strategy(model, strategy, tc.lora ? &*tc.lora : nullptr, lora_rng, tc.wrap);
  if (tc.lora) {
    rec.rank = tc.lora->rank;
    rec.alpha = tc.lora->alpha;
  }
  rec.log = train(model, split.train.windows, nullptr, tc);
  rec.log.warnings.insert(rec.log.warnings.begin(), split.warnings.begin(), split.warnings.end());
  rec.metrics = evaluate(model, split.eval.windows);
  rec.train_windows = split.train.windows.size();
  rec.eval_windows = split.eval.windows.size();
  if (out_model != nullptr) *out_model = std::move(model);
  return rec;
}

/// Run `tasks` over up to `jobs` threads; results keep task order.
template <typename T, typename F>
std::vector<T> run_parallel(std::size_t tasks, std::size_t jobs, F&& fn) {
  std::vector<T> out(tasks);
  std::vector<std::exception_ptr> errors(tasks);
  std::size_t next = 0;
  std::mutex m;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(m);
        if (next >= tasks) return;
        i = next++;
      }
      try {
        out[i] = fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, tasks));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

/// One fold per domain: pretrain on the others, then fine-tune each strategy on the
/// held-out domain. Records come out fold-major, strategies in the given order.
inline std::vector<RunRecord> run_lodo(const std::vector<DatasetBundle>& per_domain, const std::vector<Strategy>& strategies,
                                       const ExperimentConfig& cfg, std::size_t jobs = 1) {
  if (strategies.empty()) throw ConfigError("run_lodo needs at least one strategy");
  const std::vector<LodoFold> folds = lodo_folds(per_domain);
  auto per_fold = run_parallel<std::vector<RunRecord>>(folds.size(), jobs, [&](std::size_t i) {
    const Backbone bb = pretrain_backbone(folds[i].pretrain, cfg);
    std::vector<RunRecord> recs;
    for (Strategy s : strategies) {
      RunRecord r = finetune_and_evaluate(bb, folds[i].target, s, cfg);
      r.kind = "lodo";
      recs.push_back(std::move(r));
    }
    return recs;
  });
  std::vector<RunRecord> out;
  for (auto& v : per_fold)
    for (auto& r : v) out.push_back(std::move(r));
  return out;
}

/// LoRA fine-tuning at each rank with everything else fixed.
inline std::vector<RunRecord> rank_sweep(const Backbone& backbone, const DatasetBundle& target, const std::vector<std::size_t>& ranks,
                                         const ExperimentConfig& cfg, std::size_t jobs = 1) {
  if (ranks.empty()) throw ConfigError("rank sweep needs at least one rank");
  for (std::size_t r : ranks) {
    LoraConfig lc = cfg.lora;
    lc.rank = r;
    const ModelConfig& m = backbone.config;
    for (LoraTarget t : lc.targets) {
      const bool ffn = t == LoraTarget::Ffn1 || t == LoraTarget::Ffn2;
      lc.validate_for(m.embed_dim, ffn ? m.ffn_hidden : m.embed_dim);
    }
  }
  return run_parallel<RunRecord>(ranks.size(), jobs, [&](std::size_t i) {
    ExperimentConfig c = cfg;
    c.lora.rank = ranks[i];
    RunRecord r = finetune_and_evaluate(backbone, target, Strategy::Lora, c);
    r.kind = "rank";
    return r;
  });
}

/// Each strategy at each train fraction.
inline std::vector<RunRecord> split_sweep(const Backbone& backbone, const DatasetBundle& target, const std::vector<double>& fractions,
                                          const std::vector<Strategy>& strategies, const ExperimentConfig& cfg, std::size_t jobs = 1) {
  if (fractions.empty()) throw ConfigError("split sweep needs at least one fraction");
  if (strategies.empty()) throw ConfigError("split sweep needs at least one strategy");
  for (double f : fractions)
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("split fraction " + std::to_string(f) + " outside (0, 1)");
  const std::size_t n = fractions.size() * strategies.size();
  return run_parallel<RunRecord>(n, jobs, [&](std::size_t i) {
    ExperimentConfig c = cfg;
    c.train_fraction = fractions[i / strategies.size()];
    RunRecord r = finetune_and_evaluate(backbone, target, strategies[i % strategies.size()], c);
    r.kind = "split";
    return r;
  });
}

// ---------------------------------------------------------------------------
// Record serialization

inline json to_json(const MetricsReport& m) {
  return json{{"accuracy", m.accuracy}, {"macro_f1", m.macro_f1}, {"macro_precision", m.macro_precision},
              {"macro_recall", m.macro_recall}, {"per_class_f1", m.per_class_f1}};
}

inline MetricsReport metrics_from_json(const json& j) {
  MetricsReport m;
  m.accuracy = j.at("accuracy").get<double>();
  m.macro_f1 = j.at("macro_f1").get<double>();
  m.macro_precision = j.at("macro_precision").get<double>();
  m.macro_recall = j.at("macro_recall").get<double>();
  m.per_class_f1 = j.value("per_class_f1", std::vector<double>{});
  return m;
}

inline json to_json(const ResourceReport& r) {
  return json{{"trainable_params", r.trainable_params},
              {"total_params", r.total_params},
              {"frozen_params", r.frozen_params},
              {"full_values", r.full_values},
              {"exception_values", r.exception_values},
              {"nf4_values", r.nf4_values},
              {"nf4_bytes", r.nf4_bytes},
              {"frozen_bytes_stored", r.frozen_bytes_stored},
              {"frozen_bytes_fp32", r.frozen_bytes_fp32},
              {"frozen_bytes_fp32_dense", r.frozen_bytes_fp32_dense},
              {"trainable_bytes_stored", r.trainable_bytes_stored},
              {"trainable_bytes_fp32", r.trainable_bytes_fp32},
              {"buffer_bytes_peak", r.buffer_bytes_peak},
              {"wall_seconds", r.wall_seconds}};
}

inline ResourceReport resources_from_json(const json& j) {
  ResourceReport r;
  r.trainable_params = j.at("trainable_params").get<std::size_t>();
  r.total_params = j.at("total_params").get<std::size_t>();
  r.frozen_params = j.value("frozen_params", std::size_t{0});
  r.full_values = j.value("full_values", std::size_t{0});
  r.exception_values = j.value("exception_values", std::size_t{0});
  r.nf4_values = j.value("nf4_values", std::size_t{0});
  r.nf4_bytes = j.value("nf4_bytes", std::size_t{0});
  r.frozen_bytes_stored = j.at("frozen_bytes_stored").get<std::size_t>();
  r.frozen_bytes_fp32 = j.at("frozen_bytes_fp32").get<std::size_t>();
  r.frozen_bytes_fp32_dense = j.value("frozen_bytes_fp32_dense", std::size_t{0});
  r.trainable_bytes_stored = j.at("trainable_bytes_stored").get<std::size_t>();
  r.trainable_bytes_fp32 = j.at("trainable_bytes_fp32").get<std::size_t>();
  r.buffer_bytes_peak = j.at("buffer_bytes_peak").get<std::size_t>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

inline json to_json(const EpochRecord& e) {
  json j{{"epoch", e.epoch}, {"loss", e.loss}, {"seconds", e.seconds}};
  if (e.val) {
    j["val_accuracy"] = e.val->accuracy;
    j["val_macro_f1"] = e.val->macro_f1;
  }
  return j;
}

/// One JSON object per line, one line per epoch.
inline std::string train_log_jsonl(const TrainLog& log) {
  std::string out;
  for (const auto& e : log.epochs) out += to_json(e).dump() + "\n";
  return out;
}

inline json to_json(const RunRecord& r) {
  json losses = json::array();
  for (const auto& e : r.log.epochs) losses.push_back(e.loss);
  return json{{"kind", r.kind},
              {"target_domain", r.target_domain},
              {"strategy", to_string(r.strategy)},
              {"rank", r.rank},
              {"alpha", r.alpha},
              {"train_fraction", r.train_fraction},
              {"seed", r.seed},
              {"train_windows", r.train_windows},
              {"eval_windows", r.eval_windows},
              {"metrics", to_json(r.metrics)},
              {"resources", to_json(r.log.resources)},
              {"epoch_losses", losses},
              {"warnings", r.log.warnings}};
}

inline RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.kind = j.at("kind").get<std::string>();
  r.target_domain = j.at("target_domain").get<std::string>();
  r.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  r.rank = j.at("rank").get<std::size_t>();
  r.alpha = j.value("alpha", 0.0);
  r.train_fraction = j.at("train_fraction").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.train_windows = j.value("train_windows", std::size_t{0});
  r.eval_windows = j.value("eval_windows", std::size_t{0});
  r.metrics = metrics_from_json(j.at("metrics"));
  r.log.resources = resources_from_json(j.at("resources"));
  r.log.wall_seconds = r.log.resources.wall_seconds;
  std::size_t epoch = 0;
  for (const auto& l : j.value("epoch_losses", json::array())) r.log.epochs.push_back(EpochRecord{++epoch, l.get<double>(), std::nullopt, 0.0});
  r.log.warnings = j.value("warnings", std::vector<std::string>{});
  return r;
}

}  // namespace lorahar
