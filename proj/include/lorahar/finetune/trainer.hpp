#pragma once

#include <chrono>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lorahar/data/dataset.hpp"
#include "lorahar/eval/accounting.hpp"
#include "lorahar/eval/metrics.hpp"
#include "lorahar/finetune/optim.hpp"

namespace lorahar {

/// Sub-seed streams fanned out from the single run seed.
namespace seed_stream {
inline constexpr std::uint64_t model_init = 1;
inline constexpr std::uint64_t mask = 2;
inline constexpr std::uint64_t shuffle = 3;
inline constexpr std::uint64_t dropout = 4;
inline constexpr std::uint64_t head_init = 5;
inline constexpr std::uint64_t lora_init = 6;
inline constexpr std::uint64_t split = 7;
}  // namespace seed_stream

struct TrainConfig {
  Strategy strategy = Strategy::Lora;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  double train_fraction = 0.70;
  std::optional<LoraConfig> lora = LoraConfig{};
  WrapOptions wrap{};

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
    if (uses_adapters(strategy) != lora.has_value()) {
      throw ConfigError(std::string("LoRA settings must be given exactly for lora/qlora (strategy '") + to_string(strategy) + "')");
    }
    if (lora) lora->validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  std::optional<MetricsReport> val;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::vector<std::string> warnings;
  ResourceReport resources;
};

inline std::vector<const Matrix*> window_ptrs(const std::vector<Window>& ws, const std::vector<std::size_t>& idx, std::size_t begin,
                                              std::size_t end) {
  std::vector<const Matrix*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&ws[idx[i]].values);
  return out;
}

/// Class predictions in eval mode.
inline std::vector<int> predict(Classifier& model, const std::vector<Window>& windows, std::size_t batch_size = 64) {
  std::vector<int> out;
  std::vector<std::size_t> idx(windows.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t b = 0; b < windows.size(); b += batch_size) {
    Tape tape;
    const Matrix& logits = model.logits(tape, window_ptrs(windows, idx, b, std::min(b + batch_size, windows.size())), false).value();
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < logits.cols(); ++j)
        if (logits(i, j) > logits(i, best)) best = j;
      out.push_back(static_cast<int>(best));
    }
  }
  return out;
}

inline MetricsReport evaluate(Classifier& model, const std::vector<Window>& windows) {
  std::vector<int> labels;
  for (const auto& w : windows) labels.push_back(w.label);
  return metrics(confusion(predict(model, windows), labels, model.config().n_classes));
}

/// Mini-batch fine-tuning under `cfg.strategy`. The model must already be prepared
/// for the strategy (see prepare_strategy); only the selected set is updated.
inline TrainLog train(Classifier& model, const std::vector<Window>& train_set, const std::vector<Window>* val_set, const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  const std::size_t k = model.config().n_classes;
  TrainLog log;
  std::vector<std::size_t> per_class(k, 0);
  for (const auto& w : train_set) {
    if (w.label < 0 || static_cast<std::size_t>(w.label) >= k) throw DataError("training label out of range");
    ++per_class[static_cast<std::size_t>(w.label)];
  }
  for (std::size_t c = 0; c < k; ++c)
    if (per_class[c] == 0) log.warnings.push_back("class " + std::to_string(c) + " has no training windows");

  std::vector<Parameter*> params = select_trainable(model, cfg.strategy);
  model.head.layer_norm_mode = cfg.batch_size == 1;
  Adam opt(AdamConfig{cfg.learning_rate});
  Rng shuffle_rng(derive_seed(cfg.seed, seed_stream::shuffle));
  Rng dropout_rng(derive_seed(cfg.seed, seed_stream::dropout));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  model.backbone.meter = BufferMeter{};
  Adam::zero_grad(params);

  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto epoch_start = clock::now();
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(b + cfg.batch_size, order.size());
      std::vector<int> labels;
      for (std::size_t i = b; i < end; ++i) labels.push_back(train_set[order[i]].label);
      Tape tape;
      Var loss = cross_entropy(model.logits(tape, window_ptrs(train_set, order, b, end), true, &dropout_rng), labels);
      tape.backward(loss);
      opt.step(params);
      Adam::zero_grad(params);
      loss_sum += loss.value()(0, 0) * static_cast<double>(end - b);
    }
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.loss = loss_sum / static_cast<double>(order.size());
    rec.seconds = std::chrono::duration<double>(clock::now() - epoch_start).count();
    if (val_set != nullptr && !val_set->empty()) rec.val = evaluate(model, *val_set);
    log.epochs.push_back(std::move(rec));
  }
  log.wall_seconds = std::chrono::duration<double>(clock::now() - start).count();
  log.resources = measure_memory(model, log.wall_seconds);
  return log;
}

struct PretrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  }
};

struct PretrainLog {
  std::vector<double> losses;
  std::vector<double> seconds;
  double wall_seconds = 0.0;
};

/// Masked-reconstruction pretraining of backbone and decoder; a fresh mask per window per step.
inline PretrainLog pretrain_mae(MaeModel& model, const std::vector<Window>& windows, const PretrainConfig& cfg) {
  cfg.validate();
  if (windows.empty()) throw DataError("pretraining set is empty");
  std::vector<Parameter*> params;
  model.for_each_parameter([&](Parameter& p) {
    p.trainable = true;
    params.push_back(&p);
  });
  const ModelConfig& mc = model.config();
  Adam opt(AdamConfig{cfg.learning_rate});
  Rng mask_rng(derive_seed(cfg.seed, seed_stream::mask));
  Rng shuffle_rng(derive_seed(cfg.seed, seed_stream::shuffle));
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  Adam::zero_grad(params);
  PretrainLog log;
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto epoch_start = clock::now();
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(b + cfg.batch_size, order.size());
      std::vector<MaskSpec> masks;
      for (std::size_t i = b; i < end; ++i) masks.push_back(random_mask(mc.num_tokens(), mc.mask_ratio, mask_rng));
      Tape tape;
      Var loss = model.loss(tape, stack_patches(window_ptrs(windows, order, b, end), mc.patch_len), masks);
      tape.backward(loss);
      opt.step(params);
      Adam::zero_grad(params);
      loss_sum += loss.value()(0, 0) * static_cast<double>(end - b);
    }
    log.losses.push_back(loss_sum / static_cast<double>(order.size()));
    log.seconds.push_back(std::chrono::duration<double>(clock::now() - epoch_start).count());
  }
  log.wall_seconds = std::chrono::duration<double>(clock::now() - start).count();
  return log;
}

}  // namespace lorahar
