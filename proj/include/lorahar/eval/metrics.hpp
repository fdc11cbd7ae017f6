#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "lorahar/numerics/errors.hpp"

namespace lorahar {

/// K×K counts; rows are true classes, columns predictions.
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t classes = 0) : k(classes), counts(classes * classes, 0) {}

  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * k + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * k + pred]; }

  std::uint64_t total() const noexcept {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
  std::uint64_t trace() const noexcept {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < k; ++i) t += counts[i * k + i];
    return t;
  }
};

inline ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& labels, std::size_t k) {
  if (preds.size() != labels.size()) {
    throw DimensionError("confusion: " + std::to_string(preds.size()) + " predictions for " + std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || labels[i] < 0 || static_cast<std::size_t>(preds[i]) >= k || static_cast<std::size_t>(labels[i]) >= k) {
      throw DataError("confusion: class id out of range [0, " + std::to_string(k) + ") at index " + std::to_string(i));
    }
    ++cm.at(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(preds[i]));
  }
  return cm;
}

struct MetricsReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  std::vector<double> per_class_f1;
};

/// Macro averages over all K classes. Any 0/0 precision, recall or F1 counts as 0
/// and still enters the mean.
inline MetricsReport metrics(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (cm.k == 0 || total == 0) throw DataError("metrics: empty confusion matrix");
  MetricsReport r;
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  r.per_class_f1.assign(cm.k, 0.0);
  for (std::size_t c = 0; c < cm.k; ++c) {
    std::uint64_t tp = cm.at(c, c), pred = 0, truth = 0;
    for (std::size_t j = 0; j < cm.k; ++j) {
      pred += cm.at(j, c);
      truth += cm.at(c, j);
    }
    const double p = pred == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(pred);
    const double rc = truth == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(truth);
    const double f1 = (p + rc) == 0.0 ? 0.0 : 2.0 * p * rc / (p + rc);
    r.macro_precision += p;
    r.macro_recall += rc;
    r.macro_f1 += f1;
    r.per_class_f1[c] = f1;
  }
  const double k = static_cast<double>(cm.k);
  r.macro_precision /= k;
  r.macro_recall /= k;
  r.macro_f1 /= k;
  return r;
}

}  // namespace lorahar
