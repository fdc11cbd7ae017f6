#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lorahar/numerics/matrix.hpp"
#include "lorahar/numerics/rng.hpp"

namespace lorahar {

inline constexpr double kTargetRate = 50.0;
inline constexpr std::size_t kWindowLen = 128;
inline constexpr std::size_t kWindowStride = 64;

/// Contiguous samples of one activity from one source.
struct SensorRecording {
  Matrix samples;  // n×C
  double sample_rate = kTargetRate;
  std::string activity;
  int label = -1;
  std::string domain;
  std::string subject;
};

/// All recordings from one dataset (domain).
struct DomainRecordings {
  std::string name;
  std::vector<SensorRecording> recordings;
};

struct Window {
  Matrix values;  // 128×C
  int label = -1;
  std::string domain;
};

struct DatasetBundle {
  std::vector<Window> windows;
  std::vector<std::string> vocabulary;

  std::size_t n_classes() const noexcept { return vocabulary.size(); }
  std::vector<std::string> domains() const {
    std::set<std::string> s;
    for (const auto& w : windows) s.insert(w.domain);
    return {s.begin(), s.end()};
  }
};

/// Bring a recording to 50 Hz. Integer ratios r average each run of r samples
/// (boxcar low-pass) and keep one value per run; other ratios interpolate linearly
/// at t = k/50. A 50 Hz input is returned unchanged.
inline SensorRecording resample_to_50hz(const SensorRecording& rec) {
  if (!(rec.sample_rate > 0.0)) throw DataError("sample rate must be > 0");
  if (rec.sample_rate < kTargetRate) {
    throw DataError("upsampling from " + std::to_string(rec.sample_rate) + " Hz to 50 Hz is not supported");
  }
  if (rec.sample_rate == kTargetRate) return rec;
  SensorRecording out = rec;
  out.sample_rate = kTargetRate;
  const std::size_t n = rec.samples.rows(), c = rec.samples.cols();
  const double ratio = rec.sample_rate / kTargetRate;
  const double rounded = std::round(ratio);
  if (std::abs(ratio - rounded) < 1e-9) {
    const auto r = static_cast<std::size_t>(rounded);
    const std::size_t m = n / r;
    out.samples = Matrix(m, c);
    for (std::size_t k = 0; k < m; ++k)
      for (std::size_t j = 0; j < c; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < r; ++i) s += rec.samples(k * r + i, j);
        out.samples(k, j) = s / static_cast<double>(r);
      }
    return out;
  }
  const double duration = static_cast<double>(n - 1) / rec.sample_rate;
  const auto m = static_cast<std::size_t>(std::floor(duration * kTargetRate + 1e-9)) + 1;
  out.samples = Matrix(m, c);
  for (std::size_t k = 0; k < m; ++k) {
    const double pos = static_cast<double>(k) * ratio;
    const auto i0 = std::min(static_cast<std::size_t>(std::floor(pos)), n - 1);
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    const double frac = pos - static_cast<double>(i0);
    for (std::size_t j = 0; j < c; ++j) out.samples(k, j) = (1.0 - frac) * rec.samples(i0, j) + frac * rec.samples(i1, j);
  }
  return out;
}

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

inline constexpr double kStdFloor = 1e-8;

/// Per-channel mean and population standard deviation over every sample of a domain.
inline ChannelStats channel_stats(const std::vector<SensorRecording>& recs) {
  if (recs.empty()) throw DataError("channel_stats: no recordings");
  const std::size_t c = recs.front().samples.cols();
  ChannelStats st{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  std::size_t n = 0;
  for (const auto& r : recs) {
    if (r.samples.cols() != c) throw DataError("recordings in a domain disagree on channel count");
    for (std::size_t i = 0; i < r.samples.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) st.mean[j] += r.samples(i, j);
    n += r.samples.rows();
  }
  if (n < 2) throw DataError("z-normalization needs at least 2 samples per channel");
  for (auto& m : st.mean) m /= static_cast<double>(n);
  for (const auto& r : recs)
    for (std::size_t i = 0; i < r.samples.rows(); ++i)
      for (std::size_t j = 0; j < c; ++j) st.stddev[j] += (r.samples(i, j) - st.mean[j]) * (r.samples(i, j) - st.mean[j]);
  for (auto& s : st.stddev) s = std::sqrt(s / static_cast<double>(n));
  return st;
}

/// z-normalize every channel with statistics of this domain alone. Channels whose
/// spread is below the floor become all zeros.
inline void znormalize(std::vector<SensorRecording>& recs) {
  const ChannelStats st = channel_stats(recs);
  for (auto& r : recs)
    for (std::size_t i = 0; i < r.samples.rows(); ++i)
      for (std::size_t j = 0; j < r.samples.cols(); ++j) {
        r.samples(i, j) = st.stddev[j] < kStdFloor ? 0.0 : (r.samples(i, j) - st.mean[j]) / st.stddev[j];
      }
}

inline void znormalize(DomainRecordings& d) { znormalize(d.recordings); }

/// Windows at offsets 0, 64, 128, ... that lie fully inside the recording.
inline std::vector<Window> segment_windows(const SensorRecording& rec) {
  if (rec.sample_rate != kTargetRate) throw DataError("segment_windows expects a 50 Hz recording");
  std::vector<Window> out;
  const std::size_t n = rec.samples.rows(), c = rec.samples.cols();
  for (std::size_t start = 0; start + kWindowLen <= n; start += kWindowStride) {
    Window w;
    w.values = Matrix(kWindowLen, c);
    std::copy(rec.samples.values().begin() + static_cast<std::ptrdiff_t>(start * c),
              rec.samples.values().begin() + static_cast<std::ptrdiff_t>((start + kWindowLen) * c), w.values.values().begin());
    w.label = rec.label;
    w.domain = rec.domain;
    out.push_back(std::move(w));
  }
  return out;
}

/// Sorted union of activity names over all domains.
inline std::vector<std::string> label_vocabulary(const std::vector<DomainRecordings>& domains) {
  std::set<std::string> names;
  for (const auto& d : domains)
    for (const auto& r : d.recordings) names.insert(r.activity);
  return {names.begin(), names.end()};
}

/// Full preprocessing: resample to 50 Hz, z-normalize per domain, window, and
/// assign lexicographic class ids over the union of activity names.
inline DatasetBundle build_label_union(std::vector<DomainRecordings> domains) {
  if (domains.empty()) throw DataError("build_label_union: no domains");
  DatasetBundle bundle;
  bundle.vocabulary = label_vocabulary(domains);
  std::map<std::string, int> ids;
  for (std::size_t i = 0; i < bundle.vocabulary.size(); ++i) ids[bundle.vocabulary[i]] = static_cast<int>(i);
  std::set<std::string> seen;
  for (auto& d : domains) {
    if (!seen.insert(d.name).second) throw DataError("duplicate domain name '" + d.name + "'");
    if (d.recordings.empty()) continue;
    for (auto& r : d.recordings) {
      r = resample_to_50hz(r);
      r.domain = d.name;
      r.label = ids.at(r.activity);
    }
    znormalize(d);
    for (const auto& r : d.recordings)
      for (auto& w : segment_windows(r)) bundle.windows.push_back(std::move(w));
  }
  return bundle;
}

/// Windows of one domain, keeping the shared vocabulary.
inline DatasetBundle select_domain(const DatasetBundle& all, const std::string& domain) {
  DatasetBundle b;
  b.vocabulary = all.vocabulary;
  for (const auto& w : all.windows)
    if (w.domain == domain) b.windows.push_back(w);
  return b;
}

inline std::vector<DatasetBundle> split_by_domain(const DatasetBundle& all) {
  std::vector<DatasetBundle> out;
  for (const auto& d : all.domains()) out.push_back(select_domain(all, d));
  return out;
}

struct LodoFold {
  std::string target_domain;
  DatasetBundle pretrain;
  DatasetBundle target;
};

/// One fold per domain: that domain is the target, the union of the others pretrains.
inline std::vector<LodoFold> lodo_folds(const std::vector<DatasetBundle>& per_domain) {
  if (per_domain.size() < 2) throw ProtocolError("LODO needs at least 2 domains, got " + std::to_string(per_domain.size()));
  std::vector<std::string> names;
  for (const auto& b : per_domain) {
    const auto ds = b.domains();
    if (ds.size() != 1) throw ProtocolError("each LODO bundle must hold exactly one non-empty domain");
    names.push_back(ds.front());
  }
  if (std::set<std::string>(names.begin(), names.end()).size() != names.size()) throw ProtocolError("duplicate domain in LODO input");
  std::vector<LodoFold> folds;
  for (std::size_t i = 0; i < per_domain.size(); ++i) {
    LodoFold f;
    f.target_domain = names[i];
    f.target = per_domain[i];
    f.pretrain.vocabulary = per_domain[i].vocabulary;
    for (std::size_t j = 0; j < per_domain.size(); ++j)
      if (j != i) f.pretrain.windows.insert(f.pretrain.windows.end(), per_domain[j].windows.begin(), per_domain[j].windows.end());
    folds.push_back(std::move(f));
  }
  return folds;
}

struct Split {
  DatasetBundle train;
  DatasetBundle eval;
  std::vector<std::string> warnings;
};

/// Stratified split: each class is shuffled and cut at round(fraction·n_c), with the
/// per-class cut points adjusted by largest remainder so the train total is
/// round(fraction·N). A class with a single window goes to train.
inline Split split_train_eval(const DatasetBundle& target, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  Split s;
  s.train.vocabulary = s.eval.vocabulary = target.vocabulary;
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < target.windows.size(); ++i) by_class[target.windows[i].label].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> take;
  std::vector<std::pair<double, std::size_t>> remainders;  // (fractional part, class slot)
  std::size_t assigned = 0, slot = 0;
  for (auto& [label, idx] : by_class) {
    rng.shuffle(std::span<std::size_t>(idx));
    if (idx.size() == 1) {
      take.push_back(1);
      s.warnings.push_back("class " + std::to_string(label) + " has a single window; placed in train");
    } else {
      const double exact = fraction * static_cast<double>(idx.size());
      take.push_back(static_cast<std::size_t>(std::floor(exact)));
      remainders.emplace_back(exact - std::floor(exact), slot);
    }
    assigned += take.back();
    ++slot;
  }
  const auto goal = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(target.windows.size()) + 0.5));
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; r < remainders.size() && assigned < goal; ++r) {
    ++take[remainders[r].second];
    ++assigned;
  }
  slot = 0;
  for (auto& [label, idx] : by_class) {
    for (std::size_t k = 0; k < idx.size(); ++k) (k < take[slot] ? s.train : s.eval).windows.push_back(target.windows[idx[k]]);
    ++slot;
  }
  return s;
}

}  // namespace lorahar
