#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "lorahar/data/dataset.hpp"

namespace lorahar {

/// Oscillatory signal family of one activity class.
struct ClassFamily {
  std::string name;
  double base_hz = 1.0;
  double amplitude = 1.0;
  std::vector<double> harmonics{1.0, 0.4, 0.2};  // weight of k·base_hz, k = 1, 2, ...
  std::vector<double> offset;                     // per-channel DC level (sensor orientation)
};

/// Covariate shift applied by one domain.
struct DomainShift {
  std::string name;
  double sample_rate = kTargetRate;
  double amplitude_scale = 1.0;
  double freq_offset_hz = 0.0;
  double noise_sigma = 0.0;
  std::vector<double> gains;  // per channel
};

struct SyntheticSpec {
  std::size_t channels = 6;
  std::vector<ClassFamily> classes;
  std::vector<DomainShift> domains;
  std::size_t recordings_per_class = 4;
  std::size_t samples_per_recording = 512;  // at 50 Hz; scaled for faster domains
  std::uint64_t seed = 0;

  void validate() const {
    if (classes.empty()) throw ConfigError("synthetic spec has no classes");
    if (domains.empty()) throw ConfigError("synthetic spec has no domains");
    if (channels == 0) throw ConfigError("synthetic spec needs at least one channel");
    if (recordings_per_class == 0 || samples_per_recording < 2) throw ConfigError("synthetic spec needs recordings of >= 2 samples");
    for (std::size_t i = 0; i < classes.size(); ++i) {
      const auto& c = classes[i];
      if (c.offset.size() != channels) throw ConfigError("class '" + c.name + "' offset length != channels");
      if (c.harmonics.empty() || !(c.base_hz > 0.0)) throw ConfigError("class '" + c.name + "' needs a base frequency and harmonics");
      for (std::size_t j = 0; j < i; ++j) {
        const auto& o = classes[j];
        if (o.name == c.name) throw ConfigError("duplicate class name '" + c.name + "'");
        if (o.base_hz == c.base_hz && o.amplitude == c.amplitude && o.harmonics == c.harmonics && o.offset == c.offset) {
          throw ConfigError("classes '" + o.name + "' and '" + c.name + "' share the same signal family");
        }
      }
    }
    for (const auto& d : domains) {
      if (d.gains.size() != channels) throw ConfigError("domain '" + d.name + "' gain length != channels");
      if (d.sample_rate < kTargetRate) throw ConfigError("domain '" + d.name + "' sample rate below 50 Hz");
      if (d.noise_sigma < 0.0) throw ConfigError("domain '" + d.name + "' has negative noise");
    }
  }
};

inline const std::vector<std::string>& default_activity_names() {
  static const std::vector<std::string> names{"bike", "downstairs", "run", "sit", "stand", "upstairs", "walk"};
  return names;
}

/// A learnable spec: classes differ in base frequency and orientation offset, domains
/// differ in gain, amplitude, frequency offset and noise. The second domain is
/// recorded at 100 Hz so preprocessing exercises the resampler.
inline SyntheticSpec default_synthetic_spec(std::size_t n_domains = 5, std::size_t n_classes = 6, std::uint64_t seed = 0) {
  if (n_classes == 0 || n_classes > default_activity_names().size()) {
    throw ConfigError("default synthetic spec supports 1.." + std::to_string(default_activity_names().size()) + " classes");
  }
  SyntheticSpec s;
  s.seed = seed;
  Rng rng(derive_seed(seed, 100));
  for (std::size_t k = 0; k < n_classes; ++k) {
    ClassFamily c;
    c.name = default_activity_names()[k];
    c.base_hz = 0.6 + 0.45 * static_cast<double>(k);
    c.amplitude = 0.8 + 0.1 * static_cast<double>(k % 3);
    c.harmonics = {1.0, 0.3 + 0.1 * static_cast<double>(k % 2), 0.15};
    for (std::size_t j = 0; j < s.channels; ++j) c.offset.push_back(rng.uniform(-1.0, 1.0));
    s.classes.push_back(std::move(c));
  }
  for (std::size_t d = 0; d < n_domains; ++d) {
    DomainShift sh;
    sh.name = "domain" + std::to_string(d);
    sh.sample_rate = d == 1 ? 100.0 : kTargetRate;
    sh.amplitude_scale = rng.uniform(0.85, 1.15);
    sh.freq_offset_hz = rng.uniform(-0.08, 0.08);
    sh.noise_sigma = rng.uniform(0.1, 0.3);
    for (std::size_t j = 0; j < s.channels; ++j) sh.gains.push_back(rng.uniform(0.8, 1.2));
    s.domains.push_back(std::move(sh));
  }
  return s;
}

/// Raw recordings for every domain. Signal of class c on channel j:
///   g_j · (offset_cj + a·A_c·Σ_k h_k sin(2π k (f_c + Δf) t + φ_jk)) + σ·ε
/// Phases depend on (class, recording, channel) only, so domains without any shift
/// produce identical data.
inline std::vector<DomainRecordings> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<DomainRecordings> out;
  for (std::size_t d = 0; d < spec.domains.size(); ++d) {
    const DomainShift& sh = spec.domains[d];
    DomainRecordings dom;
    dom.name = sh.name;
    Rng noise(derive_seed(spec.seed, 1000 + d));
    const double ratio = sh.sample_rate / kTargetRate;
    const auto n = static_cast<std::size_t>(std::llround(static_cast<double>(spec.samples_per_recording) * ratio));
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
      const ClassFamily& fam = spec.classes[c];
      for (std::size_t r = 0; r < spec.recordings_per_class; ++r) {
        Rng phase(derive_seed(spec.seed, 1'000'000 + c * 10'000 + r));
        std::vector<double> phi(spec.channels * fam.harmonics.size());
        for (auto& p : phi) p = phase.uniform(0.0, 2.0 * std::numbers::pi);
        SensorRecording rec;
        rec.activity = fam.name;
        rec.domain = sh.name;
        rec.subject = "s" + std::to_string(r);
        rec.sample_rate = sh.sample_rate;
        rec.samples = Matrix(n, spec.channels);
        const double f = fam.base_hz + sh.freq_offset_hz;
        for (std::size_t i = 0; i < n; ++i) {
          const double t = static_cast<double>(i) / sh.sample_rate;
          for (std::size_t j = 0; j < spec.channels; ++j) {
            double osc = 0.0;
            for (std::size_t k = 0; k < fam.harmonics.size(); ++k) {
              osc += fam.harmonics[k] * std::sin(2.0 * std::numbers::pi * static_cast<double>(k + 1) * f * t + phi[j * fam.harmonics.size() + k]);
            }
            double v = sh.gains[j] * (fam.offset[j] + sh.amplitude_scale * fam.amplitude * osc);
            if (sh.noise_sigma > 0.0) v += sh.noise_sigma * noise.normal();
            rec.samples(i, j) = v;
          }
        }
        dom.recordings.push_back(std::move(rec));
      }
    }
    out.push_back(std::move(dom));
  }
  return out;
}

}  // namespace lorahar
