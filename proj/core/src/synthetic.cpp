#include "dslstm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "dslstm/error.hpp"
#include "dslstm/rng.hpp"

namespace dslstm::io {

namespace {

constexpr std::size_t kPartials = 3;
constexpr double kAmDepth = 0.8;
constexpr double kToneAmplitude = 0.5;

}  // namespace

void SyntheticSpec::validate() const {
  if (per_class == 0) throw ValidationError("synthetic: per_class must be >= 1");
  if (!(min_seconds > 0.0) || !(max_seconds >= min_seconds)) {
    throw ValidationError("synthetic: need 0 < min_seconds <= max_seconds");
  }
  if (sample_rate <= 0) throw ValidationError("synthetic: sample_rate must be positive");
  if (!(noise_sigma >= 0.0)) throw ValidationError("synthetic: noise_sigma must be >= 0");
  for (std::size_t c = 0; c < signatures.size(); ++c) {
    const auto& s = signatures[c];
    if (!(s.band_lo_hz > 0.0) || !(s.band_hi_hz >= s.band_lo_hz) || s.band_hi_hz >= sample_rate / 2.0) {
      throw ValidationError("synthetic: bad frequency band for class " + std::string(kEmotionNames[c]));
    }
    for (std::size_t d = 0; d < c; ++d) {
      const auto& o = signatures[d];
      if (o.band_lo_hz == s.band_lo_hz && o.band_hi_hz == s.band_hi_hz && o.am_rate_hz == s.am_rate_hz) {
        throw ValidationError("synthetic: class signatures must be pairwise distinct");
      }
    }
  }
}

std::vector<dsp::Utterance> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);
  const double fs = spec.sample_rate;
  std::vector<dsp::Utterance> corpus;
  corpus.reserve(spec.per_class * kNumClasses);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto& sig = spec.signatures[c];
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      Rng rng = root.split(static_cast<std::uint64_t>(c * spec.per_class + i));
      const double seconds = rng.uniform(spec.min_seconds, spec.max_seconds);
      const auto n = static_cast<std::size_t>(std::llround(seconds * fs));
      std::array<double, kPartials> freq{}, phase{};
      for (std::size_t p = 0; p < kPartials; ++p) {
        freq[p] = rng.uniform(sig.band_lo_hz, sig.band_hi_hz);
        phase[p] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
      const double am_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      dsp::AudioClip clip;
      clip.sample_rate = spec.sample_rate;
      clip.samples.resize(n);
      for (std::size_t t = 0; t < n; ++t) {
        const double time = static_cast<double>(t) / fs;
        double tone = 0.0;
        for (std::size_t p = 0; p < kPartials; ++p) tone += std::sin(2.0 * std::numbers::pi * freq[p] * time + phase[p]);
        const double envelope =
            (1.0 + kAmDepth * std::sin(2.0 * std::numbers::pi * sig.am_rate_hz * time + am_phase)) / (1.0 + kAmDepth);
        const double v = kToneAmplitude * envelope * tone / kPartials + spec.noise_sigma * rng.normal();
        clip.samples[t] = static_cast<float>(std::clamp(v, -1.0, 1.0));
      }
      char id[64];
      std::snprintf(id, sizeof id, "%s_%04zu", std::string(kEmotionNames[c]).c_str(), i);
      corpus.push_back({id, static_cast<Emotion>(c), std::move(clip)});
    }
  }
  return corpus;
}

}  // namespace dslstm::io
