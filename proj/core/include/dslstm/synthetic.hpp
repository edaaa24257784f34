#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "dslstm/preprocess.hpp"

namespace dslstm::io {

struct ClassSignature {
  double band_lo_hz;
  double band_hi_hz;
  double am_rate_hz;
};

/// Indexed by Emotion.
inline constexpr std::array<ClassSignature, kNumClasses> kDefaultSignatures{{
    {900.0, 1100.0, 8.0},    // happy
    {400.0, 500.0, 2.0},     // neutral
    {1800.0, 2200.0, 12.0},  // angry
    {200.0, 300.0, 1.0},     // sad
}};

struct SyntheticSpec {
  std::size_t per_class = 50;
  double min_seconds = 1.0;
  double max_seconds = 3.0;
  int sample_rate = 16000;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
  std::array<ClassSignature, kNumClasses> signatures = kDefaultSignatures;

  void validate() const;
};

/// Three partials drawn inside the class band, amplitude-modulated at the
/// class rate (depth 0.8), plus white Gaussian noise. Utterance i of class c
/// draws from its own RNG stream, so the corpus is a pure function of the
/// spec. Ids are "<label>_<nnnn>", ordered class by class.
std::vector<dsp::Utterance> generate_synthetic(const SyntheticSpec& spec);

}  // namespace dslstm::io
