#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dslstm/audio.hpp"
#include "dslstm/emotion.hpp"
#include "dslstm/tensor.hpp"

namespace dslstm::dsp {

struct Utterance {
  std::string id;
  Emotion label = Emotion::kNeutral;
  AudioClip clip;
};

/// Model inputs of one utterance: mfcc [T x 39], s1 [64 x T1] from a 256-point
/// FFT, s2 [128 x T2] from a 512-point FFT; spectrograms are log-mel.
struct FeatureRecord {
  std::string id;
  Emotion label = Emotion::kNeutral;
  ad::Tensor<float> mfcc;
  ad::Tensor<float> s1;
  ad::Tensor<float> s2;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

struct PreprocessResult {
  std::vector<FeatureRecord> records;
  std::size_t s1_median = 0;
  std::size_t s2_median = 0;
};

inline constexpr std::size_t kS1FftSize = 256;
inline constexpr std::size_t kS2FftSize = 512;

/// Resamples to 16 kHz, extracts MFCCs and both mel spectrograms, stretches
/// every spectrogram to its resolution's corpus median length by
/// nearest-neighbour interpolation, takes the log and standardizes each
/// spectrogram. Output order follows input order regardless of `jobs`.
PreprocessResult preprocess_corpus(const std::vector<Utterance>& corpus, std::size_t jobs = 1);

}  // namespace dslstm::dsp
