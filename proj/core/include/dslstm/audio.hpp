#pragma once

#include <filesystem>
#include <vector>

namespace dslstm::dsp {

/// Mono sample buffer. Samples are amplitudes in [-1, 1].
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 16000;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

/// Throws ValidationError when the clip is empty, has a non-positive rate,
/// or contains non-finite or out-of-range samples.
void validate(const AudioClip& clip);

/// Reads PCM16 or float32 WAV, mono or stereo (channels averaged).
AudioClip read_wav(const std::filesystem::path& path);

/// Writes 16-bit PCM mono. Samples are clamped to [-1, 1].
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

/// Linear-interpolation resampler.
AudioClip resample_linear(const AudioClip& clip, int target_rate);

}  // namespace dslstm::dsp
