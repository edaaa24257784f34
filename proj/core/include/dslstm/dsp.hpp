#pragma once

#include <cstddef>
#include <span>

#include <Eigen/Core>

#include "dslstm/audio.hpp"

namespace dslstm::dsp {

inline constexpr int kModelSampleRate = 16000;
inline constexpr double kLogEps = 1e-6;

/// One spectrogram resolution. Hop and mel count are tied to the FFT size:
/// hop = n_fft / 2 and n_mels = n_fft / 4.
struct SpectrogramConfig {
  std::size_t n_fft = 256;
  std::size_t hop = 128;
  std::size_t n_mels = 64;
  double sample_rate = kModelSampleRate;
  double fmin = 0.0;
  double fmax = kModelSampleRate / 2.0;

  static SpectrogramConfig for_fft_size(std::size_t n_fft, double sample_rate = kModelSampleRate);
  void validate() const;
};

/// n_mels x T. Values are mel power until log_transform is applied.
struct MelSpectrogram {
  Eigen::MatrixXd values;
  std::size_t n_fft = 0;  // identifies the producing configuration

  std::size_t frames() const { return static_cast<std::size_t>(values.cols()); }
};

/// T x 39: [c1..c12, logE, delta(13), accel(13)].
struct MfccSequence {
  Eigen::MatrixXd values;
};

inline constexpr std::size_t kMfccBase = 13;
inline constexpr std::size_t kMfccDim = 3 * kMfccBase;

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Number of full frames; no padding, partial trailing frame dropped.
std::size_t frame_count(std::size_t length, std::size_t frame, std::size_t hop);

/// (n_fft/2 + 1) x T magnitudes of Hann-windowed frames.
Eigen::MatrixXd stft_magnitude(const AudioClip& clip, std::size_t n_fft, std::size_t hop);

/// n_mels x (n_fft/2 + 1) triangular filters, centers equally spaced on the
/// mel scale. Each weight is the triangle averaged over the bin's frequency
/// cell, so narrow low-frequency filters still touch at least one bin.
Eigen::MatrixXd mel_filterbank(std::size_t n_mels, std::size_t n_fft, double sample_rate, double fmin, double fmax);

/// filterbank * |STFT|^2.
MelSpectrogram mel_spectrogram(const AudioClip& clip, const SpectrogramConfig& cfg);

/// Entrywise log(value + eps).
MelSpectrogram log_transform(const MelSpectrogram& m, double eps = kLogEps);

/// Shifts and scales all entries to zero mean and unit variance (one scalar
/// pair per spectrogram, so the contrast between mel bands is kept). The
/// standard deviation is floored at `std_floor`.
MelSpectrogram standardize(const MelSpectrogram& m, double std_floor = 1e-5);

/// Output column j copies source column floor((j + 0.5) * T / target_frames).
MelSpectrogram nn_interpolate_time(const MelSpectrogram& m, std::size_t target_frames);

/// Lower median: for an even count the smaller middle value.
std::size_t median_time_steps(std::span<const std::size_t> lengths);

/// 25 ms frames with a 10 ms hop.
MfccSequence mfcc_features(const AudioClip& clip);

}  // namespace dslstm::dsp
