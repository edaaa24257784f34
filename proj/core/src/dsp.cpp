#include "dslstm/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "dslstm/error.hpp"

namespace dslstm::dsp {
namespace {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::vector<double> hann(std::size_t n) {
  // Periodic Hann, the usual STFT analysis window.
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

std::vector<double> hamming(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (n - 1));
  return w;
}

// Power spectrum (first n_fft/2+1 bins) of `frame` zero-padded to n_fft.
void power_spectrum(Eigen::FFT<double>& fft, std::vector<double>& frame, std::size_t n_fft,
                    std::vector<std::complex<double>>& spec, double* out) {
  frame.resize(n_fft, 0.0);
  fft.fwd(spec, frame);
  for (std::size_t k = 0; k <= n_fft / 2; ++k) out[k] = std::norm(spec[k]);
}

// Integral of the triangle (lo, mid, hi) over [a, b].
double triangle_integral(double lo, double mid, double hi, double a, double b) {
  double total = 0.0;
  if (const double p = std::max(a, lo), q = std::min(b, mid); q > p && mid > lo) {
    total += ((q - lo) * (q - lo) - (p - lo) * (p - lo)) / (2.0 * (mid - lo));
  }
  if (const double p = std::max(a, mid), q = std::min(b, hi); q > p && hi > mid) {
    total += ((hi - p) * (hi - p) - (hi - q) * (hi - q)) / (2.0 * (hi - mid));
  }
  return total;
}

std::string too_short(std::size_t have, std::size_t need) {
  return "utterance too short: " + std::to_string(have) + " samples, need at least " + std::to_string(need);
}

}  // namespace

SpectrogramConfig SpectrogramConfig::for_fft_size(std::size_t n_fft, double sample_rate) {
  SpectrogramConfig cfg;
  cfg.n_fft = n_fft;
  cfg.hop = n_fft / 2;
  cfg.n_mels = n_fft / 4;
  cfg.sample_rate = sample_rate;
  cfg.fmin = 0.0;
  cfg.fmax = sample_rate / 2.0;
  return cfg;
}

void SpectrogramConfig::validate() const {
  if (!is_power_of_two(n_fft) || n_fft < 4) throw ValidationError("spectrogram: n_fft must be a power of two >= 4");
  if (hop * 2 != n_fft) throw ValidationError("spectrogram: hop must be exactly n_fft/2");
  if (n_mels * 4 != n_fft) throw ValidationError("spectrogram: n_mels must be exactly n_fft/4");
  if (!(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0)) {
    throw ValidationError("spectrogram: need 0 <= fmin < fmax <= sample_rate/2");
  }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::size_t frame_count(std::size_t length, std::size_t frame, std::size_t hop) {
  if (length < frame) return 0;
  return (length - frame) / hop + 1;
}

Eigen::MatrixXd stft_magnitude(const AudioClip& clip, std::size_t n_fft, std::size_t hop) {
  if (clip.samples.empty()) throw ValidationError("stft: empty clip");
  if (!is_power_of_two(n_fft)) throw ValidationError("stft: n_fft must be a power of two");
  if (hop == 0) throw ValidationError("stft: hop must be >= 1");
  const std::size_t frames = frame_count(clip.samples.size(), n_fft, hop);
  if (frames == 0) throw ValidationError(too_short(clip.samples.size(), n_fft));
  const std::size_t bins = n_fft / 2 + 1;
  const auto window = hann(n_fft);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(bins), static_cast<Eigen::Index>(frames));
  Eigen::FFT<double> fft;
  std::vector<double> frame;
  std::vector<std::complex<double>> spec;
  std::vector<double> power(bins);
  for (std::size_t t = 0; t < frames; ++t) {
    frame.assign(n_fft, 0.0);
    for (std::size_t i = 0; i < n_fft; ++i) frame[i] = clip.samples[t * hop + i] * window[i];
    power_spectrum(fft, frame, n_fft, spec, power.data());
    for (std::size_t k = 0; k < bins; ++k) out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(t)) = std::sqrt(power[k]);
  }
  return out;
}

Eigen::MatrixXd mel_filterbank(std::size_t n_mels, std::size_t n_fft, double sample_rate, double fmin, double fmax) {
  if (n_mels == 0) throw ValidationError("mel filterbank: n_mels must be >= 1");
  if (!(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0)) {
    throw ValidationError("mel filterbank: need 0 <= fmin < fmax <= sample_rate/2");
  }
  const std::size_t bins = n_fft / 2 + 1;
  if (n_mels + 2 > bins) {
    throw ValidationError("mel filterbank: " + std::to_string(n_mels) + " filters exceed the resolution of a " +
                          std::to_string(n_fft) + "-point FFT (" + std::to_string(bins) + " bins)");
  }
  const double mel_lo = hz_to_mel(fmin), mel_hi = hz_to_mel(fmax);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  const double spacing = sample_rate / static_cast<double>(n_fft);
  const double nyquist = sample_rate / 2.0;
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_mels), static_cast<Eigen::Index>(bins));
  for (std::size_t m = 0; m < n_mels; ++m) {
    for (std::size_t k = 0; k < bins; ++k) {
      const double centre = k * spacing;
      const double a = std::max(0.0, centre - spacing / 2.0), b = std::min(nyquist, centre + spacing / 2.0);
      fb(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) =
          triangle_integral(edges[m], edges[m + 1], edges[m + 2], a, b) / (b - a);
    }
    if (!(fb.row(static_cast<Eigen::Index>(m)).sum() > 0.0)) {
      throw ValidationError("mel filterbank: filter " + std::to_string(m) + " covers no FFT bin");
    }
  }
  return fb;
}

MelSpectrogram mel_spectrogram(const AudioClip& clip, const SpectrogramConfig& cfg) {
  cfg.validate();
  const Eigen::MatrixXd mag = stft_magnitude(clip, cfg.n_fft, cfg.hop);
  const Eigen::MatrixXd fb = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.fmin, cfg.fmax);
  return MelSpectrogram{fb * mag.array().square().matrix(), cfg.n_fft};
}

MelSpectrogram log_transform(const MelSpectrogram& m, double eps) {
  if ((m.values.array() < 0.0).any()) throw ValidationError("log_transform: negative entry in mel spectrogram");
  return MelSpectrogram{(m.values.array() + eps).log().matrix(), m.n_fft};
}

MelSpectrogram standardize(const MelSpectrogram& m, double std_floor) {
  if (m.values.size() == 0) throw ValidationError("standardize: empty spectrogram");
  const double mean = m.values.mean();
  const double var = (m.values.array() - mean).square().mean();
  const double scale = 1.0 / std::max(std::sqrt(var), std_floor);
  return MelSpectrogram{((m.values.array() - mean) * scale).matrix(), m.n_fft};
}

MelSpectrogram nn_interpolate_time(const MelSpectrogram& m, std::size_t target_frames) {
  const std::size_t frames = m.frames();
  if (target_frames == 0 || frames == 0) throw ValidationError("nn_interpolate_time: lengths must be >= 1");
  MelSpectrogram out{Eigen::MatrixXd(m.values.rows(), static_cast<Eigen::Index>(target_frames)), m.n_fft};
  for (std::size_t j = 0; j < target_frames; ++j) {
    // floor((j + 0.5) * T / target) in exact integer arithmetic.
    const std::size_t src = std::min((2 * j + 1) * frames / (2 * target_frames), frames - 1);
    out.values.col(static_cast<Eigen::Index>(j)) = m.values.col(static_cast<Eigen::Index>(src));
  }
  return out;
}

std::size_t median_time_steps(std::span<const std::size_t> lengths) {
  if (lengths.empty()) throw ValidationError("median_time_steps: empty list");
  std::vector<std::size_t> sorted(lengths.begin(), lengths.end());
  std::sort(sorted.begin(), sorted.end());
  return sorted[(sorted.size() - 1) / 2];
}

MfccSequence mfcc_features(const AudioClip& clip) {
  constexpr std::size_t kFilters = 26;
  constexpr std::size_t kCeps = 12;
  constexpr double kPreEmphasis = 0.97;
  const auto frame_len = static_cast<std::size_t>(std::lround(0.025 * clip.sample_rate));
  const auto hop = static_cast<std::size_t>(std::lround(0.010 * clip.sample_rate));
  if (frame_len < 2 || hop == 0) throw ValidationError("mfcc: sample rate too low");
  const std::size_t frames = frame_count(clip.samples.size(), frame_len, hop);
  if (frames == 0) throw ValidationError(too_short(clip.samples.size(), frame_len));

  std::size_t n_fft = 1;
  while (n_fft < frame_len) n_fft <<= 1;
  const std::size_t bins = n_fft / 2 + 1;
  const Eigen::MatrixXd fb = mel_filterbank(kFilters, n_fft, clip.sample_rate, 0.0, clip.sample_rate / 2.0);
  const auto window = hamming(frame_len);

  // Orthonormal DCT-II rows 1..12.
  Eigen::MatrixXd dct(kCeps, kFilters);
  for (std::size_t k = 1; k <= kCeps; ++k) {
    for (std::size_t n = 0; n < kFilters; ++n) {
      dct(static_cast<Eigen::Index>(k - 1), static_cast<Eigen::Index>(n)) =
          std::sqrt(2.0 / kFilters) * std::cos(std::numbers::pi * k * (2.0 * n + 1.0) / (2.0 * kFilters));
    }
  }

  const auto rows = static_cast<Eigen::Index>(frames);
  Eigen::MatrixXd base(rows, static_cast<Eigen::Index>(kMfccBase));
  Eigen::FFT<double> fft;
  std::vector<double> frame;
  std::vector<std::complex<double>> spec;
  Eigen::VectorXd power(static_cast<Eigen::Index>(bins));
  for (std::size_t t = 0; t < frames; ++t) {
    const float* src = clip.samples.data() + t * hop;
    double mean = 0.0;
    for (std::size_t i = 0; i < frame_len; ++i) mean += src[i];
    mean /= static_cast<double>(frame_len);
    frame.assign(frame_len, 0.0);
    double energy = 0.0;
    for (std::size_t i = 0; i < frame_len; ++i) {
      frame[i] = src[i] - mean;
      energy += frame[i] * frame[i];
    }
    for (std::size_t i = frame_len; i-- > 1;) frame[i] -= kPreEmphasis * frame[i - 1];
    frame[0] *= 1.0 - kPreEmphasis;
    for (std::size_t i = 0; i < frame_len; ++i) frame[i] *= window[i];
    power_spectrum(fft, frame, n_fft, spec, power.data());
    const Eigen::VectorXd log_mel = ((fb * power).array() + kLogEps).log().matrix();
    base.row(static_cast<Eigen::Index>(t)).head(kCeps) = (dct * log_mel).transpose();
    base(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(kCeps)) = std::log(energy + kLogEps);
  }

  // Regression deltas over +-2 frames, edges replicated.
  const auto deltas = [rows](const Eigen::MatrixXd& x) {
    Eigen::MatrixXd d(x.rows(), x.cols());
    for (Eigen::Index t = 0; t < rows; ++t) {
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(x.cols());
      for (Eigen::Index n = 1; n <= 2; ++n) {
        const Eigen::Index ahead = std::min(t + n, rows - 1), behind = std::max<Eigen::Index>(t - n, 0);
        acc += static_cast<double>(n) * (x.row(ahead) - x.row(behind));
      }
      d.row(t) = acc / 10.0;
    }
    return d;
  };
  const Eigen::MatrixXd delta = deltas(base);
  const Eigen::MatrixXd accel = deltas(delta);

  MfccSequence out{Eigen::MatrixXd(rows, static_cast<Eigen::Index>(kMfccDim))};
  out.values << base, delta, accel;
  return out;
}

}  // namespace dslstm::dsp
