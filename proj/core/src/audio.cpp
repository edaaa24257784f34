#include "dslstm/audio.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "dslstm/error.hpp"

namespace dslstm::dsp {
namespace {

static_assert(std::endian::native == std::endian::little, "WAV codec assumes a little-endian host");

std::uint32_t read_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
}
std::uint16_t read_u16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] | p[1] << 8); }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

constexpr std::uint16_t kPcm = 1;
constexpr std::uint16_t kFloat = 3;
constexpr std::uint16_t kExtensible = 0xFFFE;

}  // namespace

void validate(const AudioClip& clip) {
  if (clip.samples.empty()) throw ValidationError("audio clip is empty");
  if (clip.sample_rate <= 0) throw ValidationError("audio clip has non-positive sample rate");
  for (const float s : clip.samples) {
    if (!std::isfinite(s) || std::abs(s) > 1.0f) {
      throw ValidationError("audio clip contains a non-finite or out-of-range sample");
    }
  }
}

AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open WAV file " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto bad = [&](const std::string& why) { return ValidationError(path.string() + ": " + why); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw bad("not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const std::uint8_t* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    const std::uint32_t len = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size()) throw bad("truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16) throw bad("fmt chunk too short");
      format = read_u16(bytes.data() + body);
      channels = read_u16(bytes.data() + body + 2);
      rate = read_u32(bytes.data() + body + 4);
      bits = read_u16(bytes.data() + body + 14);
      if (format == kExtensible) {
        if (len < 26) throw bad("extensible fmt chunk too short");
        format = read_u16(bytes.data() + body + 24);
      }
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_len = len;
    }
    pos = body + len + (len & 1U);
  }
  if (channels == 0 || rate == 0) throw bad("missing fmt chunk");
  if (data == nullptr) throw bad("missing data chunk");
  if (channels > 2) throw bad("only mono or stereo input is supported");
  const bool pcm16 = format == kPcm && bits == 16;
  const bool f32 = format == kFloat && bits == 32;
  if (!pcm16 && !f32) throw bad("unsupported sample format (need PCM 16-bit or float 32-bit)");

  const std::size_t width = bits / 8;
  const std::size_t frames = data_len / (width * channels);
  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const std::uint8_t* p = data + (i * channels + c) * width;
      if (pcm16) {
        acc += static_cast<std::int16_t>(read_u16(p)) / 32768.0;
      } else {
        acc += std::bit_cast<float>(read_u32(p));
      }
    }
    clip.samples[i] = static_cast<float>(acc / channels);
  }
  return clip;
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  std::string out;
  out.reserve(44 + 2 * n);
  out += "RIFF";
  put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, kPcm);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, 2 * n);
  for (const float s : clip.samples) {
    const double v = std::clamp(static_cast<double>(s), -1.0, 1.0);
    const auto q = static_cast<std::int16_t>(std::lround(std::clamp(v * 32768.0, -32768.0, 32767.0)));
    put_u16(out, static_cast<std::uint16_t>(q));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write WAV file " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

AudioClip resample_linear(const AudioClip& clip, int target_rate) {
  if (target_rate <= 0 || clip.sample_rate <= 0) throw ValidationError("resample: sample rates must be positive");
  if (clip.sample_rate == target_rate) return clip;
  const std::size_t n_in = clip.samples.size();
  if (n_in == 0) return AudioClip{{}, target_rate};
  const double ratio = static_cast<double>(clip.sample_rate) / target_rate;
  const auto n_out = static_cast<std::size_t>(std::max<long long>(1, std::llround(n_in / ratio)));
  AudioClip out{std::vector<float>(n_out), target_rate};
  for (std::size_t i = 0; i < n_out; ++i) {
    const double src = i * ratio;
    const auto lo = std::min(static_cast<std::size_t>(src), n_in - 1);
    const std::size_t hi = std::min(lo + 1, n_in - 1);
    const double frac = src - static_cast<double>(lo);
    out.samples[i] = static_cast<float>((1.0 - frac) * clip.samples[lo] + frac * clip.samples[hi]);
  }
  return out;
}

}  // namespace dslstm::dsp
