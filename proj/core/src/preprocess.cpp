#include "dslstm/preprocess.hpp"

#include <algorithm>
#include <atomic>
#include <string>
#include <thread>

#include "dslstm/dsp.hpp"
#include "dslstm/error.hpp"

namespace dslstm::dsp {
namespace {

ad::Tensor<float> to_tensor(const Eigen::MatrixXd& m) {
  const auto rows = static_cast<std::size_t>(m.rows()), cols = static_cast<std::size_t>(m.cols());
  ad::Tensor<float> t(ad::Shape{rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      t.at(r, c) = static_cast<float>(m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
    }
  }
  return t;
}

struct Raw {
  MfccSequence mfcc;
  MelSpectrogram s1;
  MelSpectrogram s2;
  std::string error;
};

template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& body) {
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) body(i);
    });
  }
  for (auto& t : workers) t.join();
}

}  // namespace

PreprocessResult preprocess_corpus(const std::vector<Utterance>& corpus, std::size_t jobs) {
  if (corpus.empty()) throw ValidationError("preprocess: empty corpus");
  const auto cfg1 = SpectrogramConfig::for_fft_size(kS1FftSize);
  const auto cfg2 = SpectrogramConfig::for_fft_size(kS2FftSize);

  std::vector<Raw> raw(corpus.size());
  parallel_for(corpus.size(), jobs, [&](std::size_t i) {
    try {
      validate(corpus[i].clip);
      const AudioClip clip = resample_linear(corpus[i].clip, kModelSampleRate);
      raw[i].mfcc = mfcc_features(clip);
      raw[i].s1 = mel_spectrogram(clip, cfg1);
      raw[i].s2 = mel_spectrogram(clip, cfg2);
    } catch (const std::exception& e) {
      raw[i].error = e.what();
    }
  });

  std::string failures;
  std::size_t failed = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!raw[i].error.empty()) {
      ++failed;
      failures += "\n  " + corpus[i].id + ": " + raw[i].error;
    }
  }
  if (failed) throw ValidationError("preprocess: " + std::to_string(failed) + " utterance(s) failed:" + failures);

  std::vector<std::size_t> len1, len2;
  for (const auto& r : raw) {
    len1.push_back(r.s1.frames());
    len2.push_back(r.s2.frames());
  }
  PreprocessResult result;
  result.s1_median = median_time_steps(len1);
  result.s2_median = median_time_steps(len2);
  result.records.resize(corpus.size());
  parallel_for(corpus.size(), jobs, [&](std::size_t i) {
    auto& rec = result.records[i];
    rec.id = corpus[i].id;
    rec.label = corpus[i].label;
    rec.mfcc = to_tensor(raw[i].mfcc.values);
    rec.s1 = to_tensor(standardize(log_transform(nn_interpolate_time(raw[i].s1, result.s1_median))).values);
    rec.s2 = to_tensor(standardize(log_transform(nn_interpolate_time(raw[i].s2, result.s2_median))).values);
  });
  return result;
}

}  // namespace dslstm::dsp
