#include "dslstm/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "dslstm/emotion.hpp"
#include "dslstm/error.hpp"

namespace dslstm::train {

namespace {

std::string fixed(double v, int digits = 6) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string class_name(std::size_t c) {
  return c < kNumClasses ? std::string(kEmotionNames[c]) : "class" + std::to_string(c);
}

}  // namespace

std::size_t Confusion::row_sum(std::size_t truth) const {
  std::size_t s = 0;
  for (std::size_t j = 0; j < classes_; ++j) s += at(truth, j);
  return s;
}

std::size_t Confusion::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::size_t{0}); }

std::string Confusion::to_csv(std::span<const std::string_view> names) const {
  std::ostringstream os;
  const auto name = [&](std::size_t c) { return c < names.size() ? std::string(names[c]) : std::to_string(c); };
  os << "true\\pred";
  for (std::size_t j = 0; j < classes_; ++j) os << ',' << name(j);
  os << '\n';
  for (std::size_t i = 0; i < classes_; ++i) {
    os << name(i);
    for (std::size_t j = 0; j < classes_; ++j) os << ',' << at(i, j);
    os << '\n';
  }
  return os.str();
}

EvalResult score(const Confusion& confusion) {
  const std::size_t total = confusion.total();
  if (total == 0) throw ValidationError("cannot score an empty test set");
  EvalResult r;
  r.confusion = confusion;
  std::size_t correct = 0, present = 0;
  double recall_sum = 0.0;
  for (std::size_t c = 0; c < confusion.classes(); ++c) {
    correct += confusion.at(c, c);
    const std::size_t n = confusion.row_sum(c);
    if (n == 0) {
      r.recall.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double rec = static_cast<double>(confusion.at(c, c)) / static_cast<double>(n);
    r.recall.push_back(rec);
    recall_sum += rec;
    ++present;
  }
  if (present < confusion.classes()) {
    spdlog::warn("{} of {} classes absent from the test set; UA averages the present ones",
                 confusion.classes() - present, confusion.classes());
  }
  r.wa = static_cast<double>(correct) / static_cast<double>(total);
  r.ua = recall_sum / static_cast<double>(present);
  return r;
}

EvalResult score(std::span<const int> truth, std::span<const int> predicted, std::size_t classes) {
  if (truth.size() != predicted.size()) throw ValidationError("score: truth and predictions differ in length");
  Confusion c(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || predicted[i] < 0 || static_cast<std::size_t>(truth[i]) >= classes ||
        static_cast<std::size_t>(predicted[i]) >= classes) {
      throw ValidationError("score: class index out of range at item " + std::to_string(i));
    }
    ++c.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(predicted[i]));
  }
  return score(c);
}

Summary summarize(std::span<const double> values) {
  Summary s;
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (const double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

Summary MetricsReport::wa() const {
  std::vector<double> v;
  for (const auto& f : folds) v.push_back(f.result.wa);
  return summarize(v);
}

Summary MetricsReport::ua() const {
  std::vector<double> v;
  for (const auto& f : folds) v.push_back(f.result.ua);
  return summarize(v);
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  os << "variant " << variant << (complete ? "" : "  [INCOMPLETE: " + failure + "]") << '\n';
  os << "fold      WA        UA    epochs  best\n";
  for (const auto& f : folds) {
    char line[128];
    std::snprintf(line, sizeof line, "%4zu  %8.4f  %8.4f  %6zu  %4zu\n", f.fold, f.result.wa, f.result.ua, f.epochs,
                  f.best_epoch);
    os << line;
  }
  const auto w = wa(), u = ua();
  char line[160];
  std::snprintf(line, sizeof line, "mean  %8.4f  %8.4f\nstd   %8.4f  %8.4f\n", w.mean, u.mean, w.std, u.std);
  os << line;
  std::snprintf(line, sizeof line, "WA %.1f +- %.1f   UA %.1f +- %.1f  (%%, %zu/%zu folds)\n", 100 * w.mean,
                100 * w.std, 100 * u.mean, 100 * u.std, folds.size(), folds_planned);
  os << line;
  return os.str();
}

std::string MetricsReport::to_records() const {
  std::ostringstream os;
  os << "variant=" << variant << '\n';
  os << "complete=" << (complete ? 1 : 0) << '\n';
  if (!complete) os << "failure=" << failure << '\n';
  os << "folds_planned=" << folds_planned << '\n';
  os << "folds_completed=" << folds.size() << '\n';
  for (const auto& f : folds) {
    const std::string p = "fold" + std::to_string(f.fold) + ".";
    os << p << "wa=" << fixed(f.result.wa) << '\n';
    os << p << "ua=" << fixed(f.result.ua) << '\n';
    os << p << "epochs=" << f.epochs << '\n';
    os << p << "best_epoch=" << f.best_epoch << '\n';
    for (std::size_t c = 0; c < f.result.recall.size(); ++c) {
      os << p << "recall." << class_name(c) << '=' << fixed(f.result.recall[c]) << '\n';
    }
  }
  const auto w = wa(), u = ua();
  os << "mean_wa=" << fixed(w.mean) << '\n' << "std_wa=" << fixed(w.std) << '\n';
  os << "mean_ua=" << fixed(u.mean) << '\n' << "std_ua=" << fixed(u.std) << '\n';
  return os.str();
}

}  // namespace dslstm::train
