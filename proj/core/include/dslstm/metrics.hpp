#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dslstm::train {

/// confusion(i, j) = number of items of true class i predicted as j.
class Confusion {
 public:
  explicit Confusion(std::size_t classes = 0) : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return classes_; }
  std::size_t& at(std::size_t truth, std::size_t pred) { return counts_[truth * classes_ + pred]; }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * classes_ + pred]; }
  std::size_t row_sum(std::size_t truth) const;
  std::size_t total() const;

  /// Header "true\\pred,<names...>", one row per true class.
  std::string to_csv(std::span<const std::string_view> names) const;

  friend bool operator==(const Confusion&, const Confusion&) = default;

 private:
  std::size_t classes_;
  std::vector<std::size_t> counts_;
};

struct EvalResult {
  double wa = 0.0;
  double ua = 0.0;
  /// Per-class recall; NaN for classes absent from the test set.
  std::vector<double> recall;
  Confusion confusion;

  friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

/// WA = correct / total; UA = mean recall over the classes present.
EvalResult score(const Confusion& confusion);
EvalResult score(std::span<const int> truth, std::span<const int> predicted, std::size_t classes);

struct FoldMetrics {
  std::size_t fold = 0;
  EvalResult result;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // n-1 denominator; 0 for a single value
};

Summary summarize(std::span<const double> values);

struct MetricsReport {
  std::string variant;
  std::size_t folds_planned = 0;
  std::vector<FoldMetrics> folds;
  /// False when a fold aborted.
  bool complete = true;
  std::string failure;

  Summary wa() const;
  Summary ua() const;

  std::string to_text() const;
  /// One key=value line per metric.
  std::string to_records() const;
};

}  // namespace dslstm::train
