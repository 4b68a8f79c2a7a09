#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

namespace msattn {

/// Raised for degenerate inputs to evaluation metrics (empty class, undefined kappa).
class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// C x C counts, rows = true class, columns = predicted class. Classes are 0-based.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  void add(int truth, int predicted);
  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * classes_ + predicted]; }
  std::uint64_t row_sum(std::size_t truth) const;
  std::uint64_t col_sum(std::size_t predicted) const;
  std::uint64_t total() const;

  /// Row-normalised display form (each non-empty row sums to 1).
  std::vector<double> row_normalized() const;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels, std::size_t classes);

/// Builds a matrix from explicit row-major counts (tests, reports).
ConfusionMatrix confusion_from_counts(std::size_t classes, std::span<const std::uint64_t> counts);

/// Per-class recall; throws MetricError naming any class with no samples.
std::vector<double> per_class_recall(const ConfusionMatrix& cm);

/// Mean per-class recall.
double normalized_accuracy(const ConfusionMatrix& cm);

double overall_accuracy(const ConfusionMatrix& cm);

/// Cohen's kappa on raw counts.
double kappa(const ConfusionMatrix& cm);

/// CSV: header "class,recall,support", one row per class, then a summary row.
void write_per_class_csv(std::ostream& os, const ConfusionMatrix& cm);
/// CSV of raw counts with a header row of predicted-class indices.
void write_confusion_csv(std::ostream& os, const ConfusionMatrix& cm);

}  // namespace msattn
