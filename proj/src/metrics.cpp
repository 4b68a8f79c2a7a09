#include "msattn/metrics.hpp"

#include <string>

namespace msattn {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw MetricError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(int truth, int predicted) {
  const auto c = static_cast<long>(classes_);
  if (truth < 0 || truth >= c) throw std::out_of_range("true label " + std::to_string(truth) + " out of range");
  if (predicted < 0 || predicted >= c) {
    throw std::out_of_range("predicted label " + std::to_string(predicted) + " out of range");
  }
  ++counts_[static_cast<std::size_t>(truth) * classes_ + static_cast<std::size_t>(predicted)];
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < classes_; ++p) s += at(truth, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t predicted) const {
  std::uint64_t s = 0;
  for (std::size_t t = 0; t < classes_; ++t) s += at(t, predicted);
  return s;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (auto v : counts_) s += v;
  return s;
}

std::vector<double> ConfusionMatrix::row_normalized() const {
  std::vector<double> out(counts_.size(), 0.0);
  for (std::size_t t = 0; t < classes_; ++t) {
    const auto rs = row_sum(t);
    if (rs == 0) continue;
    for (std::size_t p = 0; p < classes_; ++p) {
      out[t * classes_ + p] = static_cast<double>(at(t, p)) / static_cast<double>(rs);
    }
  }
  return out;
}

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels, std::size_t classes) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("confusion: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) cm.add(labels[i], predictions[i]);
  return cm;
}

ConfusionMatrix confusion_from_counts(std::size_t classes, std::span<const std::uint64_t> counts) {
  if (counts.size() != classes * classes) throw std::invalid_argument("confusion_from_counts: need C*C counts");
  ConfusionMatrix cm(classes);
  for (std::size_t t = 0; t < classes; ++t) {
    for (std::size_t p = 0; p < classes; ++p) {
      for (std::uint64_t k = 0; k < counts[t * classes + p]; ++k) cm.add(static_cast<int>(t), static_cast<int>(p));
    }
  }
  return cm;
}

std::vector<double> per_class_recall(const ConfusionMatrix& cm) {
  std::vector<double> recall(cm.classes());
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    const auto rs = cm.row_sum(c);
    if (rs == 0) throw MetricError("class " + std::to_string(c) + " has no samples");
    recall[c] = static_cast<double>(cm.at(c, c)) / static_cast<double>(rs);
  }
  return recall;
}

double normalized_accuracy(const ConfusionMatrix& cm) {
  const auto recall = per_class_recall(cm);
  double sum = 0.0;
  for (double r : recall) sum += r;
  return sum / static_cast<double>(recall.size());
}

double overall_accuracy(const ConfusionMatrix& cm) {
  const auto n = cm.total();
  if (n == 0) throw MetricError("empty confusion matrix");
  std::uint64_t diag = 0;
  for (std::size_t c = 0; c < cm.classes(); ++c) diag += cm.at(c, c);
  return static_cast<double>(diag) / static_cast<double>(n);
}

double kappa(const ConfusionMatrix& cm) {
  const std::uint64_t n = cm.total();
  if (n == 0) throw MetricError("kappa of an empty confusion matrix");
  // (p_o - p_e) / (1 - p_e) scaled by n^2, so the only rounding is the final division
  using wide = __int128;
  wide diag = 0, chance = 0;
  for (std::size_t c = 0; c < cm.classes(); ++c) {
    diag += cm.at(c, c);
    chance += static_cast<wide>(cm.row_sum(c)) * static_cast<wide>(cm.col_sum(c));
  }
  const wide nn = static_cast<wide>(n) * static_cast<wide>(n);
  if (chance >= nn) throw MetricError("kappa undefined: chance agreement is 1");
  const wide num = static_cast<wide>(n) * diag - chance;
  return static_cast<double>(static_cast<long double>(num) / static_cast<long double>(nn - chance));
}

void write_per_class_csv(std::ostream& os, const ConfusionMatrix& cm) {
  const auto recall = per_class_recall(cm);
  os << "class,recall,support\n";
  for (std::size_t c = 0; c < recall.size(); ++c) os << c << ',' << recall[c] << ',' << cm.row_sum(c) << '\n';
  os << "normalized_accuracy," << normalized_accuracy(cm) << ',' << cm.total() << '\n';
}

void write_confusion_csv(std::ostream& os, const ConfusionMatrix& cm) {
  os << "true\\pred";
  for (std::size_t p = 0; p < cm.classes(); ++p) os << ',' << p;
  os << '\n';
  for (std::size_t t = 0; t < cm.classes(); ++t) {
    os << t;
    for (std::size_t p = 0; p < cm.classes(); ++p) os << ',' << cm.at(t, p);
    os << '\n';
  }
}

}  // namespace msattn
