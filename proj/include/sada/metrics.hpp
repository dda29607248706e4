#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace sada {

// C x C confusion counts; rows index the true class, columns the prediction.
struct Confusion {
  std::size_t classes = 0;
  std::vector<long long> counts;

  Confusion() = default;
  explicit Confusion(std::size_t c) : classes(c), counts(c * c, 0) {}

  long long& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  long long at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }

  long long total() const {
    long long s = 0;
    for (long long c : counts) s += c;
    return s;
  }
  long long trace() const {
    long long s = 0;
    for (std::size_t c = 0; c < classes; ++c) s += at(c, c);
    return s;
  }
};

struct F1Scores {
  double micro = 0.0;
  double macro = 0.0;
  std::vector<double> per_class;
};

// Per-class F1 with 0/0 -> 0, macro as their unweighted mean, micro from
// global counts (equals accuracy for single-label multiclass).
inline F1Scores f1_scores(const Confusion& confusion) {
  if (confusion.classes == 0 || confusion.total() == 0)
    throw std::invalid_argument("f1_scores: empty confusion matrix");
  for (long long c : confusion.counts)
    if (c < 0) throw std::invalid_argument("f1_scores: negative count");

  F1Scores scores;
  scores.per_class.resize(confusion.classes, 0.0);
  long long global_tp = 0, global_fp = 0, global_fn = 0;
  for (std::size_t c = 0; c < confusion.classes; ++c) {
    long long tp = confusion.at(c, c);
    long long fn = 0, fp = 0;
    for (std::size_t j = 0; j < confusion.classes; ++j) {
      if (j == c) continue;
      fn += confusion.at(c, j);
      fp += confusion.at(j, c);
    }
    global_tp += tp;
    global_fp += fp;
    global_fn += fn;
    const double precision = (tp + fp > 0) ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double recall = (tp + fn > 0) ? static_cast<double>(tp) / (tp + fn) : 0.0;
    scores.per_class[c] =
        (precision + recall > 0.0) ? 2.0 * precision * recall / (precision + recall) : 0.0;
    scores.macro += scores.per_class[c];
  }
  scores.macro /= static_cast<double>(confusion.classes);
  const double denom = 2.0 * global_tp + global_fp + global_fn;
  scores.micro = denom > 0.0 ? 2.0 * global_tp / denom : 0.0;
  return scores;
}

}  // namespace sada
