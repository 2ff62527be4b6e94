#include "shield/metrics.hpp"

#include <string>

#include "shield/errors.hpp"

namespace shield {

double weighted_f1(const std::vector<size_t>& predictions,
                   const std::vector<size_t>& gold, size_t num_classes) {
  if (predictions.empty() || predictions.size() != gold.size())
    throw ConfigError("weighted_f1: " + std::to_string(predictions.size()) +
                      " predictions vs " + std::to_string(gold.size()) + " gold labels");
  std::vector<double> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  std::vector<double> support(num_classes, 0);
  for (size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] >= num_classes || predictions[i] >= num_classes)
      throw ConfigError("weighted_f1: label out of range at example " + std::to_string(i));
    support[gold[i]] += 1.0;
    if (predictions[i] == gold[i]) {
      tp[gold[i]] += 1.0;
    } else {
      fp[predictions[i]] += 1.0;
      fn[gold[i]] += 1.0;
    }
  }
  const double total = static_cast<double>(gold.size());
  double f1 = 0.0;
  for (size_t c = 0; c < num_classes; ++c) {
    const double denom_p = tp[c] + fp[c], denom_r = tp[c] + fn[c];
    const double precision = denom_p > 0.0 ? tp[c] / denom_p : 0.0;
    const double recall = denom_r > 0.0 ? tp[c] / denom_r : 0.0;
    const double class_f1 =
        precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    f1 += (support[c] / total) * class_f1;
  }
  return f1;
}

double accuracy(const std::vector<size_t>& predictions, const std::vector<size_t>& gold) {
  if (predictions.empty() || predictions.size() != gold.size())
    throw ConfigError("accuracy: size mismatch");
  double hits = 0.0;
  for (size_t i = 0; i < gold.size(); ++i)
    if (predictions[i] == gold[i]) hits += 1.0;
  return hits / static_cast<double>(gold.size());
}

}  // namespace shield
