#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rsam {

struct ConfusionCounts {
  uint64_t tp = 0;
  uint64_t fp = 0;
  uint64_t fn = 0;
  uint64_t tn = 0;

  uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& other);
  bool operator==(const ConfusionCounts&) const = default;
};

/// The seven scores in the order they are reported.
struct MetricsReport {
  double jaccard = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double specificity = 0.0;
  double f1 = 0.0;
  double overall_accuracy = 0.0;
  double miou = 0.0;

  std::vector<double> values() const;
  static const std::vector<std::string>& column_names();
};

enum class Aggregation { micro, macro };

/// Pixel counts of two binary masks of equal shape (any integral or bool
/// dtype; non-zero means foreground).
ConfusionCounts confusion(const torch::Tensor& pred, const torch::Tensor& gt);

/// Ratios with a zero denominator count as 1.0.
MetricsReport compute_metrics(const ConfusionCounts& counts);

MetricsReport aggregate(std::span<const ConfusionCounts> counts, Aggregation mode);

struct ImageScore {
  std::string id;
  ConfusionCounts counts;
};

/// CSV with one row per image followed by `micro` and `macro` summary rows.
void write_metrics_csv(const std::vector<ImageScore>& scores, const std::filesystem::path& path);

/// Fixed-precision formatting used by every CSV writer.
std::string format_real(double value);

}  // namespace rsam
