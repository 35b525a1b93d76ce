#pragma once

#include "bedseg/common.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace bedseg {

/// Predicted saliency probabilities in [0,1].
struct ProbMask {
  PlaneF values;

  ProbMask() = default;
  explicit ProbMask(PlaneF v);  // validates range

  int width() const { return static_cast<int>(values.cols()); }
  int height() const { return static_cast<int>(values.rows()); }
};

/// Strictly binary ground-truth mask (values 0 or 1).
struct BinMask {
  MaskPlane values;

  BinMask() = default;
  explicit BinMask(MaskPlane v);  // validates binarity

  int width() const { return static_cast<int>(values.cols()); }
  int height() const { return static_cast<int>(values.rows()); }

  /// Benchmark loader convention: gray value >= 128/255 is foreground.
  static BinMask from_gray(const PlaneF& gray, float threshold = 128.0f / 255.0f);
};

/// Mean absolute error between prediction and binary ground truth.
double mae(const ProbMask& p, const BinMask& g);

/// (1+b2)*P*R / (b2*P + R); 0 when the denominator is 0.
double f_beta(double precision, double recall, double beta_sq);

/// Maximum F over the 256-threshold sweep t = k/255, k in [0,255];
/// binarization is p >= t. An empty-foreground GT scores 0.
double f_max(const ProbMask& p, const BinMask& g, double beta_sq = 0.3);

/// Weighted F-measure: errors |p-g| are propagated among foreground pixels
/// by a 7x7 Gaussian (sigma 5) dependency and background errors are
/// attenuated by 2 - 0.5^(dist/5) on the exact Euclidean distance to the
/// nearest foreground pixel. An empty-foreground GT scores 0.
double f_weighted(const ProbMask& p, const BinMask& g, double beta_sq = 1.0);

/// Structure measure: alpha * S_object + (1-alpha) * S_region, clamped at 0.
/// Degenerate GT: all background -> 1 - mean(p); all foreground -> mean(p).
double s_measure(const ProbMask& p, const BinMask& g, double alpha = 0.5);

/// Mean enhanced-alignment measure over the 256 thresholds t = k/256,
/// k in [1,256] (all in (0,1], so a binary prediction binarizes identically
/// at every threshold); binarization is p >= t. Per threshold the enhanced
/// alignment matrix is averaged over all w*h pixels.
double e_measure_mean(const ProbMask& p, const BinMask& g);

struct PerImageMetrics {
  std::string name;
  double s_measure = 0.0;
  double f_max = 0.0;
  double f_weighted = 0.0;
  double e_mean = 0.0;
  double mae = 0.0;
};

struct SkippedImage {
  std::string name;
  std::string reason;
};

struct EvalOptions {
  double f_max_beta_sq = 0.3;
  double f_weighted_beta_sq = 1.0;
  double s_alpha = 0.5;
};

struct MetricReport {
  std::vector<PerImageMetrics> per_image;  // sorted by file name
  std::vector<SkippedImage> skipped;       // unpaired or unusable, excluded from means

  bool complete() const { return skipped.empty(); }
  PerImageMetrics aggregate() const;  // arithmetic mean; zeros when empty
};

enum class ReportFormat { text, kv };

std::string format_report(const MetricReport& report, ReportFormat format);

/// Evaluates same-named PGM files from two directories. Ground truth is
/// binarized at 128/255. Ordering is by file name, so the report does not
/// depend on directory enumeration order.
MetricReport evaluate_directory(const std::filesystem::path& pred_dir,
                                const std::filesystem::path& gt_dir,
                                const EvalOptions& opts = {});

}  // namespace bedseg
