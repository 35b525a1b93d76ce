#include "bedseg/metrics.hpp"

#include "bedseg/image.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

namespace bedseg {

namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

void check_dims(const ProbMask& p, const BinMask& g, const char* op) {
  if (p.height() != g.height() || p.width() != g.width())
    throw DimensionError(std::string(op) + ": dimension mismatch");
}

// ---------------------------------------------------------------------------
// S-measure helpers
// ---------------------------------------------------------------------------

double object_half(const PlaneD& values, const MaskPlane& mask, std::uint8_t select) {
  double sum = 0.0;
  long n = 0;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (mask.data()[i] == select) {
      sum += values.data()[i];
      ++n;
    }
  }
  const double x = sum / static_cast<double>(n);
  double sq = 0.0;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (mask.data()[i] == select) {
      const double d = values.data()[i] - x;
      sq += d * d;
    }
  }
  const double sigma = (n >= 2) ? std::sqrt(sq / static_cast<double>(n - 1)) : 0.0;
  return 2.0 * x / (x * x + 1.0 + sigma + kEps);
}

double s_object(const PlaneD& pred, const BinMask& g, double fg_fraction) {
  const double o_fg = object_half(pred, g.values, 1);
  const PlaneD inv = 1.0 - pred;
  const double o_bg = object_half(inv, g.values, 0);
  return fg_fraction * o_fg + (1.0 - fg_fraction) * o_bg;
}

double region_ssim(const Eigen::Ref<const PlaneD>& p, const Eigen::Ref<const PlaneD>& g) {
  const double n = static_cast<double>(p.size());
  const double x = p.mean();
  const double y = g.mean();
  const double sx2 = (p - x).square().sum() / (n - 1.0 + kEps);
  const double sy2 = (g - y).square().sum() / (n - 1.0 + kEps);
  const double sxy = ((p - x) * (g - y)).sum() / (n - 1.0 + kEps);
  const double a = 4.0 * x * y * sxy;
  const double b = (x * x + y * y) * (sx2 + sy2);
  if (a != 0.0) return a / (b + kEps);
  return (b == 0.0) ? 1.0 : 0.0;
}

double s_region(const PlaneD& pred, const BinMask& g) {
  const int h = g.height();
  const int w = g.width();
  // GT centroid, 1-based with round-half-away-from-zero (reference evaluator
  // convention); the quadrant split keeps X columns / Y rows in the first
  // blocks.
  double total = 0.0, mx = 0.0, my = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (g.values(y, x)) {
        total += 1.0;
        mx += x + 1;
        my += y + 1;
      }
  const int cx = static_cast<int>(std::lround(mx / total));
  const int cy = static_cast<int>(std::lround(my / total));

  const PlaneD gt = g.values.cast<double>();
  const double area = static_cast<double>(h) * w;
  struct Block {
    int r0, c0, rows, cols;
  };
  const std::array<Block, 4> blocks = {Block{0, 0, cy, cx}, Block{0, cx, cy, w - cx},
                                       Block{cy, 0, h - cy, cx}, Block{cy, cx, h - cy, w - cx}};
  double q = 0.0;
  for (const Block& b : blocks) {
    if (b.rows <= 0 || b.cols <= 0) continue;  // empty block has zero weight
    const double weight = static_cast<double>(b.rows) * b.cols / area;
    q += weight *
         region_ssim(pred.block(b.r0, b.c0, b.rows, b.cols), gt.block(b.r0, b.c0, b.rows, b.cols));
  }
  return q;
}

// ---------------------------------------------------------------------------
// Exact Euclidean distance transform (two-pass, squared distances kept as
// exact integers in doubles) with nearest-foreground tracking.
// ---------------------------------------------------------------------------

constexpr double kEdtInf = 1e20;

struct DistanceField {
  PlaneD dist;                 // Euclidean distance to nearest foreground
  std::vector<int> nearest;    // flat index (y*w + x) of that foreground pixel
};

DistanceField distance_to_foreground(const BinMask& g) {
  const int h = g.height();
  const int w = g.width();
  DistanceField out;
  out.dist = PlaneD::Zero(h, w);
  out.nearest.assign(static_cast<std::size_t>(h) * w, -1);

  // Pass 1: per column, squared distance to the nearest foreground row.
  PlaneD f(h, w);
  std::vector<int> src_row(static_cast<std::size_t>(h) * w, -1);
  for (int x = 0; x < w; ++x) {
    int last = -1;
    for (int y = 0; y < h; ++y) {
      if (g.values(y, x)) last = y;
      if (last >= 0) {
        const double d = y - last;
        f(y, x) = d * d;
        src_row[static_cast<std::size_t>(y) * w + x] = last;
      } else {
        f(y, x) = kEdtInf;
      }
    }
    last = -1;
    for (int y = h - 1; y >= 0; --y) {
      if (g.values(y, x)) last = y;
      if (last >= 0) {
        const double d = last - y;
        if (d * d < f(y, x)) {
          f(y, x) = d * d;
          src_row[static_cast<std::size_t>(y) * w + x] = last;
        }
      }
    }
  }

  // Pass 2: per row, lower envelope of parabolas over columns.
  std::vector<int> v(w);
  std::vector<double> z(static_cast<std::size_t>(w) + 1);
  for (int y = 0; y < h; ++y) {
    int k = 0;
    v[0] = 0;
    z[0] = -kEdtInf;
    z[1] = kEdtInf;
    auto fy = [&](int q) { return f(y, q); };
    for (int q = 1; q < w; ++q) {
      double s = ((fy(q) + static_cast<double>(q) * q) -
                  (fy(v[k]) + static_cast<double>(v[k]) * v[k])) /
                 (2.0 * q - 2.0 * v[k]);
      while (s <= z[k]) {
        --k;
        s = ((fy(q) + static_cast<double>(q) * q) -
             (fy(v[k]) + static_cast<double>(v[k]) * v[k])) /
            (2.0 * q - 2.0 * v[k]);
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kEdtInf;
    }
    k = 0;
    for (int q = 0; q < w; ++q) {
      while (z[k + 1] < q) ++k;
      const double dq = q - v[k];
      out.dist(y, q) = std::sqrt(dq * dq + fy(v[k]));
      const int row = src_row[static_cast<std::size_t>(y) * w + v[k]];
      out.nearest[static_cast<std::size_t>(y) * w + q] = (row >= 0) ? row * w + v[k] : -1;
    }
  }
  return out;
}

PlaneD gaussian_filter_7x7(const PlaneD& in) {
  static const auto kernel = [] {
    std::array<std::array<double, 7>, 7> k{};
    double sum = 0.0;
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 7; ++j) {
        const double dy = i - 3, dx = j - 3;
        k[i][j] = std::exp(-(dy * dy + dx * dx) / (2.0 * 25.0));
        sum += k[i][j];
      }
    for (auto& row : k)
      for (auto& v : row) v /= sum;
    return k;
  }();

  const int h = static_cast<int>(in.rows());
  const int w = static_cast<int>(in.cols());
  PlaneD out = PlaneD::Zero(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = 0; i < 7; ++i) {
        const int yy = y + i - 3;
        if (yy < 0 || yy >= h) continue;  // zero padding
        for (int j = 0; j < 7; ++j) {
          const int xx = x + j - 3;
          if (xx < 0 || xx >= w) continue;
          acc += kernel[i][j] * in(yy, xx);
        }
      }
      out(y, x) = acc;
    }
  return out;
}

}  // namespace

ProbMask::ProbMask(PlaneF v) : values(std::move(v)) {
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const float x = values.data()[i];
    if (!(x >= 0.0f && x <= 1.0f)) throw std::invalid_argument("prob mask value outside [0,1]");
  }
}

BinMask::BinMask(MaskPlane v) : values(std::move(v)) {
  for (Eigen::Index i = 0; i < values.size(); ++i)
    if (values.data()[i] > 1) throw std::invalid_argument("bin mask value not in {0,1}");
}

BinMask BinMask::from_gray(const PlaneF& gray, float threshold) {
  MaskPlane m(gray.rows(), gray.cols());
  for (Eigen::Index i = 0; i < gray.size(); ++i)
    m.data()[i] = gray.data()[i] >= threshold ? 1 : 0;
  return BinMask(std::move(m));
}

double mae(const ProbMask& p, const BinMask& g) {
  check_dims(p, g, "mae");
  return (p.values.cast<double>() - g.values.cast<double>()).abs().mean();
}

double f_beta(double precision, double recall, double beta_sq) {
  const double denom = beta_sq * precision + recall;
  if (denom == 0.0) return 0.0;
  return (1.0 + beta_sq) * precision * recall / denom;
}

double f_max(const ProbMask& p, const BinMask& g, double beta_sq) {
  check_dims(p, g, "f_max");
  const long n_fg = static_cast<long>(g.values.cast<long>().sum());
  if (n_fg == 0) return 0.0;

  static const auto thresholds = [] {
    std::array<double, 256> t{};
    for (int k = 0; k < 256; ++k) t[k] = k / 255.0;
    return t;
  }();

  // Bucket pixels by how many thresholds they clear; suffix sums then give
  // TP/FP per threshold without rescanning the image 256 times.
  std::array<long, 258> count_fg{}, count_bg{};
  for (Eigen::Index i = 0; i < p.values.size(); ++i) {
    const double v = p.values.data()[i];
    const int m = static_cast<int>(
        std::upper_bound(thresholds.begin(), thresholds.end(), v) - thresholds.begin());
    (g.values.data()[i] ? count_fg : count_bg)[m]++;
  }
  std::array<long, 258> suf_fg{}, suf_bg{};
  for (int m = 256; m >= 0; --m) {
    suf_fg[m] = suf_fg[m + 1] + count_fg[m];
    suf_bg[m] = suf_bg[m + 1] + count_bg[m];
  }

  double best = 0.0;
  for (int k = 0; k < 256; ++k) {
    const double tp = static_cast<double>(suf_fg[k + 1]);
    const double fp = static_cast<double>(suf_bg[k + 1]);
    const double precision = (tp + fp > 0.0) ? tp / (tp + fp) : 0.0;
    const double recall = tp / static_cast<double>(n_fg);
    best = std::max(best, f_beta(precision, recall, beta_sq));
  }
  return best;
}

double f_weighted(const ProbMask& p, const BinMask& g, double beta_sq) {
  check_dims(p, g, "f_weighted");
  const int h = g.height();
  const int w = g.width();
  const double n = static_cast<double>(h) * w;
  double n_fg = 0.0;
  for (Eigen::Index i = 0; i < g.values.size(); ++i) n_fg += g.values.data()[i];
  if (n_fg == 0.0) return 0.0;

  const PlaneD pd = p.values.cast<double>();
  const PlaneD gd = g.values.cast<double>();
  const PlaneD err = (pd - gd).abs();

  // Propagate each background error from its nearest foreground pixel, then
  // blur so foreground errors share a local dependency.
  PlaneD err_t = err;
  DistanceField df;
  if (n_fg < n) {
    df = distance_to_foreground(g);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (!g.values(y, x)) {
          const int idx = df.nearest[static_cast<std::size_t>(y) * w + x];
          err_t(y, x) = err(idx / w, idx % w);
        }
  } else {
    df.dist = PlaneD::Zero(h, w);
  }
  const PlaneD ea = gaussian_filter_7x7(err_t);

  PlaneD min_e_ea = err;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (g.values(y, x) && ea(y, x) < err(y, x)) min_e_ea(y, x) = ea(y, x);

  // Pixel importance: distant false positives count more.
  const double decay = std::log(0.5) / 5.0;
  double sum_fg = 0.0, sum_bg = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (g.values(y, x)) {
        sum_fg += min_e_ea(y, x);
      } else {
        const double b = 2.0 - std::exp(decay * df.dist(y, x));
        sum_bg += min_e_ea(y, x) * b;
      }
    }

  const double tpw = n_fg - sum_fg;
  const double fpw = sum_bg;
  const double recall = 1.0 - sum_fg / n_fg;
  const double precision = tpw / (kEps + tpw + fpw);
  return f_beta(precision, recall, beta_sq);
}

double s_measure(const ProbMask& p, const BinMask& g, double alpha) {
  check_dims(p, g, "s_measure");
  const PlaneD pd = p.values.cast<double>();
  const double n = static_cast<double>(pd.size());
  double n_fg = 0.0;
  for (Eigen::Index i = 0; i < g.values.size(); ++i) n_fg += g.values.data()[i];

  if (n_fg == 0.0) return 1.0 - pd.mean();
  if (n_fg == n) return pd.mean();

  const double so = s_object(pd, g, n_fg / n);
  const double sr = s_region(pd, g);
  return std::max(alpha * so + (1.0 - alpha) * sr, 0.0);
}

double e_measure_mean(const ProbMask& p, const BinMask& g) {
  check_dims(p, g, "e_measure_mean");
  const double n = static_cast<double>(p.values.size());
  long n_fg = 0;
  for (Eigen::Index i = 0; i < g.values.size(); ++i) n_fg += g.values.data()[i];

  // p >= k/256 iff floor(256*p) >= k: scaling by 256 is exact, so the bucket
  // classification matches the direct comparison bit for bit.
  std::array<long, 258> count_fg{}, count_bg{};
  for (Eigen::Index i = 0; i < p.values.size(); ++i) {
    const int b = static_cast<int>(std::floor(256.0 * static_cast<double>(p.values.data()[i])));
    (g.values.data()[i] ? count_fg : count_bg)[b]++;
  }
  std::array<long, 258> suf_fg{}, suf_bg{};
  for (int m = 256; m >= 0; --m) {
    suf_fg[m] = suf_fg[m + 1] + count_fg[m];
    suf_bg[m] = suf_bg[m + 1] + count_bg[m];
  }

  const double mu_g = static_cast<double>(n_fg) / n;
  double acc = 0.0;
  for (int k = 1; k <= 256; ++k) {
    const double npf = static_cast<double>(suf_fg[k]);  // foreground predicted positive
    const double npb = static_cast<double>(suf_bg[k]);
    const double np = npf + npb;
    double e;
    if (n_fg == 0) {
      e = (n - np) / n;
    } else if (static_cast<double>(n_fg) == n) {
      e = np / n;
    } else {
      const double mu_f = np / n;
      auto enhanced = [&](double gt_val, double bin_val) {
        const double phi_g = gt_val - mu_g;
        const double phi_f = bin_val - mu_f;
        const double xi = 2.0 * phi_g * phi_f / (phi_g * phi_g + phi_f * phi_f + kEps);
        return (xi + 1.0) * (xi + 1.0) / 4.0;
      };
      e = (npf * enhanced(1, 1) + (static_cast<double>(n_fg) - npf) * enhanced(1, 0) +
           npb * enhanced(0, 1) + (n - static_cast<double>(n_fg) - npb) * enhanced(0, 0)) /
          n;
    }
    acc += e;
  }
  return acc / 256.0;
}

// ---------------------------------------------------------------------------
// Directory evaluation and report formatting
// ---------------------------------------------------------------------------

PerImageMetrics MetricReport::aggregate() const {
  PerImageMetrics mean;
  mean.name = "mean";
  if (per_image.empty()) return mean;
  for (const auto& m : per_image) {
    mean.s_measure += m.s_measure;
    mean.f_max += m.f_max;
    mean.f_weighted += m.f_weighted;
    mean.e_mean += m.e_mean;
    mean.mae += m.mae;
  }
  const double n = static_cast<double>(per_image.size());
  mean.s_measure /= n;
  mean.f_max /= n;
  mean.f_weighted /= n;
  mean.e_mean /= n;
  mean.mae /= n;
  return mean;
}

namespace {

std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9f", v);
  return buf;
}

std::string metric_fields(const PerImageMetrics& m) {
  return "s_measure=" + fmt9(m.s_measure) + " f_max=" + fmt9(m.f_max) +
         " f_weighted=" + fmt9(m.f_weighted) + " e_mean=" + fmt9(m.e_mean) +
         " mae=" + fmt9(m.mae);
}

}  // namespace

std::string format_report(const MetricReport& report, ReportFormat format) {
  std::string out;
  const char* image_prefix = (format == ReportFormat::kv) ? "record=image name=" : "image ";
  const char* skip_prefix = (format == ReportFormat::kv) ? "record=skipped name=" : "skipped ";
  const char* agg_prefix = (format == ReportFormat::kv) ? "record=aggregate " : "aggregate ";
  for (const auto& m : report.per_image)
    out += image_prefix + m.name + " " + metric_fields(m) + "\n";
  for (const auto& s : report.skipped)
    out += skip_prefix + s.name + " reason=" + s.reason + "\n";
  const PerImageMetrics mean = report.aggregate();
  out += agg_prefix + std::string("count=") + std::to_string(report.per_image.size()) + " " +
         metric_fields(mean) + "\n";
  return out;
}

MetricReport evaluate_directory(const std::filesystem::path& pred_dir,
                                const std::filesystem::path& gt_dir, const EvalOptions& opts) {
  namespace fs = std::filesystem;
  auto collect = [](const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::map<std::string, fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      const auto ext = entry.path().extension();
      if (ext == ".pgm" || ext == ".ppm") files[entry.path().filename().string()] = entry.path();
    }
    return files;
  };

  const auto preds = collect(pred_dir);
  const auto gts = collect(gt_dir);

  std::map<std::string, int> names;  // sorted union
  for (const auto& [name, _] : preds) names[name] |= 1;
  for (const auto& [name, _] : gts) names[name] |= 2;

  MetricReport report;
  for (const auto& [name, mask] : names) {
    if (mask != 3) {
      report.skipped.push_back({name, mask == 1 ? "missing-gt" : "missing-pred"});
      continue;
    }
    try {
      const Image pred_img = read_image(preds.at(name));
      const Image gt_img = read_image(gts.at(name));
      if (pred_img.channels != 1 || gt_img.channels != 1) {
        report.skipped.push_back({name, "not-single-channel"});
        continue;
      }
      if (pred_img.width != gt_img.width || pred_img.height != gt_img.height) {
        report.skipped.push_back({name, "dimension-mismatch"});
        continue;
      }
      const ProbMask p(gray_plane(pred_img));
      const BinMask g = BinMask::from_gray(gray_plane(gt_img));
      PerImageMetrics m;
      m.name = name;
      m.s_measure = s_measure(p, g, opts.s_alpha);
      m.f_max = f_max(p, g, opts.f_max_beta_sq);
      m.f_weighted = f_weighted(p, g, opts.f_weighted_beta_sq);
      m.e_mean = e_measure_mean(p, g);
      m.mae = mae(p, g);
      report.per_image.push_back(std::move(m));
    } catch (const std::exception& e) {
      report.skipped.push_back({name, e.what()});
    }
  }
  return report;
}

}  // namespace bedseg
