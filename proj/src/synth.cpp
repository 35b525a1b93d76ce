#include "bedseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

namespace bedseg {

namespace {

constexpr double kTau = 6.283185307179586;

struct Shape {
  bool is_disk = true;
  double cx = 0, cy = 0;   // center
  double rx = 0, ry = 0;   // radius / half extents
  double color[3] = {0, 0, 0};
  double depth = 0.3;
  double depth_slope_x = 0, depth_slope_y = 0;

  bool contains(double x, double y) const {
    if (is_disk) {
      const double dx = (x - cx) / rx;
      const double dy = (y - cy) / ry;
      return dx * dx + dy * dy <= 1.0;
    }
    return std::abs(x - cx) <= rx && std::abs(y - cy) <= ry;
  }
};

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

}  // namespace

SynthSample make_synth_sample(int size, std::uint64_t seed, int index) {
  if (size < 16) throw std::invalid_argument("synth: size must be >= 16");
  Rng rng(seed, "synth.sample." + std::to_string(index));

  // Background: two low-frequency color waves over a base tone.
  double base[3], phase1[3], phase2[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.25, 0.45);
    phase1[c] = rng.uniform(0.0, kTau);
    phase2[c] = rng.uniform(0.0, kTau);
  }
  const double f1x = rng.uniform(1.0, 3.0) * kTau / size;
  const double f1y = rng.uniform(1.0, 3.0) * kTau / size;
  const double f2x = rng.uniform(2.0, 5.0) * kTau / size;
  const double f2y = rng.uniform(2.0, 5.0) * kTau / size;

  // Background depth: a gentle plane, everything far (large values).
  const double gx = rng.uniform(0.05, 0.2) / size;
  const double gy = rng.uniform(0.05, 0.2) / size;
  const double depth_base = rng.uniform(0.62, 0.72);

  const int n_shapes = 1 + static_cast<int>(rng.next_below(3));
  std::vector<Shape> shapes(n_shapes);
  for (Shape& s : shapes) {
    s.is_disk = rng.next_below(2) == 0;
    s.cx = rng.uniform(0.28, 0.72) * size;
    s.cy = rng.uniform(0.28, 0.72) * size;
    s.rx = rng.uniform(0.10, 0.18) * size;
    s.ry = s.is_disk ? s.rx * rng.uniform(0.8, 1.2) : rng.uniform(0.10, 0.18) * size;
    for (double& c : s.color) c = rng.uniform(0.45, 0.95);
    s.depth = rng.uniform(0.18, 0.40);  // nearer than any background pixel
    s.depth_slope_x = rng.uniform(-0.03, 0.03) / std::max(s.rx, 1.0);
    s.depth_slope_y = rng.uniform(-0.03, 0.03) / std::max(s.ry, 1.0);
  }

  SynthSample sample;
  sample.rgb = Image::zeros(size, size, 3);
  sample.depth = Image::zeros(size, size, 1);
  MaskPlane gt(size, size);
  gt.setZero();

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Shape* hit = nullptr;
      for (const Shape& s : shapes)
        if (s.contains(x, y)) hit = &s;  // later shapes paint over earlier ones

      double rgb[3], depth;
      if (hit) {
        const double texture = 0.05 * std::sin(f2x * x + f2y * y + phase2[0]);
        for (int c = 0; c < 3; ++c) rgb[c] = hit->color[c] + texture;
        depth = hit->depth + hit->depth_slope_x * (x - hit->cx) + hit->depth_slope_y * (y - hit->cy);
        gt(y, x) = 1;
      } else {
        for (int c = 0; c < 3; ++c)
          rgb[c] = base[c] + 0.15 * std::sin(f1x * x + f1y * y + phase1[c]) +
                   0.06 * std::sin(f2x * x - f2y * y + phase2[c]);
        depth = depth_base + gx * x + gy * y;
      }
      for (int c = 0; c < 3; ++c) sample.rgb.at(y, x, c) = quantize8(clamp01(rgb[c]));
      sample.depth.at(y, x) = quantize8(clamp01(depth));
    }
  }
  sample.gt = BinMask(std::move(gt));
  return sample;
}

std::vector<SynthSample> make_synth_dataset(int n, int size, std::uint64_t seed) {
  std::vector<SynthSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(make_synth_sample(size, seed, i));
  return out;
}

namespace {

std::string sample_stem(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sample_%04d", index);
  return buf;
}

}  // namespace

void write_synth_dataset(const std::filesystem::path& dir, int n, int size, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  for (int i = 0; i < n; ++i) {
    const SynthSample sample = make_synth_sample(size, seed, i);
    const std::string stem = sample_stem(i);
    write_image(sample.rgb, dir / (stem + ".rgb.ppm"));
    write_image(sample.depth, dir / (stem + ".depth.pgm"));
    Image gt = Image::zeros(size, size, 1);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) gt.at(y, x) = sample.gt.values(y, x) ? 1.0f : 0.0f;
    write_image(gt, dir / (stem + ".gt.pgm"));
  }
}

std::vector<DatasetSample> load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::map<std::string, fs::path> rgb_files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    constexpr std::string_view suffix = ".rgb.ppm";
    if (name.size() > suffix.size() && name.ends_with(suffix))
      rgb_files[name.substr(0, name.size() - suffix.size())] = entry.path();
  }
  std::vector<DatasetSample> out;
  for (const auto& [stem, rgb_path] : rgb_files) {
    DatasetSample s;
    s.name = stem;
    s.rgb = read_image(rgb_path);
    s.depth = read_image(dir / (stem + ".depth.pgm"));
    const Image gt = read_image(dir / (stem + ".gt.pgm"));
    s.gt = BinMask::from_gray(gray_plane(gt));
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("no samples found in " + dir.string());
  return out;
}

}  // namespace bedseg
