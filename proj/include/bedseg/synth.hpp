#pragma once

#include "bedseg/image.hpp"
#include "bedseg/metrics.hpp"

#include <filesystem>
#include <vector>

namespace bedseg {

/// One synthetic scene: textured background, 1-3 foreground disks or
/// rectangles, a smooth depth map with the foreground nearer (smaller
/// values), and the binary ground truth. All pixel values are already
/// quantized to the 8-bit grid, so in-memory samples match their files.
struct SynthSample {
  Image rgb;    // 3 channels
  Image depth;  // 1 channel
  BinMask gt;
};

SynthSample make_synth_sample(int size, std::uint64_t seed, int index);

std::vector<SynthSample> make_synth_dataset(int n, int size, std::uint64_t seed);

/// Writes n samples as sample_%04d.rgb.ppm / .depth.pgm / .gt.pgm.
void write_synth_dataset(const std::filesystem::path& dir, int n, int size, std::uint64_t seed);

struct DatasetSample {
  std::string name;
  Image rgb;
  Image depth;
  BinMask gt;
};

/// Loads samples written by write_synth_dataset (or anything matching the
/// same naming scheme), ordered by name.
std::vector<DatasetSample> load_dataset(const std::filesystem::path& dir);

}  // namespace bedseg
