#pragma once

#include "bedseg/image.hpp"
#include "bedseg/tensor.hpp"

#include <string_view>

namespace bedseg {

/// Normalized monocular depth, values in [0,1].
struct DepthMap {
  PlaneF values;

  DepthMap() = default;
  explicit DepthMap(PlaneF v);  // validates range and finiteness

  int width() const { return static_cast<int>(values.cols()); }
  int height() const { return static_cast<int>(values.rows()); }
};

/// Soft-edge map in [0,1]; zero on the one-pixel border.
struct StructureMap {
  PlaneF values;

  int width() const { return static_cast<int>(values.cols()); }
  int height() const { return static_cast<int>(values.rows()); }
};

/// Which depth representations contribute edge maps to the cumulative sum.
struct ComponentSet {
  bool depth = true;
  bool inverse = true;
  bool centered = true;

  int count() const { return int(depth) + int(inverse) + int(centered); }
  static ComponentSet all() { return {}; }
  static ComponentSet only_depth() { return {true, false, false}; }
  /// Parses a comma-separated subset of "depth,inverse,centered".
  static ComponentSet parse(std::string_view text);
  std::string to_string() const;
};

DepthMap depth_from_image(const Image& img);  // requires 1 channel

/// Mid-depth emphasis: out = |d - 0.5| * 2.
DepthMap center_depth(const DepthMap& d);

/// Min-max normalized reciprocal 1/(d + epsilon); a constant input maps to
/// all zeros (the degenerate min == max case).
DepthMap invert_depth(const DepthMap& d, float epsilon = 0.01f);

/// Gradient magnitude of the 3x3 Sobel pair, normalized by 4*sqrt(2) so the
/// response stays in [0,1] for inputs in [0,1]; border pixels are 0.
/// Requires width and height >= 3.
StructureMap sobel_soft_edges(const DepthMap& d);

/// Element-wise sum of the soft-edge maps of the selected depth
/// representations, clamped to [0,1].
StructureMap cumulative_structure_map(const DepthMap& d, ComponentSet components = {},
                                      float epsilon = 0.01f);

/// Stacks RGB and the edge map into a [4,H,W] tensor (channel order R,G,B,S).
Tensor<float> attach_channel(const Image& rgb, const StructureMap& s);
Tensor<float> attach_channel(const Image& rgb, const DepthMap& d);  // raw-depth variant

/// De-interleaves a 3-channel image into a [3,H,W] tensor.
Tensor<float> image_to_tensor(const Image& rgb);

}  // namespace bedseg
