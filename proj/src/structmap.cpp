#include "bedseg/structmap.hpp"

#include <cmath>
#include <sstream>

namespace bedseg {

namespace {

constexpr double kSobelNorm = 4.0 * 1.4142135623730951;  // 4*sqrt(2)

Tensor<float> stack_fourth_channel(const Image& rgb, const PlaneF& extra, const char* what) {
  if (rgb.channels != 3) throw DimensionError("attach_channel: image must have 3 channels");
  if (rgb.height != extra.rows() || rgb.width != extra.cols())
    throw DimensionError(std::string("attach_channel: ") + what + " dimensions mismatch");
  Tensor<float> t({4, static_cast<std::size_t>(rgb.height), static_cast<std::size_t>(rgb.width)});
  for (int c = 0; c < 3; ++c) {
    auto ch = t.channel(c);
    for (int y = 0; y < rgb.height; ++y)
      for (int x = 0; x < rgb.width; ++x) ch(y, x) = rgb.at(y, x, c);
  }
  t.channel(3) = extra;
  return t;
}

}  // namespace

DepthMap::DepthMap(PlaneF v) : values(std::move(v)) {
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const float x = values.data()[i];
    if (!(x >= 0.0f && x <= 1.0f)) throw std::invalid_argument("depth map value outside [0,1]");
  }
}

ComponentSet ComponentSet::parse(std::string_view text) {
  ComponentSet set{false, false, false};
  std::string token;
  std::stringstream ss{std::string(text)};
  while (std::getline(ss, token, ',')) {
    if (token == "depth")
      set.depth = true;
    else if (token == "inverse")
      set.inverse = true;
    else if (token == "centered")
      set.centered = true;
    else if (!token.empty())
      throw std::invalid_argument("unknown structure-map component: " + token);
  }
  if (set.count() == 0) throw std::invalid_argument("empty structure-map component set");
  return set;
}

std::string ComponentSet::to_string() const {
  std::string out;
  auto add = [&](const char* name) {
    if (!out.empty()) out += ',';
    out += name;
  };
  if (depth) add("depth");
  if (inverse) add("inverse");
  if (centered) add("centered");
  return out;
}

DepthMap depth_from_image(const Image& img) {
  return DepthMap(gray_plane(img));
}

DepthMap center_depth(const DepthMap& d) {
  // |d - 0.5| <= 0.5 exactly for d in [0,1], so the doubling stays in [0,1].
  DepthMap out;
  out.values = (d.values - 0.5f).abs() * 2.0f;
  return out;
}

DepthMap invert_depth(const DepthMap& d, float epsilon) {
  if (!(epsilon > 0.0f)) throw std::invalid_argument("invert_depth: epsilon must be > 0");
  PlaneF raw = 1.0f / (d.values + epsilon);
  const float lo = raw.minCoeff();
  const float hi = raw.maxCoeff();
  DepthMap out;
  if (hi == lo) {
    out.values = PlaneF::Zero(d.values.rows(), d.values.cols());
  } else {
    out.values = ((raw - lo) / (hi - lo)).cwiseMin(1.0f).cwiseMax(0.0f);
  }
  return out;
}

StructureMap sobel_soft_edges(const DepthMap& d) {
  const int h = d.height();
  const int w = d.width();
  if (h < 3 || w < 3) throw DimensionError("sobel_soft_edges: image smaller than 3x3");

  // Double accumulation keeps S(d) == S(1-d) tight; the result is stored
  // as f32.
  PlaneD x = d.values.cast<double>();
  StructureMap out;
  out.values = PlaneF::Zero(h, w);
  for (int y = 1; y + 1 < h; ++y) {
    for (int c = 1; c + 1 < w; ++c) {
      const double gx = (x(y - 1, c + 1) + 2.0 * x(y, c + 1) + x(y + 1, c + 1)) -
                        (x(y - 1, c - 1) + 2.0 * x(y, c - 1) + x(y + 1, c - 1));
      const double gy = (x(y + 1, c - 1) + 2.0 * x(y + 1, c) + x(y + 1, c + 1)) -
                        (x(y - 1, c - 1) + 2.0 * x(y - 1, c) + x(y - 1, c + 1));
      out.values(y, c) = static_cast<float>(std::sqrt(gx * gx + gy * gy) / kSobelNorm);
    }
  }
  return out;
}

StructureMap cumulative_structure_map(const DepthMap& d, ComponentSet components, float epsilon) {
  if (components.count() == 0)
    throw std::invalid_argument("cumulative_structure_map: empty component set");
  PlaneF acc = PlaneF::Zero(d.values.rows(), d.values.cols());
  if (components.depth) acc += sobel_soft_edges(d).values;
  if (components.inverse) acc += sobel_soft_edges(invert_depth(d, epsilon)).values;
  if (components.centered) acc += sobel_soft_edges(center_depth(d)).values;
  StructureMap out;
  out.values = acc.cwiseMin(1.0f);
  return out;
}

Tensor<float> attach_channel(const Image& rgb, const StructureMap& s) {
  return stack_fourth_channel(rgb, s.values, "structure map");
}

Tensor<float> attach_channel(const Image& rgb, const DepthMap& d) {
  return stack_fourth_channel(rgb, d.values, "depth map");
}

Tensor<float> image_to_tensor(const Image& rgb) {
  if (rgb.channels != 3) throw DimensionError("image_to_tensor: image must have 3 channels");
  Tensor<float> t({3, static_cast<std::size_t>(rgb.height), static_cast<std::size_t>(rgb.width)});
  for (int c = 0; c < 3; ++c) {
    auto ch = t.channel(c);
    for (int y = 0; y < rgb.height; ++y)
      for (int x = 0; x < rgb.width; ++x) ch(y, x) = rgb.at(y, x, c);
  }
  return t;
}

}  // namespace bedseg
