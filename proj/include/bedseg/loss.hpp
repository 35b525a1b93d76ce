#pragma once

#include "bedseg/metrics.hpp"
#include "bedseg/tensor.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace bedseg {

/// Stable logistic function.
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Border-emphasis weights w = 1 + 5*|meanpool(g, window) - g| with
/// replicate padding. w is 1 wherever g is locally constant and never
/// exceeds 6. Window must be odd and >= 3.
template <typename S>
Plane<S> boundary_weights(const BinMask& g, int window = 31) {
  if (window < 3 || window % 2 == 0)
    throw std::invalid_argument("boundary_weights: window must be odd and >= 3");
  const int h = g.height();
  const int w = g.width();
  const int r = window / 2;

  // Box sums stay integer-valued (counts of set pixels), so the pooled mean
  // rounds once and flip symmetry is exact.
  Plane<S> rows(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      S acc = 0;
      for (int o = -r; o <= r; ++o) acc += static_cast<S>(g.values(y, std::clamp(x + o, 0, w - 1)));
      rows(y, x) = acc;
    }
  }
  Plane<S> pooled(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      S acc = 0;
      for (int o = -r; o <= r; ++o) acc += rows(std::clamp(y + o, 0, h - 1), x);
      pooled(y, x) = acc / static_cast<S>(window * window);
    }
  }
  return 1 + 5 * (pooled - g.values.template cast<S>()).abs();
}

template <typename S>
struct LossValue {
  double value = 0.0;
  Tensor<S> grad_wrt_logits;  // same dims as the logits
};

/// Weighted BCE + weighted IoU on sigmoid(logits), with the exact analytic
/// gradient with respect to the logits. Accepts [H,W] or [1,H,W] logits
/// matching the mask dimensions.
template <typename S>
LossValue<S> structure_loss(const Tensor<S>& logits, const BinMask& g, int weight_window = 31) {
  const auto z = plane_view(logits);
  if (z.rows() != g.height() || z.cols() != g.width())
    throw DimensionError("structure_loss: logits/mask dimension mismatch");
  for (S v : logits.data)
    if (!std::isfinite(static_cast<double>(v))) throw NanError("structure_loss: non-finite logits");

  const Plane<S> w = boundary_weights<S>(g, weight_window);

  const Eigen::Index n = z.size();
  PlaneD p(z.rows(), z.cols());
  double sum_w = 0.0, sum_wbce = 0.0, inter = 0.0, uni = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double zi = static_cast<double>(z.data()[i]);
    const double gi = static_cast<double>(g.values.data()[i]);
    const double wi = static_cast<double>(w.data()[i]);
    const double pi = sigmoid(zi);
    p.data()[i] = pi;
    // log(1 + exp(-|z|)) keeps the BCE finite at saturation.
    const double bce = std::max(zi, 0.0) - zi * gi + std::log1p(std::exp(-std::abs(zi)));
    sum_w += wi;
    sum_wbce += wi * bce;
    inter += wi * pi * gi;
    uni += wi * (pi + gi - pi * gi);
  }
  const double inter1 = inter + 1.0;
  const double uni1 = uni + 1.0;

  LossValue<S> out;
  out.value = sum_wbce / sum_w + 1.0 - inter1 / uni1;
  out.grad_wrt_logits = Tensor<S>(logits.dims);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double gi = static_cast<double>(g.values.data()[i]);
    const double wi = static_cast<double>(w.data()[i]);
    const double pi = p.data()[i];
    // d(bce)/dz = p - g already includes the sigmoid jacobian.
    const double dbce = wi * (pi - gi) / sum_w;
    // d(1 - I/U)/dp_i with dI/dp_i = w*g and dU/dp_i = w*(1-g).
    const double diou = -(wi * gi * uni1 - inter1 * wi * (1.0 - gi)) / (uni1 * uni1);
    out.grad_wrt_logits.data[static_cast<std::size_t>(i)] =
        static_cast<S>(dbce + diou * pi * (1.0 - pi));
  }
  return out;
}

template <typename S>
struct MultiLevelLoss {
  double value = 0.0;
  std::vector<Tensor<S>> grad_per_level;
};

/// Deep-supervision total: sum of the structure loss over exactly three
/// prediction levels, each already at the ground-truth resolution.
template <typename S>
MultiLevelLoss<S> total_loss(std::span<const Tensor<S>> logits_per_level, const BinMask& g) {
  if (logits_per_level.size() != 3)
    throw std::invalid_argument("total_loss: expected exactly three levels");
  MultiLevelLoss<S> out;
  for (const Tensor<S>& logits : logits_per_level) {
    LossValue<S> level = structure_loss(logits, g);
    out.value += level.value;
    out.grad_per_level.push_back(std::move(level.grad_wrt_logits));
  }
  return out;
}

}  // namespace bedseg
