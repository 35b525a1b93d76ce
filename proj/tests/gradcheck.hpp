#pragma once

// Central-finite-difference gradient checks for every differentiable op,
// in f64. Each *_instance(seed) builds one randomized case, computes the
// analytic gradient with the op's backward pass and compares against
// (L(x+h) - L(x-h)) / 2h on a sampled set of coordinates. The scalar loss is
// a fixed random projection of the op output. Returns the norm-scaled
// maximum deviation.

#include "bedseg/loss.hpp"
#include "bedseg/net.hpp"
#include "bedseg/net_ops.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace gradcheck {

using bedseg::BinMask;
using bedseg::Rng;
using bedseg::Tensor;

constexpr double kStep = 1e-4;

struct Coord {
  double* ptr;
  double analytic;
};

template <typename LossFn>
double rel_err(LossFn&& loss, std::vector<Coord>& coords, double h = kStep) {
  double max_diff = 0.0, max_an = 0.0, max_fd = 0.0;
  for (Coord& c : coords) {
    const double orig = *c.ptr;
    *c.ptr = orig + h;
    const double lp = loss();
    *c.ptr = orig - h;
    const double lm = loss();
    *c.ptr = orig;
    const double fd = (lp - lm) / (2.0 * h);
    max_diff = std::max(max_diff, std::fabs(fd - c.analytic));
    max_an = std::max(max_an, std::fabs(c.analytic));
    max_fd = std::max(max_fd, std::fabs(fd));
  }
  return max_diff / std::max({max_an, max_fd, 1e-10});
}

inline void fill_uniform(Tensor<double>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : t.data) v = rng.uniform(lo, hi);
}

/// Samples up to `max_count` coordinates of a tensor, pairing each value
/// pointer with its analytic gradient.
inline void sample_coords(Tensor<double>& value, const Tensor<double>& grad, Rng& rng,
                          std::vector<Coord>& out, std::size_t max_count = 24) {
  const std::size_t n = value.size();
  if (n <= max_count) {
    for (std::size_t i = 0; i < n; ++i) out.push_back({&value.data[i], grad.data[i]});
    return;
  }
  for (std::size_t s = 0; s < max_count; ++s) {
    const std::size_t i = rng.next_below(n);
    out.push_back({&value.data[i], grad.data[i]});
  }
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

/// Smallest |pre-activation| across ReLU caches; redrawing instances whose
/// margin is below ~1e-3 keeps the h=1e-4 stencil away from the kink.
inline double relu_margin(const typename bedseg::Relu<double>::Cache& c) {
  double m = 1e9;
  for (double v : c.x.data) m = std::min(m, std::fabs(v));
  return m;
}

// ---------------------------------------------------------------------------

inline double conv_instance(std::uint64_t seed) {
  Rng rng(seed, "gc.conv");
  const int in_ch = 1 + static_cast<int>(rng.next_below(3));
  const int out_ch = 1 + static_cast<int>(rng.next_below(3));
  const int k = 1 + static_cast<int>(rng.next_below(3));
  const int stride = 1 + static_cast<int>(rng.next_below(2));
  const int pad = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(k)));
  const int dil = 1 + static_cast<int>(rng.next_below(2));
  const int hw = 6 + static_cast<int>(rng.next_below(3));

  bedseg::Conv2d<double> conv;
  conv.setup(in_ch, out_ch, k, stride, pad, dil);
  conv.init(seed, "gc.conv.params");
  Tensor<double> x({static_cast<std::size_t>(in_ch), static_cast<std::size_t>(hw),
                    static_cast<std::size_t>(hw)});
  fill_uniform(x, rng);

  typename bedseg::Conv2d<double>::Cache cache;
  Tensor<double> y = conv.forward(x, cache);
  Tensor<double> proj(y.dims);
  fill_uniform(proj, rng);

  conv.gw.set_zero();
  conv.gb.set_zero();
  Tensor<double> dx = conv.backward(cache, proj, x.dims);

  std::vector<Coord> coords;
  sample_coords(x, dx, rng, coords);
  sample_coords(conv.w, conv.gw, rng, coords);
  sample_coords(conv.b, conv.gb, rng, coords);

  auto loss = [&] {
    typename bedseg::Conv2d<double>::Cache c;
    return dot(conv.forward(x, c), proj);
  };
  return rel_err(loss, coords);
}

inline double norm_instance(std::uint64_t seed) {
  Rng rng(seed, "gc.norm");
  const int ch = 1 + static_cast<int>(rng.next_below(4));
  const int hw = 3 + static_cast<int>(rng.next_below(4));
  bedseg::ChannelNorm<double> norm;
  norm.setup(ch);
  for (auto& v : norm.gamma.data) v = rng.uniform(0.5, 1.5);
  for (auto& v : norm.beta.data) v = rng.uniform(-0.5, 0.5);
  Tensor<double> x({static_cast<std::size_t>(ch), static_cast<std::size_t>(hw),
                    static_cast<std::size_t>(hw)});
  fill_uniform(x, rng);

  typename bedseg::ChannelNorm<double>::Cache cache;
  Tensor<double> y = norm.forward(x, cache);
  Tensor<double> proj(y.dims);
  fill_uniform(proj, rng);

  norm.ggamma.set_zero();
  norm.gbeta.set_zero();
  Tensor<double> dx = norm.backward(cache, proj);

  std::vector<Coord> coords;
  sample_coords(x, dx, rng, coords);
  sample_coords(norm.gamma, norm.ggamma, rng, coords);
  sample_coords(norm.beta, norm.gbeta, rng, coords);

  auto loss = [&] {
    typename bedseg::ChannelNorm<double>::Cache c;
    return dot(norm.forward(x, c), proj);
  };
  return rel_err(loss, coords);
}

inline double lora_instance(std::uint64_t seed) {
  Rng rng(seed, "gc.lora");
  const int in = 2 + static_cast<int>(rng.next_below(4));
  const int out = 2 + static_cast<int>(rng.next_below(4));
  const int rank = 1 + static_cast<int>(rng.next_below(3));
  const int hw = 3 + static_cast<int>(rng.next_below(3));
  bedseg::LoraLayer<double> layer;
  layer.setup(in, out, rank, 2.0, true);
  layer.init(seed, "gc.lora.params");
  fill_uniform(layer.B, rng, -0.5, 0.5);  // exercise a nonzero adapter
  Tensor<double> x({static_cast<std::size_t>(in), static_cast<std::size_t>(hw),
                    static_cast<std::size_t>(hw)});
  fill_uniform(x, rng);

  typename bedseg::LoraLayer<double>::Cache cache;
  Tensor<double> y = layer.forward(x, cache);
  Tensor<double> proj(y.dims);
  fill_uniform(proj, rng);

  layer.gA.set_zero();
  layer.gB.set_zero();
  Tensor<double> dx = layer.backward(cache, proj);

  std::vector<Coord> coords;
  sample_coords(x, dx, rng, coords);
  sample_coords(layer.A, layer.gA, rng, coords);
  sample_coords(layer.B, layer.gB, rng, coords);

  auto loss = [&] {
    typename bedseg::LoraLayer<double>::Cache c;
    return dot(layer.forward(x, c), proj);
  };
  return rel_err(loss, coords);
}

inline double rfb_instance(std::uint64_t seed) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(seed + attempt * 0x9E3779B97F4A7C15ull, "gc.rfb");
    const int in_ch = 2 + static_cast<int>(rng.next_below(4));
    bedseg::RfbBlock<double> rfb;
    rfb.setup(in_ch, 8);
    rfb.init(seed + attempt, "gc.rfb.params");
    Tensor<double> x({static_cast<std::size_t>(in_ch), 6, 6});
    fill_uniform(x, rng);

    typename bedseg::RfbBlock<double>::Cache cache;
    Tensor<double> y = rfb.forward(x, cache);
    const double margin = std::min({relu_margin(cache.r1), relu_margin(cache.r2),
                                    relu_margin(cache.r3), relu_margin(cache.rout)});
    if (margin < 2e-3 && attempt < 16) continue;

    Tensor<double> proj(y.dims);
    fill_uniform(proj, rng);
    Tensor<double> dx = rfb.backward(cache, proj);

    std::vector<Coord> coords;
    sample_coords(x, dx, rng, coords, 16);
    sample_coords(rfb.b0.w, rfb.b0.gw, rng, coords, 6);
    sample_coords(rfb.b1r.w, rfb.b1r.gw, rng, coords, 6);
    sample_coords(rfb.b1c.w, rfb.b1c.gw, rng, coords, 6);
    sample_coords(rfb.b2c.w, rfb.b2c.gw, rng, coords, 6);
    sample_coords(rfb.b3c.w, rfb.b3c.gw, rng, coords, 6);
    sample_coords(rfb.proj.w, rfb.proj.gw, rng, coords, 6);
    sample_coords(rfb.shortcut.w, rfb.shortcut.gw, rng, coords, 6);
    sample_coords(rfb.proj.b, rfb.proj.gb, rng, coords, 4);

    auto loss = [&] {
      typename bedseg::RfbBlock<double>::Cache c;
      return dot(rfb.forward(x, c), proj);
    };
    return rel_err(loss, coords);
  }
}

inline double decoder_instance(std::uint64_t seed) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(seed + attempt * 0x9E3779B97F4A7C15ull, "gc.decoder");
    const int ch = 4;
    bedseg::DecoderBlock<double> block;
    block.setup(ch);
    block.init(seed + attempt, "gc.decoder.params");
    Tensor<double> low({static_cast<std::size_t>(ch), 2, 2});
    Tensor<double> skip({static_cast<std::size_t>(ch), 4, 4});
    fill_uniform(low, rng);
    fill_uniform(skip, rng);

    typename bedseg::DecoderBlock<double>::Cache cache;
    Tensor<double> y = block.forward(low, skip, cache);
    const double margin = std::min(relu_margin(cache.r1), relu_margin(cache.r2));
    if (margin < 2e-3 && attempt < 16) continue;

    Tensor<double> proj(y.dims);
    fill_uniform(proj, rng);
    auto [dlow, dskip] = block.backward(cache, proj);

    std::vector<Coord> coords;
    sample_coords(low, dlow, rng, coords, 12);
    sample_coords(skip, dskip, rng, coords, 12);
    sample_coords(block.conv1.w, block.conv1.gw, rng, coords, 8);
    sample_coords(block.conv2.w, block.conv2.gw, rng, coords, 8);
    sample_coords(block.n1.gamma, block.n1.ggamma, rng, coords, 4);
    sample_coords(block.n2.beta, block.n2.gbeta, rng, coords, 4);

    auto loss = [&] {
      typename bedseg::DecoderBlock<double>::Cache c;
      return dot(block.forward(low, skip, c), proj);
    };
    return rel_err(loss, coords);
  }
}

inline double loss_instance(std::uint64_t seed) {
  Rng rng(seed, "gc.loss");
  const int h = 4 + static_cast<int>(rng.next_below(4));
  const int w = 4 + static_cast<int>(rng.next_below(4));
  bedseg::MaskPlane m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m(y, x) = rng.next_below(2) ? 1 : 0;
  const BinMask g{std::move(m)};
  Tensor<double> logits({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  fill_uniform(logits, rng, -3.0, 3.0);

  const bedseg::LossValue<double> value = bedseg::structure_loss(logits, g, 5);

  std::vector<Coord> coords;
  sample_coords(logits, value.grad_wrt_logits, rng, coords, 32);
  auto loss = [&] { return bedseg::structure_loss(logits, g, 5).value; };
  return rel_err(loss, coords);
}

}  // namespace gradcheck
