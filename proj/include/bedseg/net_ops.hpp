#pragma once

#include "bedseg/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <utility>

namespace bedseg {

inline int conv_out_extent(int in, int kernel, int stride, int pad, int dilation) {
  const int eff = dilation * (kernel - 1) + 1;
  const int out = (in + 2 * pad - eff) / stride + 1;
  if (out <= 0) throw DimensionError("conv: output extent would be empty");
  return out;
}

template <typename S>
void init_fan_in_uniform(Tensor<S>& t, std::size_t fan_in, Rng rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<S>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------
// im2col convolution
// ---------------------------------------------------------------------------

template <typename S>
void im2col(const Tensor<S>& x, int kernel, int stride, int pad, int dilation, int oh, int ow,
            Tensor<S>& cols) {
  const int ch = static_cast<int>(x.dims[0]);
  const int ih = static_cast<int>(x.dims[1]);
  const int iw = static_cast<int>(x.dims[2]);
  S* out = cols.data.data();
  for (int c = 0; c < ch; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const S* src = x.data.data() + static_cast<std::size_t>(c) * ih * iw;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky * dilation;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx * dilation;
            *out++ = (iy >= 0 && iy < ih && ix >= 0 && ix < iw)
                         ? src[static_cast<std::size_t>(iy) * iw + ix]
                         : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im(const Tensor<S>& cols, int kernel, int stride, int pad, int dilation, int oh, int ow,
            Tensor<S>& dx) {
  const int ch = static_cast<int>(dx.dims[0]);
  const int ih = static_cast<int>(dx.dims[1]);
  const int iw = static_cast<int>(dx.dims[2]);
  const S* in = cols.data.data();
  for (int c = 0; c < ch; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        S* dst = dx.data.data() + static_cast<std::size_t>(c) * ih * iw;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky * dilation;
          for (int ox = 0; ox < ow; ++ox, ++in) {
            const int ix = ox * stride - pad + kx * dilation;
            if (iy >= 0 && iy < ih && ix >= 0 && ix < iw)
              dst[static_cast<std::size_t>(iy) * iw + ix] += *in;
          }
        }
      }
    }
  }
}

/// 2-D convolution over [C,H,W] tensors (im2col + GEMM).
template <typename S>
struct Conv2d {
  int in_ch = 0, out_ch = 0, kernel = 1, stride = 1, pad = 0, dilation = 1;
  Tensor<S> w;  // [out, in, k, k]
  Tensor<S> b;  // [out]
  Tensor<S> gw, gb;
  bool trainable = true;

  void setup(int in, int out, int k, int s = 1, int p = 0, int d = 1) {
    in_ch = in;
    out_ch = out;
    kernel = k;
    stride = s;
    pad = p;
    dilation = d;
    const auto su = [](int v) { return static_cast<std::size_t>(v); };
    w = Tensor<S>({su(out), su(in), su(k), su(k)});
    b = Tensor<S>({su(out)});
    gw = Tensor<S>(w.dims);
    gb = Tensor<S>(b.dims);
  }

  void init(std::uint64_t seed, const std::string& name) {
    const std::size_t fan_in = static_cast<std::size_t>(in_ch) * kernel * kernel;
    init_fan_in_uniform(w, fan_in, Rng(seed, name + ".weight"));
    init_fan_in_uniform(b, fan_in, Rng(seed, name + ".bias"));
  }

  struct Cache {
    Tensor<S> cols;  // [in*k*k, oh*ow]
    int oh = 0, ow = 0;
  };

  Tensor<S> forward(const Tensor<S>& x, Cache& cache) const {
    if (x.rank() != 3 || static_cast<int>(x.dims[0]) != in_ch)
      throw DimensionError("conv: bad input shape");
    const int ih = static_cast<int>(x.dims[1]);
    const int iw = static_cast<int>(x.dims[2]);
    cache.oh = conv_out_extent(ih, kernel, stride, pad, dilation);
    cache.ow = conv_out_extent(iw, kernel, stride, pad, dilation);
    const std::size_t k2 = static_cast<std::size_t>(in_ch) * kernel * kernel;
    const std::size_t n = static_cast<std::size_t>(cache.oh) * cache.ow;
    cache.cols = Tensor<S>({k2, n});
    im2col(x, kernel, stride, pad, dilation, cache.oh, cache.ow, cache.cols);

    Tensor<S> y({static_cast<std::size_t>(out_ch), static_cast<std::size_t>(cache.oh),
                 static_cast<std::size_t>(cache.ow)});
    auto ym = y.as_matrix(out_ch, n);
    ym.noalias() = w.as_matrix(out_ch, k2) * cache.cols.as_matrix(k2, n);
    ym.colwise() += b.as_vector();
    return y;
  }

  /// Accumulates gw/gb and returns dL/dx. `input_dims` are the forward
  /// input's [C,H,W] dims.
  Tensor<S> backward(const Cache& cache, const Tensor<S>& dy,
                     const std::vector<std::size_t>& input_dims) {
    const std::size_t k2 = static_cast<std::size_t>(in_ch) * kernel * kernel;
    const std::size_t n = static_cast<std::size_t>(cache.oh) * cache.ow;
    auto dym = dy.as_matrix(out_ch, n);
    gw.as_matrix(out_ch, k2).noalias() += dym * cache.cols.as_matrix(k2, n).transpose();
    gb.as_vector() += dym.rowwise().sum();

    Tensor<S> dcols({k2, n});
    dcols.as_matrix(k2, n).noalias() = w.as_matrix(out_ch, k2).transpose() * dym;
    Tensor<S> dx(input_dims);
    col2im(dcols, kernel, stride, pad, dilation, cache.oh, cache.ow, dx);
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Per-channel affine normalization over spatial positions. Statistics are
// computed on the single sample, so inference does not depend on batch
// composition.
// ---------------------------------------------------------------------------

template <typename S>
struct ChannelNorm {
  Tensor<S> gamma, beta, ggamma, gbeta;  // [C]
  S eps = static_cast<S>(1e-5);
  bool trainable = true;

  void setup(int channels) {
    gamma = Tensor<S>({static_cast<std::size_t>(channels)});
    std::fill(gamma.data.begin(), gamma.data.end(), S(1));
    beta = Tensor<S>({static_cast<std::size_t>(channels)});
    ggamma = Tensor<S>(gamma.dims);
    gbeta = Tensor<S>(beta.dims);
  }

  struct Cache {
    Tensor<S> xhat;
    std::vector<S> inv_std;
  };

  Tensor<S> forward(const Tensor<S>& x, Cache& cache) const {
    if (x.rank() != 3 || x.dims[0] != gamma.size()) throw DimensionError("norm: bad input shape");
    const std::size_t c = x.dims[0];
    const std::size_t n = x.dims[1] * x.dims[2];
    cache.xhat = Tensor<S>(x.dims);
    cache.inv_std.resize(c);
    Tensor<S> y(x.dims);
    for (std::size_t ci = 0; ci < c; ++ci) {
      const S* xc = x.data.data() + ci * n;
      S* hc = cache.xhat.data.data() + ci * n;
      S* yc = y.data.data() + ci * n;
      S mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += xc[i];
      mean /= static_cast<S>(n);
      S var = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const S d = xc[i] - mean;
        var += d * d;
      }
      var /= static_cast<S>(n);
      const S inv = S(1) / std::sqrt(var + eps);
      cache.inv_std[ci] = inv;
      for (std::size_t i = 0; i < n; ++i) {
        hc[i] = (xc[i] - mean) * inv;
        yc[i] = gamma.data[ci] * hc[i] + beta.data[ci];
      }
    }
    return y;
  }

  Tensor<S> backward(const Cache& cache, const Tensor<S>& dy) {
    const std::size_t c = gamma.size();
    const std::size_t n = dy.dims[1] * dy.dims[2];
    Tensor<S> dx(dy.dims);
    for (std::size_t ci = 0; ci < c; ++ci) {
      const S* dyc = dy.data.data() + ci * n;
      const S* hc = cache.xhat.data.data() + ci * n;
      S* dxc = dx.data.data() + ci * n;
      S sum_dy = 0, sum_dyh = 0;
      for (std::size_t i = 0; i < n; ++i) {
        sum_dy += dyc[i];
        sum_dyh += dyc[i] * hc[i];
      }
      ggamma.data[ci] += sum_dyh;
      gbeta.data[ci] += sum_dy;
      const S gscale = gamma.data[ci] * cache.inv_std[ci];
      const S mean_dy = sum_dy / static_cast<S>(n);
      const S mean_dyh = sum_dyh / static_cast<S>(n);
      for (std::size_t i = 0; i < n; ++i)
        dxc[i] = gscale * (dyc[i] - mean_dy - hc[i] * mean_dyh);
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

template <typename S>
struct Relu {
  struct Cache {
    Tensor<S> x;  // pre-activation
  };
  static Tensor<S> forward(const Tensor<S>& x, Cache& cache) {
    cache.x = x;
    Tensor<S> y(x.dims);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > S(0) ? x.data[i] : S(0);
    return y;
  }
  static Tensor<S> backward(const Cache& cache, const Tensor<S>& dy) {
    Tensor<S> dx(dy.dims);
    for (std::size_t i = 0; i < dy.size(); ++i)
      dx.data[i] = cache.x.data[i] > S(0) ? dy.data[i] : S(0);
    return dx;
  }
};

// ---------------------------------------------------------------------------
// LoRA-adapted pointwise (1x1) projection: y = (W + scale*B*A) x + b with W
// and b frozen; only A and B learn. B starts at zero so a fresh layer is an
// exact no-op on top of the base projection.
// ---------------------------------------------------------------------------

template <typename S>
struct LoraLayer {
  Tensor<S> base_w;  // [out, in], frozen
  Tensor<S> base_b;  // [out], frozen
  Tensor<S> A, B;    // [rank, in], [out, rank]
  Tensor<S> gA, gB;
  S scale = 1;
  bool enabled = true;

  void setup(int in, int out, int rank, S alpha, bool lora_enabled) {
    const auto su = [](int v) { return static_cast<std::size_t>(v); };
    base_w = Tensor<S>({su(out), su(in)});
    base_b = Tensor<S>({su(out)});
    enabled = lora_enabled;
    if (enabled) {
      A = Tensor<S>({su(rank), su(in)});
      B = Tensor<S>({su(out), su(rank)});  // zero-init: adaptation starts as a no-op
      gA = Tensor<S>(A.dims);
      gB = Tensor<S>(B.dims);
      scale = alpha / static_cast<S>(rank);
    }
  }

  void init(std::uint64_t seed, const std::string& name) {
    const std::size_t in = base_w.dims[1];
    init_fan_in_uniform(base_w, in, Rng(seed, name + ".weight"));
    init_fan_in_uniform(base_b, in, Rng(seed, name + ".bias"));
    if (enabled) init_fan_in_uniform(A, in, Rng(seed, name + ".lora_a"));
  }

  struct Cache {
    Tensor<S> x;      // [in, h, w]
    Tensor<S> w_eff;  // [out, in]
  };

  Tensor<S> forward(const Tensor<S>& x, Cache& cache) const {
    if (x.rank() != 3 || x.dims[0] != base_w.dims[1]) throw DimensionError("lora: bad input shape");
    const std::size_t out = base_w.dims[0];
    const std::size_t in = base_w.dims[1];
    const std::size_t n = x.dims[1] * x.dims[2];
    cache.x = x;
    cache.w_eff = base_w;
    if (enabled)
      cache.w_eff.as_matrix(out, in).noalias() +=
          scale * (B.as_matrix(out, B.dims[1]) * A.as_matrix(A.dims[0], in));

    Tensor<S> y({out, x.dims[1], x.dims[2]});
    auto ym = y.as_matrix(out, n);
    ym.noalias() = cache.w_eff.as_matrix(out, in) * x.as_matrix(in, n);
    ym.colwise() += base_b.as_vector();
    return y;
  }

  Tensor<S> backward(const Cache& cache, const Tensor<S>& dy) {
    const std::size_t out = base_w.dims[0];
    const std::size_t in = base_w.dims[1];
    const std::size_t n = cache.x.dims[1] * cache.x.dims[2];
    auto dym = dy.as_matrix(out, n);
    if (enabled) {
      const std::size_t r = A.dims[0];
      Tensor<S> dweff({out, in});
      dweff.as_matrix(out, in).noalias() = dym * cache.x.as_matrix(in, n).transpose();
      gA.as_matrix(r, in).noalias() +=
          scale * (B.as_matrix(out, r).transpose() * dweff.as_matrix(out, in));
      gB.as_matrix(out, r).noalias() +=
          scale * (dweff.as_matrix(out, in) * A.as_matrix(r, in).transpose());
    }
    Tensor<S> dx(cache.x.dims);
    dx.as_matrix(in, n).noalias() = cache.w_eff.as_matrix(out, in).transpose() * dym;
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Bilinear interpolation (align_corners = false, half-pixel centers,
// edge-replicated sampling)
// ---------------------------------------------------------------------------

struct BilinearAxis {
  std::vector<int> i0, i1;
  std::vector<double> w1;  // weight of i1; i0 gets 1 - w1
};

inline BilinearAxis bilinear_axis(int in, int out) {
  BilinearAxis ax;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.w1.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double src = (o + 0.5) * scale - 0.5;
    const double f = std::floor(src);
    const int lo = static_cast<int>(f);
    ax.w1[o] = src - f;
    ax.i0[o] = std::clamp(lo, 0, in - 1);
    ax.i1[o] = std::clamp(lo + 1, 0, in - 1);
  }
  return ax;
}

template <typename S>
Tensor<S> bilinear_upsample(const Tensor<S>& x, int out_h, int out_w) {
  if (x.rank() != 3) throw DimensionError("bilinear: expected [C,H,W]");
  const int c = static_cast<int>(x.dims[0]);
  const int ih = static_cast<int>(x.dims[1]);
  const int iw = static_cast<int>(x.dims[2]);
  const BilinearAxis ay = bilinear_axis(ih, out_h);
  const BilinearAxis axx = bilinear_axis(iw, out_w);
  Tensor<S> y({static_cast<std::size_t>(c), static_cast<std::size_t>(out_h),
               static_cast<std::size_t>(out_w)});
  for (int ci = 0; ci < c; ++ci) {
    auto xc = x.channel(ci);
    auto yc = y.channel(ci);
    for (int oy = 0; oy < out_h; ++oy) {
      const S wy = static_cast<S>(ay.w1[oy]);
      for (int ox = 0; ox < out_w; ++ox) {
        const S wx = static_cast<S>(axx.w1[ox]);
        const S top = (S(1) - wx) * xc(ay.i0[oy], axx.i0[ox]) + wx * xc(ay.i0[oy], axx.i1[ox]);
        const S bot = (S(1) - wx) * xc(ay.i1[oy], axx.i0[ox]) + wx * xc(ay.i1[oy], axx.i1[ox]);
        yc(oy, ox) = (S(1) - wy) * top + wy * bot;
      }
    }
  }
  return y;
}

template <typename S>
Tensor<S> bilinear_upsample_backward(const Tensor<S>& dy, int in_h, int in_w) {
  const int c = static_cast<int>(dy.dims[0]);
  const int oh = static_cast<int>(dy.dims[1]);
  const int ow = static_cast<int>(dy.dims[2]);
  const BilinearAxis ay = bilinear_axis(in_h, oh);
  const BilinearAxis axx = bilinear_axis(in_w, ow);
  Tensor<S> dx({static_cast<std::size_t>(c), static_cast<std::size_t>(in_h),
                static_cast<std::size_t>(in_w)});
  for (int ci = 0; ci < c; ++ci) {
    auto dyc = dy.channel(ci);
    auto dxc = dx.channel(ci);
    for (int oy = 0; oy < oh; ++oy) {
      const S wy = static_cast<S>(ay.w1[oy]);
      for (int ox = 0; ox < ow; ++ox) {
        const S wx = static_cast<S>(axx.w1[ox]);
        const S d = dyc(oy, ox);
        dxc(ay.i0[oy], axx.i0[ox]) += (S(1) - wy) * (S(1) - wx) * d;
        dxc(ay.i0[oy], axx.i1[ox]) += (S(1) - wy) * wx * d;
        dxc(ay.i1[oy], axx.i0[ox]) += wy * (S(1) - wx) * d;
        dxc(ay.i1[oy], axx.i1[ox]) += wy * wx * d;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Channel concatenation
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dims[1] != b.dims[1] || a.dims[2] != b.dims[2])
    throw DimensionError("concat: spatial dims mismatch");
  Tensor<S> out({a.dims[0] + b.dims[0], a.dims[1], a.dims[2]});
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
  return out;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> split_channels(const Tensor<S>& d, std::size_t first_channels) {
  Tensor<S> a({first_channels, d.dims[1], d.dims[2]});
  Tensor<S> b({d.dims[0] - first_channels, d.dims[1], d.dims[2]});
  std::copy(d.data.begin(), d.data.begin() + a.data.size(), a.data.begin());
  std::copy(d.data.begin() + a.data.size(), d.data.end(), b.data.begin());
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Patch embedding: non-overlapping k x k, stride k convolution implemented
// with direct loops in a fixed order. The RGB weight slice is frozen; the
// edge slice (channel 4) learns. Keeping the channel loop outermost makes a
// zeroed fourth channel reproduce the 3-channel arithmetic exactly.
// ---------------------------------------------------------------------------

template <typename S>
struct EmbedConv {
  int in_ch = 3, out_ch = 0, kernel = 4, stride = 4;
  Tensor<S> w_rgb;   // [out, 3, k, k], frozen
  Tensor<S> w_edge;  // [out, 1, k, k] when in_ch == 4; trainable
  Tensor<S> b;       // [out], frozen
  Tensor<S> gw_edge;
  // optional low-rank adapter over the flattened patch vector
  bool lora = false;
  S lora_scale = 1;
  Tensor<S> lora_a, lora_b, g_lora_a, g_lora_b;  // [r, in*k*k], [out, r]

  void setup(int in, int out, int k, bool lora_on, int rank, S alpha) {
    in_ch = in;
    out_ch = out;
    kernel = k;
    stride = k;
    const auto su = [](int v) { return static_cast<std::size_t>(v); };
    w_rgb = Tensor<S>({su(out), 3, su(k), su(k)});
    b = Tensor<S>({su(out)});
    if (in == 4) {
      w_edge = Tensor<S>({su(out), 1, su(k), su(k)});
      gw_edge = Tensor<S>(w_edge.dims);
    }
    lora = lora_on;
    if (lora) {
      lora_a = Tensor<S>({su(rank), su(in * k * k)});
      lora_b = Tensor<S>({su(out), su(rank)});
      g_lora_a = Tensor<S>(lora_a.dims);
      g_lora_b = Tensor<S>(lora_b.dims);
      lora_scale = alpha / static_cast<S>(rank);
    }
  }

  void init(std::uint64_t seed, const std::string& name) {
    // The RGB slice is always drawn from the same stream, and the edge slice
    // is its channel-wise mean, so a 4-channel model is exactly the expanded
    // 3-channel model.
    const std::size_t fan_in = static_cast<std::size_t>(3) * kernel * kernel;
    init_fan_in_uniform(w_rgb, fan_in, Rng(seed, name + ".weight"));
    init_fan_in_uniform(b, fan_in, Rng(seed, name + ".bias"));
    if (in_ch == 4) set_edge_to_channel_mean();
    if (lora)
      init_fan_in_uniform(lora_a, static_cast<std::size_t>(in_ch) * kernel * kernel,
                          Rng(seed, name + ".lora_a"));
  }

  void set_edge_to_channel_mean() {
    const std::size_t k2 = static_cast<std::size_t>(kernel) * kernel;
    for (int co = 0; co < out_ch; ++co)
      for (std::size_t i = 0; i < k2; ++i) {
        const S* base = w_rgb.data.data() + static_cast<std::size_t>(co) * 3 * k2;
        w_edge.data[static_cast<std::size_t>(co) * k2 + i] =
            (base[i] + base[k2 + i] + base[2 * k2 + i]) / S(3);
      }
  }

  struct Cache {
    Tensor<S> x;
    int oh = 0, ow = 0;
  };

  Tensor<S> forward(const Tensor<S>& x, Cache& cache) const {
    if (x.rank() != 3 || static_cast<int>(x.dims[0]) != in_ch)
      throw DimensionError("embed: bad input shape");
    const int ih = static_cast<int>(x.dims[1]);
    const int iw = static_cast<int>(x.dims[2]);
    if (ih % kernel != 0 || iw % kernel != 0)
      throw DimensionError("embed: input not divisible by patch size");
    const int oh = ih / kernel;
    const int ow = iw / kernel;
    cache.x = x;
    cache.oh = oh;
    cache.ow = ow;

    const std::size_t k2 = static_cast<std::size_t>(kernel) * kernel;
    Tensor<S> y({static_cast<std::size_t>(out_ch), static_cast<std::size_t>(oh),
                 static_cast<std::size_t>(ow)});
    std::vector<S> patch(static_cast<std::size_t>(in_ch) * k2);
    std::vector<S> u(lora ? lora_a.dims[0] : 0);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        for (int j = 0; j < in_ch; ++j) {
          auto xc = x.channel(j);
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx)
              patch[j * k2 + static_cast<std::size_t>(ky) * kernel + kx] =
                  xc(oy * stride + ky, ox * stride + kx);
        }
        if (lora) {
          for (std::size_t r = 0; r < u.size(); ++r) {
            S acc = 0;
            const S* ar = lora_a.data.data() + r * patch.size();
            for (std::size_t i = 0; i < patch.size(); ++i) acc += ar[i] * patch[i];
            u[r] = acc;
          }
        }
        for (int co = 0; co < out_ch; ++co) {
          S acc = b.data[co];
          for (int j = 0; j < in_ch; ++j) {
            const S* wp = (j < 3) ? w_rgb.data.data() + (static_cast<std::size_t>(co) * 3 + j) * k2
                                  : w_edge.data.data() + static_cast<std::size_t>(co) * k2;
            const S* pp = patch.data() + j * k2;
            for (std::size_t i = 0; i < k2; ++i) acc += wp[i] * pp[i];
          }
          if (lora) {
            S delta = 0;
            const S* br = lora_b.data.data() + static_cast<std::size_t>(co) * u.size();
            for (std::size_t r = 0; r < u.size(); ++r) delta += br[r] * u[r];
            acc += lora_scale * delta;
          }
          y.channel(co)(oy, ox) = acc;
        }
      }
    }
    return y;
  }

  /// Accumulates the trainable gradients (edge slice and adapter). No dx:
  /// this is the input layer.
  void backward(const Cache& cache, const Tensor<S>& dy) {
    const std::size_t k2 = static_cast<std::size_t>(kernel) * kernel;
    std::vector<S> patch(static_cast<std::size_t>(in_ch) * k2);
    std::vector<S> u(lora ? lora_a.dims[0] : 0);
    for (int oy = 0; oy < cache.oh; ++oy) {
      for (int ox = 0; ox < cache.ow; ++ox) {
        for (int j = 0; j < in_ch; ++j) {
          auto xc = cache.x.channel(j);
          for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx)
              patch[j * k2 + static_cast<std::size_t>(ky) * kernel + kx] =
                  xc(oy * stride + ky, ox * stride + kx);
        }
        if (in_ch == 4) {
          const S* pe = patch.data() + 3 * k2;
          for (int co = 0; co < out_ch; ++co) {
            const S d = dy.channel(co)(oy, ox);
            S* ge = gw_edge.data.data() + static_cast<std::size_t>(co) * k2;
            for (std::size_t i = 0; i < k2; ++i) ge[i] += d * pe[i];
          }
        }
        if (lora) {
          const std::size_t rank = u.size();
          for (std::size_t r = 0; r < rank; ++r) {
            S acc = 0;
            const S* ar = lora_a.data.data() + r * patch.size();
            for (std::size_t i = 0; i < patch.size(); ++i) acc += ar[i] * patch[i];
            u[r] = acc;
          }
          // dB = scale * dy_patch (outer) u ; dA = scale * (B^T dy_patch) (outer) patch
          for (std::size_t r = 0; r < rank; ++r) {
            S bt_dy = 0;
            for (int co = 0; co < out_ch; ++co)
              bt_dy += lora_b.data[static_cast<std::size_t>(co) * rank + r] *
                       dy.channel(co)(oy, ox);
            S* gar = g_lora_a.data.data() + r * patch.size();
            const S coef = lora_scale * bt_dy;
            for (std::size_t i = 0; i < patch.size(); ++i) gar[i] += coef * patch[i];
          }
          for (int co = 0; co < out_ch; ++co) {
            const S d = lora_scale * dy.channel(co)(oy, ox);
            S* gbr = g_lora_b.data.data() + static_cast<std::size_t>(co) * rank;
            for (std::size_t r = 0; r < rank; ++r) gbr[r] += d * u[r];
          }
        }
      }
    }
  }

  /// Serializes as one fused [out, in, k, k] tensor.
  Tensor<S> fused_weight() const {
    const std::size_t k2 = static_cast<std::size_t>(kernel) * kernel;
    Tensor<S> fused({static_cast<std::size_t>(out_ch), static_cast<std::size_t>(in_ch),
                     static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)});
    for (int co = 0; co < out_ch; ++co) {
      std::copy_n(w_rgb.data.data() + static_cast<std::size_t>(co) * 3 * k2, 3 * k2,
                  fused.data.data() + static_cast<std::size_t>(co) * in_ch * k2);
      if (in_ch == 4)
        std::copy_n(w_edge.data.data() + static_cast<std::size_t>(co) * k2, k2,
                    fused.data.data() + (static_cast<std::size_t>(co) * in_ch + 3) * k2);
    }
    return fused;
  }

  void load_fused_weight(const Tensor<S>& fused) {
    if (fused.dims != std::vector<std::size_t>{static_cast<std::size_t>(out_ch),
                                               static_cast<std::size_t>(in_ch),
                                               static_cast<std::size_t>(kernel),
                                               static_cast<std::size_t>(kernel)})
      throw DimensionError("embed: fused weight shape mismatch");
    const std::size_t k2 = static_cast<std::size_t>(kernel) * kernel;
    for (int co = 0; co < out_ch; ++co) {
      std::copy_n(fused.data.data() + static_cast<std::size_t>(co) * in_ch * k2, 3 * k2,
                  w_rgb.data.data() + static_cast<std::size_t>(co) * 3 * k2);
      if (in_ch == 4)
        std::copy_n(fused.data.data() + (static_cast<std::size_t>(co) * in_ch + 3) * k2, k2,
                    w_edge.data.data() + static_cast<std::size_t>(co) * k2);
    }
  }
};

/// Expands pretrained 3-input-channel patch-embed weights to 4 channels:
/// channels 1-3 are copied, channel 4 is their element-wise mean.
template <typename S>
Tensor<S> expand_patch_embed(const Tensor<S>& w) {
  if (w.rank() != 4 || w.dims[1] != 3)
    throw DimensionError("expand_patch_embed: expected [C_out,3,k,k]");
  const std::size_t out = w.dims[0];
  const std::size_t k2 = w.dims[2] * w.dims[3];
  Tensor<S> e({out, 4, w.dims[2], w.dims[3]});
  for (std::size_t co = 0; co < out; ++co) {
    const S* src = w.data.data() + co * 3 * k2;
    S* dst = e.data.data() + co * 4 * k2;
    std::copy_n(src, 3 * k2, dst);
    for (std::size_t i = 0; i < k2; ++i)
      dst[3 * k2 + i] = (src[i] + src[k2 + i] + src[2 * k2 + i]) / S(3);
  }
  return e;
}

}  // namespace bedseg
