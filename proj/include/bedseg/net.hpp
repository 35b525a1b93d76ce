#pragma once

#include "bedseg/checkpoint.hpp"
#include "bedseg/loss.hpp"
#include "bedseg/net_ops.hpp"
#include "bedseg/structmap.hpp"

#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace bedseg {

/// What feeds the fourth input channel (the depth ablation axis).
enum class DepthInput { none, raw_depth, edge_map };

std::string_view to_string(DepthInput d);
DepthInput depth_input_from_string(std::string_view s);

struct NetConfig {
  int input_size = 64;
  std::array<int, 4> channels_per_level{8, 16, 32, 64};
  int rfb_channels = 16;
  bool lora_enabled = true;
  int lora_rank = 4;
  float lora_alpha = 4.0f;
  bool lora_patch_embed = false;
  std::uint64_t seed = 42;
  int epochs = 25;
  int batch = 8;
  double lr = 5e-3;
  double weight_decay = 5e-4;
  DepthInput depth_input = DepthInput::edge_map;

  int in_channels() const { return depth_input == DepthInput::none ? 3 : 4; }

  void validate() const {
    if (input_size <= 0 || input_size % 32 != 0)
      throw std::invalid_argument("config: input_size must be a positive multiple of 32");
    for (int i = 0; i < 4; ++i) {
      if (channels_per_level[i] <= 0)
        throw std::invalid_argument("config: channel counts must be positive");
      if (i > 0 && channels_per_level[i] <= channels_per_level[i - 1])
        throw std::invalid_argument("config: channels must strictly increase across levels");
    }
    if (rfb_channels < 4 || rfb_channels % 4 != 0)
      throw std::invalid_argument("config: rfb_channels must be a positive multiple of 4");
    if (lora_rank < 1) throw std::invalid_argument("config: lora_rank must be >= 1");
    if (epochs < 0 || batch < 1) throw std::invalid_argument("config: bad training sizes");
    if (!(lr >= 0.0) || !(weight_decay >= 0.0))
      throw std::invalid_argument("config: bad optimizer scalars");
  }
};

/// Pipeline settings stored alongside the weights so prediction is
/// self-contained.
struct PipelineMeta {
  ComponentSet components{};
  float epsilon = 0.01f;
};

/// Four hierarchical feature levels at strides 4, 8, 16, 32.
template <typename S>
struct FeaturePyramid {
  std::array<Tensor<S>, 4> levels;
};

namespace detail {

template <typename S>
void add_into(Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_shape(b)) throw DimensionError("add_into: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder stage: 3x3 stride-2 conv -> norm -> ReLU -> LoRA-adapted pointwise
// projection. Conv, norm and the projection base are frozen; only the
// adapter learns.
// ---------------------------------------------------------------------------

template <typename S>
struct EncoderStage {
  Conv2d<S> conv;
  ChannelNorm<S> norm;
  LoraLayer<S> proj;

  void setup(int in_ch, int out_ch, const NetConfig& cfg) {
    conv.setup(in_ch, out_ch, 3, 2, 1);
    conv.trainable = false;
    norm.setup(out_ch);
    norm.trainable = false;
    proj.setup(out_ch, out_ch, cfg.lora_rank, static_cast<S>(cfg.lora_alpha), cfg.lora_enabled);
  }

  void init(std::uint64_t seed, const std::string& name) {
    conv.init(seed, name + ".conv");
    proj.init(seed, name + ".proj");
  }

  struct Cache {
    typename Conv2d<S>::Cache conv;
    typename ChannelNorm<S>::Cache norm;
    typename Relu<S>::Cache relu;
    typename LoraLayer<S>::Cache proj;
    std::vector<std::size_t> in_dims;
  };

  Tensor<S> forward(const Tensor<S>& x, Cache& c) const {
    c.in_dims = x.dims;
    Tensor<S> t = conv.forward(x, c.conv);
    t = norm.forward(t, c.norm);
    t = Relu<S>::forward(t, c.relu);
    return proj.forward(t, c.proj);
  }

  Tensor<S> backward(Cache& c, const Tensor<S>& dy) {
    Tensor<S> d = proj.backward(c.proj, dy);
    d = Relu<S>::backward(c.relu, d);
    d = norm.backward(c.norm, d);
    return conv.backward(c.conv, d, c.in_dims);
  }
};

// ---------------------------------------------------------------------------
// Receptive field block: a 1x1 branch plus three 1x1 -> ReLU -> dilated 3x3
// branches (dilations 1, 3, 5), concatenated and projected, with a 1x1
// residual shortcut and a final ReLU. Preserves spatial dims, outputs
// rfb_channels.
// ---------------------------------------------------------------------------

template <typename S>
struct RfbBlock {
  Conv2d<S> b0;
  Conv2d<S> b1r, b1c;
  Conv2d<S> b2r, b2c;
  Conv2d<S> b3r, b3c;
  Conv2d<S> proj;
  Conv2d<S> shortcut;
  int branch_ch = 0;

  void setup(int in_ch, int rfb_ch) {
    if (rfb_ch < 4 || rfb_ch % 4 != 0)
      throw std::invalid_argument("rfb: channels must be a positive multiple of 4");
    branch_ch = rfb_ch / 4;
    b0.setup(in_ch, branch_ch, 1);
    b1r.setup(in_ch, branch_ch, 1);
    b1c.setup(branch_ch, branch_ch, 3, 1, 1, 1);
    b2r.setup(in_ch, branch_ch, 1);
    b2c.setup(branch_ch, branch_ch, 3, 1, 3, 3);
    b3r.setup(in_ch, branch_ch, 1);
    b3c.setup(branch_ch, branch_ch, 3, 1, 5, 5);
    proj.setup(rfb_ch, rfb_ch, 1);
    shortcut.setup(in_ch, rfb_ch, 1);
  }

  void init(std::uint64_t seed, const std::string& name) {
    b0.init(seed, name + ".b0");
    b1r.init(seed, name + ".b1.reduce");
    b1c.init(seed, name + ".b1.conv");
    b2r.init(seed, name + ".b2.reduce");
    b2c.init(seed, name + ".b2.conv");
    b3r.init(seed, name + ".b3.reduce");
    b3c.init(seed, name + ".b3.conv");
    proj.init(seed, name + ".proj");
    shortcut.init(seed, name + ".shortcut");
  }

  struct Cache {
    typename Conv2d<S>::Cache c0, c1r, c1c, c2r, c2c, c3r, c3c, cproj, cshort;
    typename Relu<S>::Cache r1, r2, r3, rout;
    std::vector<std::size_t> in_dims, branch_dims, cat_dims;
  };

  Tensor<S> forward(const Tensor<S>& x, Cache& c) const {
    c.in_dims = x.dims;
    Tensor<S> y0 = b0.forward(x, c.c0);
    Tensor<S> y1 = b1c.forward(Relu<S>::forward(b1r.forward(x, c.c1r), c.r1), c.c1c);
    Tensor<S> y2 = b2c.forward(Relu<S>::forward(b2r.forward(x, c.c2r), c.r2), c.c2c);
    Tensor<S> y3 = b3c.forward(Relu<S>::forward(b3r.forward(x, c.c3r), c.r3), c.c3c);
    c.branch_dims = y0.dims;

    Tensor<S> cat({4 * y0.dims[0], y0.dims[1], y0.dims[2]});
    const std::size_t block = y0.size();
    std::copy(y0.data.begin(), y0.data.end(), cat.data.begin());
    std::copy(y1.data.begin(), y1.data.end(), cat.data.begin() + block);
    std::copy(y2.data.begin(), y2.data.end(), cat.data.begin() + 2 * block);
    std::copy(y3.data.begin(), y3.data.end(), cat.data.begin() + 3 * block);
    c.cat_dims = cat.dims;

    Tensor<S> s = proj.forward(cat, c.cproj);
    detail::add_into(s, shortcut.forward(x, c.cshort));
    return Relu<S>::forward(s, c.rout);
  }

  Tensor<S> backward(Cache& c, const Tensor<S>& dy) {
    Tensor<S> d = Relu<S>::backward(c.rout, dy);
    Tensor<S> dcat = proj.backward(c.cproj, d, c.cat_dims);
    Tensor<S> dx = shortcut.backward(c.cshort, d, c.in_dims);

    const std::size_t block = shape_count(c.branch_dims);
    auto branch_slice = [&](int i) {
      Tensor<S> t(c.branch_dims);
      std::copy_n(dcat.data.begin() + i * block, block, t.data.begin());
      return t;
    };
    detail::add_into(dx, b0.backward(c.c0, branch_slice(0), c.in_dims));
    {
      Tensor<S> dt = b1c.backward(c.c1c, branch_slice(1), c.branch_dims);
      dt = Relu<S>::backward(c.r1, dt);
      detail::add_into(dx, b1r.backward(c.c1r, dt, c.in_dims));
    }
    {
      Tensor<S> dt = b2c.backward(c.c2c, branch_slice(2), c.branch_dims);
      dt = Relu<S>::backward(c.r2, dt);
      detail::add_into(dx, b2r.backward(c.c2r, dt, c.in_dims));
    }
    {
      Tensor<S> dt = b3c.backward(c.c3c, branch_slice(3), c.branch_dims);
      dt = Relu<S>::backward(c.r3, dt);
      detail::add_into(dx, b3r.backward(c.c3r, dt, c.in_dims));
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Decoder block: bilinear 2x upsample of the lower level, concatenation with
// the skip level, then two Conv-Norm-ReLU stages.
// ---------------------------------------------------------------------------

template <typename S>
struct DecoderBlock {
  Conv2d<S> conv1;
  ChannelNorm<S> n1;
  Conv2d<S> conv2;
  ChannelNorm<S> n2;

  void setup(int ch) {
    conv1.setup(2 * ch, ch, 3, 1, 1);
    n1.setup(ch);
    conv2.setup(ch, ch, 3, 1, 1);
    n2.setup(ch);
  }

  void init(std::uint64_t seed, const std::string& name) {
    conv1.init(seed, name + ".conv1");
    conv2.init(seed, name + ".conv2");
  }

  struct Cache {
    typename Conv2d<S>::Cache c1, c2;
    typename ChannelNorm<S>::Cache cn1, cn2;
    typename Relu<S>::Cache r1, r2;
    std::vector<std::size_t> cat_dims, mid_dims;
    int low_h = 0, low_w = 0;
    std::size_t up_channels = 0;
  };

  Tensor<S> forward(const Tensor<S>& low, const Tensor<S>& skip, Cache& c) const {
    c.low_h = static_cast<int>(low.dims[1]);
    c.low_w = static_cast<int>(low.dims[2]);
    c.up_channels = low.dims[0];
    Tensor<S> up = bilinear_upsample(low, static_cast<int>(skip.dims[1]),
                                     static_cast<int>(skip.dims[2]));
    Tensor<S> cat = concat_channels(up, skip);
    c.cat_dims = cat.dims;
    Tensor<S> t = Relu<S>::forward(n1.forward(conv1.forward(cat, c.c1), c.cn1), c.r1);
    c.mid_dims = t.dims;
    return Relu<S>::forward(n2.forward(conv2.forward(t, c.c2), c.cn2), c.r2);
  }

  std::pair<Tensor<S>, Tensor<S>> backward(Cache& c, const Tensor<S>& dy) {
    Tensor<S> d = Relu<S>::backward(c.r2, dy);
    d = n2.backward(c.cn2, d);
    d = conv2.backward(c.c2, d, c.mid_dims);
    d = Relu<S>::backward(c.r1, d);
    d = n1.backward(c.cn1, d);
    d = conv1.backward(c.c1, d, c.cat_dims);
    auto [dup, dskip] = split_channels(d, c.up_channels);
    Tensor<S> dlow = bilinear_upsample_backward(dup, c.low_h, c.low_w);
    return {std::move(dlow), std::move(dskip)};
  }
};

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

template <typename S>
struct SegModel {
  NetConfig cfg;
  EmbedConv<S> embed;
  std::array<EncoderStage<S>, 3> stages;
  std::array<RfbBlock<S>, 4> rfb;
  std::array<DecoderBlock<S>, 3> dec;  // dec[0] is the finest merge
  std::array<Conv2d<S>, 3> head;       // head[0] feeds prediction

  explicit SegModel(const NetConfig& config) : cfg(config) {
    cfg.validate();
    const auto& ch = cfg.channels_per_level;
    embed.setup(cfg.in_channels(), ch[0], 4, cfg.lora_enabled && cfg.lora_patch_embed,
                cfg.lora_rank, static_cast<S>(cfg.lora_alpha));
    for (int i = 0; i < 3; ++i) stages[i].setup(ch[i], ch[i + 1], cfg);
    for (int i = 0; i < 4; ++i) rfb[i].setup(ch[i], cfg.rfb_channels);
    for (int i = 0; i < 3; ++i) {
      dec[i].setup(cfg.rfb_channels);
      head[i].setup(cfg.rfb_channels, 1, 1);
    }
    init_params();
  }

  void init_params() {
    embed.init(cfg.seed, "encoder.embed");
    for (int i = 0; i < 3; ++i) stages[i].init(cfg.seed, "encoder.stage" + std::to_string(i + 1));
    for (int i = 0; i < 4; ++i) rfb[i].init(cfg.seed, "rfb." + std::to_string(i + 1));
    for (int i = 0; i < 3; ++i) {
      dec[i].init(cfg.seed, "decoder.block" + std::to_string(i + 1));
      head[i].init(cfg.seed, "head." + std::to_string(i + 1));
    }
  }

  struct Cache {
    typename EmbedConv<S>::Cache embed;
    std::array<typename EncoderStage<S>::Cache, 3> stage;
    std::array<typename RfbBlock<S>::Cache, 4> rfb;
    std::array<typename DecoderBlock<S>::Cache, 3> dec;
    std::array<typename Conv2d<S>::Cache, 3> head;
    std::array<std::vector<std::size_t>, 3> merged_dims;  // decoder outputs
    std::array<std::vector<std::size_t>, 3> head_out_dims;
  };

  FeaturePyramid<S> encoder_forward(const Tensor<S>& input, Cache& c) const {
    if (input.rank() != 3 || static_cast<int>(input.dims[0]) != cfg.in_channels() ||
        static_cast<int>(input.dims[1]) != cfg.input_size ||
        static_cast<int>(input.dims[2]) != cfg.input_size)
      throw DimensionError("model: input must be [channels, input_size, input_size]");
    FeaturePyramid<S> pyr;
    pyr.levels[0] = embed.forward(input, c.embed);
    for (int i = 0; i < 3; ++i) pyr.levels[i + 1] = stages[i].forward(pyr.levels[i], c.stage[i]);
    return pyr;
  }

  /// Returns the three supervision logit maps, each upsampled to
  /// [1, input_size, input_size]. Index 0 is the finest level.
  std::array<Tensor<S>, 3> forward(const Tensor<S>& input, Cache& c) const {
    FeaturePyramid<S> pyr = encoder_forward(input, c);
    std::array<Tensor<S>, 4> refined;
    for (int i = 0; i < 4; ++i) refined[i] = rfb[i].forward(pyr.levels[i], c.rfb[i]);

    std::array<Tensor<S>, 3> merged;  // merged[2] is the deepest merge
    merged[2] = dec[2].forward(refined[3], refined[2], c.dec[2]);
    merged[1] = dec[1].forward(merged[2], refined[1], c.dec[1]);
    merged[0] = dec[0].forward(merged[1], refined[0], c.dec[0]);

    std::array<Tensor<S>, 3> logits;
    for (int i = 0; i < 3; ++i) {
      c.merged_dims[i] = merged[i].dims;
      Tensor<S> s = head[i].forward(merged[i], c.head[i]);
      c.head_out_dims[i] = s.dims;
      logits[i] = bilinear_upsample(s, cfg.input_size, cfg.input_size);
    }
    return logits;
  }

  void backward(Cache& c, const std::array<Tensor<S>, 3>& dlogits) {
    std::array<Tensor<S>, 3> dmerged;
    for (int i = 0; i < 3; ++i) {
      Tensor<S> ds = bilinear_upsample_backward(dlogits[i], static_cast<int>(c.head_out_dims[i][1]),
                                                static_cast<int>(c.head_out_dims[i][2]));
      dmerged[i] = head[i].backward(c.head[i], ds, c.merged_dims[i]);
    }

    std::array<Tensor<S>, 4> drefined;
    {
      auto [dlow, dskip] = dec[0].backward(c.dec[0], dmerged[0]);
      detail::add_into(dmerged[1], dlow);
      drefined[0] = std::move(dskip);
    }
    {
      auto [dlow, dskip] = dec[1].backward(c.dec[1], dmerged[1]);
      detail::add_into(dmerged[2], dlow);
      drefined[1] = std::move(dskip);
    }
    {
      auto [dlow, dskip] = dec[2].backward(c.dec[2], dmerged[2]);
      drefined[3] = std::move(dlow);
      drefined[2] = std::move(dskip);
    }

    Tensor<S> dlevel = rfb[3].backward(c.rfb[3], drefined[3]);
    for (int i = 2; i >= 0; --i) {
      Tensor<S> dskip = rfb[i].backward(c.rfb[i], drefined[i]);
      Tensor<S> dfrom_stage = stages[i].backward(c.stage[i], dlevel);
      detail::add_into(dskip, dfrom_stage);
      dlevel = std::move(dskip);
    }
    embed.backward(c.embed, dlevel);
  }

  void zero_grads() {
    if (embed.in_ch == 4) embed.gw_edge.set_zero();
    if (embed.lora) {
      embed.g_lora_a.set_zero();
      embed.g_lora_b.set_zero();
    }
    for (auto& st : stages) {
      st.conv.gw.set_zero();
      st.conv.gb.set_zero();
      st.norm.ggamma.set_zero();
      st.norm.gbeta.set_zero();
      if (st.proj.enabled) {
        st.proj.gA.set_zero();
        st.proj.gB.set_zero();
      }
    }
    auto zero_conv = [](Conv2d<S>& conv) {
      conv.gw.set_zero();
      conv.gb.set_zero();
    };
    for (auto& r : rfb) {
      zero_conv(r.b0);
      zero_conv(r.b1r);
      zero_conv(r.b1c);
      zero_conv(r.b2r);
      zero_conv(r.b2c);
      zero_conv(r.b3r);
      zero_conv(r.b3c);
      zero_conv(r.proj);
      zero_conv(r.shortcut);
    }
    for (auto& d : dec) {
      zero_conv(d.conv1);
      zero_conv(d.conv2);
      d.n1.ggamma.set_zero();
      d.n1.gbeta.set_zero();
      d.n2.ggamma.set_zero();
      d.n2.gbeta.set_zero();
    }
    for (auto& h : head) zero_conv(h);
  }

  /// Trainable tensors paired with their gradient buffers, in a fixed order.
  /// Frozen encoder tensors are deliberately absent.
  std::vector<std::pair<Tensor<S>*, Tensor<S>*>> trainable_params() {
    std::vector<std::pair<Tensor<S>*, Tensor<S>*>> out;
    if (embed.in_ch == 4) out.push_back({&embed.w_edge, &embed.gw_edge});
    if (embed.lora) {
      out.push_back({&embed.lora_a, &embed.g_lora_a});
      out.push_back({&embed.lora_b, &embed.g_lora_b});
    }
    for (auto& st : stages)
      if (st.proj.enabled) {
        out.push_back({&st.proj.A, &st.proj.gA});
        out.push_back({&st.proj.B, &st.proj.gB});
      }
    auto push_conv = [&](Conv2d<S>& conv) {
      out.push_back({&conv.w, &conv.gw});
      out.push_back({&conv.b, &conv.gb});
    };
    for (auto& r : rfb) {
      push_conv(r.b0);
      push_conv(r.b1r);
      push_conv(r.b1c);
      push_conv(r.b2r);
      push_conv(r.b2c);
      push_conv(r.b3r);
      push_conv(r.b3c);
      push_conv(r.proj);
      push_conv(r.shortcut);
    }
    for (auto& d : dec) {
      push_conv(d.conv1);
      out.push_back({&d.n1.gamma, &d.n1.ggamma});
      out.push_back({&d.n1.beta, &d.n1.gbeta});
      push_conv(d.conv2);
      out.push_back({&d.n2.gamma, &d.n2.ggamma});
      out.push_back({&d.n2.beta, &d.n2.gbeta});
    }
    for (auto& h : head) push_conv(h);
    return out;
  }

  /// Named tensors in serialization order (embed weight fused to
  /// [C_out, in, k, k]).
  std::vector<std::pair<std::string, Tensor<S>>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("encoder.embed.weight", embed.fused_weight());
    out.emplace_back("encoder.embed.bias", embed.b);
    if (embed.lora) {
      out.emplace_back("encoder.embed.lora_a", embed.lora_a);
      out.emplace_back("encoder.embed.lora_b", embed.lora_b);
    }
    for (int i = 0; i < 3; ++i) {
      const std::string sn = "encoder.stage" + std::to_string(i + 1);
      out.emplace_back(sn + ".conv.weight", stages[i].conv.w);
      out.emplace_back(sn + ".conv.bias", stages[i].conv.b);
      out.emplace_back(sn + ".norm.gamma", stages[i].norm.gamma);
      out.emplace_back(sn + ".norm.beta", stages[i].norm.beta);
      out.emplace_back(sn + ".proj.weight", stages[i].proj.base_w);
      out.emplace_back(sn + ".proj.bias", stages[i].proj.base_b);
      if (stages[i].proj.enabled) {
        out.emplace_back("lora.stage" + std::to_string(i + 1) + ".A", stages[i].proj.A);
        out.emplace_back("lora.stage" + std::to_string(i + 1) + ".B", stages[i].proj.B);
      }
    }
    for (int i = 0; i < 4; ++i) {
      const std::string rn = "rfb." + std::to_string(i + 1);
      auto add_conv = [&](const std::string& n, const Conv2d<S>& conv) {
        out.emplace_back(rn + "." + n + ".weight", conv.w);
        out.emplace_back(rn + "." + n + ".bias", conv.b);
      };
      add_conv("b0", rfb[i].b0);
      add_conv("b1.reduce", rfb[i].b1r);
      add_conv("b1.conv", rfb[i].b1c);
      add_conv("b2.reduce", rfb[i].b2r);
      add_conv("b2.conv", rfb[i].b2c);
      add_conv("b3.reduce", rfb[i].b3r);
      add_conv("b3.conv", rfb[i].b3c);
      add_conv("proj", rfb[i].proj);
      add_conv("shortcut", rfb[i].shortcut);
    }
    for (int i = 0; i < 3; ++i) {
      const std::string dn = "decoder.block" + std::to_string(i + 1);
      out.emplace_back(dn + ".conv1.weight", dec[i].conv1.w);
      out.emplace_back(dn + ".conv1.bias", dec[i].conv1.b);
      out.emplace_back(dn + ".norm1.gamma", dec[i].n1.gamma);
      out.emplace_back(dn + ".norm1.beta", dec[i].n1.beta);
      out.emplace_back(dn + ".conv2.weight", dec[i].conv2.w);
      out.emplace_back(dn + ".conv2.bias", dec[i].conv2.b);
      out.emplace_back(dn + ".norm2.gamma", dec[i].n2.gamma);
      out.emplace_back(dn + ".norm2.beta", dec[i].n2.beta);
    }
    for (int i = 0; i < 3; ++i) {
      const std::string hn = "head." + std::to_string(i + 1);
      out.emplace_back(hn + ".weight", head[i].w);
      out.emplace_back(hn + ".bias", head[i].b);
    }
    return out;
  }

  Checkpoint to_checkpoint(const PipelineMeta& meta = {}) const {
    Checkpoint ckpt;
    for (auto& [name, tensor] : named_tensors()) ckpt.entries.push_back({name, std::move(tensor)});
    Tensor<double> mc({22});
    auto& m = mc.data;
    m[0] = 1;  // meta layout version
    m[1] = cfg.input_size;
    for (int i = 0; i < 4; ++i) m[2 + i] = cfg.channels_per_level[i];
    m[6] = cfg.rfb_channels;
    m[7] = cfg.lora_enabled ? 1 : 0;
    m[8] = cfg.lora_rank;
    m[9] = cfg.lora_alpha;
    m[10] = cfg.lora_patch_embed ? 1 : 0;
    m[11] = static_cast<double>(cfg.depth_input);
    m[12] = meta.components.depth ? 1 : 0;
    m[13] = meta.components.inverse ? 1 : 0;
    m[14] = meta.components.centered ? 1 : 0;
    m[15] = meta.epsilon;
    m[16] = static_cast<double>(cfg.seed >> 32);
    m[17] = static_cast<double>(cfg.seed & 0xFFFFFFFFull);
    m[18] = cfg.epochs;
    m[19] = cfg.batch;
    m[20] = cfg.lr;
    m[21] = cfg.weight_decay;
    ckpt.entries.push_back({"meta.config", std::move(mc)});
    return ckpt;
  }

  static std::pair<NetConfig, PipelineMeta> meta_from_checkpoint(const Checkpoint& ckpt) {
    const TensorEntry* entry = ckpt.find("meta.config");
    if (!entry) throw FormatError("checkpoint: missing meta.config");
    const auto* mc = std::get_if<Tensor<double>>(&entry->tensor);
    if (!mc || mc->size() < 22) throw FormatError("checkpoint: bad meta.config");
    const auto& m = mc->data;
    NetConfig cfg;
    cfg.input_size = static_cast<int>(m[1]);
    for (int i = 0; i < 4; ++i) cfg.channels_per_level[i] = static_cast<int>(m[2 + i]);
    cfg.rfb_channels = static_cast<int>(m[6]);
    cfg.lora_enabled = m[7] != 0;
    cfg.lora_rank = static_cast<int>(m[8]);
    cfg.lora_alpha = static_cast<float>(m[9]);
    cfg.lora_patch_embed = m[10] != 0;
    cfg.depth_input = static_cast<DepthInput>(static_cast<int>(m[11]));
    cfg.seed = (static_cast<std::uint64_t>(m[16]) << 32) | static_cast<std::uint64_t>(m[17]);
    cfg.epochs = static_cast<int>(m[18]);
    cfg.batch = static_cast<int>(m[19]);
    cfg.lr = m[20];
    cfg.weight_decay = m[21];
    PipelineMeta meta;
    meta.components = {m[12] != 0, m[13] != 0, m[14] != 0};
    meta.epsilon = static_cast<float>(m[15]);
    return {cfg, meta};
  }

  void load(const Checkpoint& ckpt) {
    auto fetch = [&](const std::string& name, const std::vector<std::size_t>& dims) {
      const TensorEntry* entry = ckpt.find(name);
      if (!entry) throw FormatError("checkpoint: missing tensor " + name);
      const auto* t = std::get_if<Tensor<S>>(&entry->tensor);
      if (!t) throw DtypeError("checkpoint: wrong dtype for tensor " + name);
      if (t->dims != dims) throw DimensionError("checkpoint: shape mismatch for tensor " + name);
      return *t;
    };
    embed.load_fused_weight(fetch("encoder.embed.weight", embed.fused_weight().dims));
    embed.b = fetch("encoder.embed.bias", embed.b.dims);
    if (embed.lora) {
      embed.lora_a = fetch("encoder.embed.lora_a", embed.lora_a.dims);
      embed.lora_b = fetch("encoder.embed.lora_b", embed.lora_b.dims);
    }
    for (int i = 0; i < 3; ++i) {
      const std::string sn = "encoder.stage" + std::to_string(i + 1);
      stages[i].conv.w = fetch(sn + ".conv.weight", stages[i].conv.w.dims);
      stages[i].conv.b = fetch(sn + ".conv.bias", stages[i].conv.b.dims);
      stages[i].norm.gamma = fetch(sn + ".norm.gamma", stages[i].norm.gamma.dims);
      stages[i].norm.beta = fetch(sn + ".norm.beta", stages[i].norm.beta.dims);
      stages[i].proj.base_w = fetch(sn + ".proj.weight", stages[i].proj.base_w.dims);
      stages[i].proj.base_b = fetch(sn + ".proj.bias", stages[i].proj.base_b.dims);
      if (stages[i].proj.enabled) {
        stages[i].proj.A = fetch("lora.stage" + std::to_string(i + 1) + ".A", stages[i].proj.A.dims);
        stages[i].proj.B = fetch("lora.stage" + std::to_string(i + 1) + ".B", stages[i].proj.B.dims);
      }
    }
    for (int i = 0; i < 4; ++i) {
      const std::string rn = "rfb." + std::to_string(i + 1);
      auto load_conv = [&](const std::string& n, Conv2d<S>& conv) {
        conv.w = fetch(rn + "." + n + ".weight", conv.w.dims);
        conv.b = fetch(rn + "." + n + ".bias", conv.b.dims);
      };
      load_conv("b0", rfb[i].b0);
      load_conv("b1.reduce", rfb[i].b1r);
      load_conv("b1.conv", rfb[i].b1c);
      load_conv("b2.reduce", rfb[i].b2r);
      load_conv("b2.conv", rfb[i].b2c);
      load_conv("b3.reduce", rfb[i].b3r);
      load_conv("b3.conv", rfb[i].b3c);
      load_conv("proj", rfb[i].proj);
      load_conv("shortcut", rfb[i].shortcut);
    }
    for (int i = 0; i < 3; ++i) {
      const std::string dn = "decoder.block" + std::to_string(i + 1);
      dec[i].conv1.w = fetch(dn + ".conv1.weight", dec[i].conv1.w.dims);
      dec[i].conv1.b = fetch(dn + ".conv1.bias", dec[i].conv1.b.dims);
      dec[i].n1.gamma = fetch(dn + ".norm1.gamma", dec[i].n1.gamma.dims);
      dec[i].n1.beta = fetch(dn + ".norm1.beta", dec[i].n1.beta.dims);
      dec[i].conv2.w = fetch(dn + ".conv2.weight", dec[i].conv2.w.dims);
      dec[i].conv2.b = fetch(dn + ".conv2.bias", dec[i].conv2.b.dims);
      dec[i].n2.gamma = fetch(dn + ".norm2.gamma", dec[i].n2.gamma.dims);
      dec[i].n2.beta = fetch(dn + ".norm2.beta", dec[i].n2.beta.dims);
    }
    for (int i = 0; i < 3; ++i) {
      const std::string hn = "head." + std::to_string(i + 1);
      head[i].w = fetch(hn + ".weight", head[i].w.dims);
      head[i].b = fetch(hn + ".bias", head[i].b.dims);
    }
  }
};

// ---------------------------------------------------------------------------
// Decoupled-weight-decay Adam over the trainable set
// ---------------------------------------------------------------------------

template <typename S>
class AdamW {
 public:
  AdamW(std::vector<std::pair<Tensor<S>*, Tensor<S>*>> params, double weight_decay)
      : params_(std::move(params)), weight_decay_(weight_decay) {
    for (auto& [value, grad] : params_)
      states_.push_back({std::vector<double>(value->size(), 0.0),
                         std::vector<double>(value->size(), 0.0)});
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t p = 0; p < params_.size(); ++p) {
      Tensor<S>& value = *params_[p].first;
      const Tensor<S>& grad = *params_[p].second;
      auto& [m, v] = states_[p];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad.data[i]);
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_) +
                              weight_decay_ * static_cast<double>(value.data[i]);
        value.data[i] = static_cast<S>(static_cast<double>(value.data[i]) - lr * update);
      }
    }
  }

 private:
  struct State {
    std::vector<double> m, v;
  };
  std::vector<std::pair<Tensor<S>*, Tensor<S>*>> params_;
  std::vector<State> states_;
  double weight_decay_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

template <typename S>
struct TrainSample {
  Tensor<S> input;  // [in_channels, size, size]
  BinMask gt;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> step_loss;  // batch-mean total loss per optimizer step
  double initial_loss = 0.0;      // dataset-mean total loss before training
  double final_loss = 0.0;        // and after
};

template <typename S>
double dataset_mean_loss(const SegModel<S>& model, const std::vector<TrainSample<S>>& data) {
  double acc = 0.0;
  for (const auto& sample : data) {
    typename SegModel<S>::Cache cache;
    const auto logits = model.forward(sample.input, cache);
    acc += total_loss(std::span<const Tensor<S>>(logits.data(), 3), sample.gt).value;
  }
  return acc / static_cast<double>(data.size());
}

/// Deterministic toy training loop: seeded shuffling, gradient accumulation
/// over fixed-size batches, AdamW with a cosine learning-rate schedule.
/// Identical config and data give bit-identical checkpoints.
template <typename S = float>
TrainResult train(const NetConfig& cfg, const std::vector<TrainSample<S>>& data,
                  const PipelineMeta& meta = {}) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  for (const auto& sample : data) {
    if (sample.input.rank() != 3 ||
        static_cast<int>(sample.input.dims[0]) != cfg.in_channels() ||
        static_cast<int>(sample.input.dims[1]) != cfg.input_size ||
        static_cast<int>(sample.input.dims[2]) != cfg.input_size)
      throw DimensionError("train: sample input shape mismatch");
    if (sample.gt.height() != cfg.input_size || sample.gt.width() != cfg.input_size)
      throw DimensionError("train: sample mask shape mismatch");
  }

  SegModel<S> model(cfg);
  AdamW<S> opt(model.trainable_params(), cfg.weight_decay);

  TrainResult result;
  result.initial_loss = dataset_mean_loss(model, data);

  const std::size_t n = data.size();
  const long steps_per_epoch = static_cast<long>((n + cfg.batch - 1) / cfg.batch);
  const long total_steps = cfg.epochs * steps_per_epoch;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(cfg.seed, "train.shuffle");

  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = n - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.next_below(i + 1)]);
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      const std::size_t count = std::min<std::size_t>(cfg.batch, n - start);
      model.zero_grads();
      double batch_loss = 0.0;
      for (std::size_t b = 0; b < count; ++b) {
        const TrainSample<S>& sample = data[order[start + b]];
        typename SegModel<S>::Cache cache;
        const auto logits = model.forward(sample.input, cache);
        MultiLevelLoss<S> loss =
            total_loss(std::span<const Tensor<S>>(logits.data(), 3), sample.gt);
        batch_loss += loss.value;
        const S inv = S(1) / static_cast<S>(count);
        std::array<Tensor<S>, 3> dlogits;
        for (int l = 0; l < 3; ++l) {
          dlogits[l] = std::move(loss.grad_per_level[l]);
          for (auto& g : dlogits[l].data) g *= inv;
        }
        model.backward(cache, dlogits);
      }
      batch_loss /= static_cast<double>(count);
      if (!std::isfinite(batch_loss)) throw NanError("train: non-finite loss at step " +
                                                     std::to_string(step));
      const double lr_t =
          cfg.lr * 0.5 *
          (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total_steps)));
      opt.step(lr_t);
      result.step_loss.push_back(batch_loss);
      ++step;
    }
  }

  result.final_loss = dataset_mean_loss(model, data);
  result.checkpoint = model.to_checkpoint(meta);
  return result;
}

/// Loads the checkpoint (including its stored config) and returns the
/// sigmoid of the finest supervision head at input resolution.
template <typename S = float>
ProbMask predict(const Checkpoint& ckpt, const Tensor<S>& input) {
  auto [cfg, meta] = SegModel<S>::meta_from_checkpoint(ckpt);
  (void)meta;
  SegModel<S> model(cfg);
  model.load(ckpt);
  typename SegModel<S>::Cache cache;
  const auto logits = model.forward(input, cache);
  const auto z = plane_view(logits[0]);
  PlaneF p(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.size(); ++i)
    p.data()[i] = static_cast<float>(sigmoid(static_cast<double>(z.data()[i])));
  return ProbMask(std::move(p));
}

/// Assembles the network input from RGB plus the configured fourth channel.
inline Tensor<float> build_input(const Image& rgb, const Image* depth, DepthInput mode,
                                 const ComponentSet& components, float epsilon) {
  if (mode == DepthInput::none) return image_to_tensor(rgb);
  if (!depth) throw std::invalid_argument("build_input: depth image required");
  const DepthMap d = depth_from_image(*depth);
  if (mode == DepthInput::raw_depth) return attach_channel(rgb, d);
  return attach_channel(rgb, cumulative_structure_map(d, components, epsilon));
}

inline std::string_view to_string(DepthInput d) {
  switch (d) {
    case DepthInput::none: return "none";
    case DepthInput::raw_depth: return "raw_depth";
    case DepthInput::edge_map: return "edge_map";
  }
  return "none";
}

inline DepthInput depth_input_from_string(std::string_view s) {
  if (s == "none") return DepthInput::none;
  if (s == "raw_depth") return DepthInput::raw_depth;
  if (s == "edge_map") return DepthInput::edge_map;
  throw std::invalid_argument("unknown depth_input: " + std::string(s));
}

}  // namespace bedseg
