#include "bedseg/net.hpp"

#include "gradcheck.hpp"

#include "doctest.h"

#include <cmath>

using namespace bedseg;

namespace {

NetConfig small_config(DepthInput mode = DepthInput::edge_map) {
  NetConfig cfg;
  cfg.input_size = 64;
  cfg.channels_per_level = {4, 8, 12, 16};
  cfg.rfb_channels = 8;
  cfg.lora_rank = 2;
  cfg.lora_alpha = 2.0f;
  cfg.seed = 99;
  cfg.depth_input = mode;
  return cfg;
}

template <typename S>
Tensor<S> random_input(int channels, int size, Rng& rng) {
  Tensor<S> t({static_cast<std::size_t>(channels), static_cast<std::size_t>(size),
               static_cast<std::size_t>(size)});
  for (auto& v : t.data) v = static_cast<S>(rng.next_double());
  return t;
}

BinMask random_mask(int size, Rng& rng) {
  MaskPlane m(size, size);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.next_below(2) ? 1 : 0;
  return BinMask(std::move(m));
}

}  // namespace

// ---------------------------------------------------------------------------
// Patch-embed expansion
// ---------------------------------------------------------------------------

TEST_CASE("expand_patch_embed: fourth channel is the channel-wise mean") {
  Tensor<float> w({2, 3, 1, 1});
  w.data = {1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 9.0f};
  const Tensor<float> e = expand_patch_embed(w);
  REQUIRE(e.dims == std::vector<std::size_t>{2, 4, 1, 1});
  CHECK(e.data[0] == 1.0f);
  CHECK(e.data[1] == 2.0f);
  CHECK(e.data[2] == 3.0f);
  CHECK(e.data[3] == 2.0f);  // (1+2+3)/3
  CHECK(e.data[7] == 6.0f);  // (4+5+9)/3
}

TEST_CASE("expand_patch_embed: rejects non-3-channel input") {
  CHECK_THROWS_AS(expand_patch_embed(Tensor<float>({2, 4, 1, 1})), DimensionError);
  CHECK_THROWS_AS(expand_patch_embed(Tensor<float>({2, 3, 1})), DimensionError);
}

TEST_CASE("embed: zero fourth channel reproduces the 3-channel convolution exactly") {
  Rng rng(61, "net.embed_zero");
  EmbedConv<float> e3, e4;
  e3.setup(3, 5, 4, false, 1, 1.0f);
  e3.init(7, "encoder.embed");
  e4.setup(4, 5, 4, false, 1, 1.0f);
  e4.init(7, "encoder.embed");  // same stream; edge slice = channel mean

  Tensor<float> x4 = random_input<float>(4, 8, rng);
  x4.channel(3).setZero();
  Tensor<float> x3({3, 8, 8});
  std::copy_n(x4.data.begin(), x3.size(), x3.data.begin());

  EmbedConv<float>::Cache c3, c4;
  const Tensor<float> y3 = e3.forward(x3, c3);
  const Tensor<float> y4 = e4.forward(x4, c4);
  REQUIRE(y3.dims == y4.dims);
  for (std::size_t i = 0; i < y3.size(); ++i) CHECK(y3.data[i] == y4.data[i]);
}

TEST_CASE("embed: uniform 4-channel input scales the 3-channel response by 4/3") {
  Rng rng(62, "net.embed_uniform");
  EmbedConv<double> e3, e4;
  e3.setup(3, 3, 4, false, 1, 1.0);
  e3.init(8, "encoder.embed");
  e4.setup(4, 3, 4, false, 1, 1.0);
  e4.init(8, "encoder.embed");
  e3.b.set_zero();
  e4.b.set_zero();

  Tensor<double> x4({4, 4, 4});
  Tensor<double> x3({3, 4, 4});
  const double v = 0.37;
  std::fill(x4.data.begin(), x4.data.end(), v);
  std::fill(x3.data.begin(), x3.data.end(), v);

  EmbedConv<double>::Cache c3, c4;
  const Tensor<double> y3 = e3.forward(x3, c3);
  const Tensor<double> y4 = e4.forward(x4, c4);
  for (std::size_t i = 0; i < y3.size(); ++i)
    CHECK(y4.data[i] == doctest::Approx(4.0 / 3.0 * y3.data[i]).epsilon(1e-12));
}

TEST_CASE("embed: trainable edge-slice gradient matches finite differences") {
  Rng rng(63, "net.embed_grad");
  EmbedConv<double> embed;
  embed.setup(4, 3, 4, true, 2, 2.0);
  embed.init(9, "encoder.embed");
  gradcheck::fill_uniform(embed.lora_b, rng, -0.3, 0.3);
  Tensor<double> x = random_input<double>(4, 8, rng);

  EmbedConv<double>::Cache cache;
  Tensor<double> y = embed.forward(x, cache);
  Tensor<double> proj(y.dims);
  gradcheck::fill_uniform(proj, rng);

  embed.gw_edge.set_zero();
  embed.g_lora_a.set_zero();
  embed.g_lora_b.set_zero();
  embed.backward(cache, proj);

  std::vector<gradcheck::Coord> coords;
  gradcheck::sample_coords(embed.w_edge, embed.gw_edge, rng, coords, 16);
  gradcheck::sample_coords(embed.lora_a, embed.g_lora_a, rng, coords, 12);
  gradcheck::sample_coords(embed.lora_b, embed.g_lora_b, rng, coords, 8);
  auto loss = [&] {
    EmbedConv<double>::Cache c;
    return gradcheck::dot(embed.forward(x, c), proj);
  };
  CHECK(gradcheck::rel_err(loss, coords) < 1e-5);
}

// ---------------------------------------------------------------------------
// LoRA layer
// ---------------------------------------------------------------------------

TEST_CASE("lora: fresh layer (B = 0) equals the base projection for any input") {
  Rng rng(64, "net.lora_noop");
  LoraLayer<float> with, without;
  with.setup(6, 5, 3, 4.0f, true);
  with.init(10, "proj");
  without.setup(6, 5, 3, 4.0f, false);
  without.init(10, "proj");

  for (int iter = 0; iter < 4; ++iter) {
    const Tensor<float> x = random_input<float>(6, 5, rng);
    LoraLayer<float>::Cache ca, cb;
    const Tensor<float> ya = with.forward(x, ca);
    const Tensor<float> yb = without.forward(x, cb);
    for (std::size_t i = 0; i < ya.size(); ++i) CHECK(ya.data[i] == yb.data[i]);
  }
}

TEST_CASE("lora: hand-computed rank-1 update") {
  // base = I2, A = [1 0], B = [0;1] -> BA = [[0,0],[1,0]]; x = [1,0] -> [1,1]
  LoraLayer<double> layer;
  layer.setup(2, 2, 1, 1.0, true);
  layer.base_w.data = {1.0, 0.0, 0.0, 1.0};
  layer.base_b.set_zero();
  layer.A.data = {1.0, 0.0};
  layer.B.data = {0.0, 1.0};
  layer.scale = 1.0;

  Tensor<double> x({2, 1, 1});
  x.data = {1.0, 0.0};
  LoraLayer<double>::Cache cache;
  const Tensor<double> y = layer.forward(x, cache);
  CHECK(y.data[0] == doctest::Approx(1.0));
  CHECK(y.data[1] == doctest::Approx(1.0));
}

TEST_CASE("lora: gradients flow to A and B, base is untouched") {
  Rng rng(65, "net.lora_grads");
  LoraLayer<double> layer;
  layer.setup(4, 4, 2, 2.0, true);
  layer.init(11, "proj");
  const Tensor<double> base_before = layer.base_w;

  const Tensor<double> x = random_input<double>(4, 3, rng);
  LoraLayer<double>::Cache cache;
  Tensor<double> y = layer.forward(x, cache);
  Tensor<double> proj(y.dims);
  gradcheck::fill_uniform(proj, rng);
  layer.gA.set_zero();
  layer.gB.set_zero();
  layer.backward(cache, proj);

  // B = 0 makes dA = scale*B^T*dW zero at the first backward, but dB is
  // alive immediately.
  double gb_norm = 0.0;
  for (double v : layer.gB.data) gb_norm += std::fabs(v);
  CHECK(gb_norm > 0.0);
  for (std::size_t i = 0; i < layer.base_w.size(); ++i)
    CHECK(layer.base_w.data[i] == base_before.data[i]);
}

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

TEST_CASE("encoder: pyramid shapes follow the stride/channel law") {
  NetConfig cfg = small_config();
  cfg.channels_per_level = {8, 16, 32, 64};
  const SegModel<float> model(cfg);
  Rng rng(66, "net.shapes");
  const Tensor<float> input = random_input<float>(4, 64, rng);
  SegModel<float>::Cache cache;
  const FeaturePyramid<float> pyr = model.encoder_forward(input, cache);
  CHECK(pyr.levels[0].dims == std::vector<std::size_t>{8, 16, 16});
  CHECK(pyr.levels[1].dims == std::vector<std::size_t>{16, 8, 8});
  CHECK(pyr.levels[2].dims == std::vector<std::size_t>{32, 4, 4});
  CHECK(pyr.levels[3].dims == std::vector<std::size_t>{64, 2, 2});
}

TEST_CASE("encoder: shape law holds across input sizes 32, 64, 96") {
  for (int size : {32, 64, 96}) {
    NetConfig cfg = small_config();
    cfg.input_size = size;
    const SegModel<float> model(cfg);
    Rng rng(67, "net.shape_law");
    const Tensor<float> input = random_input<float>(4, size, rng);
    SegModel<float>::Cache cache;
    const FeaturePyramid<float> pyr = model.encoder_forward(input, cache);
    for (int i = 0; i < 4; ++i) {
      const std::size_t expected = static_cast<std::size_t>(size) >> (i + 2);
      CHECK(pyr.levels[i].dims[0] == static_cast<std::size_t>(cfg.channels_per_level[i]));
      CHECK(pyr.levels[i].dims[1] == expected);
      CHECK(pyr.levels[i].dims[2] == expected);
    }
  }
}

TEST_CASE("rfb: output shape contract and well-posedness on zero input") {
  RfbBlock<float> rfb;
  rfb.setup(64, 16);
  rfb.init(12, "rfb.test");
  Tensor<float> x({64, 8, 8});
  RfbBlock<float>::Cache cache;
  const Tensor<float> y = rfb.forward(x, cache);
  CHECK(y.dims == std::vector<std::size_t>{16, 8, 8});
  for (float v : y.data) CHECK(std::isfinite(v));
}

TEST_CASE("rfb: channel count below the branch minimum is a config error") {
  RfbBlock<float> rfb;
  CHECK_THROWS_AS(rfb.setup(16, 2), std::invalid_argument);
  CHECK_THROWS_AS(rfb.setup(16, 6), std::invalid_argument);
}

TEST_CASE("decoder: three logit maps at full input resolution") {
  const NetConfig cfg = small_config();
  const SegModel<float> model(cfg);
  Rng rng(68, "net.decoder_shapes");
  const Tensor<float> input = random_input<float>(4, 64, rng);
  SegModel<float>::Cache cache;
  const auto logits = model.forward(input, cache);
  for (const auto& l : logits) CHECK(l.dims == std::vector<std::size_t>{1, 64, 64});
}

// ---------------------------------------------------------------------------
// Bilinear upsampling
// ---------------------------------------------------------------------------

TEST_CASE("bilinear: constant map stays constant") {
  Tensor<float> x({2, 3, 3});
  std::fill(x.data.begin(), x.data.end(), 0.73f);
  const Tensor<float> y = bilinear_upsample(x, 7, 5);
  for (float v : y.data) CHECK(v == doctest::Approx(0.73f).epsilon(1e-6));
}

TEST_CASE("bilinear: 2x2 -> 4x4 golden table (half-pixel centers)") {
  Tensor<double> x({1, 2, 2});
  const double a = 1.0, b = 2.0, c = 5.0, d = -3.0;
  x.data = {a, b, c, d};
  const Tensor<double> y = bilinear_upsample(x, 4, 4);
  auto at = [&](int r, int q) { return y.data[static_cast<std::size_t>(r) * 4 + q]; };
  // per-axis weights: row/col 0 -> (1,0), 1 -> (0.75,0.25), 2 -> (0.25,0.75), 3 -> (0,1)
  CHECK(at(0, 0) == doctest::Approx(a).epsilon(1e-12));
  CHECK(at(0, 3) == doctest::Approx(b).epsilon(1e-12));
  CHECK(at(3, 0) == doctest::Approx(c).epsilon(1e-12));
  CHECK(at(3, 3) == doctest::Approx(d).epsilon(1e-12));
  CHECK(at(1, 1) ==
        doctest::Approx(0.5625 * a + 0.1875 * b + 0.1875 * c + 0.0625 * d).epsilon(1e-12));
  CHECK(at(1, 2) ==
        doctest::Approx(0.1875 * a + 0.5625 * b + 0.0625 * c + 0.1875 * d).epsilon(1e-12));
  CHECK(at(2, 1) ==
        doctest::Approx(0.1875 * a + 0.0625 * b + 0.5625 * c + 0.1875 * d).epsilon(1e-12));
  CHECK(at(0, 1) == doctest::Approx(0.75 * a + 0.25 * b).epsilon(1e-12));
}

TEST_CASE("bilinear: backward is the transpose of forward") {
  Rng rng(69, "net.bilinear_adjoint");
  Tensor<double> x({1, 3, 4});
  gradcheck::fill_uniform(x, rng);
  Tensor<double> dy({1, 6, 8});
  gradcheck::fill_uniform(dy, rng);
  const Tensor<double> y = bilinear_upsample(x, 6, 8);
  const Tensor<double> dx = bilinear_upsample_backward(dy, 3, 4);
  // <y, dy> == <x, dx> for a linear operator and its adjoint
  CHECK(gradcheck::dot(y, dy) == doctest::Approx(gradcheck::dot(x, dx)).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// Gradient checks (full 50-instance sweeps run in the acceptance suite)
// ---------------------------------------------------------------------------

TEST_CASE("gradcheck: conv, norm, lora, rfb, decoder block") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    CHECK(gradcheck::conv_instance(100 + seed) < 1e-5);
    CHECK(gradcheck::norm_instance(200 + seed) < 1e-5);
    CHECK(gradcheck::lora_instance(300 + seed) < 1e-5);
    CHECK(gradcheck::rfb_instance(400 + seed) < 1e-5);
    CHECK(gradcheck::decoder_instance(500 + seed) < 1e-5);
  }
}

// ---------------------------------------------------------------------------
// Determinism, equivalences, training contracts
// ---------------------------------------------------------------------------

TEST_CASE("model: forward is deterministic and reproducible across instances") {
  const NetConfig cfg = small_config();
  const SegModel<float> a(cfg);
  const SegModel<float> b(cfg);
  Rng rng(70, "net.determinism");
  const Tensor<float> input = random_input<float>(4, 64, rng);
  SegModel<float>::Cache ca1, ca2, cb;
  const auto la1 = a.forward(input, ca1);
  const auto la2 = a.forward(input, ca2);
  const auto lb = b.forward(input, cb);
  for (int l = 0; l < 3; ++l)
    for (std::size_t i = 0; i < la1[l].size(); ++i) {
      CHECK(la1[l].data[i] == la2[l].data[i]);
      CHECK(la1[l].data[i] == lb[l].data[i]);
    }
}

TEST_CASE("model: zero fourth channel reproduces the 3-channel baseline bitwise") {
  const NetConfig cfg4 = small_config(DepthInput::edge_map);
  const NetConfig cfg3 = small_config(DepthInput::none);
  const SegModel<float> m4(cfg4);
  const SegModel<float> m3(cfg3);
  Rng rng(71, "net.zero_channel");
  for (int iter = 0; iter < 3; ++iter) {
    Tensor<float> x4 = random_input<float>(4, 64, rng);
    x4.channel(3).setZero();
    Tensor<float> x3({3, 64, 64});
    std::copy_n(x4.data.begin(), x3.size(), x3.data.begin());
    SegModel<float>::Cache c4, c3;
    const auto l4 = m4.forward(x4, c4);
    const auto l3 = m3.forward(x3, c3);
    for (int l = 0; l < 3; ++l)
      for (std::size_t i = 0; i < l4[l].size(); ++i) CHECK(l4[l].data[i] == l3[l].data[i]);
  }
}

TEST_CASE("model: fresh LoRA changes no activation anywhere") {
  NetConfig with = small_config();
  NetConfig without = small_config();
  without.lora_enabled = false;
  const SegModel<float> a(with);
  const SegModel<float> b(without);
  Rng rng(72, "net.lora_fresh");
  const Tensor<float> input = random_input<float>(4, 64, rng);
  SegModel<float>::Cache ca, cb;
  const auto la = a.forward(input, ca);
  const auto lb = b.forward(input, cb);
  for (int l = 0; l < 3; ++l)
    for (std::size_t i = 0; i < la[l].size(); ++i) CHECK(la[l].data[i] == lb[l].data[i]);
}

TEST_CASE("model: checkpoint round trip preserves the forward pass") {
  const NetConfig cfg = small_config();
  SegModel<float> model(cfg);
  const Checkpoint ckpt = model.to_checkpoint();
  SegModel<float> loaded(cfg);
  // perturb before loading so the test is meaningful
  loaded.head[0].b.data[0] += 1.0f;
  loaded.load(ckpt);
  Rng rng(73, "net.ckpt_roundtrip");
  const Tensor<float> input = random_input<float>(4, 64, rng);
  SegModel<float>::Cache c1, c2;
  const auto l1 = model.forward(input, c1);
  const auto l2 = loaded.forward(input, c2);
  for (int l = 0; l < 3; ++l)
    for (std::size_t i = 0; i < l1[l].size(); ++i) CHECK(l1[l].data[i] == l2[l].data[i]);
}

TEST_CASE("train: short run keeps frozen tensors bit-identical, changes adapters") {
  NetConfig cfg = small_config();
  cfg.epochs = 2;
  cfg.batch = 2;
  Rng rng(74, "net.train_frozen");
  std::vector<TrainSample<float>> data;
  for (int i = 0; i < 4; ++i) {
    TrainSample<float> s;
    s.input = random_input<float>(4, 64, rng);
    s.gt = random_mask(64, rng);
    data.push_back(std::move(s));
  }
  const SegModel<float> reference(cfg);
  const Checkpoint before = reference.to_checkpoint();
  const TrainResult result = train<float>(cfg, data);
  REQUIRE(result.step_loss.size() == 4);  // 2 epochs x 2 steps

  const char* frozen[] = {"encoder.embed.bias",       "encoder.stage1.conv.weight",
                          "encoder.stage1.norm.gamma", "encoder.stage2.proj.weight",
                          "encoder.stage3.conv.bias",  "encoder.stage3.proj.bias"};
  for (const char* name : frozen) {
    const auto& a = std::get<Tensor<float>>(before.find(name)->tensor);
    const auto& b = std::get<Tensor<float>>(result.checkpoint.find(name)->tensor);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data[i] == b.data[i]);
  }
  // the RGB slice of the embed weight is frozen; the edge slice learns
  {
    const auto& a = std::get<Tensor<float>>(before.find("encoder.embed.weight")->tensor);
    const auto& b =
        std::get<Tensor<float>>(result.checkpoint.find("encoder.embed.weight")->tensor);
    const std::size_t k2 = 16;
    bool edge_changed = false;
    for (std::size_t co = 0; co < a.dims[0]; ++co)
      for (std::size_t i = 0; i < 4 * k2; ++i) {
        const std::size_t idx = co * 4 * k2 + i;
        if (i < 3 * k2)
          CHECK(a.data[idx] == b.data[idx]);
        else if (a.data[idx] != b.data[idx])
          edge_changed = true;
      }
    CHECK(edge_changed);
  }
  // adapters moved
  bool lora_changed = false;
  const auto& a_lora = std::get<Tensor<float>>(before.find("lora.stage1.B")->tensor);
  const auto& b_lora = std::get<Tensor<float>>(result.checkpoint.find("lora.stage1.B")->tensor);
  for (std::size_t i = 0; i < a_lora.size(); ++i)
    if (a_lora.data[i] != b_lora.data[i]) lora_changed = true;
  CHECK(lora_changed);
}

TEST_CASE("train: lr = 0 leaves parameters unchanged and the trace constant") {
  NetConfig cfg = small_config();
  cfg.epochs = 2;
  cfg.batch = 4;
  cfg.lr = 0.0;
  cfg.weight_decay = 0.0;
  Rng rng(75, "net.train_lr0");
  std::vector<TrainSample<float>> data;
  for (int i = 0; i < 4; ++i) {
    TrainSample<float> s;
    s.input = random_input<float>(4, 64, rng);
    s.gt = random_mask(64, rng);
    data.push_back(std::move(s));
  }
  const SegModel<float> reference(cfg);
  const std::string before = checkpoint_to_bytes(reference.to_checkpoint());
  const TrainResult result = train<float>(cfg, data);
  CHECK(checkpoint_to_bytes(result.checkpoint) == before);
  for (double v : result.step_loss)
    CHECK(v == doctest::Approx(result.step_loss[0]).epsilon(1e-12));
  CHECK(result.initial_loss == doctest::Approx(result.final_loss).epsilon(1e-12));
}

TEST_CASE("train: fixed seed gives bit-identical checkpoints across runs") {
  NetConfig cfg = small_config();
  cfg.epochs = 1;
  cfg.batch = 2;
  Rng rng(76, "net.train_determinism");
  std::vector<TrainSample<float>> data;
  for (int i = 0; i < 4; ++i) {
    TrainSample<float> s;
    s.input = random_input<float>(4, 64, rng);
    s.gt = random_mask(64, rng);
    data.push_back(std::move(s));
  }
  const TrainResult a = train<float>(cfg, data);
  const TrainResult b = train<float>(cfg, data);
  CHECK(checkpoint_to_bytes(a.checkpoint) == checkpoint_to_bytes(b.checkpoint));
  REQUIRE(a.step_loss.size() == b.step_loss.size());
  for (std::size_t i = 0; i < a.step_loss.size(); ++i) CHECK(a.step_loss[i] == b.step_loss[i]);
}

TEST_CASE("train: empty dataset is rejected") {
  CHECK_THROWS_AS(train<float>(small_config(), {}), std::invalid_argument);
}

TEST_CASE("predict: zeroed heads give a uniform 0.5 mask; output stays in [0,1]") {
  const NetConfig cfg = small_config();
  SegModel<float> model(cfg);
  model.head[0].w.set_zero();
  model.head[0].b.set_zero();
  const Checkpoint ckpt = model.to_checkpoint();

  Rng rng(77, "net.predict");
  const Tensor<float> input = random_input<float>(4, 64, rng);
  const ProbMask mask = predict(ckpt, input);
  CHECK(mask.height() == 64);
  CHECK(mask.width() == 64);
  for (Eigen::Index i = 0; i < mask.values.size(); ++i)
    CHECK(mask.values.data()[i] == doctest::Approx(0.5f).epsilon(1e-6));

  const ProbMask again = predict(ckpt, input);
  for (Eigen::Index i = 0; i < mask.values.size(); ++i)
    CHECK(mask.values.data()[i] == again.values.data()[i]);
}

TEST_CASE("config: invariants are validated") {
  NetConfig cfg = small_config();
  cfg.input_size = 48;  // not a multiple of 32
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.channels_per_level = {8, 8, 16, 32};  // not strictly increasing
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.lora_rank = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.rfb_channels = 10;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
