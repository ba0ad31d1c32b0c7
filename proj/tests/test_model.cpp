#include <gtest/gtest.h>

#include <sstream>

#include "nsfpn/gradcheck.hpp"
#include "nsfpn/model.hpp"

using namespace nsfpn;
using namespace nsfpn::model;

namespace {

NsFpnConfig small_config(FpnMode mode = FpnMode::Ns) {
  NsFpnConfig cfg;
  cfg.channels = 8;
  cfg.mode = mode;
  cfg.backbone_widths = {4, 8, 8, 8};
  cfg.head_width = 4;
  cfg.spiral.heads = 2;
  cfg.spiral.points = 3;
  return cfg;
}

Pyramid random_pyramid(Tape& t, Rng& rng, const std::array<int, 4>& channels, int size) {
  Pyramid p;
  for (int i = 0; i < 4; ++i) p[i] = t.constant(randn({1, channels[i], size >> i, size >> i}, rng));
  return p;
}

}  // namespace

TEST(TinyBackbone, StrideArithmetic) {
  NsFpnModel m(NsFpnConfig{}, 1);
  Tape t;
  const Pyramid f = m.tiny_backbone(t.constant(Tensor4({1, 1, 64, 64})));
  const int widths[] = {16, 32, 64, 64};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(f[i].shape(), (Shape{1, widths[i], 32 >> i, 32 >> i}));
}

TEST(TinyBackbone, ZeroInputZeroBiasesGiveZeroFeatures) {
  NsFpnModel m(NsFpnConfig{}, 2);
  Tape t;
  const Pyramid f = m.tiny_backbone(t.constant(Tensor4({2, 1, 32, 32})));
  for (const Var& v : f) EXPECT_EQ(v.value().sum_squares(), 0.0);
}

TEST(TinyBackbone, RejectsIndivisibleSizes) {
  NsFpnModel m(small_config(), 3);
  Tape t;
  EXPECT_THROW(m.tiny_backbone(t.constant(Tensor4({1, 1, 24, 32}))), ShapeError);
  EXPECT_THROW(m.tiny_backbone(t.constant(Tensor4({1, 2, 32, 32}))), ShapeError);
}

TEST(LateralReduce, IdentityWeightsPassThrough) {
  NsFpnConfig cfg;
  cfg.backbone_widths = {64, 64, 64, 64};
  NsFpnModel m(cfg, 4);
  for (const ConvLayer& l : m.laterals()) {
    l.weight->value.fill(0.0);
    for (int c = 0; c < 64; ++c) l.weight->value(c, c, 0, 0) = 1.0;
  }
  Rng rng(4);
  Tape t;
  const Pyramid in = random_pyramid(t, rng, {64, 64, 64, 64}, 16);
  const Pyramid out = m.lateral_reduce(in);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(out[i].value().vec(), in[i].value().vec());
}

TEST(LateralReduce, ChannelsBecomeSixtyFour) {
  NsFpnConfig cfg;
  cfg.backbone_widths = {8, 16, 32, 64};
  NsFpnModel m(cfg, 5);
  Rng rng(5);
  Tape t;
  const Pyramid out = m.lateral_reduce(random_pyramid(t, rng, {8, 16, 32, 64}, 32));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(out[i].shape(), (Shape{1, 64, 32 >> i, 32 >> i}));
}

TEST(LateralReduce, OutputPixelDependsOnlyOnColocatedInput) {
  NsFpnModel m(small_config(), 6);
  Rng rng(6);
  Tape t;
  Pyramid in = random_pyramid(t, rng, {4, 8, 8, 8}, 16);
  const Tensor4 base = m.lateral_reduce(in)[0].value();
  Tensor4 moved = in[0].value();
  moved(0, 2, 15, 15) += 5.0;
  in[0] = t.constant(moved);
  const Tensor4 after = m.lateral_reduce(in)[0].value();
  for (int c = 0; c < 8; ++c) {
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) {
        if (y == 15 && x == 15) continue;
        EXPECT_EQ(after(0, c, y, x), base(0, c, y, x));
      }
    }
    EXPECT_NE(after(0, c, 15, 15), base(0, c, 15, 15));
  }
}

TEST(LateralReduce, BrokenStrideChainRejected) {
  NsFpnModel m(small_config(), 7);
  Tape t;
  Pyramid p;
  p[0] = t.constant(Tensor4({1, 4, 16, 16}));
  p[1] = t.constant(Tensor4({1, 8, 8, 8}));
  p[2] = t.constant(Tensor4({1, 8, 8, 8}));
  p[3] = t.constant(Tensor4({1, 8, 2, 2}));
  EXPECT_THROW(m.lateral_reduce(p), ShapeError);
}

TEST(NsFpnForward, PyramidShapeContract) {
  for (FpnMode mode : {FpnMode::Plain, FpnMode::Ns}) {
    NsFpnConfig cfg;
    cfg.mode = mode;
    NsFpnModel m(cfg, 8);
    for (int size : {32, 64, 128}) {
      Rng rng(size);
      Tape t;
      const Pyramid y = m.nsfpn_forward(m.tiny_backbone(t.constant(randn({1, 1, size, size}, rng))));
      for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(y[i].shape(), (Shape{1, 64, size >> (i + 1), size >> (i + 1)})) << to_string(mode);
      }
    }
  }
}

TEST(NsFpnForward, PlainWithZeroUpperLateralsKeepsFinest) {
  NsFpnModel m(small_config(FpnMode::Plain), 9);
  Rng rng(9);
  Tape t;
  Pyramid x;
  x[0] = t.constant(randn({1, 8, 16, 16}, rng));
  for (int i = 1; i < 4; ++i) x[i] = t.constant(Tensor4({1, 8, 16 >> i, 16 >> i}));
  EXPECT_EQ(m.fpn(x)[0].value().vec(), x[0].value().vec());
}

TEST(NsFpnForward, Topology) {
  NsFpnModel ns(small_config(), 10);
  EXPECT_EQ(ns.lfp_levels().size(), 4u);
  EXPECT_EQ(ns.sfs_edges().size(), 3u);
  NsFpnModel plain(small_config(FpnMode::Plain), 10);
  EXPECT_TRUE(plain.lfp_levels().empty());
  EXPECT_TRUE(plain.sfs_edges().empty());
}

TEST(NsFpnForward, ModesAcceptSameInputs) {
  NsFpnModel ns(small_config(), 11);
  NsFpnModel plain(small_config(FpnMode::Plain), 11);
  Rng rng(11);
  const Tensor4 img = randn({2, 1, 32, 32}, rng);
  Tape t;
  EXPECT_EQ(ns.forward(t.constant(img)).shape(), plain.forward(t.constant(img)).shape());
}

TEST(SegHead, ShapeAndZeroWeights) {
  NsFpnModel m(small_config(), 12);
  Rng rng(12);
  Tape t;
  const Tensor4 y1 = randn({2, 8, 8, 12}, rng);
  EXPECT_EQ(m.seg_head(t.constant(y1)).shape(), (Shape{2, 1, 16, 24}));
  Param& w = m.params().get("head.out.weight");
  w.value.fill(0.0);
  const double bias = m.params().get("head.out.bias").value[0];
  for (double v : m.seg_head(t.constant(y1)).value().vec()) EXPECT_NEAR(v, bias, 1e-12);
}

TEST(SegHead, GradientMatchesFiniteDifferences) {
  NsFpnModel m(small_config(), 13);
  Rng rng(13);
  Param& y1 = m.params().add("y1", randn({1, 8, 4, 4}, rng));
  const Tensor4 w = randn({1, 1, 8, 8}, rng);
  const GradCheckResult r = grad_check(
      [&](Tape& t) { return ops::weighted_sum(m.seg_head(t.param(y1)), w); }, m.params());
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param;
}

TEST(Complexity, CountsMatchParameterStore) {
  for (FpnMode mode : {FpnMode::Plain, FpnMode::Ns}) {
    NsFpnConfig cfg;
    cfg.mode = mode;
    NsFpnModel m(cfg, 14);
    const ComplexityReport r = count_params_flops(m, 64, 64);
    EXPECT_EQ(r.total_params(), m.params().scalar_count());
    EXPECT_GT(r.total_macs(), 0.0);
  }
}

TEST(Complexity, ComponentBreakdownAtDefaults) {
  NsFpnModel m(NsFpnConfig{}, 15);
  const ComplexityReport r = count_params_flops(m, 64, 64);
  EXPECT_EQ(r.lfp.params, 400u);
  EXPECT_EQ(r.sfs_offset_params, 192u);
  EXPECT_LT(r.sfs_offset_params, r.dat_offset_params);
  for (int size : {32, 128}) {
    const ComplexityReport s = count_params_flops(m, size, size);
    EXPECT_EQ(s.sfs_offset_params, 192u);
    EXPECT_EQ(s.total_params(), r.total_params());
  }
  std::size_t eps = 0;
  for (const auto& e : m.sfs_edges()) eps += e.eps->value.size();
  EXPECT_EQ(eps, 3u * 4 * 8 * 2);
}

TEST(Complexity, AttentionProjectionsScaleWithChannelsSquared) {
  NsFpnConfig a;
  NsFpnConfig b;
  b.channels = 128;
  NsFpnModel ma(a, 16);
  NsFpnModel mb(b, 16);
  EXPECT_EQ(count_params_flops(mb, 64, 64).attention_projection_params,
            4 * count_params_flops(ma, 64, 64).attention_projection_params);
}

TEST(Complexity, StableAcrossRuns) {
  NsFpnModel a(NsFpnConfig{}, 17);
  NsFpnModel b(NsFpnConfig{}, 18);
  EXPECT_EQ(count_params_flops(a, 64, 64).total_params(), count_params_flops(b, 64, 64).total_params());
  EXPECT_EQ(count_params_flops(a, 64, 64).total_macs(), count_params_flops(b, 64, 64).total_macs());
}

TEST(Checkpoint, RoundTripRestoresOutputs) {
  NsFpnModel a(small_config(), 19);
  Rng init(190);
  for (Param& p : a.params()) p.value = randn(p.value.shape(), init, 0.2);
  std::stringstream ss;
  save_checkpoint(a, ss, {{"epochs", "3"}});
  const Checkpoint ck = read_checkpoint(ss);
  EXPECT_EQ(ck.extra.at("epochs"), "3");
  NsFpnModel b(ck.config, 99);
  load_parameters(b, ck);
  Rng rng(19);
  const Tensor4 img = randn({1, 1, 32, 32}, rng);
  Tape t;
  EXPECT_EQ(a.forward(t.constant(img)).value().vec(), b.forward(t.constant(img)).value().vec());
}

TEST(Checkpoint, ShapeMismatchNamesBothShapes) {
  NsFpnModel a(small_config(), 20);
  std::stringstream ss;
  save_checkpoint(a, ss);
  const Checkpoint ck = read_checkpoint(ss);
  NsFpnConfig other = small_config();
  other.head_width = 6;
  NsFpnModel b(other, 20);
  try {
    load_parameters(b, ck);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("4x8x3x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("6x8x3x3"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, MalformedInputRejected) {
  std::stringstream bad("not a checkpoint\n");
  EXPECT_THROW(read_checkpoint(bad), std::runtime_error);
}

TEST(NsFpnConfig, MapRoundTrip) {
  NsFpnConfig cfg = small_config();
  cfg.lfp.tau_abs = 0.25;
  cfg.spiral.l0 = 0.1;
  const NsFpnConfig back = NsFpnConfig::from_map(cfg.to_map());
  EXPECT_EQ(back.to_map(), cfg.to_map());
  EXPECT_THROW(parse_fpn_mode("fpn"), std::invalid_argument);
  EXPECT_EQ(parse_fpn_mode(to_string(FpnMode::Plain)), FpnMode::Plain);
}

TEST(NsFpnForward, DeterministicGivenSeed) {
  NsFpnModel a(small_config(), 21);
  NsFpnModel b(small_config(), 21);
  Rng rng(21);
  const Tensor4 img = randn({1, 1, 32, 32}, rng);
  Tape t;
  EXPECT_EQ(a.forward(t.constant(img)).value().vec(), b.forward(t.constant(img)).value().vec());
}
