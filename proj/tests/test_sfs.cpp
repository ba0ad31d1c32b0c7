#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "nsfpn/gradcheck.hpp"
#include "nsfpn/sfs.hpp"
#include "oracles.hpp"

using namespace nsfpn;
using namespace nsfpn::sfs;

namespace {

SpiralConfig small_config(int heads = 2, int points = 2, int stride = 1) {
  SpiralConfig cfg;
  cfg.heads = heads;
  cfg.points = points;
  cfg.l0 = 0.5;
  cfg.dl = 0.5;
  cfg.grid_stride = stride;
  return cfg;
}

void randomize(ParamStore& store, Rng& rng, double sd = 0.5) {
  for (Param& p : store) p.value = randn(p.value.shape(), rng, sd);
}

Tensor4 fuse(const Tensor4& x, const Tensor4& y, const SfsParams& p) {
  Tape t;
  return sfs_fuse(t.constant(x), t.constant(y), p).value();
}

}  // namespace

TEST(SpiralOffsets, HandEvaluatedTwoByTwo) {
  SpiralConfig cfg = small_config();
  cfg.l0 = 1.0;
  cfg.dl = 1.0;
  const Tensor4 s = spiral_offsets(cfg);
  ASSERT_EQ(s.shape(), (Shape{1, 2, 2, 2}));
  const double expected[2][2][2] = {{{2, 0}, {-3, 0}}, {{-2, 0}, {3, 0}}};
  for (int h = 0; h < 2; ++h) {
    for (int k = 0; k < 2; ++k) {
      EXPECT_NEAR(s(0, h, k, 0), expected[h][k][0], 1e-12);
      EXPECT_NEAR(s(0, h, k, 1), expected[h][k][1], 1e-12);
    }
  }
}

TEST(SpiralOffsets, RadiusAndRotation) {
  for (int heads : {1, 2, 4}) {
    for (int points : {1, 3, 8}) {
      SpiralConfig cfg = small_config(heads, points);
      cfg.l0 = 0.7;
      cfg.dl = 0.3;
      const Tensor4 s = spiral_offsets(cfg);
      for (int h = 0; h < heads; ++h) {
        for (int k = 0; k < points; ++k) {
          const double r = std::hypot(s(0, h, k, 0), s(0, h, k, 1));
          EXPECT_NEAR(r, cfg.l0 + (k + 1) * cfg.dl, 1e-12);
          const double a = 2.0 * std::numbers::pi * h / heads;
          const double rx = std::cos(a) * s(0, 0, k, 0) - std::sin(a) * s(0, 0, k, 1);
          const double ry = std::sin(a) * s(0, 0, k, 0) + std::cos(a) * s(0, 0, k, 1);
          EXPECT_NEAR(rx, s(0, h, k, 0), 1e-12);
          EXPECT_NEAR(ry, s(0, h, k, 1), 1e-12);
        }
      }
    }
  }
}

TEST(SpiralOffsets, RadiiIncreaseAndAngularGapsEqual) {
  SpiralConfig cfg;
  const Tensor4 s = spiral_offsets(cfg);
  for (int h = 0; h < cfg.heads; ++h) {
    for (int k = 1; k < cfg.points; ++k) {
      const double r0 = std::hypot(s(0, h, k - 1, 0), s(0, h, k - 1, 1));
      const double r1 = std::hypot(s(0, h, k, 0), s(0, h, k, 1));
      EXPECT_GT(r1, r0);
      const double t0 = std::atan2(s(0, h, k - 1, 1), s(0, h, k - 1, 0));
      const double t1 = std::atan2(s(0, h, k, 1), s(0, h, k, 0));
      double gap = std::remainder(t1 - t0, 2.0 * std::numbers::pi);
      if (gap < 0) gap += 2.0 * std::numbers::pi;
      EXPECT_NEAR(gap, 2.0 * std::numbers::pi / cfg.points, 1e-12);
    }
  }
}

TEST(SpiralConfig, Validation) {
  SpiralConfig cfg;
  cfg.heads = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.l0 = -1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.grid_stride = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(ReferenceGrid, FullGridHitsEveryPixel) {
  const Tensor4 g = reference_grid(4, 4, 1);
  ASSERT_EQ(g.height(), 16);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      EXPECT_NEAR(g(0, 0, y * 4 + x, 0), -1.0 + 2.0 * x / 3.0, 1e-12);
      EXPECT_NEAR(g(0, 0, y * 4 + x, 1), -1.0 + 2.0 * y / 3.0, 1e-12);
    }
  }
}

TEST(ReferenceGrid, StrideTwoIsSymmetric) {
  const Tensor4 g = reference_grid(4, 4, 2);
  ASSERT_EQ(g.height(), 4);
  double sx = 0.0;
  double sy = 0.0;
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(std::abs(g(0, 0, i, 0)), 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(std::abs(g(0, 0, i, 1)), 2.0 / 3.0, 1e-12);
    sx += g(0, 0, i, 0);
    sy += g(0, 0, i, 1);
  }
  EXPECT_NEAR(sx, 0.0, 1e-12);
  EXPECT_NEAR(sy, 0.0, 1e-12);
}

TEST(ReferenceGrid, CountsAndRange) {
  for (int h : {2, 3, 5, 8}) {
    for (int w : {2, 4, 7}) {
      for (int g = 1; g <= std::min(h, w); ++g) {
        const Tensor4 grid = reference_grid(h, w, g);
        EXPECT_EQ(grid.height(), ((h + g - 1) / g) * ((w + g - 1) / g));
        for (double v : grid.vec()) {
          EXPECT_GE(v, -1.0);
          EXPECT_LE(v, 1.0);
        }
      }
    }
  }
  EXPECT_THROW(reference_grid(2, 4, 3), std::invalid_argument);
}

TEST(SfsSample, ConstantFieldGivesConstantTokens) {
  Rng rng(1);
  SpiralConfig cfg = small_config(2, 3, 1);
  Tape t;
  const Tensor4 tok = sfs_sample(t.constant(Tensor4({1, 4, 3, 3}, 0.6)),
                                 t.constant(randn({1, 2, 3, 2}, rng, 2.0)), cfg).value();
  EXPECT_EQ(tok.height(), 9 * 3);
  for (double v : tok.vec()) EXPECT_NEAR(v, 0.6, 1e-15);
}

TEST(SfsSample, DegenerateSpiralRepeatsReferenceSamples) {
  Rng rng(2);
  SpiralConfig cfg = small_config(2, 3, 1);
  cfg.l0 = 0.0;
  cfg.dl = 0.0;
  const Tensor4 y = randn({1, 4, 3, 3}, rng);
  Tape t;
  const Tensor4 tok = sfs_sample(t.constant(y), t.constant(Tensor4({1, 2, 3, 2})), cfg).value();
  for (int cell = 0; cell < 9; ++cell) {
    for (int k = 0; k < 3; ++k) {
      for (int c = 0; c < 4; ++c) {
        EXPECT_NEAR(tok(0, 0, cell * 3 + k, c), y(0, c, cell / 3, cell % 3), 1e-12);
      }
    }
  }
}

TEST(SfsSample, MatchesPointwiseBilinearOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    SpiralConfig cfg = small_config(2, 3, 1 + trial % 2);
    const int h = 4 + trial % 3;
    const int w = 4 + trial % 2;
    const Tensor4 y = randn({2, 4, h, w}, rng);
    const Tensor4 eps = randn({1, 2, 3, 2}, rng, 0.3);
    Tape t;
    const Tensor4 tok = sfs_sample(t.constant(y), t.constant(eps), cfg).value();
    const Tensor4 coords = sample_coords(t.constant(eps), cfg, 2, h, w).value();
    const int n = tok.height();
    for (int b = 0; b < 2; ++b) {
      for (int head = 0; head < 2; ++head) {
        for (int i = 0; i < n; ++i) {
          for (int d = 0; d < 2; ++d) {
            const int c = head * 2 + d;
            const double ref = oracle::bilinear(y, b, c, coords(b, head, i, 0), coords(b, head, i, 1));
            EXPECT_NEAR(tok(b, 0, i, c), ref, 1e-12);
          }
        }
      }
    }
  }
}

TEST(SfsSample, CoordinatesFollowSpiralAndOffsets) {
  Rng rng(4);
  SpiralConfig cfg = small_config(2, 2, 1);
  const Tensor4 eps = randn({1, 2, 2, 2}, rng, 0.3);
  Tape t;
  const Tensor4 coords = sample_coords(t.constant(eps), cfg, 1, 5, 7).value();
  const Tensor4 grid = reference_grid(5, 7, 1);
  const Tensor4 s = spiral_offsets(cfg);
  for (int head = 0; head < 2; ++head) {
    for (int cell = 0; cell < 35; ++cell) {
      for (int k = 0; k < 2; ++k) {
        const int i = cell * 2 + k;
        EXPECT_NEAR(coords(0, head, i, 0),
                    grid(0, 0, cell, 0) + (s(0, head, k, 0) + eps(0, head, k, 0)) * 2.0 / 6.0, 1e-12);
        EXPECT_NEAR(coords(0, head, i, 1),
                    grid(0, 0, cell, 1) + (s(0, head, k, 1) + eps(0, head, k, 1)) * 2.0 / 4.0, 1e-12);
      }
    }
  }
}

TEST(SplitHeads, ColumnGroups) {
  Rng rng(5);
  const Tensor4 tok = randn({2, 1, 5, 6}, rng);
  const auto parts = split_heads(tok, 3);
  ASSERT_EQ(parts.size(), 3u);
  for (int h = 0; h < 3; ++h) {
    EXPECT_EQ(parts[h].shape(), (Shape{2, 1, 5, 2}));
    EXPECT_EQ(parts[h](1, 0, 4, 1), tok(1, 0, 4, h * 2 + 1));
  }
}

TEST(SfsParams, SharedOffsetTableSize) {
  for (int heads : {1, 2, 4}) {
    for (int points : {1, 4, 8}) {
      ParamStore store;
      Rng rng(6);
      const SfsParams p = SfsParams::create(store, "sfs", 8, small_config(heads, points, 2), rng);
      EXPECT_EQ(p.eps->value.size(), static_cast<std::size_t>(heads * points * 2));
      for (double v : p.eps->value.vec()) EXPECT_EQ(v, 0.0);
    }
  }
  ParamStore store;
  Rng rng(7);
  EXPECT_THROW(SfsParams::create(store, "sfs", 6, small_config(4, 2, 1), rng), std::invalid_argument);
}

TEST(SfsFuse, ZeroValueProjectionIsIdentity) {
  Rng rng(8);
  ParamStore store;
  SfsParams p = SfsParams::create(store, "sfs", 8, small_config(), rng);
  randomize(store, rng);
  p.attn.wv->value.fill(0.0);
  p.attn.bv->value.fill(0.0);
  p.attn.bo->value.fill(0.0);
  const Tensor4 x = randn({1, 8, 4, 4}, rng);
  EXPECT_LT(max_abs_diff(fuse(x, randn({1, 8, 2, 2}, rng), p), x), 1e-15);
}

TEST(SfsFuse, ConstantCoarseMapGivesSpatiallyConstantUpdate) {
  Rng rng(9);
  ParamStore store;
  SfsParams p = SfsParams::create(store, "sfs", 8, small_config(2, 3, 1), rng);
  randomize(store, rng);
  p.eps->value.fill(0.0);
  const Tensor4 x = randn({1, 8, 6, 6}, rng);
  const Tensor4 diff = fuse(x, Tensor4({1, 8, 3, 3}, 0.4), p) - x;
  for (int c = 0; c < 8; ++c) {
    for (int i = 0; i < 36; ++i) EXPECT_NEAR(diff.plane(0, c)[i], diff.plane(0, c)[0], 1e-9);
  }
}

TEST(SfsFuse, MatchesSlowReference) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore store;
    const int stride = trial < 10 ? 1 : 2;
    SfsParams p = SfsParams::create(store, "sfs", 8, small_config(2, 2, stride), rng);
    randomize(store, rng);
    const int h = 4 + 2 * (trial % 2);
    const Tensor4 x = randn({1 + trial % 2, 8, h, 4}, rng);
    const Tensor4 y = randn({x.batch(), 8, h / 2, 2}, rng);
    EXPECT_LT(max_abs_diff(fuse(x, y, p), oracle::sfs_fuse(x, y, p)), 1e-9) << trial;
  }
}

TEST(SfsFuse, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  ParamStore store;
  SfsParams p = SfsParams::create(store, "sfs", 8, small_config(), rng);
  randomize(store, rng, 0.3);
  Param& x = store.add("x", randn({1, 8, 4, 4}, rng));
  Param& y = store.add("y", randn({1, 8, 2, 2}, rng));
  const Tensor4 w = randn(x.value.shape(), rng);
  const GradCheckResult r = grad_check(
      [&](Tape& t) { return ops::weighted_sum(sfs_fuse(t.param(x), t.param(y), p), w); }, store);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "]";
}

TEST(SfsFuse, ShapeMismatchRejected) {
  Rng rng(12);
  ParamStore store;
  const SfsParams p = SfsParams::create(store, "sfs", 8, small_config(), rng);
  EXPECT_THROW(fuse(Tensor4({1, 8, 4, 4}), Tensor4({1, 8, 3, 2}), p), ShapeError);
  EXPECT_THROW(fuse(Tensor4({1, 8, 4, 4}), Tensor4({1, 4, 2, 2}), p), ShapeError);
  EXPECT_THROW(fuse(Tensor4({1, 4, 4, 4}), Tensor4({1, 4, 2, 2}), p), ShapeError);
}

TEST(SfsFuse, Deterministic) {
  Rng rng(13);
  ParamStore store;
  SfsParams p = SfsParams::create(store, "sfs", 8, small_config(2, 4, 2), rng);
  randomize(store, rng);
  const Tensor4 x = randn({2, 8, 8, 8}, rng);
  const Tensor4 y = randn({2, 8, 4, 4}, rng);
  EXPECT_EQ(fuse(x, y, p).vec(), fuse(x, y, p).vec());
}

TEST(SpiralDump, LinesAndRoundTrip) {
  SpiralConfig cfg;
  std::stringstream ss;
  write_spiral_dump(ss, cfg);
  const std::string text = ss.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), cfg.heads * cfg.points);
  const auto rows = read_spiral_dump(ss);
  ASSERT_EQ(rows.size(), static_cast<std::size_t>(cfg.heads * cfg.points));
  const Tensor4 s = spiral_offsets(cfg);
  for (const auto& r : rows) {
    EXPECT_EQ(r.dx, s(0, r.h - 1, r.k - 1, 0));
    EXPECT_EQ(r.dy, s(0, r.h - 1, r.k - 1, 1));
  }
  EXPECT_EQ(rows.front().h, 1);
  EXPECT_EQ(rows.front().k, 1);
}
