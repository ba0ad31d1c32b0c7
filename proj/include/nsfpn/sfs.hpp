#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "nsfpn/attention.hpp"

// Spiral-aware feature sampling: the coarser pyramid level is sampled at a strided reference grid
// displaced by a per-head spiral plus a shared learnable offset table, and the samples serve as
// keys/values of a cross attention whose queries are the finer level's pixels.
namespace nsfpn::sfs {

struct SpiralConfig {
  int heads = 4;
  int points = 8;
  double l0 = 0.5;  // coarse pixels
  double dl = 0.5;  // coarse pixels
  int grid_stride = 2;

  void validate() const;
  std::size_t offset_count() const { return static_cast<std::size_t>(heads) * points * 2; }
};

/// 1 x H x P x 2 table of (dx, dy) in coarse-pixel units. With 1-based head h and point k:
/// theta = 2 pi k / P + 2 pi h / H, radius = l0 + k * dl.
Tensor4 spiral_offsets(const SpiralConfig& cfg);

/// Centres of the g x g cells tiling a height x width map, as 1 x 1 x (HG * WG) x 2 normalized
/// (x, y) pairs in the bilinear_sample convention. HG = ceil(height / g), WG = ceil(width / g).
Tensor4 reference_grid(int height, int width, int grid_stride);

struct SfsParams {
  SpiralConfig config;
  int channels = 0;
  Param* eps = nullptr;  // 1 x H x P x 2, coarse-pixel units
  Param* ln_q_gain = nullptr;
  Param* ln_q_shift = nullptr;
  Param* ln_kv_gain = nullptr;
  Param* ln_kv_shift = nullptr;
  MhaParams attn;

  static SfsParams create(ParamStore& store, const std::string& prefix, int channels,
                          const SpiralConfig& config, Rng& rng);
};

/// Sampling locations B x H x (HG * WG * P) x 2, ordered (cell, point) per head.
Var sample_coords(Var eps, const SpiralConfig& cfg, int batch, int height, int width);

/// Key/value tokens B x 1 x (HG * WG * P) x C. Columns [h C/H, (h+1) C/H) hold head h's
/// channel group sampled at head h's locations.
Var sfs_sample(Var y_next, Var eps, const SpiralConfig& cfg);

/// Per-head view of sfs_sample output: heads tensors of shape B x 1 x N x C/H.
std::vector<Tensor4> split_heads(const Tensor4& tokens, int heads);

/// Y = X' + reshape(Attn(LN(tokens(X')), LN(sfs_sample(Y_next)))).
Var sfs_fuse(Var x_purified, Var y_next, const SfsParams& params);

/// Writes "h k dx dy" lines (1-based h, k) in coarse-pixel units.
void write_spiral_dump(std::ostream& out, const SpiralConfig& cfg);

struct SpiralDumpRow {
  int h;
  int k;
  double dx;
  double dy;
};
std::vector<SpiralDumpRow> read_spiral_dump(std::istream& in);

}  // namespace nsfpn::sfs
