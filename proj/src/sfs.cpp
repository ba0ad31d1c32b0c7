#include "nsfpn/sfs.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

namespace nsfpn::sfs {

void SpiralConfig::validate() const {
  if (heads < 1) throw std::invalid_argument("spiral: heads must be positive");
  if (points < 1) throw std::invalid_argument("spiral: points must be positive");
  if (!(l0 >= 0.0)) throw std::invalid_argument("spiral: l0 must be non-negative");
  if (!(dl >= 0.0)) throw std::invalid_argument("spiral: dl must be non-negative");
  if (grid_stride < 1) throw std::invalid_argument("spiral: grid_stride must be positive");
}

Tensor4 spiral_offsets(const SpiralConfig& cfg) {
  cfg.validate();
  Tensor4 s(Shape{1, cfg.heads, cfg.points, 2});
  const double two_pi = 2.0 * std::numbers::pi;
  for (int h = 1; h <= cfg.heads; ++h) {
    for (int k = 1; k <= cfg.points; ++k) {
      const double theta = two_pi * k / cfg.points + two_pi * h / cfg.heads;
      const double radius = cfg.l0 + k * cfg.dl;
      s(0, h - 1, k - 1, 0) = radius * std::cos(theta);
      s(0, h - 1, k - 1, 1) = radius * std::sin(theta);
    }
  }
  return s;
}

namespace {

double normalized_centre(double pixel, int size) {
  return size > 1 ? 2.0 * pixel / (size - 1) - 1.0 : 0.0;
}

double pixel_to_normalized(int size) { return size > 1 ? 2.0 / (size - 1) : 0.0; }

}  // namespace

Tensor4 reference_grid(int height, int width, int grid_stride) {
  if (grid_stride < 1 || grid_stride > std::min(height, width)) {
    throw std::invalid_argument("reference_grid: stride " + std::to_string(grid_stride) +
                                " must lie in [1, " + std::to_string(std::min(height, width)) + "]");
  }
  const int hg = (height + grid_stride - 1) / grid_stride;
  const int wg = (width + grid_stride - 1) / grid_stride;
  Tensor4 grid(Shape{1, 1, hg * wg, 2});
  for (int gy = 0; gy < hg; ++gy) {
    const int y0 = gy * grid_stride;
    const int y1 = std::min(y0 + grid_stride, height) - 1;
    for (int gx = 0; gx < wg; ++gx) {
      const int x0 = gx * grid_stride;
      const int x1 = std::min(x0 + grid_stride, width) - 1;
      grid(0, 0, gy * wg + gx, 0) = normalized_centre(0.5 * (x0 + x1), width);
      grid(0, 0, gy * wg + gx, 1) = normalized_centre(0.5 * (y0 + y1), height);
    }
  }
  return grid;
}

SfsParams SfsParams::create(ParamStore& store, const std::string& prefix, int channels,
                            const SpiralConfig& config, Rng& rng) {
  config.validate();
  SfsParams p;
  p.config = config;
  p.channels = channels;
  p.attn = MhaParams::create(store, prefix + ".attn", channels, config.heads, rng);
  // Zero output projection: the fusion starts as the identity on the purified level.
  p.attn.wo->value.fill(0.0);
  p.eps = &store.add(prefix + ".eps", Tensor4(Shape{1, config.heads, config.points, 2}));
  p.ln_q_gain = &store.add(prefix + ".ln_q.gain", Tensor4(Shape{1, 1, 1, channels}, 1.0));
  p.ln_q_shift = &store.add(prefix + ".ln_q.shift", Tensor4(Shape{1, 1, 1, channels}));
  p.ln_kv_gain = &store.add(prefix + ".ln_kv.gain", Tensor4(Shape{1, 1, 1, channels}, 1.0));
  p.ln_kv_shift = &store.add(prefix + ".ln_kv.shift", Tensor4(Shape{1, 1, 1, channels}));
  return p;
}

Var sample_coords(Var eps, const SpiralConfig& cfg, int batch, int height, int width) {
  if (!(eps.shape() == Shape{1, cfg.heads, cfg.points, 2})) {
    throw ShapeError("sample_coords: offset table " + eps.shape().str() + " does not match " +
                     std::to_string(cfg.heads) + " heads x " + std::to_string(cfg.points) + " points");
  }
  // Maps smaller than the stride get a single reference point.
  const Tensor4 grid = reference_grid(height, width, std::min({cfg.grid_stride, height, width}));
  const Tensor4 spiral = spiral_offsets(cfg);
  const int cells = grid.height();
  const int n = cells * cfg.points;
  const double sx = pixel_to_normalized(width);
  const double sy = pixel_to_normalized(height);
  Tensor4 coords(Shape{batch, cfg.heads, n, 2});
  const Tensor4& e = eps.value();
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < cfg.heads; ++h) {
      for (int g = 0; g < cells; ++g) {
        for (int k = 0; k < cfg.points; ++k) {
          const int i = g * cfg.points + k;
          coords(b, h, i, 0) = grid(0, 0, g, 0) + (spiral(0, h, k, 0) + e(0, h, k, 0)) * sx;
          coords(b, h, i, 1) = grid(0, 0, g, 1) + (spiral(0, h, k, 1) + e(0, h, k, 1)) * sy;
        }
      }
    }
  }
  Tape& t = eps.tape();
  return t.record("sample_coords", std::move(coords), {eps},
                  [&t, eps, cells, sx, sy, points = cfg.points](const Tensor4& g) {
                    Tensor4* ge = t.grad_target(eps);
                    if (ge == nullptr) return;
                    const Shape gs = g.shape();
                    for (int b = 0; b < gs.b; ++b) {
                      for (int h = 0; h < gs.c; ++h) {
                        for (int c = 0; c < cells; ++c) {
                          for (int k = 0; k < points; ++k) {
                            const int i = c * points + k;
                            (*ge)(0, h, k, 0) += g(b, h, i, 0) * sx;
                            (*ge)(0, h, k, 1) += g(b, h, i, 1) * sy;
                          }
                        }
                      }
                    }
                  });
}

Var sfs_sample(Var y_next, Var eps, const SpiralConfig& cfg) {
  const Shape ys = y_next.shape();
  if (ys.c % cfg.heads != 0) {
    throw ShapeError("sfs_sample: channels " + std::to_string(ys.c) + " not divisible by heads " +
                     std::to_string(cfg.heads));
  }
  Var coords = sample_coords(eps, cfg, ys.b, ys.h, ys.w);
  return ops::to_tokens(ops::bilinear_sample(y_next, coords));
}

std::vector<Tensor4> split_heads(const Tensor4& tokens, int heads) {
  const Shape s = tokens.shape();
  if (s.c != 1 || s.w % heads != 0) {
    throw ShapeError("split_heads: " + s.str() + " cannot be split into " + std::to_string(heads));
  }
  const int d = s.w / heads;
  std::vector<Tensor4> out;
  for (int h = 0; h < heads; ++h) {
    Tensor4 part(Shape{s.b, 1, s.h, d});
    for (int b = 0; b < s.b; ++b) {
      for (int i = 0; i < s.h; ++i) {
        for (int j = 0; j < d; ++j) part(b, 0, i, j) = tokens(b, 0, i, h * d + j);
      }
    }
    out.push_back(std::move(part));
  }
  return out;
}

Var sfs_fuse(Var x_purified, Var y_next, const SfsParams& params) {
  const Shape xs = x_purified.shape();
  const Shape ys = y_next.shape();
  if (xs.c != params.channels || ys.c != params.channels) {
    throw ShapeError("sfs_fuse: expected " + std::to_string(params.channels) + " channels, got " +
                     xs.str() + " and " + ys.str());
  }
  if (ys.b != xs.b || 2 * ys.h != xs.h || 2 * ys.w != xs.w) {
    throw ShapeError("sfs_fuse: coarse level " + ys.str() + " is not half of fine level " + xs.str());
  }
  Tape& t = x_purified.tape();
  Var kv = sfs_sample(y_next, t.param(*params.eps), params.config);
  Var q = ops::to_tokens(x_purified);
  Var qn = ops::layer_norm(q, t.param(*params.ln_q_gain), t.param(*params.ln_q_shift));
  Var kvn = ops::layer_norm(kv, t.param(*params.ln_kv_gain), t.param(*params.ln_kv_shift));
  Var fused = ops::from_tokens(mha_cross(qn, kvn, params.attn), xs.h, xs.w);
  return ops::add(x_purified, fused);
}

void write_spiral_dump(std::ostream& out, const SpiralConfig& cfg) {
  const Tensor4 s = spiral_offsets(cfg);
  out << std::setprecision(17);
  for (int h = 0; h < cfg.heads; ++h) {
    for (int k = 0; k < cfg.points; ++k) {
      out << (h + 1) << ' ' << (k + 1) << ' ' << s(0, h, k, 0) << ' ' << s(0, h, k, 1) << '\n';
    }
  }
}

std::vector<SpiralDumpRow> read_spiral_dump(std::istream& in) {
  std::vector<SpiralDumpRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    SpiralDumpRow r{};
    std::string extra;
    if (!(ls >> r.h >> r.k >> r.dx >> r.dy) || (ls >> extra)) {
      throw std::runtime_error("spiral dump: malformed line " + std::to_string(lineno) + ": " + line);
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace nsfpn::sfs
