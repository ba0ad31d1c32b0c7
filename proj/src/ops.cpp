#include "nsfpn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace nsfpn::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

constexpr int kAttentionBlock = 64;

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

void im2col(const double* img, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, double* col) {
  const std::size_t cols = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < channels; ++c) {
    const double* src = img + static_cast<std::size_t>(c) * height * width;
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        double* dst = col + (static_cast<std::size_t>(c) * k * k + i * k + j) * cols;
        for (int oy = 0; oy < out_h; ++oy) {
          const int y = oy * stride - pad + i;
          double* row = dst + static_cast<std::size_t>(oy) * out_w;
          if (y < 0 || y >= height) {
            std::fill(row, row + out_w, 0.0);
            continue;
          }
          for (int ox = 0; ox < out_w; ++ox) {
            const int x = ox * stride - pad + j;
            row[ox] = (x < 0 || x >= width) ? 0.0 : src[static_cast<std::size_t>(y) * width + x];
          }
        }
      }
    }
  }
}

void col2im(const double* col, int channels, int height, int width, int k, int stride, int pad,
            int out_h, int out_w, double* img) {
  const std::size_t cols = static_cast<std::size_t>(out_h) * out_w;
  for (int c = 0; c < channels; ++c) {
    double* dst = img + static_cast<std::size_t>(c) * height * width;
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        const double* src = col + (static_cast<std::size_t>(c) * k * k + i * k + j) * cols;
        for (int oy = 0; oy < out_h; ++oy) {
          const int y = oy * stride - pad + i;
          if (y < 0 || y >= height) continue;
          const double* row = src + static_cast<std::size_t>(oy) * out_w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int x = ox * stride - pad + j;
            if (x >= 0 && x < width) dst[static_cast<std::size_t>(y) * width + x] += row[ox];
          }
        }
      }
    }
  }
}

Tape& tape_of(Var v) { return v.tape(); }

// Index into [0, n) under symmetric (edge-including) reflection.
int symmetric_index(int i, int n) {
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

struct AxisLerp {
  int i0;
  int i1;
  double frac;
};

AxisLerp half_pixel_source(int dst, int in_size) {
  double src = (dst + 0.5) * 0.5 - 0.5;
  if (src < 0.0) src = 0.0;
  int i0 = static_cast<int>(std::floor(src));
  if (i0 > in_size - 1) i0 = in_size - 1;
  const int i1 = std::min(i0 + 1, in_size - 1);
  return {i0, i1, src - i0};
}

struct SamplePoint {
  int x0, x1, y0, y1;
  double fx, fy;
  double dpx;  // d(pixel x) / d(normalized x), zero when clamped
  double dpy;
};

SamplePoint locate(double nx, double ny, int height, int width) {
  SamplePoint s{};
  const bool inside_x = nx > -1.0 && nx < 1.0;
  const bool inside_y = ny > -1.0 && ny < 1.0;
  const double cx = std::clamp(nx, -1.0, 1.0);
  const double cy = std::clamp(ny, -1.0, 1.0);
  const double px = (cx + 1.0) * 0.5 * (width - 1);
  const double py = (cy + 1.0) * 0.5 * (height - 1);
  s.x0 = std::clamp(static_cast<int>(std::floor(px)), 0, width - 1);
  s.y0 = std::clamp(static_cast<int>(std::floor(py)), 0, height - 1);
  s.x1 = std::min(s.x0 + 1, width - 1);
  s.y1 = std::min(s.y0 + 1, height - 1);
  s.fx = px - s.x0;
  s.fy = py - s.y0;
  s.dpx = inside_x ? 0.5 * (width - 1) : 0.0;
  s.dpy = inside_y ? 0.5 * (height - 1) : 0.0;
  return s;
}

}  // namespace

int conv_output_size(int in, int k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

Var conv2d(Var x, Var weight, Var bias, int stride, int padding) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.h != ws.w) throw ShapeError("conv2d: kernel must be square, got " + ws.str());
  if (ws.c != xs.c) {
    throw ShapeError("conv2d: input channels " + std::to_string(xs.c) +
                     " do not match weight Cin " + std::to_string(ws.c));
  }
  if (!(bias.shape() == Shape{1, ws.b, 1, 1})) {
    throw ShapeError("conv2d: bias shape " + bias.shape().str() + " does not match Cout " +
                     std::to_string(ws.b));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const int k = ws.h;
  if (xs.h + 2 * padding < k) {
    throw ShapeError("conv2d: height " + std::to_string(xs.h) + " too small for kernel " +
                     std::to_string(k));
  }
  if (xs.w + 2 * padding < k) {
    throw ShapeError("conv2d: width " + std::to_string(xs.w) + " too small for kernel " +
                     std::to_string(k));
  }
  const int out_h = conv_output_size(xs.h, k, stride, padding);
  const int out_w = conv_output_size(xs.w, k, stride, padding);
  const int cout = ws.b;
  const int ckk = xs.c * k * k;
  const std::size_t ocols = static_cast<std::size_t>(out_h) * out_w;
  const bool pointwise = k == 1 && stride == 1 && padding == 0;

  Tensor4 out(Shape{xs.b, cout, out_h, out_w});
  const Tensor4& xv = x.value();
  CMapRM wmat(weight.value().data(), cout, ckk);
  const double* bv = bias.value().data();
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(ckk) * ocols);
  for (int b = 0; b < xs.b; ++b) {
    const double* colp = xv.plane(b, 0);
    if (!pointwise) {
      im2col(xv.plane(b, 0), xs.c, xs.h, xs.w, k, stride, padding, out_h, out_w, col.data());
      colp = col.data();
    }
    MapRM o(out.plane(b, 0), cout, ocols);
    o.noalias() = wmat * CMapRM(colp, ckk, ocols);
    for (int c = 0; c < cout; ++c) o.row(c).array() += bv[c];
  }

  Tape& t = tape_of(x);
  return t.record("conv2d", std::move(out), {x, weight, bias},
                  [&t, x, weight, bias, stride, padding, k, out_h, out_w, cout, ckk, ocols,
                   pointwise](const Tensor4& g) {
                    const Shape xs = x.value().shape();
                    Tensor4* gx = t.grad_target(x);
                    Tensor4* gw = t.grad_target(weight);
                    Tensor4* gb = t.grad_target(bias);
                    CMapRM wmat(weight.value().data(), cout, ckk);
                    std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(ckk) * ocols);
                    std::vector<double> dcol(gx != nullptr && !pointwise ? col.size() : 0);
                    for (int b = 0; b < xs.b; ++b) {
                      CMapRM gm(g.plane(b, 0), cout, ocols);
                      if (gb != nullptr) {
                        for (int c = 0; c < cout; ++c) (*gb)[c] += gm.row(c).sum();
                      }
                      if (gw != nullptr) {
                        const double* colp = x.value().plane(b, 0);
                        if (!pointwise) {
                          im2col(x.value().plane(b, 0), xs.c, xs.h, xs.w, k, stride, padding,
                                 out_h, out_w, col.data());
                          colp = col.data();
                        }
                        MapRM(gw->data(), cout, ckk).noalias() +=
                            gm * CMapRM(colp, ckk, ocols).transpose();
                      }
                      if (gx != nullptr) {
                        if (pointwise) {
                          MapRM(gx->plane(b, 0), ckk, ocols).noalias() += wmat.transpose() * gm;
                        } else {
                          MapRM(dcol.data(), ckk, ocols).noalias() = wmat.transpose() * gm;
                          col2im(dcol.data(), xs.c, xs.h, xs.w, k, stride, padding, out_h, out_w,
                                 gx->plane(b, 0));
                        }
                      }
                    }
                  });
}

Tensor4 conv2d(const Tensor4& x, const ConvParams& params) {
  Tape t;
  Var out = conv2d(t.constant(x), t.constant(params.weight), t.constant(params.bias),
                   params.stride, params.padding);
  return out.value();
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tape& t = tape_of(a);
  return t.record("add", a.value() + b.value(), {a, b}, [&t, a, b](const Tensor4& g) {
    if (Tensor4* ga = t.grad_target(a)) *ga += g;
    if (Tensor4* gb = t.grad_target(b)) *gb += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tape& t = tape_of(a);
  return t.record("sub", a.value() - b.value(), {a, b}, [&t, a, b](const Tensor4& g) {
    if (Tensor4* ga = t.grad_target(a)) *ga += g;
    if (Tensor4* gb = t.grad_target(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor4 out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  Tape& t = tape_of(a);
  return t.record("mul", std::move(out), {a, b}, [&t, a, b](const Tensor4& g) {
    if (Tensor4* ga = t.grad_target(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    }
    if (Tensor4* gb = t.grad_target(b)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  return t.record("scale", s * a.value(), {a}, [&t, a, s](const Tensor4& g) {
    if (Tensor4* ga = t.grad_target(a)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
    }
  });
}

Var mul_channel_broadcast(Var x, Var m) {
  const Shape xs = x.shape();
  const Shape ms = m.shape();
  if (ms.b != xs.b || ms.c != 1 || ms.h != xs.h || ms.w != xs.w) {
    throw ShapeError("mul_channel_broadcast: map " + ms.str() + " incompatible with " + xs.str());
  }
  Tensor4 out(xs);
  const std::size_t hw = xs.plane();
  for (int b = 0; b < xs.b; ++b) {
    const double* mp = m.value().plane(b, 0);
    for (int c = 0; c < xs.c; ++c) {
      const double* xp = x.value().plane(b, c);
      double* op = out.plane(b, c);
      for (std::size_t i = 0; i < hw; ++i) op[i] = xp[i] * mp[i];
    }
  }
  Tape& t = tape_of(x);
  return t.record("mul_channel_broadcast", std::move(out), {x, m}, [&t, x, m, hw](const Tensor4& g) {
    const Shape xs = x.shape();
    Tensor4* gx = t.grad_target(x);
    Tensor4* gm = t.grad_target(m);
    for (int b = 0; b < xs.b; ++b) {
      const double* mp = m.value().plane(b, 0);
      for (int c = 0; c < xs.c; ++c) {
        const double* gp = g.plane(b, c);
        if (gx != nullptr) {
          double* d = gx->plane(b, c);
          for (std::size_t i = 0; i < hw; ++i) d[i] += gp[i] * mp[i];
        }
        if (gm != nullptr) {
          const double* xp = x.value().plane(b, c);
          double* d = gm->plane(b, 0);
          for (std::size_t i = 0; i < hw; ++i) d[i] += gp[i] * xp[i];
        }
      }
    }
  });
}


Var sigmoid(Var x) {
  Tensor4 out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x.value()[i]);
  Tape& t = tape_of(x);
  return t.record("sigmoid", std::move(out), {x}, [&t, x](const Tensor4& g) {
    if (Tensor4* gx = t.grad_target(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = sigmoid_scalar(x.value()[i]);
        (*gx)[i] += g[i] * s * (1.0 - s);
      }
    }
  });
}

Var silu(Var x) {
  Tensor4 out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    out[i] = v * sigmoid_scalar(v);
  }
  Tape& t = tape_of(x);
  return t.record("silu", std::move(out), {x}, [&t, x](const Tensor4& g) {
    if (Tensor4* gx = t.grad_target(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = x.value()[i];
        const double s = sigmoid_scalar(v);
        (*gx)[i] += g[i] * s * (1.0 + v * (1.0 - s));
      }
    }
  });
}

Var softplus(Var x) {
  Tensor4 out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = softplus_scalar(x.value()[i]);
  Tape& t = tape_of(x);
  return t.record("softplus", std::move(out), {x}, [&t, x](const Tensor4& g) {
    if (Tensor4* gx = t.grad_target(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * sigmoid_scalar(x.value()[i]);
    }
  });
}

Var pool_channel_avg_max(Var x) {
  const Shape xs = x.shape();
  const std::size_t hw = xs.plane();
  Tensor4 out(Shape{xs.b, 2, xs.h, xs.w});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(xs.b) * hw);
  for (int b = 0; b < xs.b; ++b) {
    double* avg = out.plane(b, 0);
    double* mx = out.plane(b, 1);
    int* am = argmax->data() + static_cast<std::size_t>(b) * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      avg[i] = 0.0;
      mx[i] = -std::numeric_limits<double>::infinity();
    }
    for (int c = 0; c < xs.c; ++c) {
      const double* p = x.value().plane(b, c);
      for (std::size_t i = 0; i < hw; ++i) {
        avg[i] += p[i];
        if (p[i] > mx[i]) {
          mx[i] = p[i];
          am[i] = c;
        }
      }
    }
    for (std::size_t i = 0; i < hw; ++i) avg[i] /= xs.c;
  }
  Tape& t = tape_of(x);
  return t.record("pool_channel_avg_max", std::move(out), {x}, [&t, x, argmax, hw](const Tensor4& g) {
    Tensor4* gx = t.grad_target(x);
    if (gx == nullptr) return;
    const Shape xs = x.shape();
    for (int b = 0; b < xs.b; ++b) {
      const double* ga = g.plane(b, 0);
      const double* gm = g.plane(b, 1);
      const int* am = argmax->data() + static_cast<std::size_t>(b) * hw;
      for (int c = 0; c < xs.c; ++c) {
        double* d = gx->plane(b, c);
        for (std::size_t i = 0; i < hw; ++i) d[i] += ga[i] / xs.c;
      }
      for (std::size_t i = 0; i < hw; ++i) gx->plane(b, am[i])[i] += gm[i];
    }
  });
}

Var select(std::shared_ptr<const std::vector<std::uint8_t>> mask, Var a, Var b) {
  require_same_shape(a.value(), b.value(), "select");
  if (mask == nullptr || mask->size() != a.value().size()) {
    throw ShapeError("select: mask size does not match " + a.shape().str());
  }
  Tensor4 out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*mask)[i] ? a.value()[i] : b.value()[i];
  Tape& t = tape_of(a);
  return t.record("select", std::move(out), {a, b}, [&t, mask, a, b](const Tensor4& g) {
    Tensor4* ga = t.grad_target(a);
    Tensor4* gb = t.grad_target(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if ((*mask)[i]) {
        if (ga != nullptr) (*ga)[i] += g[i];
      } else if (gb != nullptr) {
        (*gb)[i] += g[i];
      }
    }
  });
}

Tensor4 gaussian_kernel(double sigma, int k) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  if (k < 1 || k % 2 == 0) throw std::invalid_argument("gaussian_kernel: k must be odd");
  const int c = k / 2;
  Tensor4 kern(Shape{1, 1, k, k});
  double z = 0.0;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const double r2 = static_cast<double>((i - c) * (i - c) + (j - c) * (j - c));
      const double e = std::exp(-r2 / (2.0 * sigma * sigma));
      kern(0, 0, i, j) = e;
      z += e;
    }
  }
  kern *= 1.0 / z;
  return kern;
}

Var gaussian_kernel(Var sigma_raw, int k) {
  if (sigma_raw.value().size() != 1) throw ShapeError("gaussian_kernel: sigma must be a scalar");
  const double raw = sigma_raw.value()[0];
  const double sigma = softplus_scalar(raw);
  Tensor4 kern = gaussian_kernel(sigma, k);
  Tape& t = tape_of(sigma_raw);
  auto saved = std::make_shared<Tensor4>(kern);
  return t.record("gaussian_kernel", std::move(kern), {sigma_raw},
                  [&t, sigma_raw, saved, sigma, raw, k](const Tensor4& g) {
                    Tensor4* gs = t.grad_target(sigma_raw);
                    if (gs == nullptr) return;
                    const int c = k / 2;
                    const double s3 = sigma * sigma * sigma;
                    double mean_r2 = 0.0;  // sum_m G_m r_m^2
                    for (int i = 0; i < k; ++i) {
                      for (int j = 0; j < k; ++j) {
                        const double r2 = (i - c) * (i - c) + (j - c) * (j - c);
                        mean_r2 += (*saved)(0, 0, i, j) * r2;
                      }
                    }
                    double dsigma = 0.0;
                    for (int i = 0; i < k; ++i) {
                      for (int j = 0; j < k; ++j) {
                        const double r2 = (i - c) * (i - c) + (j - c) * (j - c);
                        dsigma += g(0, 0, i, j) * (*saved)(0, 0, i, j) * (r2 - mean_r2) / s3;
                      }
                    }
                    (*gs)[0] += dsigma * sigmoid_scalar(raw);
                  });
}

Var depthwise_conv_symmetric(Var x, Var kernel) {
  const Shape ks = kernel.shape();
  if (ks.b != 1 || ks.c != 1 || ks.h != ks.w || ks.h % 2 == 0) {
    throw ShapeError("depthwise_conv_symmetric: kernel must be 1x1xkxk with odd k, got " + ks.str());
  }
  const Shape xs = x.shape();
  const int k = ks.h;
  const int c0 = k / 2;
  const double* kv = kernel.value().data();
  Tensor4 out(xs);
  for (int b = 0; b < xs.b; ++b) {
    for (int c = 0; c < xs.c; ++c) {
      const double* src = x.value().plane(b, c);
      double* dst = out.plane(b, c);
      for (int y = 0; y < xs.h; ++y) {
        for (int xx = 0; xx < xs.w; ++xx) {
          double acc = 0.0;
          for (int i = 0; i < k; ++i) {
            const int sy = symmetric_index(y + i - c0, xs.h);
            for (int j = 0; j < k; ++j) {
              const int sx = symmetric_index(xx + j - c0, xs.w);
              acc += kv[i * k + j] * src[sy * xs.w + sx];
            }
          }
          dst[y * xs.w + xx] = acc;
        }
      }
    }
  }
  Tape& t = tape_of(x);
  return t.record("depthwise_conv_symmetric", std::move(out), {x, kernel},
                  [&t, x, kernel, k, c0](const Tensor4& g) {
                    Tensor4* gx = t.grad_target(x);
                    Tensor4* gk = t.grad_target(kernel);
                    const Shape xs = x.shape();
                    const double* kv = kernel.value().data();
                    for (int b = 0; b < xs.b; ++b) {
                      for (int c = 0; c < xs.c; ++c) {
                        const double* src = x.value().plane(b, c);
                        const double* gp = g.plane(b, c);
                        double* dx = gx != nullptr ? gx->plane(b, c) : nullptr;
                        for (int y = 0; y < xs.h; ++y) {
                          for (int xx = 0; xx < xs.w; ++xx) {
                            const double go = gp[y * xs.w + xx];
                            for (int i = 0; i < k; ++i) {
                              const int sy = symmetric_index(y + i - c0, xs.h);
                              for (int j = 0; j < k; ++j) {
                                const int sx = symmetric_index(xx + j - c0, xs.w);
                                if (dx != nullptr) dx[sy * xs.w + sx] += go * kv[i * k + j];
                                if (gk != nullptr) (*gk)[i * k + j] += go * src[sy * xs.w + sx];
                              }
                            }
                          }
                        }
                      }
                    }
                  });
}

double bilinear_at(const double* plane, int height, int width, double nx, double ny) {
  const SamplePoint s = locate(nx, ny, height, width);
  const double v00 = plane[s.y0 * width + s.x0];
  const double v01 = plane[s.y0 * width + s.x1];
  const double v10 = plane[s.y1 * width + s.x0];
  const double v11 = plane[s.y1 * width + s.x1];
  return (1.0 - s.fy) * ((1.0 - s.fx) * v00 + s.fx * v01) + s.fy * ((1.0 - s.fx) * v10 + s.fx * v11);
}

std::vector<double> bilinear_sample_points(const Tensor4& feat, int b, int c,
                                           const std::vector<std::pair<double, double>>& points) {
  std::vector<double> out;
  out.reserve(points.size());
  for (const auto& [nx, ny] : points) out.push_back(bilinear_at(feat.plane(b, c), feat.height(), feat.width(), nx, ny));
  return out;
}

Var bilinear_sample(Var feat, Var coords) {
  const Shape fs = feat.shape();
  const Shape cs = coords.shape();
  if (cs.b != fs.b || cs.w != 2) {
    throw ShapeError("bilinear_sample: coords " + cs.str() + " incompatible with features " +
                     fs.str() + " (expected B x G x N x 2)");
  }
  const int groups = cs.c;
  if (fs.c % groups != 0) {
    throw ShapeError("bilinear_sample: channels " + std::to_string(fs.c) +
                     " not divisible by groups " + std::to_string(groups));
  }
  const int per_group = fs.c / groups;
  const int n = cs.h;
  Tensor4 out(Shape{fs.b, fs.c, 1, n});
  for (int b = 0; b < fs.b; ++b) {
    for (int c = 0; c < fs.c; ++c) {
      const int g = c / per_group;
      const double* plane = feat.value().plane(b, c);
      double* dst = out.plane(b, c);
      for (int i = 0; i < n; ++i) {
        dst[i] = bilinear_at(plane, fs.h, fs.w, coords.value()(b, g, i, 0), coords.value()(b, g, i, 1));
      }
    }
  }
  Tape& t = tape_of(feat);
  return t.record("bilinear_sample", std::move(out), {feat, coords},
                  [&t, feat, coords, per_group, n](const Tensor4& grad) {
                    Tensor4* gf = t.grad_target(feat);
                    Tensor4* gc = t.grad_target(coords);
                    const Shape fs = feat.shape();
                    for (int b = 0; b < fs.b; ++b) {
                      for (int c = 0; c < fs.c; ++c) {
                        const int g = c / per_group;
                        const double* plane = feat.value().plane(b, c);
                        const double* gp = grad.plane(b, c);
                        for (int i = 0; i < n; ++i) {
                          const SamplePoint s = locate(coords.value()(b, g, i, 0),
                                                       coords.value()(b, g, i, 1), fs.h, fs.w);
                          const double go = gp[i];
                          if (gf != nullptr) {
                            double* d = gf->plane(b, c);
                            d[s.y0 * fs.w + s.x0] += go * (1.0 - s.fy) * (1.0 - s.fx);
                            d[s.y0 * fs.w + s.x1] += go * (1.0 - s.fy) * s.fx;
                            d[s.y1 * fs.w + s.x0] += go * s.fy * (1.0 - s.fx);
                            d[s.y1 * fs.w + s.x1] += go * s.fy * s.fx;
                          }
                          if (gc != nullptr) {
                            const double v00 = plane[s.y0 * fs.w + s.x0];
                            const double v01 = plane[s.y0 * fs.w + s.x1];
                            const double v10 = plane[s.y1 * fs.w + s.x0];
                            const double v11 = plane[s.y1 * fs.w + s.x1];
                            const double dvx = (1.0 - s.fy) * (v01 - v00) + s.fy * (v11 - v10);
                            const double dvy = (1.0 - s.fx) * (v10 - v00) + s.fx * (v11 - v01);
                            (*gc)(b, g, i, 0) += go * dvx * s.dpx;
                            (*gc)(b, g, i, 1) += go * dvy * s.dpy;
                          }
                        }
                      }
                    }
                  });
}

Var to_tokens(Var x) {
  const Shape xs = x.shape();
  const int n = xs.h * xs.w;
  Tensor4 out(Shape{xs.b, 1, n, xs.c});
  for (int b = 0; b < xs.b; ++b) {
    for (int c = 0; c < xs.c; ++c) {
      const double* p = x.value().plane(b, c);
      for (int i = 0; i < n; ++i) out(b, 0, i, c) = p[i];
    }
  }
  Tape& t = tape_of(x);
  return t.record("to_tokens", std::move(out), {x}, [&t, x, n](const Tensor4& g) {
    Tensor4* gx = t.grad_target(x);
    if (gx == nullptr) return;
    const Shape xs = x.shape();
    for (int b = 0; b < xs.b; ++b) {
      for (int c = 0; c < xs.c; ++c) {
        double* d = gx->plane(b, c);
        for (int i = 0; i < n; ++i) d[i] += g(b, 0, i, c);
      }
    }
  });
}

Var from_tokens(Var tokens, int height, int width) {
  const Shape ts = tokens.shape();
  if (ts.c != 1 || ts.h != height * width) {
    throw ShapeError("from_tokens: " + ts.str() + " cannot be reshaped to " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  const int n = ts.h;
  Tensor4 out(Shape{ts.b, ts.w, height, width});
  for (int b = 0; b < ts.b; ++b) {
    for (int c = 0; c < ts.w; ++c) {
      double* p = out.plane(b, c);
      for (int i = 0; i < n; ++i) p[i] = tokens.value()(b, 0, i, c);
    }
  }
  Tape& t = tape_of(tokens);
  return t.record("from_tokens", std::move(out), {tokens}, [&t, tokens, n](const Tensor4& g) {
    Tensor4* gt = t.grad_target(tokens);
    if (gt == nullptr) return;
    const Shape ts = tokens.shape();
    for (int b = 0; b < ts.b; ++b) {
      for (int c = 0; c < ts.w; ++c) {
        const double* p = g.plane(b, c);
        for (int i = 0; i < n; ++i) (*gt)(b, 0, i, c) += p[i];
      }
    }
  });
}

Var linear(Var tokens, Var weight, Var bias) {
  const Shape ts = tokens.shape();
  const Shape ws = weight.shape();
  if (ts.c != 1) throw ShapeError("linear: tokens must be B x 1 x N x C, got " + ts.str());
  if (ws.b != 1 || ws.c != 1 || ws.w != ts.w) {
    throw ShapeError("linear: weight " + ws.str() + " incompatible with tokens " + ts.str());
  }
  if (!(bias.shape() == Shape{1, 1, 1, ws.h})) {
    throw ShapeError("linear: bias " + bias.shape().str() + " does not match Cout " +
                     std::to_string(ws.h));
  }
  const int rows = ts.b * ts.h;
  const int cin = ts.w;
  const int cout = ws.h;
  Tensor4 out(Shape{ts.b, 1, ts.h, cout});
  MapRM y(out.data(), rows, cout);
  y.noalias() = CMapRM(tokens.value().data(), rows, cin) *
                CMapRM(weight.value().data(), cout, cin).transpose();
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().data(), cout);
  Tape& t = tape_of(tokens);
  return t.record("linear", std::move(out), {tokens, weight, bias},
                  [&t, tokens, weight, bias, rows, cin, cout](const Tensor4& g) {
                    CMapRM gm(g.data(), rows, cout);
                    if (Tensor4* gx = t.grad_target(tokens)) {
                      MapRM(gx->data(), rows, cin).noalias() +=
                          gm * CMapRM(weight.value().data(), cout, cin);
                    }
                    if (Tensor4* gw = t.grad_target(weight)) {
                      MapRM(gw->data(), cout, cin).noalias() +=
                          gm.transpose() * CMapRM(tokens.value().data(), rows, cin);
                    }
                    if (Tensor4* gb = t.grad_target(bias)) {
                      Eigen::Map<Eigen::RowVectorXd>(gb->data(), cout) += gm.colwise().sum();
                    }
                  });
}

Var layer_norm(Var tokens, Var gain, Var shift, double eps) {
  const Shape ts = tokens.shape();
  const int c = ts.w;
  if (!(gain.shape() == Shape{1, 1, 1, c}) || !(shift.shape() == Shape{1, 1, 1, c})) {
    throw ShapeError("layer_norm: gain/shift must be 1x1x1x" + std::to_string(c));
  }
  const std::size_t rows = ts.numel() / c;
  auto xhat = std::make_shared<Tensor4>(ts);
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor4 out(ts);
  const double* gv = gain.value().data();
  const double* sv = shift.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = tokens.value().data() + r * c;
    double m = 0.0;
    for (int i = 0; i < c; ++i) m += x[i];
    m /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) var += (x[i] - m) * (x[i] - m);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    double* xh = xhat->data() + r * c;
    double* y = out.data() + r * c;
    for (int i = 0; i < c; ++i) {
      xh[i] = (x[i] - m) * is;
      y[i] = xh[i] * gv[i] + sv[i];
    }
  }
  Tape& t = tape_of(tokens);
  return t.record("layer_norm", std::move(out), {tokens, gain, shift},
                  [&t, tokens, gain, shift, xhat, inv_std, rows, c](const Tensor4& g) {
                    Tensor4* gx = t.grad_target(tokens);
                    Tensor4* gg = t.grad_target(gain);
                    Tensor4* gs = t.grad_target(shift);
                    const double* gv = gain.value().data();
                    std::vector<double> dxh(c);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const double* go = g.data() + r * c;
                      const double* xh = xhat->data() + r * c;
                      if (gg != nullptr) {
                        for (int i = 0; i < c; ++i) (*gg)[i] += go[i] * xh[i];
                      }
                      if (gs != nullptr) {
                        for (int i = 0; i < c; ++i) (*gs)[i] += go[i];
                      }
                      if (gx != nullptr) {
                        double mean_d = 0.0;
                        double mean_dx = 0.0;
                        for (int i = 0; i < c; ++i) {
                          dxh[i] = go[i] * gv[i];
                          mean_d += dxh[i];
                          mean_dx += dxh[i] * xh[i];
                        }
                        mean_d /= c;
                        mean_dx /= c;
                        double* d = gx->data() + r * c;
                        for (int i = 0; i < c; ++i) {
                          d[i] += (*inv_std)[r] * (dxh[i] - mean_d - xh[i] * mean_dx);
                        }
                      }
                    }
                  });
}

Var softmax(Var x) {
  const Shape xs = x.shape();
  const int n = xs.w;
  const std::size_t rows = xs.numel() / n;
  auto y = std::make_shared<Tensor4>(xs);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.value().data() + r * n;
    double* o = y->data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      o[i] = std::exp(in[i] - mx);
      s += o[i];
    }
    for (int i = 0; i < n; ++i) o[i] /= s;
  }
  Tape& t = tape_of(x);
  return t.record("softmax", *y, {x}, [&t, x, y, rows, n](const Tensor4& g) {
    Tensor4* gx = t.grad_target(x);
    if (gx == nullptr) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* o = y->data() + r * n;
      const double* go = g.data() + r * n;
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += go[i] * o[i];
      double* d = gx->data() + r * n;
      for (int i = 0; i < n; ++i) d[i] += o[i] * (go[i] - dot);
    }
  });
}

Tensor4 attention_weights(const Tensor4& q, const Tensor4& k, int heads) {
  const Shape qs = q.shape();
  const Shape ks = k.shape();
  if (heads < 1 || qs.w % heads != 0) {
    throw ShapeError("attention: channels " + std::to_string(qs.w) + " not divisible by heads " +
                     std::to_string(heads));
  }
  if (qs.c != 1 || ks.c != 1 || ks.b != qs.b || ks.w != qs.w) {
    throw ShapeError("attention: incompatible query " + qs.str() + " and key " + ks.str());
  }
  const int d = qs.w / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor4 a(Shape{qs.b, heads, qs.h, ks.h});
  RowMat qh(qs.h, d), kh(ks.h, d);
  for (int b = 0; b < qs.b; ++b) {
    CMapRM qm(q.plane(b, 0), qs.h, qs.w);
    CMapRM km(k.plane(b, 0), ks.h, ks.w);
    for (int h = 0; h < heads; ++h) {
      qh = qm.middleCols(h * d, d) * sc;
      kh = km.middleCols(h * d, d);
      // Row blocks keep the logits in cache between the product and the softmax.
      for (int r0 = 0; r0 < qs.h; r0 += kAttentionBlock) {
        const int rows = std::min(kAttentionBlock, qs.h - r0);
        MapRM s(a.plane(b, h) + static_cast<std::size_t>(r0) * ks.h, rows, ks.h);
        s.noalias() = qh.middleRows(r0, rows) * kh.transpose();
        s.colwise() -= s.rowwise().maxCoeff();
        s = s.array().exp();
        s.array().colwise() /= s.rowwise().sum().array();
      }
    }
  }
  return a;
}

Var attention(Var q, Var k, Var v, int heads) {
  if (!(k.shape() == v.shape())) {
    throw ShapeError("attention: key " + k.shape().str() + " and value " + v.shape().str() +
                     " differ");
  }
  auto weights = std::make_shared<Tensor4>(attention_weights(q.value(), k.value(), heads));
  const Shape qs = q.shape();
  const int nk = k.shape().h;
  const int d = qs.w / heads;
  Tensor4 out(qs);
  RowMat vh(nk, d);
  for (int b = 0; b < qs.b; ++b) {
    MapRM om(out.plane(b, 0), qs.h, qs.w);
    CMapRM vm(v.value().plane(b, 0), nk, qs.w);
    for (int h = 0; h < heads; ++h) {
      vh = vm.middleCols(h * d, d);
      om.middleCols(h * d, d).noalias() = CMapRM(weights->plane(b, h), qs.h, nk) * vh;
    }
  }
  Tape& t = tape_of(q);
  return t.record("attention", std::move(out), {q, k, v},
                  [&t, q, k, v, weights, heads, nk, d](const Tensor4& g) {
                    Tensor4* gq = t.grad_target(q);
                    Tensor4* gk = t.grad_target(k);
                    Tensor4* gv = t.grad_target(v);
                    const Shape qs = q.shape();
                    const double sc = 1.0 / std::sqrt(static_cast<double>(d));
                    RowMat da(kAttentionBlock, nk);
                    RowMat gh(qs.h, d), qh(qs.h, d), kh(nk, d), vh(nk, d);
                    RowMat gqh(qs.h, d), gkh(nk, d), gvh(nk, d);
                    for (int b = 0; b < qs.b; ++b) {
                      CMapRM gm(g.plane(b, 0), qs.h, qs.w);
                      CMapRM qm(q.value().plane(b, 0), qs.h, qs.w);
                      CMapRM km(k.value().plane(b, 0), nk, qs.w);
                      CMapRM vm(v.value().plane(b, 0), nk, qs.w);
                      for (int h = 0; h < heads; ++h) {
                        gh = gm.middleCols(h * d, d);
                        qh = qm.middleCols(h * d, d);
                        kh = km.middleCols(h * d, d);
                        vh = vm.middleCols(h * d, d);
                        gqh.setZero();
                        gkh.setZero();
                        gvh.setZero();
                        for (int r0 = 0; r0 < qs.h; r0 += kAttentionBlock) {
                          const int rows = std::min(kAttentionBlock, qs.h - r0);
                          CMapRM a(weights->plane(b, h) + static_cast<std::size_t>(r0) * nk, rows, nk);
                          if (gv != nullptr) gvh.noalias() += a.transpose() * gh.middleRows(r0, rows);
                          if (gq == nullptr && gk == nullptr) continue;
                          auto ds = da.topRows(rows);
                          ds.noalias() = gh.middleRows(r0, rows) * vh.transpose();
                          // dS = A * (dA - rowsum(dA * A)), folded with the 1/sqrt(d) scale
                          const Eigen::VectorXd dot = (ds.array() * a.array()).rowwise().sum();
                          ds = (a.array() * (ds.array().colwise() - dot.array())) * sc;
                          if (gq != nullptr) gqh.middleRows(r0, rows).noalias() += ds * kh;
                          if (gk != nullptr) gkh.noalias() += ds.transpose() * qh.middleRows(r0, rows);
                        }
                        if (gq != nullptr) MapRM(gq->plane(b, 0), qs.h, qs.w).middleCols(h * d, d) += gqh;
                        if (gk != nullptr) MapRM(gk->plane(b, 0), nk, qs.w).middleCols(h * d, d) += gkh;
                        if (gv != nullptr) MapRM(gv->plane(b, 0), nk, qs.w).middleCols(h * d, d) += gvh;
                      }
                    }
                  });
}

Var upsample_nearest2x(Var x) {
  const Shape xs = x.shape();
  Tensor4 out(Shape{xs.b, xs.c, 2 * xs.h, 2 * xs.w});
  for (int b = 0; b < xs.b; ++b) {
    for (int c = 0; c < xs.c; ++c) {
      for (int y = 0; y < 2 * xs.h; ++y) {
        for (int xx = 0; xx < 2 * xs.w; ++xx) out(b, c, y, xx) = x.value()(b, c, y / 2, xx / 2);
      }
    }
  }
  Tape& t = tape_of(x);
  return t.record("upsample_nearest2x", std::move(out), {x}, [&t, x](const Tensor4& g) {
    Tensor4* gx = t.grad_target(x);
    if (gx == nullptr) return;
    const Shape gs = g.shape();
    for (int b = 0; b < gs.b; ++b) {
      for (int c = 0; c < gs.c; ++c) {
        for (int y = 0; y < gs.h; ++y) {
          for (int xx = 0; xx < gs.w; ++xx) (*gx)(b, c, y / 2, xx / 2) += g(b, c, y, xx);
        }
      }
    }
  });
}

Var upsample_bilinear2x(Var x) {
  const Shape xs = x.shape();
  const int oh = 2 * xs.h;
  const int ow = 2 * xs.w;
  std::vector<AxisLerp> ly(oh);
  std::vector<AxisLerp> lx(ow);
  for (int y = 0; y < oh; ++y) ly[y] = half_pixel_source(y, xs.h);
  for (int xx = 0; xx < ow; ++xx) lx[xx] = half_pixel_source(xx, xs.w);
  Tensor4 out(Shape{xs.b, xs.c, oh, ow});
  for (int b = 0; b < xs.b; ++b) {
    for (int c = 0; c < xs.c; ++c) {
      const double* p = x.value().plane(b, c);
      double* o = out.plane(b, c);
      for (int y = 0; y < oh; ++y) {
        const AxisLerp& a = ly[y];
        for (int xx = 0; xx < ow; ++xx) {
          const AxisLerp& e = lx[xx];
          const double top = (1.0 - e.frac) * p[a.i0 * xs.w + e.i0] + e.frac * p[a.i0 * xs.w + e.i1];
          const double bot = (1.0 - e.frac) * p[a.i1 * xs.w + e.i0] + e.frac * p[a.i1 * xs.w + e.i1];
          o[y * ow + xx] = (1.0 - a.frac) * top + a.frac * bot;
        }
      }
    }
  }
  Tape& t = tape_of(x);
  return t.record("upsample_bilinear2x", std::move(out), {x},
                  [&t, x, ly, lx, oh, ow](const Tensor4& g) {
                    Tensor4* gx = t.grad_target(x);
                    if (gx == nullptr) return;
                    const Shape xs = x.shape();
                    for (int b = 0; b < xs.b; ++b) {
                      for (int c = 0; c < xs.c; ++c) {
                        const double* gp = g.plane(b, c);
                        double* d = gx->plane(b, c);
                        for (int y = 0; y < oh; ++y) {
                          const AxisLerp& a = ly[y];
                          for (int xx = 0; xx < ow; ++xx) {
                            const AxisLerp& e = lx[xx];
                            const double go = gp[y * ow + xx];
                            d[a.i0 * xs.w + e.i0] += go * (1.0 - a.frac) * (1.0 - e.frac);
                            d[a.i0 * xs.w + e.i1] += go * (1.0 - a.frac) * e.frac;
                            d[a.i1 * xs.w + e.i0] += go * a.frac * (1.0 - e.frac);
                            d[a.i1 * xs.w + e.i1] += go * a.frac * e.frac;
                          }
                        }
                      }
                    }
                  });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  return t.record("sum", Tensor4::scalar(x.value().sum()), {x}, [&t, x](const Tensor4& g) {
    if (Tensor4* gx = t.grad_target(x)) {
      for (double& v : gx->vec()) v += g[0];
    }
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  Tape& t = tape_of(x);
  return t.record("mean", Tensor4::scalar(x.value().sum() / n), {x}, [&t, x, n](const Tensor4& g) {
    if (Tensor4* gx = t.grad_target(x)) {
      for (double& v : gx->vec()) v += g[0] / n;
    }
  });
}

Var weighted_sum(Var x, const Tensor4& weights) {
  require_same_shape(x.value(), weights, "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * x.value()[i];
  Tape& t = tape_of(x);
  return t.record("weighted_sum", Tensor4::scalar(s), {x}, [&t, x, weights](const Tensor4& g) {
    if (Tensor4* gx = t.grad_target(x)) {
      for (std::size_t i = 0; i < weights.size(); ++i) (*gx)[i] += g[0] * weights[i];
    }
  });
}

Var bce_with_logits(Var logits, const Tensor4& target) {
  require_same_shape(logits.value(), target, "bce_with_logits");
  const double n = static_cast<double>(target.size());
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double z = logits.value()[i];
    s += std::max(z, 0.0) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
  }
  Tape& t = tape_of(logits);
  return t.record("bce_with_logits", Tensor4::scalar(s / n), {logits},
                  [&t, logits, target, n](const Tensor4& g) {
                    if (Tensor4* gz = t.grad_target(logits)) {
                      for (std::size_t i = 0; i < target.size(); ++i) {
                        (*gz)[i] += g[0] * (sigmoid_scalar(logits.value()[i]) - target[i]) / n;
                      }
                    }
                  });
}

Var soft_iou_loss(Var logits, const Tensor4& target, double smooth) {
  require_same_shape(logits.value(), target, "soft_iou_loss");
  double inter = 0.0;
  double psum = 0.0;
  double tsum = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double p = sigmoid_scalar(logits.value()[i]);
    inter += p * target[i];
    psum += p;
    tsum += target[i];
  }
  const double uni = psum + tsum - inter;
  const double loss = 1.0 - (inter + smooth) / (uni + smooth);
  Tape& t = tape_of(logits);
  return t.record("soft_iou_loss", Tensor4::scalar(loss), {logits},
                  [&t, logits, target, inter, uni, smooth](const Tensor4& g) {
                    Tensor4* gz = t.grad_target(logits);
                    if (gz == nullptr) return;
                    const double num = inter + smooth;
                    const double den = uni + smooth;
                    for (std::size_t i = 0; i < target.size(); ++i) {
                      const double p = sigmoid_scalar(logits.value()[i]);
                      // d(num/den)/dp = (t den - num (1 - t)) / den^2
                      const double dr = (target[i] * den - num * (1.0 - target[i])) / (den * den);
                      (*gz)[i] += -g[0] * dr * p * (1.0 - p);
                    }
                  });
}

}  // namespace nsfpn::ops
