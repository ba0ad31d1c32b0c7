#include "nsfpn/wavelet.hpp"

#include <algorithm>

namespace nsfpn::wavelet {

namespace {

void check_even(const Shape& s) {
  if (s.h % 2 != 0) throw ShapeError("dwt2: odd height " + std::to_string(s.h));
  if (s.w % 2 != 0) throw ShapeError("dwt2: odd width " + std::to_string(s.w));
}

Tensor4 pad_symmetric(const Tensor4& x, bool pad_h, bool pad_w) {
  const Shape s = x.shape();
  Tensor4 out(Shape{s.b, s.c, s.h + (pad_h ? 1 : 0), s.w + (pad_w ? 1 : 0)});
  const Shape o = out.shape();
  for (int b = 0; b < s.b; ++b) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < o.h; ++y) {
        for (int xx = 0; xx < o.w; ++xx) {
          out(b, c, y, xx) = x(b, c, std::min(y, s.h - 1), std::min(xx, s.w - 1));
        }
      }
    }
  }
  return out;
}

// Analysis on an even-sized tensor into the four band buffers.
void analyse(const Tensor4& x, Tensor4& ll, Tensor4& lh, Tensor4& hl, Tensor4& hh) {
  const Shape s = x.shape();
  const int oh = s.h / 2;
  const int ow = s.w / 2;
  for (int b = 0; b < s.b; ++b) {
    for (int c = 0; c < s.c; ++c) {
      const double* p = x.plane(b, c);
      double* pll = ll.plane(b, c);
      double* plh = lh.plane(b, c);
      double* phl = hl.plane(b, c);
      double* phh = hh.plane(b, c);
      for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
          const double a = p[(2 * y) * s.w + 2 * xx];
          const double bb = p[(2 * y) * s.w + 2 * xx + 1];
          const double cc = p[(2 * y + 1) * s.w + 2 * xx];
          const double d = p[(2 * y + 1) * s.w + 2 * xx + 1];
          const int o = y * ow + xx;
          pll[o] = 0.5 * (a + bb + cc + d);
          plh[o] = 0.5 * (a - bb + cc - d);
          phl[o] = 0.5 * (a + bb - cc - d);
          phh[o] = 0.5 * (a - bb - cc + d);
        }
      }
    }
  }
}

void synthesise(const Tensor4& ll, const Tensor4& lh, const Tensor4& hl, const Tensor4& hh,
                Tensor4& x) {
  const Shape s = ll.shape();
  const int w = 2 * s.w;
  for (int b = 0; b < s.b; ++b) {
    for (int c = 0; c < s.c; ++c) {
      const double* pll = ll.plane(b, c);
      const double* plh = lh.plane(b, c);
      const double* phl = hl.plane(b, c);
      const double* phh = hh.plane(b, c);
      double* p = x.plane(b, c);
      for (int y = 0; y < s.h; ++y) {
        for (int xx = 0; xx < s.w; ++xx) {
          const int o = y * s.w + xx;
          const double l0 = pll[o], l1 = plh[o], l2 = phl[o], l3 = phh[o];
          p[(2 * y) * w + 2 * xx] = 0.5 * (l0 + l1 + l2 + l3);
          p[(2 * y) * w + 2 * xx + 1] = 0.5 * (l0 - l1 + l2 - l3);
          p[(2 * y + 1) * w + 2 * xx] = 0.5 * (l0 + l1 - l2 - l3);
          p[(2 * y + 1) * w + 2 * xx + 1] = 0.5 * (l0 - l1 - l2 + l3);
        }
      }
    }
  }
}

void check_bands(const Tensor4& ll, const Tensor4& lh, const Tensor4& hl, const Tensor4& hh) {
  require_same_shape(ll, lh, "idwt2 (ll vs lh)");
  require_same_shape(ll, hl, "idwt2 (ll vs hl)");
  require_same_shape(ll, hh, "idwt2 (ll vs hh)");
}

}  // namespace

WaveletBands dwt2(const Tensor4& x, OddPolicy odd) {
  const Shape s = x.shape();
  const bool ph = s.h % 2 != 0;
  const bool pw = s.w % 2 != 0;
  if ((ph || pw) && odd == OddPolicy::Reject) check_even(s);
  const Tensor4 padded = (ph || pw) ? pad_symmetric(x, ph, pw) : Tensor4();
  const Tensor4& src = (ph || pw) ? padded : x;
  const Shape half{s.b, s.c, src.height() / 2, src.width() / 2};
  WaveletBands bands{Tensor4(half), Tensor4(half), Tensor4(half), Tensor4(half), ph, pw};
  analyse(src, bands.ll, bands.lh, bands.hl, bands.hh);
  return bands;
}

Tensor4 idwt2(const WaveletBands& bands) {
  check_bands(bands.ll, bands.lh, bands.hl, bands.hh);
  const Shape s = bands.ll.shape();
  Tensor4 full(Shape{s.b, s.c, 2 * s.h, 2 * s.w});
  synthesise(bands.ll, bands.lh, bands.hl, bands.hh, full);
  if (!bands.padded_h && !bands.padded_w) return full;
  Tensor4 out(Shape{s.b, s.c, 2 * s.h - (bands.padded_h ? 1 : 0), 2 * s.w - (bands.padded_w ? 1 : 0)});
  const Shape o = out.shape();
  for (int b = 0; b < s.b; ++b) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < o.h; ++y) {
        for (int xx = 0; xx < o.w; ++xx) out(b, c, y, xx) = full(b, c, y, xx);
      }
    }
  }
  return out;
}

namespace {

// The duplicated last row/column sends its gradient back to the row/column it copies.
Var pad_var(Var x, bool pad_h, bool pad_w) {
  Tape& t = x.tape();
  return t.record("pad_symmetric", pad_symmetric(x.value(), pad_h, pad_w), {x}, [&t, x](const Tensor4& g) {
    Tensor4* gx = t.grad_target(x);
    if (gx == nullptr) return;
    const Shape s = x.shape();
    const Shape o = g.shape();
    for (int b = 0; b < s.b; ++b) {
      for (int c = 0; c < s.c; ++c) {
        for (int y = 0; y < o.h; ++y) {
          for (int xx = 0; xx < o.w; ++xx) {
            (*gx)(b, c, std::min(y, s.h - 1), std::min(xx, s.w - 1)) += g(b, c, y, xx);
          }
        }
      }
    }
  });
}

Var crop_var(Var x, int h, int w) {
  const Shape s = x.shape();
  Tensor4 out(Shape{s.b, s.c, h, w});
  for (int b = 0; b < s.b; ++b) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) out(b, c, y, xx) = x.value()(b, c, y, xx);
      }
    }
  }
  Tape& t = x.tape();
  return t.record("crop", std::move(out), {x}, [&t, x, h, w](const Tensor4& g) {
    Tensor4* gx = t.grad_target(x);
    if (gx == nullptr) return;
    const Shape s = x.shape();
    for (int b = 0; b < s.b; ++b) {
      for (int c = 0; c < s.c; ++c) {
        for (int y = 0; y < h; ++y) {
          for (int xx = 0; xx < w; ++xx) (*gx)(b, c, y, xx) += g(b, c, y, xx);
        }
      }
    }
  });
}

}  // namespace

BandVars dwt2(Var in, OddPolicy odd) {
  const bool ph = in.shape().h % 2 != 0;
  const bool pw = in.shape().w % 2 != 0;
  if (odd == OddPolicy::Reject) check_even(in.shape());
  const Var x = (ph || pw) ? pad_var(in, ph, pw) : in;
  WaveletBands bands = dwt2(x.value(), OddPolicy::Reject);
  Tape& t = x.tape();
  // Each band is its own node; the adjoint of one band is a synthesis with the other three zero.
  auto band_node = [&t, x](const char* name, Tensor4 value, int which) {
    return t.record(name, std::move(value), {x}, [&t, x, which](const Tensor4& g) {
      Tensor4* gx = t.grad_target(x);
      if (gx == nullptr) return;
      const Tensor4 zero(g.shape());
      Tensor4 back(x.shape());
      synthesise(which == 0 ? g : zero, which == 1 ? g : zero, which == 2 ? g : zero,
                 which == 3 ? g : zero, back);
      *gx += back;
    });
  };
  BandVars out;
  out.ll = band_node("dwt2.ll", std::move(bands.ll), 0);
  out.lh = band_node("dwt2.lh", std::move(bands.lh), 1);
  out.hl = band_node("dwt2.hl", std::move(bands.hl), 2);
  out.hh = band_node("dwt2.hh", std::move(bands.hh), 3);
  out.padded_h = ph;
  out.padded_w = pw;
  return out;
}

Var idwt2(const BandVars& bands) {
  check_bands(bands.ll.value(), bands.lh.value(), bands.hl.value(), bands.hh.value());
  const Shape s = bands.ll.shape();
  Tensor4 out(Shape{s.b, s.c, 2 * s.h, 2 * s.w});
  synthesise(bands.ll.value(), bands.lh.value(), bands.hl.value(), bands.hh.value(), out);
  Tape& t = bands.ll.tape();
  Var full = t.record("idwt2", std::move(out), {bands.ll, bands.lh, bands.hl, bands.hh},
                  [&t, bands](const Tensor4& g) {
                    // Orthonormal: the adjoint of synthesis is analysis.
                    const Shape s = bands.ll.shape();
                    Tensor4 ll(s), lh(s), hl(s), hh(s);
                    analyse(g, ll, lh, hl, hh);
                    if (Tensor4* d = t.grad_target(bands.ll)) *d += ll;
                    if (Tensor4* d = t.grad_target(bands.lh)) *d += lh;
                    if (Tensor4* d = t.grad_target(bands.hl)) *d += hl;
                    if (Tensor4* d = t.grad_target(bands.hh)) *d += hh;
                  });
  if (!bands.padded_h && !bands.padded_w) return full;
  return crop_var(full, 2 * s.h - (bands.padded_h ? 1 : 0), 2 * s.w - (bands.padded_w ? 1 : 0));
}

}  // namespace nsfpn::wavelet
