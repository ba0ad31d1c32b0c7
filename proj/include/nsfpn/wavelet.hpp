#pragma once

#include "nsfpn/tape.hpp"

namespace nsfpn::wavelet {

/// Single-level orthonormal Haar subbands. For a 2x2 block (a b; c d):
///   ll = (a + b + c + d) / 2
///   lh = (a - b + c - d) / 2   low-pass along H, high-pass along W
///   hl = (a + b - c - d) / 2   high-pass along H, low-pass along W
///   hh = (a - b - c + d) / 2
struct WaveletBands {
  Tensor4 ll;
  Tensor4 lh;
  Tensor4 hl;
  Tensor4 hh;
  // Set when an odd input was extended by one mirrored row/column; idwt2 crops it again.
  bool padded_h = false;
  bool padded_w = false;

  double detail_energy() const { return lh.sum_squares() + hl.sum_squares() + hh.sum_squares(); }
  double energy() const { return ll.sum_squares() + detail_energy(); }
};

enum class OddPolicy { Reject, SymmetricPad };

WaveletBands dwt2(const Tensor4& x, OddPolicy odd = OddPolicy::Reject);
Tensor4 idwt2(const WaveletBands& bands);

struct BandVars {
  Var ll;
  Var lh;
  Var hl;
  Var hh;
  bool padded_h = false;
  bool padded_w = false;
};

/// Taped variants. With SymmetricPad an odd side is extended as in the Tensor4 version and
/// idwt2 crops it again.
BandVars dwt2(Var x, OddPolicy odd = OddPolicy::Reject);
Var idwt2(const BandVars& bands);

}  // namespace nsfpn::wavelet
