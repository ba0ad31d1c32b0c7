#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nsfpn/ops.hpp"
#include "nsfpn/wavelet.hpp"

// Low-frequency guided feature purification: Haar decomposition, a spatial attention map from
// the low band weighting the detail bands, gated Gaussian smoothing of weak detail responses,
// and reconstruction.
namespace nsfpn::lfp {

struct LfpConfig {
  /// Fraction of detail magnitudes (per sample and band) that fall under the gate.
  double tau_quantile = 0.5;
  /// Fixed absolute threshold; overrides tau_quantile when set.
  std::optional<double> tau_abs;
  int kernel_size = 3;
  double sigma_init = 1.0;
  int attention_kernel = 7;

  void validate() const;
};

/// Learnable state of one LFP instance, owned by a ParamStore.
struct LfpParams {
  LfpConfig config;
  Param* attn_weight = nullptr;  // 1 x 2 x 7 x 7
  Param* attn_bias = nullptr;    // 1 x 1 x 1 x 1
  Param* sigma_raw = nullptr;    // 1 x 1 x 1 x 1, sigma = softplus(sigma_raw)

  static LfpParams create(ParamStore& store, const std::string& prefix, const LfpConfig& config,
                          Rng& rng);
  double sigma() const;
  std::size_t scalar_count() const;
};

/// Records the gate masks of one forward pass, or replays them so that repeated evaluations
/// (finite differences) see the same branch selection as the recorded pass.
class GateCache {
 public:
  using Mask = std::shared_ptr<const std::vector<std::uint8_t>>;

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }
  /// Must be called before each forward pass.
  void rewind() { cursor_ = 0; }

  Mask next(const std::function<Mask()>& compute);
  void note_margin(double margin) { min_margin_ = std::min(min_margin_, margin); }
  /// Smallest | |value| - tau | seen while recording. A quantile tau is itself one of the
  /// magnitudes; that entry keeps its raw value and is not counted.
  double min_margin() const { return min_margin_; }
  std::size_t size() const { return masks_.size(); }

 private:
  bool frozen_ = false;
  std::size_t cursor_ = 0;
  std::vector<Mask> masks_;
  double min_margin_ = std::numeric_limits<double>::infinity();
};

/// Sigmoid(Conv7x7(mean_c(f_l) || max_c(f_l))): B x 1 x H x W in (0, 1).
Var spatial_attention(Var f_l, Var weight, Var bias);

/// Multiplies lh, hl and hh by the single-channel map; ll passes through.
wavelet::BandVars modulate(Var a_s, const wavelet::BandVars& bands);

/// Per-sample threshold: the floor(q * n)-th smallest magnitude of `band` in sample b, or +inf
/// when q * n reaches n. q = 0 therefore gates nothing and q = 1 gates everything.
double quantile_threshold(const Tensor4& band, int b, double q);

/// Gated smoothing of one detail band: entries with |v| < tau take the Gaussian-smoothed value,
/// the others keep v. The kernel is 1 x 1 x k x k; the gate is constant for the backward pass.
Var gate_band(Var band, Var kernel, const LfpConfig& config, GateCache* cache = nullptr);

wavelet::BandVars gated_gaussian(const wavelet::BandVars& bands, Var kernel, const LfpConfig& config,
                                 GateCache* cache = nullptr);

Var lfp_forward(Var x, const LfpParams& params, GateCache* cache = nullptr);

/// Untaped evaluation.
Tensor4 lfp_forward(const Tensor4& x, const LfpParams& params);

}  // namespace nsfpn::lfp
