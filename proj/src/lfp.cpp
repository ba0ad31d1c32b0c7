#include "nsfpn/lfp.hpp"

#include <algorithm>
#include <cmath>

namespace nsfpn::lfp {

void LfpConfig::validate() const {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw std::invalid_argument("lfp: kernel_size must be odd and positive, got " +
                                std::to_string(kernel_size));
  }
  if (attention_kernel < 1 || attention_kernel % 2 == 0) {
    throw std::invalid_argument("lfp: attention_kernel must be odd and positive");
  }
  if (!(tau_quantile >= 0.0 && tau_quantile <= 1.0)) {
    throw std::invalid_argument("lfp: tau_quantile must lie in [0, 1]");
  }
  if (!(sigma_init > 0.0)) throw std::invalid_argument("lfp: sigma_init must be positive");
}

constexpr double kAttentionBiasInit = 3.0;

LfpParams LfpParams::create(ParamStore& store, const std::string& prefix, const LfpConfig& config,
                            Rng& rng) {
  config.validate();
  LfpParams p;
  p.config = config;
  const int k = config.attention_kernel;
  const double fan_in = 2.0 * k * k;
  p.attn_weight = &store.add(prefix + ".attn.weight", randn(Shape{1, 2, k, k}, rng, 1.0 / std::sqrt(fan_in)));
  // sigmoid(3) ~ 0.95: modulation starts close to the identity
  p.attn_bias = &store.add(prefix + ".attn.bias", Tensor4(Shape{1, 1, 1, 1}, kAttentionBiasInit));
  // inverse softplus
  const double raw = config.sigma_init > 30.0 ? config.sigma_init : std::log(std::expm1(config.sigma_init));
  p.sigma_raw = &store.add(prefix + ".sigma_raw", Tensor4(Shape{1, 1, 1, 1}, raw));
  return p;
}

double LfpParams::sigma() const {
  const double raw = sigma_raw->value[0];
  return raw > 30.0 ? raw : std::log1p(std::exp(raw));
}

std::size_t LfpParams::scalar_count() const {
  return attn_weight->value.size() + attn_bias->value.size() + sigma_raw->value.size();
}

GateCache::Mask GateCache::next(const std::function<Mask()>& compute) {
  if (frozen_) {
    if (cursor_ >= masks_.size()) throw std::logic_error("GateCache: replay past recorded masks");
    return masks_[cursor_++];
  }
  Mask m = compute();
  masks_.push_back(m);
  ++cursor_;
  return m;
}

Var spatial_attention(Var f_l, Var weight, Var bias) {
  const int k = weight.shape().h;
  return ops::sigmoid(ops::conv2d(ops::pool_channel_avg_max(f_l), weight, bias, 1, k / 2));
}

wavelet::BandVars modulate(Var a_s, const wavelet::BandVars& bands) {
  const Shape as = a_s.shape();
  const Shape bs = bands.lh.shape();
  if (as.h != bs.h || as.w != bs.w || as.b != bs.b || as.c != 1) {
    throw ShapeError("modulate: attention map " + as.str() + " does not match bands " + bs.str());
  }
  return {bands.ll, ops::mul_channel_broadcast(bands.lh, a_s),
          ops::mul_channel_broadcast(bands.hl, a_s), ops::mul_channel_broadcast(bands.hh, a_s),
          bands.padded_h, bands.padded_w};
}

double quantile_threshold(const Tensor4& band, int b, double q) {
  const Shape s = band.shape();
  const std::size_t n = static_cast<std::size_t>(s.c) * s.plane();
  const std::size_t m = static_cast<std::size_t>(std::floor(q * static_cast<double>(n)));
  if (m >= n) return std::numeric_limits<double>::infinity();
  std::vector<double> mags(n);
  const double* p = band.plane(b, 0);
  for (std::size_t i = 0; i < n; ++i) mags[i] = std::abs(p[i]);
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(m), mags.end());
  return mags[m];
}

Var gate_band(Var band, Var kernel, const LfpConfig& config, GateCache* cache) {
  const Tensor4& v = band.value();
  auto compute = [&]() -> GateCache::Mask {
    const Shape s = v.shape();
    const std::size_t per_sample = static_cast<std::size_t>(s.c) * s.plane();
    auto mask = std::make_shared<std::vector<std::uint8_t>>(v.size());
    for (int b = 0; b < s.b; ++b) {
      const double tau = config.tau_abs ? *config.tau_abs : quantile_threshold(v, b, config.tau_quantile);
      const double* p = v.plane(b, 0);
      std::uint8_t* m = mask->data() + static_cast<std::size_t>(b) * per_sample;
      double margin = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < per_sample; ++i) {
        const double a = std::abs(p[i]);
        m[i] = a < tau ? 1 : 0;
        if (std::isfinite(tau) && a != tau) margin = std::min(margin, std::abs(a - tau));
      }
      if (cache != nullptr) cache->note_margin(margin);
    }
    return mask;
  };
  GateCache::Mask mask = cache != nullptr ? cache->next(compute) : compute();
  if (mask->size() != v.size()) throw ShapeError("gate_band: cached mask does not match band");
  Var smooth = ops::depthwise_conv_symmetric(band, kernel);
  return ops::select(mask, smooth, band);
}

wavelet::BandVars gated_gaussian(const wavelet::BandVars& bands, Var kernel, const LfpConfig& config,
                                 GateCache* cache) {
  return {bands.ll, gate_band(bands.lh, kernel, config, cache),
          gate_band(bands.hl, kernel, config, cache), gate_band(bands.hh, kernel, config, cache),
          bands.padded_h, bands.padded_w};
}

Var lfp_forward(Var x, const LfpParams& params, GateCache* cache) {
  Tape& t = x.tape();
  const wavelet::BandVars bands = wavelet::dwt2(x, wavelet::OddPolicy::SymmetricPad);
  Var a_s = spatial_attention(bands.ll, t.param(*params.attn_weight), t.param(*params.attn_bias));
  const wavelet::BandVars modulated = modulate(a_s, bands);
  Var kernel = ops::gaussian_kernel(t.param(*params.sigma_raw), params.config.kernel_size);
  return wavelet::idwt2(gated_gaussian(modulated, kernel, params.config, cache));
}

Tensor4 lfp_forward(const Tensor4& x, const LfpParams& params) {
  Tape t;
  return lfp_forward(t.constant(x), params).value();
}

}  // namespace nsfpn::lfp
