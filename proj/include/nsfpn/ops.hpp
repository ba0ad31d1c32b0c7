#pragma once

#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "nsfpn/tape.hpp"

// Differentiable primitives. Every function records one node on the tape of its inputs and
// supplies an analytic backward. Token matrices are carried as B x 1 x N x C tensors.
namespace nsfpn::ops {

/// Weight Cout x Cin x k x k, bias 1 x Cout x 1 x 1. Cross-correlation (no kernel flip).
struct ConvParams {
  Tensor4 weight;
  Tensor4 bias;
  int stride = 1;
  int padding = 0;
};

int conv_output_size(int in, int k, int stride, int padding);

Var conv2d(Var x, Var weight, Var bias, int stride, int padding);
/// Untaped convenience wrapper.
Tensor4 conv2d(const Tensor4& x, const ConvParams& params);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// x: B x C x H x W, m: B x 1 x H x W; m is broadcast across channels.
Var mul_channel_broadcast(Var x, Var m);

Var sigmoid(Var x);
Var silu(Var x);
Var softplus(Var x);

/// B x C x H x W -> B x 2 x H x W: channel-mean then channel-max per pixel.
Var pool_channel_avg_max(Var x);

/// Elementwise select: mask[i] ? a[i] : b[i]. The mask is a constant of the graph.
Var select(std::shared_ptr<const std::vector<std::uint8_t>> mask, Var a, Var b);

/// k x k kernel with entries exp(-((i-c)^2 + (j-c)^2) / (2 sigma^2)) / Z summing to 1.
Tensor4 gaussian_kernel(double sigma, int k);
/// Same kernel driven by an unconstrained scalar: sigma = softplus(sigma_raw).
Var gaussian_kernel(Var sigma_raw, int k);
/// Depthwise "same" correlation of every channel with one k x k kernel (1 x 1 x k x k),
/// boundary handled by symmetric (edge-including mirror) padding.
Var depthwise_conv_symmetric(Var x, Var kernel);

/// Bilinear sampling with pixel-centre aligned normalized coordinates: (-1,-1) is the centre of
/// the top-left pixel and (+1,+1) that of the bottom-right one. Coordinates outside [-1, 1] are
/// clamped. coords: B x G x N x 2 holding (x, y); channel c reads group c / (C / G).
/// Output: B x C x 1 x N.
Var bilinear_sample(Var feat, Var coords);

/// Untaped sampling of a single point, shared by the tape op and callers that need raw values.
double bilinear_at(const double* plane, int height, int width, double nx, double ny);
/// Untaped sampling of plane (b, c) at a list of (x, y) points; an empty list gives an empty result.
std::vector<double> bilinear_sample_points(const Tensor4& feat, int b, int c,
                                           const std::vector<std::pair<double, double>>& points);

/// B x C x H x W -> B x 1 x (H*W) x C and back.
Var to_tokens(Var x);
Var from_tokens(Var tokens, int height, int width);

/// tokens B x 1 x N x Cin, weight 1 x 1 x Cout x Cin, bias 1 x 1 x 1 x Cout.
Var linear(Var tokens, Var weight, Var bias);
/// Normalizes every token over its C entries, then applies gain/shift (each 1 x 1 x 1 x C).
Var layer_norm(Var tokens, Var gain, Var shift, double eps = 1e-5);
/// Softmax along the last axis.
Var softmax(Var x);
/// Multi-head scaled dot-product attention on already-projected Q (B x 1 x Nq x C),
/// K and V (B x 1 x Nk x C), heads split the C axis into equal contiguous groups.
Var attention(Var q, Var k, Var v, int heads);
/// Attention weights (B x heads x Nq x Nk) of the same computation, untaped.
Tensor4 attention_weights(const Tensor4& q, const Tensor4& k, int heads);

Var upsample_nearest2x(Var x);
/// Half-pixel bilinear 2x upsampling with edge clamping.
Var upsample_bilinear2x(Var x);

Var sum(Var x);
Var mean(Var x);
/// sum_i w[i] * x[i] with constant weights.
Var weighted_sum(Var x, const Tensor4& weights);

/// Mean binary cross-entropy on logits against a {0,1} (or soft) target.
Var bce_with_logits(Var logits, const Tensor4& target);
/// 1 - (sum p t + smooth) / (sum p + sum t - sum p t + smooth), p = sigmoid(logits).
Var soft_iou_loss(Var logits, const Tensor4& target, double smooth = 1.0);

}  // namespace nsfpn::ops
