#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "nsfpn/lfp.hpp"
#include "nsfpn/sfs.hpp"

namespace nsfpn::model {

enum class FpnMode { Plain, Ns };

FpnMode parse_fpn_mode(const std::string& s);
std::string to_string(FpnMode mode);

struct NsFpnConfig {
  int channels = 64;
  FpnMode mode = FpnMode::Ns;
  int in_channels = 1;
  std::array<int, 4> backbone_widths{16, 32, 64, 64};
  int head_width = 16;
  lfp::LfpConfig lfp;
  sfs::SpiralConfig spiral;

  void validate() const;
  /// Flat key/value form used by checkpoints and resolved run configs.
  std::map<std::string, std::string> to_map() const;
  static NsFpnConfig from_map(const std::map<std::string, std::string>& kv);
};

/// Levels at strides {2, 4, 8, 16}; index 0 is the finest.
using Pyramid = std::array<Var, 4>;

struct ConvLayer {
  Param* weight = nullptr;
  Param* bias = nullptr;
  int stride = 1;
  int padding = 0;

  Var operator()(Var x) const;
  std::size_t scalar_count() const { return weight->value.size() + bias->value.size(); }
};

struct ComponentCost {
  std::size_t params = 0;
  double macs = 0.0;
};

struct ComplexityReport {
  ComponentCost lfp;
  ComponentCost sfs;
  ComponentCost rest;
  /// Learnable sampling-offset scalars: the shared tables of all SFS edges.
  std::size_t sfs_offset_params = 0;
  /// Offset-predictor scalars a per-query deformable attention (linear C -> H*P*2 per edge)
  /// would need for the same heads and points.
  std::size_t dat_offset_params = 0;
  /// Attention projection weights (4 C^2 per edge, biases excluded).
  std::size_t attention_projection_params = 0;

  std::size_t total_params() const { return lfp.params + sfs.params + rest.params; }
  double total_macs() const { return lfp.macs + sfs.macs + rest.macs; }
};

class NsFpnModel {
 public:
  NsFpnModel(const NsFpnConfig& config, std::uint64_t seed);
  NsFpnModel(const NsFpnModel&) = delete;
  NsFpnModel& operator=(const NsFpnModel&) = delete;

  const NsFpnConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  /// Four stride-2 conv + SiLU stages. Image height and width must be divisible by 16.
  Pyramid tiny_backbone(Var image) const;
  /// 1x1 convolutions to `channels`; rejects inputs that do not halve level to level.
  Pyramid lateral_reduce(const Pyramid& backbone_feats) const;
  /// Top-down pathway over the reduced laterals X1..X4, returning Y1..Y4.
  Pyramid fpn(const Pyramid& laterals, lfp::GateCache* cache = nullptr) const;
  Pyramid nsfpn_forward(const Pyramid& backbone_feats, lfp::GateCache* cache = nullptr) const;
  /// 3x3 conv, SiLU, 1x1 conv to one channel, bilinear 2x upsampling.
  Var seg_head(Var y1) const;
  /// Image B x in_channels x H x W to mask logits B x 1 x H x W.
  Var forward(Var image, lfp::GateCache* cache = nullptr) const;

  const std::vector<lfp::LfpParams>& lfp_levels() const { return lfp_; }
  const std::vector<sfs::SfsParams>& sfs_edges() const { return sfs_; }
  const std::array<ConvLayer, 4>& laterals() const { return lateral_; }

 private:
  NsFpnConfig config_;
  ParamStore store_;
  std::array<ConvLayer, 4> backbone_;
  std::array<ConvLayer, 4> lateral_;
  std::vector<lfp::LfpParams> lfp_;  // one per level when mode == Ns
  std::vector<sfs::SfsParams> sfs_;  // edges (Y2->Y1), (Y3->Y2), (Y4->Y3) when mode == Ns
  ConvLayer head_conv_;
  ConvLayer head_out_;
};

/// Analytic parameter and multiply-accumulate counts for an input of height x width.
ComplexityReport count_params_flops(const NsFpnModel& model, int height, int width);

/// Text checkpoint: a versioned header, the resolved model configuration and every parameter
/// with its shape; doubles are written in shortest round-trip form.
void save_checkpoint(const NsFpnModel& model, std::ostream& out,
                     const std::map<std::string, std::string>& extra = {});
void save_checkpoint(const NsFpnModel& model, const std::string& path,
                     const std::map<std::string, std::string>& extra = {});

struct Checkpoint {
  NsFpnConfig config;
  std::map<std::string, std::string> extra;
  std::vector<std::pair<std::string, Tensor4>> params;
};
Checkpoint read_checkpoint(std::istream& in);
Checkpoint read_checkpoint(const std::string& path);
/// Copies checkpoint parameters into the model; names and shapes must match exactly.
void load_parameters(NsFpnModel& model, const Checkpoint& ckpt);

}  // namespace nsfpn::model
