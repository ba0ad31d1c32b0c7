#include "nsfpn/model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace nsfpn::model {

namespace {

constexpr const char* kCheckpointMagic = "nsfpn-checkpoint";
constexpr int kCheckpointVersion = 1;
constexpr double kHeadPrior = 0.01;

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& key) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw std::invalid_argument("config: '" + key + "' is not a number: " + s);
  }
  return v;
}

int parse_int(const std::string& s, const std::string& key) {
  int v = 0;
  const char* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw std::invalid_argument("config: '" + key + "' is not an integer: " + s);
  }
  return v;
}

ConvLayer make_conv(ParamStore& store, const std::string& name, int cin, int cout, int k, int stride,
                    int padding, double gain, Rng& rng) {
  ConvLayer layer;
  const double fan_in = static_cast<double>(cin) * k * k;
  layer.weight = &store.add(name + ".weight", randn(Shape{cout, cin, k, k}, rng, std::sqrt(gain / fan_in)));
  layer.bias = &store.add(name + ".bias", Tensor4(Shape{1, cout, 1, 1}));
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

double conv_macs(int cin, int cout, int k, int out_h, int out_w) {
  return static_cast<double>(cout) * cin * k * k * out_h * out_w;
}

}  // namespace

FpnMode parse_fpn_mode(const std::string& s) {
  if (s == "plain") return FpnMode::Plain;
  if (s == "ns") return FpnMode::Ns;
  throw std::invalid_argument("fpn_mode must be 'plain' or 'ns', got '" + s + "'");
}

std::string to_string(FpnMode mode) { return mode == FpnMode::Plain ? "plain" : "ns"; }

void NsFpnConfig::validate() const {
  if (channels < 1) throw std::invalid_argument("model: channels must be positive");
  if (in_channels < 1) throw std::invalid_argument("model: in_channels must be positive");
  for (int w : backbone_widths) {
    if (w < 1) throw std::invalid_argument("model: backbone widths must be positive");
  }
  if (head_width < 1) throw std::invalid_argument("model: head_width must be positive");
  lfp.validate();
  spiral.validate();
  if (mode == FpnMode::Ns && channels % spiral.heads != 0) {
    throw std::invalid_argument("model: channels " + std::to_string(channels) +
                                " not divisible by spiral heads " + std::to_string(spiral.heads));
  }
}

std::map<std::string, std::string> NsFpnConfig::to_map() const {
  std::map<std::string, std::string> kv;
  kv["channels"] = std::to_string(channels);
  kv["fpn_mode"] = to_string(mode);
  kv["in_channels"] = std::to_string(in_channels);
  kv["backbone_widths"] = std::to_string(backbone_widths[0]) + "," + std::to_string(backbone_widths[1]) +
                          "," + std::to_string(backbone_widths[2]) + "," +
                          std::to_string(backbone_widths[3]);
  kv["head_width"] = std::to_string(head_width);
  kv["lfp.tau_quantile"] = format_double(lfp.tau_quantile);
  kv["lfp.tau_abs"] = lfp.tau_abs ? format_double(*lfp.tau_abs) : "none";
  kv["lfp.kernel_size"] = std::to_string(lfp.kernel_size);
  kv["lfp.sigma_init"] = format_double(lfp.sigma_init);
  kv["lfp.attention_kernel"] = std::to_string(lfp.attention_kernel);
  kv["spiral.heads"] = std::to_string(spiral.heads);
  kv["spiral.points"] = std::to_string(spiral.points);
  kv["spiral.l0"] = format_double(spiral.l0);
  kv["spiral.dl"] = format_double(spiral.dl);
  kv["spiral.grid_stride"] = std::to_string(spiral.grid_stride);
  return kv;
}

NsFpnConfig NsFpnConfig::from_map(const std::map<std::string, std::string>& kv) {
  NsFpnConfig c;
  auto get = [&](const std::string& key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  if (auto v = get("channels")) c.channels = parse_int(*v, "channels");
  if (auto v = get("fpn_mode")) c.mode = parse_fpn_mode(*v);
  if (auto v = get("in_channels")) c.in_channels = parse_int(*v, "in_channels");
  if (auto v = get("backbone_widths")) {
    std::istringstream is(*v);
    std::string part;
    for (int i = 0; i < 4; ++i) {
      if (!std::getline(is, part, ',')) {
        throw std::invalid_argument("config: backbone_widths needs four values: " + *v);
      }
      c.backbone_widths[i] = parse_int(part, "backbone_widths");
    }
  }
  if (auto v = get("head_width")) c.head_width = parse_int(*v, "head_width");
  if (auto v = get("lfp.tau_quantile")) c.lfp.tau_quantile = parse_double(*v, "lfp.tau_quantile");
  if (auto v = get("lfp.tau_abs")) {
    if (*v == "none" || v->empty()) {
      c.lfp.tau_abs.reset();
    } else {
      c.lfp.tau_abs = parse_double(*v, "lfp.tau_abs");
    }
  }
  if (auto v = get("lfp.kernel_size")) c.lfp.kernel_size = parse_int(*v, "lfp.kernel_size");
  if (auto v = get("lfp.sigma_init")) c.lfp.sigma_init = parse_double(*v, "lfp.sigma_init");
  if (auto v = get("lfp.attention_kernel")) c.lfp.attention_kernel = parse_int(*v, "lfp.attention_kernel");
  if (auto v = get("spiral.heads")) c.spiral.heads = parse_int(*v, "spiral.heads");
  if (auto v = get("spiral.points")) c.spiral.points = parse_int(*v, "spiral.points");
  if (auto v = get("spiral.l0")) c.spiral.l0 = parse_double(*v, "spiral.l0");
  if (auto v = get("spiral.dl")) c.spiral.dl = parse_double(*v, "spiral.dl");
  if (auto v = get("spiral.grid_stride")) c.spiral.grid_stride = parse_int(*v, "spiral.grid_stride");
  c.validate();
  return c;
}

Var ConvLayer::operator()(Var x) const {
  Tape& t = x.tape();
  return ops::conv2d(x, t.param(*weight), t.param(*bias), stride, padding);
}

NsFpnModel::NsFpnModel(const NsFpnConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  int cin = config_.in_channels;
  for (int i = 0; i < 4; ++i) {
    const int cout = config_.backbone_widths[i];
    backbone_[i] = make_conv(store_, "backbone." + std::to_string(i + 1), cin, cout, 3, 2, 1, 2.0, rng);
    cin = cout;
  }
  for (int i = 0; i < 4; ++i) {
    lateral_[i] = make_conv(store_, "lateral." + std::to_string(i + 1), config_.backbone_widths[i],
                            config_.channels, 1, 1, 0, 1.0, rng);
  }
  if (config_.mode == FpnMode::Ns) {
    for (int i = 0; i < 4; ++i) {
      lfp_.push_back(lfp::LfpParams::create(store_, "lfp." + std::to_string(i + 1), config_.lfp, rng));
    }
    for (int i = 0; i < 3; ++i) {
      sfs_.push_back(sfs::SfsParams::create(store_, "sfs." + std::to_string(i + 1), config_.channels,
                                            config_.spiral, rng));
    }
  }
  head_conv_ = make_conv(store_, "head.conv", config_.channels, config_.head_width, 3, 1, 1, 2.0, rng);
  head_out_ = make_conv(store_, "head.out", config_.head_width, 1, 1, 1, 0, 1.0, rng);
  // Foreground prior: initial probabilities near kHeadPrior instead of 0.5.
  head_out_.bias->value.fill(std::log(kHeadPrior / (1.0 - kHeadPrior)));
}

Pyramid NsFpnModel::tiny_backbone(Var image) const {
  const Shape s = image.shape();
  if (s.h % 16 != 0 || s.w % 16 != 0) {
    throw ShapeError("tiny_backbone: image " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " is not divisible by 16");
  }
  if (s.c != config_.in_channels) {
    throw ShapeError("tiny_backbone: expected " + std::to_string(config_.in_channels) +
                     " input channels, got " + std::to_string(s.c));
  }
  Pyramid feats;
  Var x = image;
  for (int i = 0; i < 4; ++i) {
    x = ops::silu(backbone_[i](x));
    feats[i] = x;
  }
  return feats;
}

Pyramid NsFpnModel::lateral_reduce(const Pyramid& backbone_feats) const {
  for (int i = 1; i < 4; ++i) {
    const Shape& fine = backbone_feats[i - 1].shape();
    const Shape& coarse = backbone_feats[i].shape();
    if (coarse.b != fine.b || 2 * coarse.h != fine.h || 2 * coarse.w != fine.w) {
      throw ShapeError("lateral_reduce: level " + std::to_string(i + 1) + " " + coarse.str() +
                       " is not half of level " + std::to_string(i) + " " + fine.str());
    }
  }
  Pyramid out;
  for (int i = 0; i < 4; ++i) out[i] = lateral_[i](backbone_feats[i]);
  return out;
}

Pyramid NsFpnModel::fpn(const Pyramid& laterals, lfp::GateCache* cache) const {
  Pyramid y;
  if (config_.mode == FpnMode::Plain) {
    y[3] = laterals[3];
    for (int i = 2; i >= 0; --i) y[i] = ops::add(laterals[i], ops::upsample_nearest2x(y[i + 1]));
    return y;
  }
  Pyramid purified;
  for (int i = 0; i < 4; ++i) purified[i] = lfp::lfp_forward(laterals[i], lfp_[i], cache);
  y[3] = purified[3];
  for (int i = 2; i >= 0; --i) y[i] = sfs::sfs_fuse(purified[i], y[i + 1], sfs_[i]);
  return y;
}

Pyramid NsFpnModel::nsfpn_forward(const Pyramid& backbone_feats, lfp::GateCache* cache) const {
  return fpn(lateral_reduce(backbone_feats), cache);
}

Var NsFpnModel::seg_head(Var y1) const {
  return ops::upsample_bilinear2x(head_out_(ops::silu(head_conv_(y1))));
}

Var NsFpnModel::forward(Var image, lfp::GateCache* cache) const {
  return seg_head(nsfpn_forward(tiny_backbone(image), cache)[0]);
}

ComplexityReport count_params_flops(const NsFpnModel& model, int height, int width) {
  const NsFpnConfig& cfg = model.config();
  ComplexityReport r;
  std::array<int, 4> lh{}, lw{};
  for (int i = 0; i < 4; ++i) {
    lh[i] = height >> (i + 1);
    lw[i] = width >> (i + 1);
  }
  const int c = cfg.channels;
  int cin = cfg.in_channels;
  for (int i = 0; i < 4; ++i) {
    const int cout = cfg.backbone_widths[i];
    r.rest.params += static_cast<std::size_t>(cout) * cin * 9 + cout;
    r.rest.macs += conv_macs(cin, cout, 3, lh[i], lw[i]);
    r.rest.params += static_cast<std::size_t>(c) * cout + c;
    r.rest.macs += conv_macs(cout, c, 1, lh[i], lw[i]);
    cin = cout;
  }
  r.rest.params += static_cast<std::size_t>(cfg.head_width) * c * 9 + cfg.head_width;
  r.rest.macs += conv_macs(c, cfg.head_width, 3, lh[0], lw[0]);
  r.rest.params += static_cast<std::size_t>(cfg.head_width) + 1;
  r.rest.macs += conv_macs(cfg.head_width, 1, 1, lh[0], lw[0]);

  if (cfg.mode == FpnMode::Plain) return r;

  const int ak = cfg.lfp.attention_kernel;
  const int gk = cfg.lfp.kernel_size;
  for (int i = 0; i < 4; ++i) {
    const double half = static_cast<double>(lh[i] / 2) * (lw[i] / 2);
    r.lfp.params += static_cast<std::size_t>(ak) * ak * 2 + 1 + 1;
    // analysis + synthesis (4 MACs per output coefficient each), attention conv, smoothing
    r.lfp.macs += 2.0 * 4.0 * c * half * 4.0;
    r.lfp.macs += 2.0 * ak * ak * half;
    r.lfp.macs += 3.0 * c * gk * gk * half;
    r.lfp.macs += 3.0 * c * half;  // modulation
  }
  const sfs::SpiralConfig& sp = cfg.spiral;
  const std::size_t table = sp.offset_count();
  for (int e = 0; e < 3; ++e) {
    const double nq = static_cast<double>(lh[e]) * lw[e];
    const int hn = lh[e + 1];
    const int wn = lw[e + 1];
    const int g = std::min({sp.grid_stride, hn, wn});
    const double cells = static_cast<double>((hn + g - 1) / g) * ((wn + g - 1) / g);
    const double nk = cells * sp.points;
    const std::size_t proj = 4 * static_cast<std::size_t>(c) * c;
    r.attention_projection_params += proj;
    r.sfs.params += proj + 3 * static_cast<std::size_t>(c);  // projections and q, v, o biases
    r.sfs.params += 4 * static_cast<std::size_t>(c);         // two layer norms
    r.sfs.params += table;
    r.sfs_offset_params += table;
    r.dat_offset_params += static_cast<std::size_t>(c) * table + table;
    r.sfs.macs += nq * c * c * 2.0 + nk * c * c * 2.0;  // q, o and k, v projections
    r.sfs.macs += 2.0 * nq * nk * c;                     // scores and weighted values
    r.sfs.macs += 4.0 * nk * c;                          // bilinear sampling
  }
  return r;
}

void save_checkpoint(const NsFpnModel& model, std::ostream& out,
                     const std::map<std::string, std::string>& extra) {
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  for (const auto& [k, v] : model.config().to_map()) out << "config " << k << ' ' << v << '\n';
  for (const auto& [k, v] : extra) out << "extra " << k << ' ' << v << '\n';
  for (const Param& p : model.params()) {
    const Shape s = p.value.shape();
    out << "param " << p.name << ' ' << s.b << ' ' << s.c << ' ' << s.h << ' ' << s.w << '\n';
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      out << (i == 0 ? "" : " ") << format_double(p.value[i]);
    }
    out << '\n';
  }
  out << "end\n";
}

void save_checkpoint(const NsFpnModel& model, const std::string& path,
                     const std::map<std::string, std::string>& extra) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  save_checkpoint(model, out, extra);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& why) {
    throw std::runtime_error("checkpoint line " + std::to_string(lineno) + ": " + why);
  };
  if (!std::getline(in, line)) fail("empty file");
  ++lineno;
  {
    std::istringstream hs(line);
    std::string magic;
    int version = 0;
    if (!(hs >> magic >> version) || magic != kCheckpointMagic) fail("not an nsfpn checkpoint");
    if (version != kCheckpointVersion) fail("unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  std::map<std::string, std::string> cfg;
  bool ended = false;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "config" || kind == "extra") {
      std::string key, value;
      ls >> key;
      std::getline(ls >> std::ws, value);
      (kind == "config" ? cfg : ckpt.extra)[key] = value;
    } else if (kind == "param") {
      std::string name;
      Shape s;
      if (!(ls >> name >> s.b >> s.c >> s.h >> s.w)) fail("malformed param header");
      if (!std::getline(in, line)) fail("missing values for " + name);
      ++lineno;
      std::vector<double> values;
      values.reserve(s.numel());
      std::istringstream vs(line);
      std::string tok;
      while (vs >> tok) values.push_back(parse_double(tok, name));
      if (values.size() != s.numel()) {
        fail("parameter " + name + " has " + std::to_string(values.size()) + " values, shape " +
             s.str() + " needs " + std::to_string(s.numel()));
      }
      ckpt.params.emplace_back(name, Tensor4(s, std::move(values)));
    } else if (kind == "end") {
      ended = true;
      break;
    } else if (!kind.empty()) {
      fail("unknown record '" + kind + "'");
    }
  }
  if (!ended) fail("truncated checkpoint (no end marker)");
  ckpt.config = NsFpnConfig::from_map(cfg);
  return ckpt;
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

void load_parameters(NsFpnModel& model, const Checkpoint& ckpt) {
  ParamStore& store = model.params();
  if (store.size() != ckpt.params.size()) {
    throw ShapeError("checkpoint has " + std::to_string(ckpt.params.size()) +
                     " parameters, model expects " + std::to_string(store.size()));
  }
  for (const auto& [name, value] : ckpt.params) {
    Param* p = store.find(name);
    if (p == nullptr) throw ShapeError("checkpoint parameter " + name + " not in model");
    if (!(p->value.shape() == value.shape())) {
      throw ShapeError("parameter " + name + ": checkpoint shape " + value.shape().str() +
                       " vs model shape " + p->value.shape().str());
    }
    p->value = value;
  }
}

}  // namespace nsfpn::model
