#include "nsfpn/irdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <tuple>

#include "nsfpn/wavelet.hpp"

namespace nsfpn::irdata {

namespace fs = std::filesystem;

void SceneConfig::validate() const {
  if (height < 4 || width < 4) throw std::invalid_argument("scene: image must be at least 4x4");
  if (min_targets < 0 || max_targets < min_targets) {
    throw std::invalid_argument("scene: need 0 <= min_targets <= max_targets");
  }
  if (!(amp_min > 0.0) || amp_max < amp_min) throw std::invalid_argument("scene: bad amplitude range");
  if (!(amp_min > noise_std)) {
    throw std::invalid_argument("scene: target amplitude must exceed the noise standard deviation");
  }
  if (!(sigma_min > 0.0) || sigma_max < sigma_min) throw std::invalid_argument("scene: bad sigma range");
  if (noise_std < 0.0 || clutter_amp < 0.0) throw std::invalid_argument("scene: negative noise or clutter");
  if (!(clutter_smoothness >= 1.0)) throw std::invalid_argument("scene: clutter_smoothness must be >= 1");
  if (min_distractors < 0 || max_distractors < min_distractors) {
    throw std::invalid_argument("scene: need 0 <= min_distractors <= max_distractors");
  }
  if (distractor_amp_max < distractor_amp_min || !(distractor_sigma > 0.0)) {
    throw std::invalid_argument("scene: bad distractor settings");
  }
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

struct Blob {
  double y, x, amp, sigma;
};

// Half-peak radius of a Gaussian profile: exp(-r^2 / 2 s^2) = 1/2.
double half_radius(double sigma) { return sigma * std::sqrt(2.0 * std::log(2.0)); }

}  // namespace

Scene synth_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  const int h = cfg.height;
  const int w = cfg.width;
  Scene scene;
  scene.image = Tensor4(Shape{1, 1, h, w}, cfg.background);
  scene.mask = Tensor4(Shape{1, 1, h, w});

  // Low-frequency clutter: bilinear interpolation of a coarse random lattice.
  const double s = cfg.clutter_smoothness;
  const int gh = static_cast<int>(std::ceil((h - 1) / s)) + 2;
  const int gw = static_cast<int>(std::ceil((w - 1) / s)) + 2;
  std::vector<double> lattice(static_cast<std::size_t>(gh) * gw);
  for (double& v : lattice) v = uniform(rng, -1.0, 1.0) * cfg.clutter_amp;
  for (int y = 0; y < h; ++y) {
    const double fy = y / s;
    const int y0 = static_cast<int>(fy);
    const double ty = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = x / s;
      const int x0 = static_cast<int>(fx);
      const double tx = fx - x0;
      auto at = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy) * gw + xx]; };
      scene.image(0, 0, y, x) += (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                                 ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
    }
  }

  const double margin = 3.0;
  auto far_from = [](const std::vector<Blob>& blobs, double y, double x, double reach) {
    for (const Blob& b : blobs) {
      if (std::hypot(b.y - y, b.x - x) < reach + 3.0 * b.sigma) return false;
    }
    return true;
  };

  std::vector<Blob> targets;
  const int want = uniform_int(rng, cfg.min_targets, cfg.max_targets);
  for (int attempt = 0; static_cast<int>(targets.size()) < want; ++attempt) {
    if (attempt > 10000) throw std::runtime_error("synth_scene: cannot place targets without overlap");
    Blob t;
    t.sigma = uniform(rng, cfg.sigma_min, cfg.sigma_max);
    t.amp = uniform(rng, cfg.amp_min, cfg.amp_max);
    t.y = uniform(rng, margin, h - 1 - margin);
    t.x = uniform(rng, margin, w - 1 - margin);
    if (far_from(targets, t.y, t.x, 3.0 * t.sigma + 2.0)) targets.push_back(t);
  }
  std::vector<Blob> distractors;
  const int want_d = uniform_int(rng, cfg.min_distractors, cfg.max_distractors);
  for (int attempt = 0; static_cast<int>(distractors.size()) < want_d && attempt < 10000; ++attempt) {
    Blob d;
    d.sigma = cfg.distractor_sigma;
    d.amp = uniform(rng, cfg.distractor_amp_min, cfg.distractor_amp_max);
    d.y = uniform(rng, 1.0, h - 2.0);
    d.x = uniform(rng, 1.0, w - 2.0);
    if (far_from(targets, d.y, d.x, 3.0) && far_from(distractors, d.y, d.x, 2.0)) distractors.push_back(d);
  }
  scene.targets = static_cast<int>(targets.size());

  std::normal_distribution<double> noise(0.0, 1.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double v = scene.image(0, 0, y, x);
      for (const Blob& t : targets) {
        const double r2 = (y - t.y) * (y - t.y) + (x - t.x) * (x - t.x);
        v += t.amp * std::exp(-r2 / (2.0 * t.sigma * t.sigma));
        if (std::sqrt(r2) < half_radius(t.sigma)) scene.mask(0, 0, y, x) = 1.0;
      }
      for (const Blob& d : distractors) {
        const double r2 = (y - d.y) * (y - d.y) + (x - d.x) * (x - d.x);
        v += d.amp * std::exp(-r2 / (2.0 * d.sigma * d.sigma));
      }
      if (cfg.noise_std > 0.0) v += cfg.noise_std * noise(rng);
      scene.image(0, 0, y, x) = std::clamp(v, 0.0, 1.0);
    }
  }
  return scene;
}

Dataset synthetic_dataset(const SceneConfig& cfg, int count, std::uint64_t seed, int split) {
  Dataset data;
  data.reserve(count);
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = splitmix64(splitmix64(seed) ^ splitmix64((static_cast<std::uint64_t>(split) << 32) + i));
    Scene scene = synth_scene(s, cfg);
    std::ostringstream name;
    name << "syn_" << split << '_' << std::setw(4) << std::setfill('0') << i;
    data.push_back(Sample{name.str(), std::move(scene.image), std::move(scene.mask)});
  }
  return data;
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

BinaryMask binarize(const Tensor4& t, int b, double threshold) {
  BinaryMask m(t.height(), t.width());
  const double* p = t.plane(b, 0);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = p[i] > threshold ? 1 : 0;
  return m;
}

namespace {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
  int find(int x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<int> parent_;
};

}  // namespace

std::vector<Region> connected_components(const BinaryMask& mask) {
  const int h = mask.height;
  const int w = mask.width;
  UnionFind uf(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      const int i = y * w + x;
      // Already-visited neighbours: W, NW, N, NE.
      if (x > 0 && mask.at(y, x - 1)) uf.unite(i, i - 1);
      if (y > 0) {
        if (x > 0 && mask.at(y - 1, x - 1)) uf.unite(i, i - w - 1);
        if (mask.at(y - 1, x)) uf.unite(i, i - w);
        if (x + 1 < w && mask.at(y - 1, x + 1)) uf.unite(i, i - w + 1);
      }
    }
  }
  std::vector<Region> regions;
  std::vector<int> slot(static_cast<std::size_t>(h) * w, -1);
  for (int i = 0; i < h * w; ++i) {
    if (!mask.data[i]) continue;
    const int root = uf.find(i);
    if (slot[root] < 0) {
      slot[root] = static_cast<int>(regions.size());
      regions.emplace_back();
    }
    regions[slot[root]].pixels.push_back(i);
  }
  for (Region& r : regions) {
    double sy = 0.0, sx = 0.0;
    for (int p : r.pixels) {
      sy += p / w;
      sx += p % w;
    }
    r.cy = sy / r.pixels.size();
    r.cx = sx / r.pixels.size();
  }
  return regions;
}

OverlapCounts overlap(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("iou: prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                     " vs ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0;
    const bool g = gt.data[i] != 0;
    c.intersection += p && g;
    c.union_ += p || g;
  }
  return c;
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
  const OverlapCounts c = overlap(pred, gt);
  return c.union_ == 0 ? 1.0 : static_cast<double>(c.intersection) / c.union_;
}

SegMetrics pd_fa(const BinaryMask& pred, const BinaryMask& gt, const MatchConfig& match) {
  const OverlapCounts ov = overlap(pred, gt);
  const std::vector<Region> gt_regions = connected_components(gt);
  const std::vector<Region> pred_regions = connected_components(pred);

  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  for (std::size_t g = 0; g < gt_regions.size(); ++g) {
    for (std::size_t p = 0; p < pred_regions.size(); ++p) {
      const double d = std::hypot(gt_regions[g].cy - pred_regions[p].cy, gt_regions[g].cx - pred_regions[p].cx);
      if (d <= match.radius) pairs.emplace_back(d, g, p);
    }
  }
  std::sort(pairs.begin(), pairs.end());
  std::vector<char> gt_used(gt_regions.size(), 0), pred_used(pred_regions.size(), 0);
  SegMetrics m;
  for (const auto& [d, g, p] : pairs) {
    if (gt_used[g] || pred_used[p]) continue;
    gt_used[g] = pred_used[p] = 1;
    ++m.matched;
  }
  for (std::size_t p = 0; p < pred_regions.size(); ++p) {
    if (!pred_used[p]) {
      ++m.false_regions;
      m.false_pixels += pred_regions[p].pixels.size();
    }
  }
  m.gt_targets = gt_regions.size();
  m.missed = m.gt_targets - m.matched;
  m.total_pixels = pred.data.size();
  m.intersection = ov.intersection;
  m.union_ = ov.union_;
  m.iou = ov.union_ == 0 ? 1.0 : static_cast<double>(ov.intersection) / ov.union_;
  m.pd = m.gt_targets == 0 ? 1.0 : static_cast<double>(m.matched) / m.gt_targets;
  m.fa = m.total_pixels == 0 ? 0.0 : static_cast<double>(m.false_pixels) / m.total_pixels;
  return m;
}

SegMetrics MetricAccumulator::add(const BinaryMask& pred, const BinaryMask& gt) {
  const SegMetrics m = pd_fa(pred, gt, match_);
  total_.gt_targets += m.gt_targets;
  total_.matched += m.matched;
  total_.missed += m.missed;
  total_.false_regions += m.false_regions;
  total_.false_pixels += m.false_pixels;
  total_.total_pixels += m.total_pixels;
  total_.intersection += m.intersection;
  total_.union_ += m.union_;
  ++images_;
  return m;
}

SegMetrics MetricAccumulator::summary(FaMode mode) const {
  SegMetrics s = total_;
  s.iou = s.union_ == 0 ? 1.0 : static_cast<double>(s.intersection) / s.union_;
  s.pd = s.gt_targets == 0 ? 1.0 : static_cast<double>(s.matched) / s.gt_targets;
  if (mode == FaMode::Pixels) {
    s.fa = s.total_pixels == 0 ? 0.0 : static_cast<double>(s.false_pixels) / s.total_pixels;
  } else {
    s.fa = images_ == 0 ? 0.0 : static_cast<double>(s.false_regions) / images_;
  }
  return s;
}

namespace {

class PgmParser {
 public:
  PgmParser(const std::string& path, std::vector<unsigned char> bytes)
      : path_(path), bytes_(std::move(bytes)) {}

  [[noreturn]] void fail(const std::string& what) const { throw RasterError(path_, pos_, what); }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  int header_int(const char* field) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > 1 << 24) fail(std::string("header ") + field + " too large");
      ++pos_;
    }
    if (pos_ == start) fail(std::string("expected ") + field);
    return static_cast<int>(v);
  }

  GrayImage parse() {
    if (bytes_.size() < 2 || bytes_[0] != 'P' || bytes_[1] != '5') fail("not a binary graymap (expected P5)");
    pos_ = 2;
    GrayImage img;
    img.width = header_int("width");
    img.height = header_int("height");
    img.maxval = header_int("maxval");
    if (img.width < 1 || img.height < 1) fail("image has zero size");
    if (img.maxval < 1 || img.maxval > 65535) fail("maxval out of range");
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("missing whitespace after header");
    ++pos_;
    const std::size_t bpp = img.maxval < 256 ? 1 : 2;
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    if (bytes_.size() - pos_ < n * bpp) {
      const std::size_t have = bytes_.size() - pos_;
      pos_ = bytes_.size();
      fail("truncated pixel data: " + std::to_string(have) + " of " + std::to_string(n * bpp) + " bytes");
    }
    img.pixels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint16_t v = bytes_[pos_];
      if (bpp == 2) v = static_cast<std::uint16_t>((v << 8) | bytes_[pos_ + 1]);
      if (v > img.maxval) fail("pixel value " + std::to_string(v) + " exceeds maxval");
      img.pixels[i] = v;
      pos_ += bpp;
    }
    return img;
  }

 private:
  std::string path_;
  std::vector<unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RasterError(path, 0, "cannot open");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return PgmParser(path, std::move(bytes)).parse();
}

void write_pgm(const std::string& path, const GrayImage& img) {
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height) {
    throw std::invalid_argument("write_pgm: pixel count does not match " + std::to_string(img.width) + "x" +
                                std::to_string(img.height));
  }
  if (img.maxval < 1 || img.maxval > 65535) throw std::invalid_argument("write_pgm: maxval out of range");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P5\n" << img.width << ' ' << img.height << '\n' << img.maxval << '\n';
  std::vector<unsigned char> buf;
  buf.reserve(img.pixels.size() * 2);
  for (std::uint16_t v : img.pixels) {
    if (img.maxval < 256) {
      buf.push_back(static_cast<unsigned char>(v));
    } else {
      buf.push_back(static_cast<unsigned char>(v >> 8));
      buf.push_back(static_cast<unsigned char>(v & 0xff));
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

Tensor4 gray_to_tensor(const GrayImage& img) {
  Tensor4 t(Shape{1, 1, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = static_cast<double>(img.pixels[i]) / img.maxval;
  return t;
}

GrayImage tensor_to_gray(const Tensor4& t, int maxval) {
  GrayImage img;
  img.width = t.width();
  img.height = t.height();
  img.maxval = maxval;
  img.pixels.resize(t.shape().plane());
  const double* p = t.plane(0, 0);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = static_cast<std::uint16_t>(std::lround(std::clamp(p[i], 0.0, 1.0) * maxval));
  }
  return img;
}

void write_mask(const std::string& path, const BinaryMask& mask) {
  GrayImage img;
  img.width = mask.width;
  img.height = mask.height;
  img.maxval = 255;
  img.pixels.resize(mask.data.size());
  for (std::size_t i = 0; i < mask.data.size(); ++i) img.pixels[i] = mask.data[i] ? 255 : 0;
  write_pgm(path, img);
}

BinaryMask read_mask(const std::string& path) {
  const GrayImage img = read_pgm(path);
  BinaryMask m(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) m.data[i] = img.pixels[i] != 0;
  return m;
}

Tensor4 mask_to_tensor(const BinaryMask& mask) {
  Tensor4 t(Shape{1, 1, mask.height, mask.width});
  for (std::size_t i = 0; i < mask.data.size(); ++i) t[i] = mask.data[i] ? 1.0 : 0.0;
  return t;
}

std::vector<std::pair<std::string, std::string>> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path);
  const fs::path base = fs::path(path).parent_path();
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string image, mask, extra;
    if (!(ls >> image) || image[0] == '#') continue;
    if (!(ls >> mask) || (ls >> extra)) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 'image_path mask_path'");
    }
    auto resolve = [&](const std::string& p) {
      const fs::path fp(p);
      return (fp.is_absolute() ? fp : base / fp).string();
    };
    entries.emplace_back(resolve(image), resolve(mask));
  }
  return entries;
}

Dataset load_manifest(const std::string& path) {
  Dataset data;
  for (const auto& [image_path, mask_path] : read_manifest(path)) {
    Sample s;
    s.name = fs::path(image_path).stem().string();
    s.image = gray_to_tensor(read_pgm(image_path));
    const BinaryMask m = read_mask(mask_path);
    if (m.height != s.image.height() || m.width != s.image.width()) {
      throw ShapeError(mask_path + ": mask " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                       " does not match image " + s.image.shape().str());
    }
    s.mask = mask_to_tensor(m);
    data.push_back(std::move(s));
  }
  return data;
}

std::string write_dataset(const std::string& dir, const Dataset& data) {
  fs::create_directories(dir);
  const std::string manifest = (fs::path(dir) / "manifest.txt").string();
  std::ofstream out(manifest);
  if (!out) throw std::runtime_error("cannot write " + manifest);
  for (const Sample& s : data) {
    const std::string image = s.name + ".pgm";
    const std::string mask = s.name + "_mask.pgm";
    write_pgm((fs::path(dir) / image).string(), tensor_to_gray(s.image));
    write_mask((fs::path(dir) / mask).string(), binarize(s.mask));
    out << image << ' ' << mask << '\n';
  }
  return manifest;
}

FreqParts freq_decompose_image(const Tensor4& image) {
  const wavelet::WaveletBands bands = wavelet::dwt2(image, wavelet::OddPolicy::SymmetricPad);
  wavelet::WaveletBands low = bands;
  low.lh.fill(0.0);
  low.hl.fill(0.0);
  low.hh.fill(0.0);
  wavelet::WaveletBands high = bands;
  high.ll.fill(0.0);
  return FreqParts{wavelet::idwt2(low), wavelet::idwt2(high)};
}

}  // namespace nsfpn::irdata
