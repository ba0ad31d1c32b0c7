#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "nsfpn/tensor.hpp"

// Synthetic infrared small-target scenes, grayscale raster I/O and segmentation metrics.
namespace nsfpn::irdata {

struct SceneConfig {
  int height = 64;
  int width = 64;
  int min_targets = 1;
  int max_targets = 3;
  double amp_min = 0.25;
  double amp_max = 0.6;
  double sigma_min = 1.0;  // target radius, pixels
  double sigma_max = 2.0;
  double background = 0.3;
  double clutter_amp = 0.15;
  double clutter_smoothness = 8.0;  // control-point spacing of the clutter field, pixels
  double noise_std = 0.03;
  int min_distractors = 0;
  int max_distractors = 4;
  double distractor_amp_min = 0.2;
  double distractor_amp_max = 0.5;
  double distractor_sigma = 0.5;

  void validate() const;
};

struct Scene {
  Tensor4 image;  // 1 x 1 x H x W in [0, 1]
  Tensor4 mask;   // 1 x 1 x H x W in {0, 1}
  int targets = 0;
};

Scene synth_scene(std::uint64_t seed, const SceneConfig& cfg);

struct Sample {
  std::string name;
  Tensor4 image;
  Tensor4 mask;
};
using Dataset = std::vector<Sample>;

/// `count` scenes; sample i uses a seed derived from (seed, split, i), so train and test sets
/// built from the same seed never share scenes.
Dataset synthetic_dataset(const SceneConfig& cfg, int count, std::uint64_t seed, int split);

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}
  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
};

/// Pixels of plane (b, 0) strictly above `threshold`.
BinaryMask binarize(const Tensor4& t, int b = 0, double threshold = 0.5);

struct Region {
  std::vector<int> pixels;  // linear indices y * W + x, ascending
  double cy = 0.0;
  double cx = 0.0;
};

/// 8-connected regions ordered by their first pixel in raster order.
std::vector<Region> connected_components(const BinaryMask& mask);

struct OverlapCounts {
  std::size_t intersection = 0;
  std::size_t union_ = 0;
};
OverlapCounts overlap(const BinaryMask& pred, const BinaryMask& gt);
/// |pred & gt| / |pred | gt|, 1 when both are empty.
double iou(const BinaryMask& pred, const BinaryMask& gt);

struct MatchConfig {
  double radius = 3.0;
};

struct SegMetrics {
  double iou = 0.0;
  double pd = 0.0;
  double fa = 0.0;  // false pixels / total pixels
  std::size_t gt_targets = 0;
  std::size_t matched = 0;
  std::size_t missed = 0;
  std::size_t false_regions = 0;
  std::size_t false_pixels = 0;
  std::size_t total_pixels = 0;
  std::size_t intersection = 0;
  std::size_t union_ = 0;
};

/// Target-level matching: ground-truth and predicted regions are paired greedily by centroid
/// distance, nearest first, one to one, within `match.radius`.
SegMetrics pd_fa(const BinaryMask& pred, const BinaryMask& gt, const MatchConfig& match = {});

enum class FaMode { Pixels, Regions };

/// Micro-averaged totals over a set of images.
class MetricAccumulator {
 public:
  explicit MetricAccumulator(MatchConfig match = {}) : match_(match) {}
  SegMetrics add(const BinaryMask& pred, const BinaryMask& gt);
  /// iou = summed intersections / summed unions, pd = matched / targets, fa per `mode`:
  /// false pixels over total pixels, or false regions per image.
  SegMetrics summary(FaMode mode = FaMode::Pixels) const;
  std::size_t images() const { return images_; }

 private:
  MatchConfig match_;
  SegMetrics total_;
  std::size_t images_ = 0;
};

class RasterError : public std::runtime_error {
 public:
  RasterError(const std::string& path, std::size_t offset, const std::string& what)
      : std::runtime_error(path + ": byte " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Binary portable graymap (P5), 8-bit when maxval < 256, else 16-bit big-endian.
struct GrayImage {
  int width = 0;
  int height = 0;
  int maxval = 255;
  std::vector<std::uint16_t> pixels;
};

GrayImage read_pgm(const std::string& path);
void write_pgm(const std::string& path, const GrayImage& img);

/// Pixel values divided by maxval, as 1 x 1 x H x W.
Tensor4 gray_to_tensor(const GrayImage& img);
/// Clamps to [0, 1] and rounds onto 0..maxval.
GrayImage tensor_to_gray(const Tensor4& t, int maxval = 65535);

/// Masks are written as 8-bit {0, 255}; on read any nonzero pixel is foreground.
void write_mask(const std::string& path, const BinaryMask& mask);
BinaryMask read_mask(const std::string& path);
Tensor4 mask_to_tensor(const BinaryMask& mask);

/// Lines "image_path mask_path"; relative paths are resolved against the manifest directory.
/// Blank lines and lines starting with '#' are ignored.
std::vector<std::pair<std::string, std::string>> read_manifest(const std::string& path);
Dataset load_manifest(const std::string& path);
/// Writes 16-bit images, masks and a manifest named manifest.txt into `dir`.
std::string write_dataset(const std::string& dir, const Dataset& data);

struct FreqParts {
  Tensor4 low;
  Tensor4 high;
};
/// low = idwt2(ll, 0, 0, 0), high = idwt2(0, lh, hl, hh). Odd sizes are edge padded and cropped.
FreqParts freq_decompose_image(const Tensor4& image);

}  // namespace nsfpn::irdata
