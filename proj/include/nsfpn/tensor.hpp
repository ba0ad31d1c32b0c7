#pragma once

#include <cstddef>
#include <cstdint>
#include <new>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nsfpn {

/// Thrown when tensor shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when an operation produces NaN or Inf from finite inputs.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& where, const std::string& detail)
      : std::runtime_error("non-finite value in " + where + ": " + detail), where_(where) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

struct Shape {
  int b = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(b) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
  std::string str() const;
};

/// Cache-line aligned storage. Vectorized reductions peel a prologue up to the first aligned
/// element, so a fixed base alignment keeps results independent of where the heap placed a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Dense B x C x H x W array of doubles, row-major (w fastest).
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape shape, double fill = 0.0);
  Tensor4(Shape shape, std::vector<double> data);

  static Tensor4 zeros_like(const Tensor4& t) { return Tensor4(t.shape()); }
  static Tensor4 scalar(double v) { return Tensor4(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  int batch() const { return shape_.b; }
  int channels() const { return shape_.c; }
  int height() const { return shape_.h; }
  int width() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  Storage& vec() { return data_; }
  const Storage& vec() const { return data_; }

  std::size_t index(int b, int c, int y, int x) const {
    return ((static_cast<std::size_t>(b) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  double& operator()(int b, int c, int y, int x) { return data_[index(b, c, y, x)]; }
  double operator()(int b, int c, int y, int x) const { return data_[index(b, c, y, x)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* plane(int b, int c) { return data_.data() + index(b, c, 0, 0); }
  const double* plane(int b, int c) const { return data_.data() + index(b, c, 0, 0); }

  void fill(double v);
  Tensor4& operator+=(const Tensor4& other);
  Tensor4& operator*=(double s);

  double item() const;
  double sum() const;
  double sum_squares() const;
  bool all_finite() const;

 private:
  Shape shape_{};
  Storage data_;
};

Tensor4 operator+(Tensor4 a, const Tensor4& b);
Tensor4 operator-(const Tensor4& a, const Tensor4& b);
Tensor4 operator*(double s, Tensor4 a);

double max_abs_diff(const Tensor4& a, const Tensor4& b);

/// Throws ShapeError with `what` when `cond` is false.
void require(bool cond, const std::string& what);
void require_same_shape(const Tensor4& a, const Tensor4& b, const std::string& op);

using Rng = std::mt19937_64;

Tensor4 randn(Shape shape, Rng& rng, double stddev = 1.0);
Tensor4 rand_uniform(Shape shape, Rng& rng, double lo, double hi);

}  // namespace nsfpn
