#include "nsfpn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace nsfpn {

std::string Shape::str() const {
  std::ostringstream os;
  os << b << "x" << c << "x" << h << "x" << w;
  return os.str();
}

Tensor4::Tensor4(Shape shape, double fill) : shape_(shape) {
  if (shape.b < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
    throw ShapeError("tensor dimensions must be >= 1, got " + shape.str());
  }
  data_.assign(shape.numel(), fill);
}

Tensor4::Tensor4(Shape shape, std::vector<double> data) : shape_(shape), data_(data.begin(), data.end()) {
  if (shape.b < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
    throw ShapeError("tensor dimensions must be >= 1, got " + shape.str());
  }
  if (data_.size() != shape.numel()) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape.str());
  }
}

void Tensor4::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor4& Tensor4::operator+=(const Tensor4& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor4& Tensor4::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

double Tensor4::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_.str());
  return data_[0];
}

double Tensor4::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor4::sum_squares() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return s;
}

bool Tensor4::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor4 operator+(Tensor4 a, const Tensor4& b) {
  a += b;
  return a;
}

Tensor4 operator-(const Tensor4& a, const Tensor4& b) {
  require_same_shape(a, b, "operator-");
  Tensor4 out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

Tensor4 operator*(double s, Tensor4 a) {
  a *= s;
  return a;
}

double max_abs_diff(const Tensor4& a, const Tensor4& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

void require_same_shape(const Tensor4& a, const Tensor4& b, const std::string& op) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError(op + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

Tensor4 randn(Shape shape, Rng& rng, double stddev) {
  Tensor4 t(shape);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.vec()) v = dist(rng);
  return t;
}

Tensor4 rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor4 t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.vec()) v = dist(rng);
  return t;
}

}  // namespace nsfpn
