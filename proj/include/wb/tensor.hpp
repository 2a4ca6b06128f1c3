#pragma once
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "wb/errors.hpp"

namespace wb {

using Shape = std::vector<long>;

inline long numel(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor of 64-bit reals. The sole numeric currency of the
// workbench; rank 0 (empty shape) is a scalar.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(numel(shape)), 0.0) {
    for (long d : shape)
      if (d <= 0) throw ConfigError("tensor extent must be positive, got shape " + shape_str(shape));
  }
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<long>(data.size()) != numel(shape))
      throw ConfigError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = v;
    return t;
  }

  long size() const { return static_cast<long>(data.size()); }
  long rank() const { return static_cast<long>(shape.size()); }
  long dim(long i) const { return shape[static_cast<size_t>(i < 0 ? rank() + i : i)]; }

  double& operator[](long i) { return data[static_cast<size_t>(i)]; }
  double operator[](long i) const { return data[static_cast<size_t>(i)]; }

  // 2-D accessor; callers guarantee rank 2.
  double& at2(long i, long j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  double at2(long i, long j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

  bool all_finite() const {
    for (double x : data)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

inline Shape strides_of(const Shape& s) {
  Shape st(s.size());
  long acc = 1;
  for (long i = static_cast<long>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

// Align-right broadcast of two shapes; dims must match or be 1.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* ctx) {
  size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    long da = i < r - ra ? 1 : a[i - (r - ra)];
    long db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw ConfigError(std::string(ctx) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                        " are not broadcast-compatible");
    out[i] = std::max(da, db);
  }
  return out;
}

}  // namespace wb
