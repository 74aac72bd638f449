#pragma once
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "scenediff/error.hpp"

namespace sde::ad {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. Plain value type; the tape owns gradients.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(size_t(shape_numel(shape_)), fill);
  }

  static Tensor from(Shape shape, std::vector<S> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.validate_shape();
    require(int64_t(data.size()) == shape_numel(t.shape_), ErrorCode::shape_mismatch,
            "tensor data length " + std::to_string(data.size()) + " does not match shape " +
                shape_str(t.shape_));
    t.data_ = std::move(data);
    return t;
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  int64_t extent(int axis) const { return shape_[size_t(axis)]; }
  int64_t numel() const { return int64_t(data_.size()); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](int64_t i) { return data_[size_t(i)]; }
  S operator[](int64_t i) const { return data_[size_t(i)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = T(data_[i]);
    return Tensor<T>::from(shape_, std::move(out));
  }

 private:
  void validate_shape() const {
    for (int64_t e : shape_)
      require(e > 0, ErrorCode::shape_mismatch, "non-positive extent in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<S> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace sde::ad
