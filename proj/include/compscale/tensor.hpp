#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "compscale/errors.hpp"

namespace compscale {

using Shape = std::vector<std::size_t>;

namespace detail {

// 64-byte aligned allocator whose value-less construct() leaves scalars
// uninitialized, so buffers an op overwrites completely skip the zero fill.
// Fixed alignment matters for reproducibility: Eigen picks scalar or packet
// code per element by address, and the two can round differently.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  static constexpr std::align_val_t kAlignment{64};

  DefaultInitAllocator() = default;
  template <typename U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

struct Uninitialized {};

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor of real scalars. T is float for training and
// double for verification.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), T{0}) {}

  // Contents are indeterminate; the caller must write every element.
  Tensor(Shape shape, Uninitialized) : shape_(std::move(shape)), data_(shape_size(shape_)) {}

  Tensor(Shape shape, const std::vector<T>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  static Tensor filled(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  // Last dimension; rank-0/1 tensors are a single row.
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  std::vector<T> vec() const { return std::vector<T>(data_.begin(), data_.end()); }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  T at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  std::span<const T> row(std::size_t r) const { return data().subspan(r * cols(), cols()); }
  std::span<T> row(std::size_t r) { return data().subspan(r * cols(), cols()); }

  Tensor reshaped(Shape shape) const& {
    Tensor out(std::move(shape), Uninitialized{});
    if (out.size() != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(out.shape_));
    }
    std::copy(data_.begin(), data_.end(), out.data_.begin());
    return out;
  }

  // Branch-free exponent scan so the loop vectorizes.
  bool all_finite() const noexcept {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exponent = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
    bool bad = false;
    for (T v : data_) bad |= (std::bit_cast<Bits>(v) & exponent) == exponent;
    return !bad;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_, Uninitialized{});
    std::transform(data_.begin(), data_.end(), out.data().begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T, detail::DefaultInitAllocator<T>> data_;
};

}  // namespace compscale
