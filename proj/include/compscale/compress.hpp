#pragma once

// Fake quantization and magnitude sparsification with dynamic scales/masks,
// plus straight-through wrappers that route gradients to the full-precision
// latent tensor.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "compscale/errors.hpp"
#include "compscale/ops.hpp"
#include "compscale/tape.hpp"
#include "compscale/tensor.hpp"

namespace compscale {

enum class Grid {
  kSymmetricHalfInteger,  // {±(2i+1)/2}, 2-bit: {-1.5, -0.5, 0.5, 1.5}
  kCenteredInteger,       // {-2^(b-1), ..., 2^(b-1)-1}, 2-bit: {-2, -1, 0, 1}
};

enum class ScaleStat { kAbsMax, kAbsMean };

enum class Granularity { kPerTensor, kPerRow, kPerToken };

struct QuantSpec {
  int bits = 4;
  Grid grid = Grid::kSymmetricHalfInteger;
  ScaleStat stat = ScaleStat::kAbsMax;
  Granularity granularity = Granularity::kPerTensor;

  // Throws DomainError unless bits is one of {1, 2, 3, 4, 8}.
  void validate() const;

  std::size_t level_count() const { return std::size_t{1} << bits; }
  // Largest negative and positive grid levels, as magnitudes.
  double negative_extent() const;
  double positive_extent() const;
  // Largest magnitude on the grid.
  double max_level() const { return std::max(negative_extent(), positive_extent()); }

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

enum class SparsityGranularity { kPerTensor, kPerRow, kBlock };

struct SparsitySpec {
  double fraction = 0.5;  // fraction of zeros
  SparsityGranularity granularity = SparsityGranularity::kPerRow;
  std::size_t n = 0, m = 0;  // kBlock only: keep n of every m

  static SparsitySpec of_fraction(double fraction, SparsityGranularity granularity);
  static SparsitySpec n_of_m(std::size_t n, std::size_t m);

  void validate() const;

  // Number of kept entries in a group of `group_size` elements.
  std::size_t kept(std::size_t group_size) const;

  friend bool operator==(const SparsitySpec&, const SparsitySpec&) = default;
};

// The compression type C: weight compression plus optional activation
// quantization. Canonical strings: "dense", "w4", "w2:centered", "w4a4",
// "a4", "s0.5:per_row", "s0.5:64of128".
struct CompressionSpec {
  std::variant<std::monostate, QuantSpec, SparsitySpec> weight;
  std::optional<QuantSpec> activation;

  static CompressionSpec dense() { return {}; }
  static CompressionSpec parse(std::string_view text);
  std::string to_string() const;

  void validate() const;

  bool is_dense() const { return std::holds_alternative<std::monostate>(weight) && !activation; }
  const QuantSpec* weight_quant() const { return std::get_if<QuantSpec>(&weight); }
  const SparsitySpec* weight_sparsity() const { return std::get_if<SparsitySpec>(&weight); }

  // Bit-widths with 16 standing for the uncompressed BF16 baseline.
  int weight_bits() const { return weight_quant() ? weight_quant()->bits : 16; }
  int activation_bits() const { return activation ? activation->bits : 16; }

  friend bool operator==(const CompressionSpec&, const CompressionSpec&) = default;
};

namespace detail {

// Nudges `scale` by a few ulps until fl(fl(level * scale) / level) == scale
// for every extreme level. Without this, quantizing a quantized tensor could
// recover a scale one ulp away and break idempotence.
template <typename T>
T stable_scale(T scale, std::span<const double> extremes) {
  auto round_trips = [&](T s) {
    for (double q : extremes) {
      const T level = static_cast<T>(q);
      if (static_cast<T>(static_cast<T>(level * s) / level) != s) return false;
    }
    return true;
  };
  T up = scale, down = scale;
  if (round_trips(scale)) return scale;
  for (int i = 0; i < 64; ++i) {
    up = std::nextafter(up, std::numeric_limits<T>::infinity());
    if (round_trips(up)) return up;
    down = std::nextafter(down, T{0});
    if (round_trips(down)) return down;
  }
  return scale;
}

template <typename T>
T nearest_symmetric_level(T v, T max_level) {
  const T f = std::floor(v);
  T level;
  if (v == f) {
    // Equidistant from f - 1/2 and f + 1/2: take the one nearer zero;
    // exactly zero goes to +1/2.
    level = v > T{0} ? v - T{0.5} : (v < T{0} ? v + T{0.5} : T{0.5});
  } else {
    level = f + T{0.5};
  }
  return std::clamp(level, -max_level, max_level);
}

template <typename T>
T nearest_centered_level(T v, T neg_extent, T pos_extent) {
  // Round half toward zero.
  const T level = v > T{0} ? std::ceil(v - T{0.5}) : std::floor(v + T{0.5});
  return std::clamp(level, -neg_extent, pos_extent);
}

// E|z| for standard normal z.
inline constexpr double kMeanAbsNormal = 0.7978845608028654;

template <typename T>
void quantize_group(std::span<const T> in, std::span<T> out, const QuantSpec& spec) {
  if (in.empty()) throw ShapeError("quantize: empty group");
  const double qneg = spec.negative_extent(), qpos = spec.positive_extent();
  const bool symmetric = spec.grid == Grid::kSymmetricHalfInteger;
  T scale{0};
  if (spec.stat == ScaleStat::kAbsMax) {
    T lo{0}, hi{0};
    for (T v : in) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (symmetric) {
      scale = std::max(-lo, hi) / static_cast<T>(qpos);
    } else {
      scale = -lo / static_cast<T>(qneg);
      if (qpos > 0.0) scale = std::max(scale, hi / static_cast<T>(qpos));
    }
  } else {
    T total{0};
    for (T v : in) total += std::abs(v);
    const double mean_abs = static_cast<double>(total) / static_cast<double>(in.size());
    const double qmax = spec.max_level();
    scale = static_cast<T>(mean_abs / kMeanAbsNormal * std::min(qmax, 4.0) / qmax);
  }
  if (scale == T{0}) {
    std::fill(out.begin(), out.end(), T{0});
    return;
  }
  std::vector<double> extremes = {qneg};
  if (qpos > 0.0 && qpos != qneg) extremes.push_back(qpos);
  scale = stable_scale(scale, extremes);
  const T tneg = static_cast<T>(qneg), tpos = static_cast<T>(qpos);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T v = in[i] / scale;
    const T level = symmetric ? nearest_symmetric_level(v, tpos) : nearest_centered_level(v, tneg, tpos);
    out[i] = level * scale;
  }
}

}  // namespace detail

// Fake-quantizes x group by group: scale from the group statistic, nearest
// grid level (ties toward zero), rescale. All-zero groups stay zero.
template <typename T>
Tensor<T> quantize(const Tensor<T>& x, const QuantSpec& spec) {
  spec.validate();
  if (!x.all_finite()) throw NumericError("quantize: non-finite input");
  if (x.size() == 0) throw ShapeError("quantize: empty group");
  Tensor<T> out(x.shape());
  if (spec.granularity == Granularity::kPerTensor) {
    detail::quantize_group<T>(x.data(), out.data(), spec);
    return out;
  }
  if (x.rank() != 2) {
    throw ShapeError("quantize: per-row/per-token granularity needs a matrix, got " + shape_string(x.shape()));
  }
  for (std::size_t r = 0; r < x.rows(); ++r) detail::quantize_group<T>(x.row(r), out.row(r), spec);
  return out;
}

// Forward: quantize(latent); backward: identity into latent.
template <typename T>
Var quantize_ste(Tape<T>& tape, Var latent, const QuantSpec& spec) {
  return custom_grad(tape, tape.constant(quantize(tape.value(latent), spec)), latent);
}

// Binary mask with the k largest-|x| entries of every group set; ties go to
// the lowest flat index.
template <typename T>
Tensor<T> topk_mask(const Tensor<T>& x, const SparsitySpec& spec) {
  spec.validate();
  if (!x.all_finite()) throw NumericError("topk_mask: non-finite input");
  if (x.size() == 0) throw ShapeError("topk_mask: empty tensor");
  std::size_t group = x.size();
  if (spec.granularity == SparsityGranularity::kPerRow) {
    group = x.cols();
  } else if (spec.granularity == SparsityGranularity::kBlock) {
    if (x.cols() % spec.m != 0) {
      throw ShapeError("topk_mask: row length " + std::to_string(x.cols()) + " is not a multiple of " +
                       std::to_string(spec.m));
    }
    group = spec.m;
  }
  const std::size_t keep = spec.kept(group);
  Tensor<T> mask(x.shape());
  std::vector<std::size_t> order(group);
  const auto data = x.data();
  for (std::size_t start = 0; start < x.size(); start += group) {
    std::iota(order.begin(), order.end(), start);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const T ma = std::abs(data[a]), mb = std::abs(data[b]);
                        return ma != mb ? ma > mb : a < b;
                      });
    for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = T{1};
  }
  return mask;
}

// Forward: latent * topk_mask(latent), mask recomputed on every call;
// backward: identity into latent.
template <typename T>
Var sparsify_ste(Tape<T>& tape, Var latent, const SparsitySpec& spec) {
  const Tensor<T>& x = tape.value(latent);
  Tensor<T> masked = topk_mask(x, spec);
  for (std::size_t i = 0; i < masked.size(); ++i) masked[i] *= x[i];
  return custom_grad(tape, tape.constant(std::move(masked)), latent);
}

// Applies the weight part of `spec` to a weight matrix (STE).
template <typename T>
Var compress_weight(Tape<T>& tape, Var weight, const CompressionSpec& spec) {
  if (const auto* q = spec.weight_quant()) return quantize_ste(tape, weight, *q);
  if (const auto* s = spec.weight_sparsity()) return sparsify_ste(tape, weight, *s);
  return weight;
}

// Applies the activation part of `spec` to a layer input (STE).
template <typename T>
Var compress_activation(Tape<T>& tape, Var input, const CompressionSpec& spec) {
  return spec.activation ? quantize_ste(tape, input, *spec.activation) : input;
}

}  // namespace compscale
