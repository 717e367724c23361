#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace compscale {

// `batch` rows of `length` consecutive token ids. A model consumes the first
// length-1 ids of each row as inputs and the last length-1 as targets.
struct TokenBlock {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint32_t> ids;

  std::span<const std::uint32_t> row(std::size_t r) const {
    return std::span<const std::uint32_t>(ids).subspan(r * length, length);
  }

  friend bool operator==(const TokenBlock&, const TokenBlock&) = default;
};

}  // namespace compscale
