#pragma once

// Token streams: raw little-endian u32 files, a synthetic order-2 Markov
// source with a computable entropy floor, and deterministic batch sampling.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "compscale/tokens.hpp"

namespace compscale {

inline constexpr double kDefaultValidationFraction = 0.05;

struct TokenStream {
  std::vector<std::uint32_t> tokens;
  std::size_t vocab_size = 0;
  std::size_t train_end = 0;  // tokens [0, train_end) train, the rest validation

  std::span<const std::uint32_t> train() const { return std::span(tokens).first(train_end); }
  std::span<const std::uint32_t> validation() const { return std::span(tokens).subspan(train_end); }
  std::size_t size() const { return tokens.size(); }
};

// Checks every id against vocab_size (DomainError) and reserves the last
// floor(size * validation_fraction) tokens for validation.
TokenStream make_stream(std::vector<std::uint32_t> tokens, std::size_t vocab_size,
                        double validation_fraction = kDefaultValidationFraction);

// ConfigError for unreadable or truncated files, DomainError for ids out of range.
TokenStream load_tokens(const std::string& path, std::size_t vocab_size,
                        double validation_fraction = kDefaultValidationFraction);
void save_tokens(const std::string& path, std::span<const std::uint32_t> tokens);

// Order-2 Markov chain over `vocab_size` tokens. Each context (a, b) has
// kCandidates next-token candidates: most come from a pool shared by all
// contexts ending in b, the rest from a global Zipf draw, weighted by a flat
// Dirichlet. With probability kUniformMix the next token is uniform instead,
// which makes the chain irreducible and aperiodic. Rows are pure functions of
// (seed, a, b), so nothing is stored.
class MarkovSource {
 public:
  static constexpr std::size_t kCandidates = 8;
  static constexpr std::size_t kPoolSize = 16;
  static constexpr std::size_t kFromPool = 6;
  static constexpr double kUniformMix = 0.02;

  struct Row {
    std::array<std::uint32_t, kCandidates> next{};
    std::array<double, kCandidates> prob{};  // sums to 1, before uniform mixing
  };

  MarkovSource(std::size_t vocab_size, std::uint64_t seed);

  std::size_t vocab_size() const { return vocab_; }
  Row row(std::uint32_t a, std::uint32_t b) const;
  // P(c | a, b) including the uniform mixture.
  double probability(std::uint32_t a, std::uint32_t b, std::uint32_t c) const;
  std::vector<std::uint32_t> generate(std::size_t length) const;
  // Entropy rate in nats: sum over pair states of stationary mass times row
  // entropy. Stationary distribution by power iteration.
  double conditional_entropy() const;

 private:
  std::uint32_t zipf(std::uint64_t stream, std::uint64_t counter) const;

  std::size_t vocab_;
  std::uint64_t seed_;
  std::vector<double> zipf_cdf_;
  std::vector<std::uint32_t> pools_;  // vocab_ * kPoolSize
};

// Throws DomainError when vocab_size < 8.
TokenStream synth_corpus(std::size_t vocab_size, std::size_t length, std::uint64_t seed,
                         double validation_fraction = kDefaultValidationFraction);

// Shuffled contiguous windows of seq_len + 1 tokens from the training slice.
// The slice is cut into non-overlapping windows; each epoch visits all of
// them in a fresh seeded permutation.
class BatchSampler {
 public:
  BatchSampler(const TokenStream& stream, std::size_t batch, std::size_t seq_len, std::uint64_t seed);

  TokenBlock next();
  std::size_t window_count() const { return windows_; }
  // Start offsets (into the stream) of the windows in the last block.
  const std::vector<std::size_t>& last_starts() const { return last_starts_; }

 private:
  void shuffle_epoch(std::uint64_t epoch);

  const TokenStream* stream_;
  std::size_t batch_, length_, windows_;
  std::uint64_t seed_;
  std::uint64_t drawn_ = 0;
  std::uint64_t epoch_ = ~std::uint64_t{0};
  std::vector<std::size_t> order_;
  std::vector<std::size_t> last_starts_;
};

// Consecutive non-overlapping validation windows holding at least
// `eval_tokens` target tokens (rounded up to whole blocks, capped at what the
// slice holds). ShapeError if the validation slice is too short for one block.
std::vector<TokenBlock> validation_blocks(const TokenStream& stream, std::size_t batch, std::size_t seq_len,
                                          std::size_t eval_tokens);

}  // namespace compscale
