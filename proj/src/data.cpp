#include "compscale/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include "compscale/errors.hpp"
#include "compscale/rng.hpp"

namespace compscale {

TokenStream make_stream(std::vector<std::uint32_t> tokens, std::size_t vocab_size, double validation_fraction) {
  if (vocab_size == 0) throw DomainError("token stream: vocab_size must be positive");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw DomainError("token stream: validation fraction must lie in [0, 1)");
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= vocab_size) {
      throw DomainError("token stream: id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                        " is outside vocab " + std::to_string(vocab_size));
    }
  }
  TokenStream s;
  const auto held = static_cast<std::size_t>(std::floor(static_cast<double>(tokens.size()) * validation_fraction));
  s.train_end = tokens.size() - held;
  s.tokens = std::move(tokens);
  s.vocab_size = vocab_size;
  return s;
}

TokenStream load_tokens(const std::string& path, std::size_t vocab_size, double validation_fraction) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw ConfigError("cannot open token file " + path);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % 4 != 0) throw ConfigError("token file " + path + " is truncated (" + std::to_string(bytes) + " bytes)");
  std::vector<std::uint32_t> tokens(bytes / 4);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(tokens.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw ConfigError("failed reading token file " + path);
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& t : tokens) t = __builtin_bswap32(t);
  }
  return make_stream(std::move(tokens), vocab_size, validation_fraction);
}

void save_tokens(const std::string& path, std::span<const std::uint32_t> tokens) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write token file " + path);
  for (std::uint32_t t : tokens) {
    if constexpr (std::endian::native == std::endian::big) t = __builtin_bswap32(t);
    out.write(reinterpret_cast<const char*>(&t), sizeof(t));
  }
  if (!out) throw ConfigError("failed writing token file " + path);
}

// RNG streams used by MarkovSource.
namespace {
constexpr std::uint64_t kPoolStream = 1, kRowStream = 2, kWalkStream = 3;
}

MarkovSource::MarkovSource(std::size_t vocab_size, std::uint64_t seed) : vocab_(vocab_size), seed_(seed) {
  if (vocab_size < 8) throw DomainError("synthetic corpus needs vocab_size >= 8");
  if (vocab_size > (std::size_t{1} << 31)) throw DomainError("synthetic corpus vocab too large");
  zipf_cdf_.resize(vocab_);
  double total = 0.0;
  for (std::size_t r = 0; r < vocab_; ++r) zipf_cdf_[r] = total += 1.0 / static_cast<double>(r + 1);
  for (auto& c : zipf_cdf_) c /= total;
  pools_.resize(vocab_ * kPoolSize);
  for (std::size_t i = 0; i < pools_.size(); ++i) pools_[i] = zipf(kPoolStream, i);
}

std::uint32_t MarkovSource::zipf(std::uint64_t stream, std::uint64_t counter) const {
  const double u = CounterRng(seed_, stream).uniform(counter);
  const auto it = std::lower_bound(zipf_cdf_.begin(), zipf_cdf_.end(), u);
  return static_cast<std::uint32_t>(std::min<std::size_t>(it - zipf_cdf_.begin(), vocab_ - 1));
}

MarkovSource::Row MarkovSource::row(std::uint32_t a, std::uint32_t b) const {
  Row r;
  const CounterRng rng(seed_, kRowStream);
  const std::uint64_t base = (static_cast<std::uint64_t>(a) * vocab_ + b) * 32;
  double total = 0.0;
  for (std::size_t k = 0; k < kCandidates; ++k) {
    if (k < kFromPool) {
      r.next[k] = pools_[b * kPoolSize + rng.below(base + k, kPoolSize)];
    } else {
      r.next[k] = zipf(kRowStream, base + 8 + k);
    }
    r.prob[k] = -std::log(rng.uniform(base + 16 + k));  // Gamma(1) draws give a flat Dirichlet
    total += r.prob[k];
  }
  for (auto& p : r.prob) p /= total;
  return r;
}

double MarkovSource::probability(std::uint32_t a, std::uint32_t b, std::uint32_t c) const {
  const Row r = row(a, b);
  double p = kUniformMix / static_cast<double>(vocab_);
  for (std::size_t k = 0; k < kCandidates; ++k) {
    if (r.next[k] == c) p += (1.0 - kUniformMix) * r.prob[k];
  }
  return p;
}

std::vector<std::uint32_t> MarkovSource::generate(std::size_t length) const {
  std::vector<std::uint32_t> out;
  out.reserve(length);
  const CounterRng rng(seed_, kWalkStream);
  for (std::size_t i = 0; i < length; ++i) {
    if (i < 2 || rng.uniform(2 * i) < kUniformMix) {
      out.push_back(static_cast<std::uint32_t>(rng.below(2 * i + 1, vocab_)));
      continue;
    }
    const Row r = row(out[i - 2], out[i - 1]);
    const double u = rng.uniform(2 * i + 1);
    double acc = 0.0;
    std::size_t pick = kCandidates - 1;
    for (std::size_t k = 0; k < kCandidates; ++k) {
      acc += r.prob[k];
      if (u < acc) {
        pick = k;
        break;
      }
    }
    out.push_back(r.next[pick]);
  }
  return out;
}

double MarkovSource::conditional_entropy() const {
  const std::size_t v = vocab_, states = v * v;
  const double uniform_p = kUniformMix / static_cast<double>(v);
  std::vector<Row> rows(states);
  std::vector<double> row_entropy(states);
  for (std::size_t s = 0; s < states; ++s) {
    rows[s] = row(static_cast<std::uint32_t>(s / v), static_cast<std::uint32_t>(s % v));
    // Merge duplicate candidates, then add the uniform floor.
    std::array<double, kCandidates> merged{};
    std::array<std::uint32_t, kCandidates> ids{};
    std::size_t n = 0;
    for (std::size_t k = 0; k < kCandidates; ++k) {
      std::size_t j = 0;
      while (j < n && ids[j] != rows[s].next[k]) ++j;
      if (j == n) ids[n++] = rows[s].next[k];
      merged[j] += rows[s].prob[k];
    }
    double h = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = (1.0 - kUniformMix) * merged[j] + uniform_p;
      h -= p * std::log(p);
    }
    h -= static_cast<double>(v - n) * uniform_p * std::log(uniform_p);
    row_entropy[s] = h;
  }
  std::vector<double> pi(states, 1.0 / static_cast<double>(states)), next(states);
  for (int iter = 0; iter < 5000; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t s = 0; s < states; ++s) {
      const std::size_t b = s % v;
      const double mass = pi[s];
      for (std::size_t k = 0; k < kCandidates; ++k) next[b * v + rows[s].next[k]] += mass * (1.0 - kUniformMix) * rows[s].prob[k];
      // The uniform part spreads mass evenly over (b, *).
      const double spread = mass * kUniformMix / static_cast<double>(v);
      for (std::size_t c = 0; c < v; ++c) next[b * v + c] += spread;
    }
    double change = 0.0;
    for (std::size_t s = 0; s < states; ++s) change += std::abs(next[s] - pi[s]);
    pi.swap(next);
    if (change < 1e-13) break;
  }
  double h = 0.0;
  for (std::size_t s = 0; s < states; ++s) h += pi[s] * row_entropy[s];
  return h;
}

TokenStream synth_corpus(std::size_t vocab_size, std::size_t length, std::uint64_t seed, double validation_fraction) {
  return make_stream(MarkovSource(vocab_size, seed).generate(length), vocab_size, validation_fraction);
}

BatchSampler::BatchSampler(const TokenStream& stream, std::size_t batch, std::size_t seq_len, std::uint64_t seed)
    : stream_(&stream), batch_(batch), length_(seq_len + 1), windows_(0), seed_(seed) {
  if (batch == 0 || seq_len == 0) throw DomainError("batches: batch and seq_len must be positive");
  windows_ = stream.train_end / length_;
  if (windows_ < batch_) {
    throw ShapeError("batches: training slice of " + std::to_string(stream.train_end) +
                     " tokens is too short for a batch of " + std::to_string(batch_) + " x " +
                     std::to_string(length_));
  }
}

void BatchSampler::shuffle_epoch(std::uint64_t epoch) {
  order_.resize(windows_);
  for (std::size_t i = 0; i < windows_; ++i) order_[i] = i;
  const CounterRng rng(seed_, epoch);
  for (std::size_t i = windows_ - 1; i > 0; --i) std::swap(order_[i], order_[rng.below(i, i + 1)]);
  epoch_ = epoch;
}

TokenBlock BatchSampler::next() {
  TokenBlock block{batch_, length_, {}};
  block.ids.reserve(batch_ * length_);
  last_starts_.clear();
  const auto train = stream_->train();
  for (std::size_t r = 0; r < batch_; ++r, ++drawn_) {
    const std::uint64_t epoch = drawn_ / windows_;
    if (epoch != epoch_) shuffle_epoch(epoch);
    const std::size_t start = order_[drawn_ % windows_] * length_;
    last_starts_.push_back(start);
    block.ids.insert(block.ids.end(), train.begin() + static_cast<std::ptrdiff_t>(start),
                     train.begin() + static_cast<std::ptrdiff_t>(start + length_));
  }
  return block;
}

std::vector<TokenBlock> validation_blocks(const TokenStream& stream, std::size_t batch, std::size_t seq_len,
                                          std::size_t eval_tokens) {
  const std::size_t length = seq_len + 1;
  const auto val = stream.validation();
  const std::size_t windows = val.size() / length;
  if (batch == 0 || seq_len == 0 || windows < batch) {
    throw ShapeError("validation slice of " + std::to_string(val.size()) + " tokens is too short for a batch of " +
                     std::to_string(batch) + " x " + std::to_string(length));
  }
  const std::size_t per_block = batch * seq_len;
  const std::size_t wanted = std::max<std::size_t>(1, (eval_tokens + per_block - 1) / per_block);
  const std::size_t blocks = std::min(wanted, windows / batch);
  std::vector<TokenBlock> out;
  for (std::size_t b = 0; b < blocks; ++b) {
    TokenBlock block{batch, length, {}};
    const auto first = val.begin() + static_cast<std::ptrdiff_t>(b * batch * length);
    block.ids.assign(first, first + static_cast<std::ptrdiff_t>(batch * length));
    out.push_back(std::move(block));
  }
  return out;
}

}  // namespace compscale
