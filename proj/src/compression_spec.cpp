#include <charconv>
#include <cmath>
#include <string>
#include <vector>

#include "compscale/compress.hpp"

namespace compscale {

void QuantSpec::validate() const {
  if (bits != 1 && bits != 2 && bits != 3 && bits != 4 && bits != 8) {
    throw DomainError("quantization bits must be one of 1, 2, 3, 4, 8; got " + std::to_string(bits));
  }
}

double QuantSpec::negative_extent() const {
  if (grid == Grid::kSymmetricHalfInteger) return (std::ldexp(1.0, bits) - 1.0) / 2.0;
  return std::ldexp(1.0, bits - 1);
}

double QuantSpec::positive_extent() const {
  if (grid == Grid::kSymmetricHalfInteger) return (std::ldexp(1.0, bits) - 1.0) / 2.0;
  return std::ldexp(1.0, bits - 1) - 1.0;
}

SparsitySpec SparsitySpec::of_fraction(double fraction, SparsityGranularity granularity) {
  SparsitySpec s;
  s.fraction = fraction;
  s.granularity = granularity;
  s.validate();
  return s;
}

SparsitySpec SparsitySpec::n_of_m(std::size_t n, std::size_t m) {
  SparsitySpec s;
  s.granularity = SparsityGranularity::kBlock;
  s.n = n;
  s.m = m;
  s.fraction = m == 0 ? 0.0 : 1.0 - static_cast<double>(n) / static_cast<double>(m);
  s.validate();
  return s;
}

void SparsitySpec::validate() const {
  if (granularity == SparsityGranularity::kBlock) {
    if (n == 0 || m == 0 || n >= m) {
      throw DomainError("n:m sparsity needs 0 < n < m; got " + std::to_string(n) + ":" + std::to_string(m));
    }
    return;
  }
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw DomainError("sparsity fraction must lie in (0, 1); got " + std::to_string(fraction));
  }
}

std::size_t SparsitySpec::kept(std::size_t group_size) const {
  if (granularity == SparsityGranularity::kBlock) return n;
  // The small slack keeps e.g. (1 - 0.7) * 10 = 3.0000000000000004 at 3.
  const double raw = (1.0 - fraction) * static_cast<double>(group_size);
  const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9 * static_cast<double>(group_size)));
  return std::clamp<std::size_t>(k, 1, group_size);
}

namespace {

std::string format_fraction(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

int parse_bits(std::string_view text, std::string_view whole) {
  int bits = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), bits);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError("bad bit-width in compression spec '" + std::string(whole) + "'");
  }
  return bits;
}

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    parts.push_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

}  // namespace

CompressionSpec CompressionSpec::parse(std::string_view text) {
  auto fail = [&](const std::string& why) -> ConfigError {
    return ConfigError("invalid compression spec '" + std::string(text) + "': " + why);
  };
  if (text == "dense") return dense();
  const auto parts = split(text, ':');
  std::string_view head = parts[0];
  if (head.empty()) throw fail("empty");

  CompressionSpec spec;
  // Activation suffix "a<bits>" may follow the weight token or stand alone.
  std::string_view weight_token = head, act_token;
  if (head[0] == 'a') {
    weight_token = {};
    act_token = head.substr(1);
  } else {
    const auto apos = head.find('a');
    if (apos != std::string_view::npos) {
      weight_token = head.substr(0, apos);
      act_token = head.substr(apos + 1);
    }
  }
  if (!act_token.empty() || (head[0] == 'a')) {
    QuantSpec a;
    a.bits = parse_bits(act_token, text);
    a.granularity = Granularity::kPerToken;
    spec.activation = a;
  }
  bool sparse = false;
  if (!weight_token.empty()) {
    if (weight_token[0] == 'w') {
      QuantSpec w;
      w.bits = parse_bits(weight_token.substr(1), text);
      spec.weight = w;
    } else if (weight_token[0] == 's') {
      const auto body = weight_token.substr(1);
      double fraction = 0.0;
      auto res = std::from_chars(body.data(), body.data() + body.size(), fraction);
      if (res.ec != std::errc{} || res.ptr != body.data() + body.size() || body.empty()) {
        throw fail("bad sparsity fraction");
      }
      SparsitySpec s;
      s.fraction = fraction;
      s.granularity = SparsityGranularity::kPerRow;
      spec.weight = s;
      sparse = true;
    } else {
      throw fail("expected 'dense', 'w<bits>', 's<fraction>' or 'a<bits>'");
    }
  }

  bool saw_granularity = false;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const std::string_view opt = parts[i];
    if (auto* a = spec.activation ? &*spec.activation : nullptr; a && opt.starts_with("act_")) {
      const auto o = opt.substr(4);
      if (o == "centered") a->grid = Grid::kCenteredInteger;
      else if (o == "symmetric") a->grid = Grid::kSymmetricHalfInteger;
      else if (o == "absmean") a->stat = ScaleStat::kAbsMean;
      else if (o == "absmax") a->stat = ScaleStat::kAbsMax;
      else if (o == "per_tensor") a->granularity = Granularity::kPerTensor;
      else if (o == "per_token") a->granularity = Granularity::kPerToken;
      else throw fail("unknown activation option '" + std::string(opt) + "'");
      continue;
    }
    if (auto* w = std::get_if<QuantSpec>(&spec.weight)) {
      if (opt == "centered") w->grid = Grid::kCenteredInteger;
      else if (opt == "symmetric") w->grid = Grid::kSymmetricHalfInteger;
      else if (opt == "absmean") w->stat = ScaleStat::kAbsMean;
      else if (opt == "absmax") w->stat = ScaleStat::kAbsMax;
      else if (opt == "per_row") w->granularity = Granularity::kPerRow;
      else if (opt == "per_tensor") w->granularity = Granularity::kPerTensor;
      else throw fail("unknown weight option '" + std::string(opt) + "'");
      continue;
    }
    if (sparse) {
      auto& s = std::get<SparsitySpec>(spec.weight);
      if (saw_granularity) throw fail("more than one sparsity granularity");
      saw_granularity = true;
      if (opt == "per_row") {
        s.granularity = SparsityGranularity::kPerRow;
      } else if (opt == "per_tensor") {
        s.granularity = SparsityGranularity::kPerTensor;
      } else if (const auto of = opt.find("of"); of != std::string_view::npos) {
        const auto n = static_cast<std::size_t>(parse_bits(opt.substr(0, of), text));
        const auto m = static_cast<std::size_t>(parse_bits(opt.substr(of + 2), text));
        const double fraction = s.fraction;
        try {
          s = SparsitySpec::n_of_m(n, m);
        } catch (const DomainError& e) {
          throw fail(e.what());
        }
        if (std::abs(s.fraction - fraction) > 1e-12) throw fail("n:m pattern does not match the sparsity fraction");
      } else {
        throw fail("unknown sparsity option '" + std::string(opt) + "'");
      }
      continue;
    }
    throw fail("unknown option '" + std::string(opt) + "'");
  }
  try {
    spec.validate();
  } catch (const DomainError& e) {
    throw fail(e.what());
  }
  return spec;
}

void CompressionSpec::validate() const {
  if (const auto* w = weight_quant()) {
    w->validate();
    if (w->granularity == Granularity::kPerToken) throw DomainError("per_token granularity is for activations only");
  }
  if (const auto* s = weight_sparsity()) s->validate();
  if (activation) {
    activation->validate();
    if (activation->granularity == Granularity::kPerRow) throw DomainError("per_row granularity is for weights only");
  }
}

std::string CompressionSpec::to_string() const {
  if (is_dense()) return "dense";
  std::string head, opts;
  if (const auto* w = weight_quant()) {
    head = "w" + std::to_string(w->bits);
    if (w->grid == Grid::kCenteredInteger) opts += ":centered";
    if (w->stat == ScaleStat::kAbsMean) opts += ":absmean";
    if (w->granularity == Granularity::kPerRow) opts += ":per_row";
  } else if (const auto* s = weight_sparsity()) {
    head = "s" + format_fraction(s->fraction);
    switch (s->granularity) {
      case SparsityGranularity::kPerRow:
        opts += ":per_row";
        break;
      case SparsityGranularity::kPerTensor:
        opts += ":per_tensor";
        break;
      case SparsityGranularity::kBlock:
        opts += ":" + std::to_string(s->n) + "of" + std::to_string(s->m);
        break;
    }
  }
  if (activation) {
    head += "a" + std::to_string(activation->bits);
    if (activation->grid == Grid::kCenteredInteger) opts += ":act_centered";
    if (activation->stat == ScaleStat::kAbsMean) opts += ":act_absmean";
    if (activation->granularity == Granularity::kPerTensor) opts += ":act_per_tensor";
  }
  return head + opts;
}

}  // namespace compscale
