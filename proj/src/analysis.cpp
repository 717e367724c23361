#include "compscale/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>

namespace compscale {

namespace {

void check_eff(double eff, const char* who) {
  if (!(eff > 0.0 && eff <= kEffUpper)) throw DomainError(std::string(who) + ": eff must lie in (0, 1.25]");
}

std::string canonical(const std::string& spec) { return CompressionSpec::parse(spec).to_string(); }

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

double size_gain(double eff, int weight_bits, int baseline_bits) {
  check_eff(eff, "size_gain");
  if (weight_bits < 1 || baseline_bits < 1) throw DomainError("size_gain: bit-widths must be at least 1");
  return eff * baseline_bits / weight_bits;
}

double size_gain_sparse(double eff, double fraction) {
  check_eff(eff, "size_gain_sparse");
  if (!(fraction > 0.0 && fraction < 1.0)) throw DomainError("size_gain_sparse: fraction must lie in (0, 1)");
  return eff / (1.0 - fraction);
}

Counting parse_counting(const std::string& text) {
  if (text == "linear") return Counting::kLinear;
  if (text == "quadratic") return Counting::kQuadratic;
  throw ConfigError("unknown speedup counting '" + text + "' (expected linear or quadratic)");
}

std::string to_string(Counting counting) { return counting == Counting::kLinear ? "linear" : "quadratic"; }

double speedup(const CompressionSpec& spec, Counting counting) {
  spec.validate();
  if (const auto* sp = spec.weight_sparsity()) {
    if (spec.activation) throw DomainError("speedup: no cost rule for sparse weights with quantized activations");
    return 1.0 / (1.0 - sp->fraction);
  }
  const double bw = spec.weight_bits(), ba = spec.activation_bits();
  const bool weights = spec.weight_quant() != nullptr, acts = spec.activation.has_value();
  if (weights && !acts) {
    if (counting == Counting::kQuadratic) {
      throw DomainError("speedup: quadratic counting is undefined for weight-only spec " + spec.to_string());
    }
    return kBaselineBits / bw;
  }
  if (counting == Counting::kLinear) return kBaselineBits / std::max(bw, ba);
  return kBaselineBits * kBaselineBits / (bw * ba);
}

std::vector<ParetoPoint> pareto_points(const std::map<std::string, double>& epm, Counting counting) {
  std::vector<ParetoPoint> out;
  for (const auto& [name, eff] : epm) {
    const auto spec = CompressionSpec::parse(name);
    double s = 0.0;
    try {
      s = speedup(spec, counting);
    } catch (const DomainError&) {
      continue;
    }
    out.push_back({spec.to_string(), eff * s, eff, false});
  }
  return out;
}

std::vector<ParetoPoint> mark_dominated(std::vector<ParetoPoint> points) {
  for (auto& p : points) {
    p.dominated = std::any_of(points.begin(), points.end(), [&](const ParetoPoint& q) {
      return q.efficiency >= p.efficiency && q.quality >= p.quality &&
             (q.efficiency > p.efficiency || q.quality > p.quality);
    });
  }
  std::sort(points.begin(), points.end(), [](const ParetoPoint& x, const ParetoPoint& y) {
    if (x.efficiency != y.efficiency) return x.efficiency < y.efficiency;
    if (x.spec != y.spec) return x.spec < y.spec;
    return x.quality < y.quality;
  });
  return points;
}

std::vector<ParetoPoint> pareto_frontier(const std::vector<ParetoPoint>& points) {
  auto marked = mark_dominated(points);
  std::erase_if(marked, [](const ParetoPoint& p) { return p.dominated; });
  return marked;
}

std::vector<EqualCostPair> compare_at_equal_cost(const std::map<std::string, double>& epm, Counting counting) {
  struct Entry {
    std::string spec;
    double eff, cost;
  };
  std::vector<Entry> entries;
  for (const auto& [name, eff] : epm) {
    const auto spec = CompressionSpec::parse(name);
    try {
      entries.push_back({spec.to_string(), eff, speedup(spec, counting)});
    } catch (const DomainError&) {
    }
  }
  std::vector<EqualCostPair> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    for (std::size_t j = i + 1; j < entries.size(); ++j) {
      const auto& x = entries[i];
      const auto& y = entries[j];
      if (std::abs(x.cost - y.cost) > 1e-9 * std::max(x.cost, y.cost)) continue;
      const bool x_wins = x.eff >= y.eff;
      const auto& hi = x_wins ? x : y;
      const auto& lo = x_wins ? y : x;
      out.push_back({x.cost, hi.spec, lo.spec, hi.eff, lo.eff, hi.eff - lo.eff});
    }
  }
  std::sort(out.begin(), out.end(), [](const EqualCostPair& p, const EqualCostPair& q) {
    if (p.cost != q.cost) return p.cost < q.cost;
    if (p.better != q.better) return p.better < q.better;
    return p.worse < q.worse;
  });
  return out;
}

namespace {

constexpr double kWidth = 800, kHeight = 600;
constexpr double kLeft = 80, kRight = 160, kTop = 40, kBottom = 70;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

struct Series {
  std::string spec;
  long ratio = 0;
  std::vector<std::pair<double, double>> points;  // (N, loss)
  std::optional<double> eff;
};

class LogAxes {
 public:
  LogAxes(double xlo, double xhi, double ylo, double yhi)
      : x0_(std::floor(std::log10(xlo))), x1_(std::ceil(std::log10(xhi))),
        y0_(std::floor(std::log10(ylo) * 10) / 10), y1_(std::ceil(std::log10(yhi) * 10) / 10) {
    if (x1_ <= x0_) x1_ = x0_ + 1;
    if (y1_ <= y0_) y1_ = y0_ + 0.1;
  }

  double x(double v) const { return kLeft + (std::log10(v) - x0_) / (x1_ - x0_) * (kWidth - kLeft - kRight); }
  double y(double v) const { return kHeight - kBottom - (std::log10(v) - y0_) / (y1_ - y0_) * (kHeight - kTop - kBottom); }

  void draw(std::ostringstream& os) const {
    const double bottom = kHeight - kBottom, right = kWidth - kRight;
    os << "<rect x=\"" << coord(kLeft) << "\" y=\"" << coord(kTop) << "\" width=\"" << coord(right - kLeft)
       << "\" height=\"" << coord(bottom - kTop) << "\" fill=\"none\" stroke=\"#000\"/>\n";
    for (double k = x0_; k <= x1_ + 1e-9; k += 1.0) {
      const double px = x(std::pow(10.0, k));
      os << "<line x1=\"" << coord(px) << "\" y1=\"" << coord(bottom) << "\" x2=\"" << coord(px) << "\" y2=\""
         << coord(bottom + 5) << "\" stroke=\"#000\"/>\n";
      os << "<text x=\"" << coord(px) << "\" y=\"" << coord(bottom + 20)
         << "\" text-anchor=\"middle\" font-size=\"12\">1e" << static_cast<int>(k) << "</text>\n";
    }
    const int ticks = 5;
    for (int i = 0; i <= ticks; ++i) {
      const double v = std::pow(10.0, y0_ + (y1_ - y0_) * i / ticks);
      const double py = y(v);
      os << "<line x1=\"" << coord(kLeft - 5) << "\" y1=\"" << coord(py) << "\" x2=\"" << coord(kLeft)
         << "\" y2=\"" << coord(py) << "\" stroke=\"#000\"/>\n";
      char label[32];
      std::snprintf(label, sizeof label, "%.3g", v);
      os << "<text x=\"" << coord(kLeft - 8) << "\" y=\"" << coord(py + 4)
         << "\" text-anchor=\"end\" font-size=\"12\">" << label << "</text>\n";
    }
    os << "<text x=\"" << coord((kLeft + right) / 2) << "\" y=\"" << coord(kHeight - 20)
       << "\" text-anchor=\"middle\" font-size=\"14\">parameters N</text>\n";
    os << "<text x=\"20\" y=\"" << coord((kTop + bottom) / 2) << "\" text-anchor=\"middle\" font-size=\"14\""
       << " transform=\"rotate(-90 20 " << coord((kTop + bottom) / 2) << ")\">validation loss</text>\n";
  }

 private:
  double x0_, x1_, y0_, y1_;
};

}  // namespace

Report emit_report(const std::vector<RunRecord>& records, const ReportFits& fits) {
  std::map<std::string, double> eff;
  for (const auto& [name, v] : fits.eff) eff[canonical(name)] = v;
  auto eff_of = [&](const CompressionSpec& spec) -> std::optional<double> {
    if (!fits.params) return std::nullopt;
    if (spec.is_dense()) return 1.0;
    const auto it = eff.find(spec.to_string());
    if (it == eff.end()) return std::nullopt;
    return it->second;
  };

  std::vector<std::string> specs_of(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) specs_of[i] = canonical(records[i].spec);
  std::vector<std::size_t> idx(records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
    const auto& a = records[i];
    const auto& b = records[j];
    if (specs_of[i] != specs_of[j]) return specs_of[i] < specs_of[j];
    if (a.n_params != b.n_params) return a.n_params < b.n_params;
    if (a.tokens != b.tokens) return a.tokens < b.tokens;
    return a.digest < b.digest;
  });

  std::ostringstream csv;
  csv << "spec,N,D,loss,predicted_loss,eff,residual\n";
  std::set<std::string> warned;
  std::map<std::pair<std::string, long>, Series> series;
  for (std::size_t i : idx) {
    const auto& r = records[i];
    const auto spec = CompressionSpec::parse(specs_of[i]);
    const std::string& name = specs_of[i];
    if (r.diverged || !std::isfinite(r.final_loss)) {
      csv << "# warning: diverged run " << r.digest << " (" << name << ", N=" << r.n_params << ") omitted\n";
      continue;
    }
    const auto e = eff_of(spec);
    csv << name << ',' << r.n_params << ',' << r.tokens << ',' << num(r.final_loss) << ',';
    if (e) {
      const double pred = predict_loss(*fits.params, static_cast<double>(r.n_params), static_cast<double>(r.tokens), *e);
      csv << num(pred) << ',' << num(*e) << ',' << num(std::log(pred) - std::log(r.final_loss)) << '\n';
    } else {
      csv << ",,\n";
      if (warned.insert(name).second) csv << "# warning: no fit for spec " << name << "; plotted raw\n";
    }
    auto& s = series[{name, std::lround(r.ratio)}];
    s.spec = name;
    s.ratio = std::lround(r.ratio);
    s.eff = e;
    s.points.emplace_back(static_cast<double>(r.n_params), r.final_loss);
  }

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"800\" height=\"600\" viewBox=\"0 0 800 600\">\n"
      << "<rect width=\"800\" height=\"600\" fill=\"#fff\"/>\n";
  double xlo = 1e5, xhi = 1e6, ylo = 1.0, yhi = 10.0;
  if (!series.empty()) {
    xlo = ylo = std::numeric_limits<double>::infinity();
    xhi = yhi = 0.0;
    for (const auto& [key, s] : series) {
      for (const auto& [n, loss] : s.points) {
        xlo = std::min(xlo, n);
        xhi = std::max(xhi, n);
        ylo = std::min(ylo, loss);
        yhi = std::max(yhi, loss);
      }
    }
  }
  const LogAxes axes(xlo, xhi, ylo, yhi);
  axes.draw(svg);
  std::size_t colour = 0;
  double legend_y = kTop + 10;
  for (const auto& [key, s] : series) {
    const char* c = kPalette[colour++ % std::size(kPalette)];
    svg << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < s.points.size(); ++k) {
      svg << (k ? " " : "") << coord(axes.x(s.points[k].first)) << ',' << coord(axes.y(s.points[k].second));
    }
    svg << "\"/>\n";
    for (const auto& [n, loss] : s.points) {
      svg << "<circle cx=\"" << coord(axes.x(n)) << "\" cy=\"" << coord(axes.y(loss)) << "\" r=\"3\" fill=\"" << c
          << "\"/>\n";
    }
    if (s.eff) {
      const double n0 = s.points.front().first, n1 = s.points.back().first;
      constexpr int kSamples = 40;
      svg << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1\" stroke-dasharray=\"6,4\" points=\"";
      for (int k = 0; k <= kSamples; ++k) {
        const double n = n0 * std::pow(n1 / n0, static_cast<double>(k) / kSamples);
        const double pred = predict_loss(*fits.params, n, static_cast<double>(s.ratio) * n, *s.eff);
        svg << (k ? " " : "") << coord(axes.x(n)) << ',' << coord(axes.y(pred));
      }
      svg << "\"/>\n";
    }
    svg << "<text x=\"" << coord(kWidth - kRight + 10) << "\" y=\"" << coord(legend_y) << "\" font-size=\"12\" fill=\""
        << c << "\">" << s.spec << " (D/N " << s.ratio << ")</text>\n";
    legend_y += 16;
  }
  svg << "</svg>\n";
  return {csv.str(), svg.str()};
}

}  // namespace compscale
