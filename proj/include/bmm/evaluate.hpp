#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "bmm/image.hpp"
#include "bmm/kv.hpp"

namespace bmm {

inline constexpr double psnr_infinite = std::numeric_limits<double>::infinity();

/// 10 log10(max^2 / MSE) over the full frame; identical images give +inf.
inline double psnr(const Image& reference, const Image& test, double max_val = 1.0) {
  if (reference.shape() != test.shape()) {
    throw ShapeError("psnr: shape " + shape_string(reference.shape()) + " vs " +
                     shape_string(test.shape()));
  }
  if (!(max_val > 0.0)) throw ValidationError("psnr: max_val must be > 0");
  double sse = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = double(reference[i]) - double(test[i]);
    sse += d * d;
  }
  if (sse == 0.0) return psnr_infinite;
  const double mse = sse / static_cast<double>(reference.size());
  return 10.0 * std::log10(max_val * max_val / mse);
}

inline double pearson(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw ShapeError("pearson: lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()) + " differ");
  }
  if (a.size() < 2) throw ValidationError("pearson: need at least 2 values");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw ValidationError("pearson: constant input has no correlation");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double pearson(const Image& a, const Image& b) {
  if (a.shape() != b.shape()) throw ShapeError("pearson: image shapes differ");
  return pearson(a.data(), b.data());
}

// ---------------------------------------------------------------------------
// Correlation matrix between synthesized and training images

struct CorrelationResult {
  std::size_t rows = 0;  // synthesized
  std::size_t cols = 0;  // training
  std::vector<double> rho;  // row-major rows x cols
  std::vector<std::size_t> nearest;
  std::vector<double> nearest_rho;

  double at(std::size_t i, std::size_t j) const { return rho[i * cols + j]; }
};

inline CorrelationResult correlation_matrix(std::span<const Image> synthesized,
                                            std::span<const Image> training) {
  if (synthesized.empty() || training.empty()) {
    throw ValidationError("correlation_matrix: empty image list");
  }
  const Shape& shape = training.front().shape();
  CorrelationResult r;
  r.rows = synthesized.size();
  r.cols = training.size();
  r.rho.resize(r.rows * r.cols);
  r.nearest.resize(r.rows);
  r.nearest_rho.resize(r.rows);
  for (std::size_t i = 0; i < r.rows; ++i) {
    if (synthesized[i].shape() != shape) {
      throw ShapeError("correlation_matrix: synthesized image " + std::to_string(i) + " has shape " +
                       shape_string(synthesized[i].shape()) + ", expected " + shape_string(shape));
    }
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < r.cols; ++j) {
      if (training[j].shape() != shape) {
        throw ShapeError("correlation_matrix: training image " + std::to_string(j) +
                         " has shape " + shape_string(training[j].shape()));
      }
      double v;
      try {
        v = pearson(synthesized[i].data(), training[j].data());
      } catch (const ValidationError& e) {
        throw ValidationError("correlation_matrix[" + std::to_string(i) + "," + std::to_string(j) +
                              "]: " + e.what());
      }
      r.rho[i * r.cols + j] = v;
      if (v > best) {
        best = v;
        r.nearest[i] = j;
      }
    }
    r.nearest_rho[i] = best;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Wilcoxon rank-sum test

enum class WilcoxonMethod { automatic, exact, normal };

inline constexpr std::size_t wilcoxon_exact_limit = 12;  // n + m at or below: enumerate

struct WilcoxonResult {
  double statistic = 0.0;  // rank sum of x (midranks)
  double u = 0.0;          // Mann-Whitney U for x
  double z = 0.0;          // normal approximation only
  double p_two_sided = 1.0;
  double p_less = 1.0;     // P(W <= observed): x tends smaller
  double p_greater = 1.0;  // P(W >= observed): x tends larger
  bool exact = false;
};

/// Midranks (1-based) of the pooled sample.
inline std::vector<double> midranks(std::span<const double> pooled) {
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pooled[a] < pooled[b]; });
  std::vector<double> ranks(pooled.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && pooled[order[j + 1]] == pooled[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

namespace detail {

/// Exact null distribution of the x rank sum, counting subsets of the
/// (doubled, hence integral) midranks with a knapsack DP.
inline void wilcoxon_exact(const std::vector<double>& ranks, std::size_t n, WilcoxonResult& r) {
  std::vector<std::size_t> doubled(ranks.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < ranks.size(); ++i) {
    doubled[i] = static_cast<std::size_t>(std::llround(2.0 * ranks[i]));
    total += doubled[i];
  }
  // ways[k][s]: subsets of size k with doubled rank sum s
  std::vector<std::vector<double>> ways(n + 1, std::vector<double>(total + 1, 0.0));
  ways[0][0] = 1.0;
  for (std::size_t v : doubled) {
    for (std::size_t k = n; k >= 1; --k) {
      for (std::size_t s = total; s >= v; --s) ways[k][s] += ways[k - 1][s - v];
    }
  }
  const auto observed = static_cast<std::size_t>(std::llround(2.0 * r.statistic));
  double all = 0.0, le = 0.0, ge = 0.0;
  for (std::size_t s = 0; s <= total; ++s) {
    const double c = ways[n][s];
    all += c;
    if (s <= observed) le += c;
    if (s >= observed) ge += c;
  }
  r.p_less = le / all;
  r.p_greater = ge / all;
  r.p_two_sided = std::min(1.0, 2.0 * std::min(le, ge) / all);
  r.exact = true;
}

inline void wilcoxon_normal(const std::vector<double>& pooled, const std::vector<double>& ranks,
                            std::size_t n, WilcoxonResult& r) {
  const double nn = static_cast<double>(n);
  const double mm = static_cast<double>(pooled.size() - n);
  const double N = nn + mm;
  // tie correction: sum over tie groups of (t^3 - t)
  std::vector<double> sorted(ranks);
  std::sort(sorted.begin(), sorted.end());
  double ties = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    ties += t * t * t - t;
    i = j;
  }
  const double mean = nn * (N + 1.0) / 2.0;
  const double var = nn * mm / 12.0 * ((N + 1.0) - ties / (N * (N - 1.0)));
  r.exact = false;
  if (!(var > 0.0)) {
    r.z = 0.0;
    r.p_two_sided = r.p_less = r.p_greater = 1.0;
    return;
  }
  const double sd = std::sqrt(var);
  const double diff = r.statistic - mean;
  r.z = diff / sd;
  const double z_abs = std::max(0.0, std::abs(diff) - 0.5) / sd;
  r.p_two_sided = std::min(1.0, std::erfc(z_abs / std::sqrt(2.0)));
  r.p_greater = 0.5 * std::erfc((diff - 0.5) / sd / std::sqrt(2.0));
  r.p_less = 0.5 * std::erfc(-(diff + 0.5) / sd / std::sqrt(2.0));
}

}  // namespace detail

inline WilcoxonResult wilcoxon_rank_sum(std::span<const double> x, std::span<const double> y,
                                        WilcoxonMethod method = WilcoxonMethod::automatic) {
  if (x.size() < 3 || y.size() < 3) {
    throw ValidationError("wilcoxon_rank_sum: need at least 3 values per sample (got " +
                          std::to_string(x.size()) + " and " + std::to_string(y.size()) + ")");
  }
  std::vector<double> pooled(x.begin(), x.end());
  pooled.insert(pooled.end(), y.begin(), y.end());
  for (double v : pooled) {
    if (std::isnan(v)) throw ValidationError("wilcoxon_rank_sum: NaN in sample");
  }
  const auto ranks = midranks(pooled);
  WilcoxonResult r;
  r.statistic = std::accumulate(ranks.begin(), ranks.begin() + static_cast<std::ptrdiff_t>(x.size()), 0.0);
  const double n = static_cast<double>(x.size());
  r.u = r.statistic - n * (n + 1.0) / 2.0;
  const bool exact = method == WilcoxonMethod::exact ||
                     (method == WilcoxonMethod::automatic && pooled.size() <= wilcoxon_exact_limit);
  if (exact) {
    detail::wilcoxon_exact(ranks, x.size(), r);
  } else {
    detail::wilcoxon_normal(pooled, ranks, x.size(), r);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Rating score histograms

enum class ImageKind { real, synthetic };

inline const char* kind_name(ImageKind k) { return k == ImageKind::real ? "real" : "synthetic"; }

inline ImageKind parse_kind(const std::string& s) {
  if (s == "real") return ImageKind::real;
  if (s == "synthetic") return ImageKind::synthetic;
  throw ValidationError("unknown image kind '" + s + "'");
}

struct Rating {
  ImageKind kind = ImageKind::real;
  int score = 0;
  std::string rater;
};

struct KindSummary {
  std::array<std::size_t, 5> counts{};  // scores 1..5
  std::size_t total = 0;
  double mean = 0.0;  // 0 when total == 0

  void add(int score) {
    ++counts[static_cast<std::size_t>(score - 1)];
    ++total;
  }
  void finish() {
    double sum = 0.0;
    for (std::size_t s = 0; s < 5; ++s) sum += static_cast<double>((s + 1) * counts[s]);
    mean = total ? sum / static_cast<double>(total) : 0.0;
  }
};

struct ScoreHistogram {
  std::map<std::string, std::array<KindSummary, 2>> per_rater;  // indexed by ImageKind
  std::array<KindSummary, 2> overall{};
  double synthetic_at_least_3 = 0.0;  // fraction of synthetic ratings scoring >= 3
  double real_at_most_2 = 0.0;        // fraction of real ratings scoring <= 2

  const KindSummary& of(ImageKind k) const { return overall[static_cast<std::size_t>(k)]; }
};

inline ScoreHistogram score_histogram(std::span<const Rating> ratings) {
  ScoreHistogram h;
  for (const auto& r : ratings) {
    if (r.score < 1 || r.score > 5) {
      throw ValidationError("score " + std::to_string(r.score) + " outside 1..5 (rater " + r.rater + ")");
    }
    const auto k = static_cast<std::size_t>(r.kind);
    h.per_rater[r.rater][k].add(r.score);
    h.overall[k].add(r.score);
  }
  for (auto& [rater, kinds] : h.per_rater) {
    for (auto& s : kinds) s.finish();
  }
  for (auto& s : h.overall) s.finish();
  const auto& syn = h.of(ImageKind::synthetic);
  const auto& real = h.of(ImageKind::real);
  if (syn.total) {
    h.synthetic_at_least_3 = double(syn.counts[2] + syn.counts[3] + syn.counts[4]) / double(syn.total);
  }
  if (real.total) h.real_at_most_2 = double(real.counts[0] + real.counts[1]) / double(real.total);
  return h;
}

// ---------------------------------------------------------------------------
// Denoising comparison

struct DenoiseLevel {
  double snr = 0.0;
  std::vector<std::string> ids;
  std::vector<double> noisy, susan, proposed;  // PSNR per held-out image
  WilcoxonResult proposed_vs_susan;

  static double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }
};

struct DenoiseReport {
  std::vector<DenoiseLevel> levels;
};

inline void finish_level(DenoiseLevel& level) {
  level.proposed_vs_susan = wilcoxon_rank_sum(level.proposed, level.susan);
}

// ---------------------------------------------------------------------------
// Delimited text outputs

namespace detail {

inline std::ofstream open_table(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

inline std::string cell(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return format_double(v);
}

}  // namespace detail

inline void write_correlation_csv(const std::filesystem::path& path, const CorrelationResult& r) {
  auto out = detail::open_table(path);
  out << "synth";
  for (std::size_t j = 0; j < r.cols; ++j) out << ",train_" << j;
  out << ",nearest,nearest_rho\n";
  for (std::size_t i = 0; i < r.rows; ++i) {
    out << i;
    for (std::size_t j = 0; j < r.cols; ++j) out << ',' << detail::cell(r.at(i, j));
    out << ',' << r.nearest[i] << ',' << detail::cell(r.nearest_rho[i]) << '\n';
  }
}

/// One row per held-out image; noisy/susan/proposed PSNR columns per level.
inline void write_psnr_table_csv(const std::filesystem::path& path, const DenoiseReport& report) {
  auto out = detail::open_table(path);
  out << "image";
  for (const auto& l : report.levels) {
    const std::string s = detail::cell(l.snr);
    out << ",noisy_snr" << s << ",susan_snr" << s << ",proposed_snr" << s;
  }
  out << '\n';
  const std::size_t n = report.levels.empty() ? 0 : report.levels.front().ids.size();
  for (std::size_t i = 0; i < n; ++i) {
    out << report.levels.front().ids[i];
    for (const auto& l : report.levels) {
      out << ',' << detail::cell(l.noisy[i]) << ',' << detail::cell(l.susan[i]) << ','
          << detail::cell(l.proposed[i]);
    }
    out << '\n';
  }
}

inline void write_denoise_summary_csv(const std::filesystem::path& path, const DenoiseReport& report) {
  auto out = detail::open_table(path);
  out << "snr,n,mean_noisy,mean_susan,mean_proposed,rank_sum,z,p_two_sided,exact\n";
  for (const auto& l : report.levels) {
    const auto& w = l.proposed_vs_susan;
    out << detail::cell(l.snr) << ',' << l.ids.size() << ',' << detail::cell(DenoiseLevel::mean_of(l.noisy))
        << ',' << detail::cell(DenoiseLevel::mean_of(l.susan)) << ','
        << detail::cell(DenoiseLevel::mean_of(l.proposed)) << ',' << detail::cell(w.statistic) << ','
        << detail::cell(w.z) << ',' << detail::cell(w.p_two_sided) << ',' << (w.exact ? 1 : 0) << '\n';
  }
}

inline void write_histogram_csv(const std::filesystem::path& path, const ScoreHistogram& h) {
  auto out = detail::open_table(path);
  out << "rater,kind,score_1,score_2,score_3,score_4,score_5,total,mean\n";
  auto row = [&](const std::string& rater, ImageKind k, const KindSummary& s) {
    out << rater << ',' << kind_name(k);
    for (auto c : s.counts) out << ',' << c;
    out << ',' << s.total << ',' << detail::cell(s.mean) << '\n';
  };
  for (const auto& [rater, kinds] : h.per_rater) {
    row(rater, ImageKind::real, kinds[0]);
    row(rater, ImageKind::synthetic, kinds[1]);
  }
  row("all", ImageKind::real, h.overall[0]);
  row("all", ImageKind::synthetic, h.overall[1]);
  out << "# synthetic_at_least_3=" << detail::cell(h.synthetic_at_least_3)
      << " real_at_most_2=" << detail::cell(h.real_at_most_2) << '\n';
}

}  // namespace bmm
