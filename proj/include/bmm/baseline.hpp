#pragma once

// SUSAN structure-preserving smoothing and its grid-search calibration.
//
//   out(p) = sum_{q != p} I(q) w(q,p) / sum_{q != p} w(q,p)
//   w(q,p) = exp(-|q-p|^2 / (2 sigma^2) - ((I(q) - I(p)) / t)^2)
//
// over a (2r+1)^2 window with mirror padding. When the weights underflow the
// pixel falls back to the median of its 3x3 neighbourhood.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <thread>
#include <vector>

#include "bmm/evaluate.hpp"
#include "bmm/image.hpp"

namespace bmm {

inline constexpr std::size_t susan_max_radius = 7;

struct SusanParams {
  double brightness_threshold = 0.1;  // t, normalized intensity units
  double spatial_sigma = 1.0;         // pixels
  std::size_t window_radius = 3;

  /// Radius derived from sigma: ceil(3 sigma), capped.
  static SusanParams from(double t, double sigma) {
    SusanParams p{t, sigma, 1};
    const double r = std::ceil(3.0 * sigma);
    p.window_radius = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(r, 1.0)), 1, susan_max_radius);
    p.validate();
    return p;
  }

  void validate() const {
    if (!(brightness_threshold > 0.0)) throw ConfigError("susan: brightness threshold must be > 0");
    if (!(spatial_sigma > 0.0)) throw ConfigError("susan: spatial sigma must be > 0");
    if (window_radius < 1) throw ConfigError("susan: window radius must be >= 1");
  }

  friend bool operator==(const SusanParams&, const SusanParams&) = default;
};

namespace detail {

/// Reflect-about-edge index (…2 1 | 0 1 2 … n-1 | n-2 …).
inline std::size_t mirror(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

}  // namespace detail

inline Image susan_denoise(const Image& image, const SusanParams& params) {
  params.validate();
  require_rank(image.shape(), 2, "susan_denoise");
  const auto h = static_cast<std::ptrdiff_t>(image_height(image));
  const auto w = static_cast<std::ptrdiff_t>(image_width(image));
  const auto r = static_cast<std::ptrdiff_t>(params.window_radius);
  const double inv_t = 1.0 / params.brightness_threshold;
  const double inv_2s2 = 1.0 / (2.0 * params.spatial_sigma * params.spatial_sigma);

  std::vector<double> spatial;
  spatial.reserve(static_cast<std::size_t>((2 * r + 1) * (2 * r + 1)));
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
      spatial.push_back(-double(dy * dy + dx * dx) * inv_2s2);
    }
  }
  auto px = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    return double(image[detail::mirror(y, h) * static_cast<std::size_t>(w) + detail::mirror(x, w)]);
  };

  Image out(image.shape());
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      const double c = px(y, x);
      double num = 0.0, den = 0.0;
      std::size_t k = 0;
      for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
        for (std::ptrdiff_t dx = -r; dx <= r; ++dx, ++k) {
          if (dy == 0 && dx == 0) continue;
          const double v = px(y + dy, x + dx);
          const double d = (v - c) * inv_t;
          const double wt = std::exp(spatial[k] - d * d);
          num += v * wt;
          den += wt;
        }
      }
      double result;
      if (den < 1e-12) {
        std::array<double, 9> nb{};
        std::size_t m = 0;
        for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
          for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) nb[m++] = px(y + dy, x + dx);
        }
        std::nth_element(nb.begin(), nb.begin() + 4, nb.end());
        result = nb[4];
      } else {
        result = num / den;
      }
      out[static_cast<std::size_t>(y * w + x)] = static_cast<float>(result);
    }
  }
  return out;
}

struct SusanScore {
  SusanParams params;
  double mean_psnr = 0.0;
};

struct SusanGridResult {
  SusanParams best;
  std::size_t best_index = 0;
  std::vector<SusanScore> table;  // t-major, sigma-minor
};

inline const std::vector<double>& default_t_grid() {
  static const std::vector<double> g{0.02, 0.05, 0.1, 0.2, 0.4};
  return g;
}

inline const std::vector<double>& default_sigma_grid() {
  static const std::vector<double> g{0.75, 1.0, 1.5, 2.0, 3.0};
  return g;
}

/// Selection rule: highest mean PSNR; ties go to smaller sigma, then smaller t.
inline bool susan_score_better(const SusanScore& a, const SusanScore& b) {
  if (a.mean_psnr != b.mean_psnr) return a.mean_psnr > b.mean_psnr;
  if (a.params.spatial_sigma != b.params.spatial_sigma) {
    return a.params.spatial_sigma < b.params.spatial_sigma;
  }
  return a.params.brightness_threshold < b.params.brightness_threshold;
}

/// Exhaustive search over t x sigma. Each grid cell is scored independently,
/// so the result does not depend on `threads`.
inline SusanGridResult grid_search_susan(std::span<const Image> noisy, std::span<const Image> clean,
                                         std::span<const double> t_grid,
                                         std::span<const double> sigma_grid, unsigned threads = 1) {
  if (noisy.empty() || noisy.size() != clean.size()) {
    throw ValidationError("grid_search_susan: need matching non-empty noisy/clean lists");
  }
  if (t_grid.empty() || sigma_grid.empty()) throw ValidationError("grid_search_susan: empty grid");
  SusanGridResult res;
  for (double t : t_grid) {
    for (double s : sigma_grid) res.table.push_back({SusanParams::from(t, s), 0.0});
  }
  auto score = [&](std::size_t cell) {
    double sum = 0.0;
    for (std::size_t i = 0; i < noisy.size(); ++i) {
      sum += psnr(clean[i], susan_denoise(noisy[i], res.table[cell].params));
    }
    res.table[cell].mean_psnr = sum / static_cast<double>(noisy.size());
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(res.table.size())));
  if (threads == 1) {
    for (std::size_t c = 0; c < res.table.size(); ++c) score(c);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned k = 0; k < threads; ++k) {
      pool.emplace_back([&, k] {
        for (std::size_t c = k; c < res.table.size(); c += threads) score(c);
      });
    }
  }
  for (std::size_t c = 1; c < res.table.size(); ++c) {
    if (susan_score_better(res.table[c], res.table[res.best_index])) res.best_index = c;
  }
  res.best = res.table[res.best_index].params;
  return res;
}

inline void write_susan_table_csv(const std::filesystem::path& path, const SusanGridResult& r) {
  auto out = detail::open_table(path);
  out << "t,sigma,radius,mean_psnr,selected\n";
  for (std::size_t c = 0; c < r.table.size(); ++c) {
    const auto& s = r.table[c];
    out << format_double(s.params.brightness_threshold) << ',' << format_double(s.params.spatial_sigma)
        << ',' << s.params.window_radius << ',' << detail::cell(s.mean_psnr) << ','
        << (c == r.best_index ? 1 : 0) << '\n';
  }
}

inline KeyValues to_key_values(const SusanParams& p) {
  return {{"susan.t", format_double(p.brightness_threshold)},
          {"susan.sigma", format_double(p.spatial_sigma)},
          {"susan.radius", std::to_string(p.window_radius)}};
}

inline SusanParams susan_params_from(const KeyValues& kv) {
  SusanParams p{parse_double(require_key(kv, "susan.t"), "susan.t"),
                parse_double(require_key(kv, "susan.sigma"), "susan.sigma"),
                static_cast<std::size_t>(parse_u64(require_key(kv, "susan.radius"), "susan.radius"))};
  p.validate();
  return p;
}

}  // namespace bmm
