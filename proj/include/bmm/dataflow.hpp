#pragma once

// Phantom brain slices, intensity normalization, masked noise injection and
// the on-disk image formats (raw float, PGM import, 8-bit PNG export).

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "bmm/image.hpp"
#include "bmm/kv.hpp"
#include "bmm/rng.hpp"

namespace bmm {

using Mask = Tensor<std::uint8_t>;

enum class IntensityRange { unit, symmetric };  // [0,1] and [-1,1]

inline const char* range_name(IntensityRange r) {
  return r == IntensityRange::unit ? "unit" : "symmetric";
}

/// normalized = scale * raw + offset
struct NormalizationRecord {
  IntensityRange range = IntensityRange::unit;
  double scale = 1.0;
  double offset = 0.0;
};

struct SampleMeta {
  std::string id;
  std::string provenance;
  std::uint64_t seed = 0;
  NormalizationRecord normalization{};
};

struct ImageSample {
  Image image;
  Mask mask;
  SampleMeta meta;
};

// ---------------------------------------------------------------------------
// Phantoms

struct PhantomStyle {
  double head_height = 0.45;  // semi-axis as a fraction of the frame
  double head_width = 0.37;
  double scale_jitter = 0.06;
  // Fixed intensity scale with headroom below 1 so that noise at SNR >= 10
  // rarely clamps; samples carry an identity normalization record.
  double skull = 0.80;
  double csf = 0.12;
  double gray_matter = 0.45;
  double white_matter = 0.65;
  double texture = 0.05;
};

namespace detail {

struct PhantomShape {
  double cy, cx, ay, ax, rot;
  double wm_radius, ripple1, freq1, phase1, ripple2, freq2, phase2;
  double sulcus_freq, sulcus_phase, sulcus_depth;
  double vent_dx, vent_dy, vent_a, vent_b, vent_asym, vent_tilt;
  double tex_fu, tex_fv, tex_pu, tex_pv;
};

/// Intensity at normalized head coordinates (u,v); r = elliptical radius.
inline double phantom_value(const PhantomShape& s, const PhantomStyle& st, double u, double v) {
  const double r = std::hypot(u, v);
  if (r > 1.0) return 0.0;
  if (r > 0.90) return st.skull;
  if (r > 0.86) return st.csf;
  const double phi = std::atan2(v, u);
  const double wm_edge = s.wm_radius + s.ripple1 * std::sin(s.freq1 * phi + s.phase1) +
                         s.ripple2 * std::sin(s.freq2 * phi + s.phase2);
  const double texture = 1.0 + st.texture * std::sin(s.tex_fu * u + s.tex_pu) *
                                   std::cos(s.tex_fv * v + s.tex_pv);
  double value;
  if (r > wm_edge) {
    value = st.gray_matter * texture;
    // Sulci: dark CSF clefts reaching in from the cortical surface.
    const double cleft = std::cos(s.sulcus_freq * phi + s.sulcus_phase);
    const double depth = (r - wm_edge) / std::max(0.86 - wm_edge, 1e-6);
    if (cleft > 0.75 && depth > 1.0 - s.sulcus_depth) value = st.csf + 0.1;
  } else {
    value = st.white_matter * texture;
  }
  // Midline fissure, anterior and posterior.
  if (std::abs(u) < 0.02 && std::abs(v) > 0.45) value = st.csf + 0.05;
  // Lateral ventricles: two tilted ellipses, the right one scaled by asymmetry.
  for (int side : {-1, 1}) {
    const double k = side > 0 ? 1.0 + s.vent_asym : 1.0 - s.vent_asym;
    const double du = u - side * s.vent_dx;
    const double dv = v - s.vent_dy;
    const double t = side * s.vent_tilt;
    const double pu = du * std::cos(t) + dv * std::sin(t);
    const double pv = -du * std::sin(t) + dv * std::cos(t);
    const double e = (pu / (s.vent_a * k)) * (pu / (s.vent_a * k)) +
                     (pv / (s.vent_b * k)) * (pv / (s.vent_b * k));
    if (e <= 1.0) value = st.csf;
  }
  return value;
}

}  // namespace detail

/// Deterministic brain-like axial slice in [0,1]. Seeds vary head size
/// and eccentricity, cortical folding, ventricle size/asymmetry and texture
/// phase; the mask covers the skull ellipse and everything inside it.
inline ImageSample generate_phantom(std::uint64_t seed, std::size_t height, std::size_t width,
                                    const PhantomStyle& style = {}) {
  if (height < 32 || width < 32) throw ConfigError("phantom dimensions must be >= 32");
  Rng rng(derive_seed(seed, 0x7068616e746f6dULL));
  detail::PhantomShape s{};
  const double scale = 1.0 + rng.uniform(-style.scale_jitter, style.scale_jitter);
  const double ecc = 1.0 + rng.uniform(-0.06, 0.06);
  s.cy = 0.5 * static_cast<double>(height) + rng.uniform(-0.8, 0.8);
  s.cx = 0.5 * static_cast<double>(width) + rng.uniform(-0.8, 0.8);
  s.ay = style.head_height * static_cast<double>(height) * scale;
  s.ax = style.head_width * static_cast<double>(width) * scale * ecc;
  s.rot = rng.uniform(-0.06, 0.06);
  s.wm_radius = rng.uniform(0.64, 0.72);
  s.ripple1 = rng.uniform(0.025, 0.05);
  s.freq1 = std::floor(rng.uniform(7.0, 12.0));
  s.phase1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  s.ripple2 = rng.uniform(0.01, 0.025);
  s.freq2 = std::floor(rng.uniform(15.0, 22.0));
  s.phase2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  s.sulcus_freq = std::floor(rng.uniform(9.0, 15.0));
  s.sulcus_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  s.sulcus_depth = rng.uniform(0.4, 0.8);
  s.vent_dx = rng.uniform(0.09, 0.14);
  s.vent_dy = rng.uniform(-0.08, 0.02);
  s.vent_a = rng.uniform(0.05, 0.09);
  s.vent_b = rng.uniform(0.16, 0.28);
  s.vent_asym = rng.uniform(-0.2, 0.2);
  s.vent_tilt = rng.uniform(0.0, 0.35);
  s.tex_fu = rng.uniform(2.0, 6.0);
  s.tex_fv = rng.uniform(2.0, 6.0);
  s.tex_pu = rng.uniform(0.0, 2.0 * std::numbers::pi);
  s.tex_pv = rng.uniform(0.0, 2.0 * std::numbers::pi);

  ImageSample out;
  out.image = Image(Shape{height, width});
  out.mask = Mask(Shape{height, width});
  const double cr = std::cos(s.rot), sr = std::sin(s.rot);
  auto to_head = [&](double y, double x, double& u, double& v) {
    const double dy = y - s.cy, dx = x - s.cx;
    u = (dx * cr + dy * sr) / s.ax;
    v = (-dx * sr + dy * cr) / s.ay;
  };
  // 3x3 supersampling for anti-aliased boundaries.
  constexpr std::array<double, 3> sub{-1.0 / 3.0, 0.0, 1.0 / 3.0};
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      double acc = 0.0;
      for (double oy : sub) {
        for (double ox : sub) {
          double u, v;
          to_head(static_cast<double>(i) + 0.5 + oy, static_cast<double>(j) + 0.5 + ox, u, v);
          acc += detail::phantom_value(s, style, u, v);
        }
      }
      out.image[i * width + j] = static_cast<float>(acc / 9.0);
      double u, v;
      to_head(static_cast<double>(i) + 0.5, static_cast<double>(j) + 0.5, u, v);
      out.mask[i * width + j] = std::hypot(u, v) <= 1.0 ? 1 : 0;
    }
  }
  out.meta.seed = seed;
  out.meta.id = "phantom_" + std::to_string(seed);
  out.meta.provenance = "phantom seed=" + std::to_string(seed);
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

struct Normalized {
  Image image;
  NormalizationRecord record;
};

/// Affine map of [min,max] onto the target range.
inline Normalized normalize(const Image& image, IntensityRange target) {
  if (image.empty()) throw ValidationError("normalize: empty image");
  const auto [lo_it, hi_it] = std::minmax_element(image.data().begin(), image.data().end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(lo < hi)) throw ValidationError("normalize: constant image has no intensity range");
  const double t_lo = target == IntensityRange::unit ? 0.0 : -1.0;
  const double t_hi = 1.0;
  NormalizationRecord rec{target, (t_hi - t_lo) / (hi - lo), 0.0};
  rec.offset = t_lo - rec.scale * lo;
  if (lo == t_lo && hi == t_hi) rec = {target, 1.0, 0.0};
  Image out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) {
    out[i] = static_cast<float>(rec.scale * image[i] + rec.offset);
  }
  if (rec.scale != 1.0 || rec.offset != 0.0) {
    out[static_cast<std::size_t>(lo_it - image.data().begin())] = static_cast<float>(t_lo);
    out[static_cast<std::size_t>(hi_it - image.data().begin())] = static_cast<float>(t_hi);
  }
  return {std::move(out), rec};
}

inline Image denormalize(const Image& image, const NormalizationRecord& rec) {
  Image out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) {
    out[i] = static_cast<float>((double(image[i]) - rec.offset) / rec.scale);
  }
  return out;
}

/// Maps [0,1] storage intensities to [-1,1] and back.
inline Image to_symmetric(const Image& unit) {
  Image out(unit.shape());
  for (std::size_t i = 0; i < unit.size(); ++i) out[i] = 2.0f * unit[i] - 1.0f;
  return out;
}

inline Image to_unit(const Image& symmetric) {
  Image out(symmetric.shape());
  for (std::size_t i = 0; i < symmetric.size(); ++i) {
    out[i] = std::clamp(0.5f * (symmetric[i] + 1.0f), 0.0f, 1.0f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noise

struct NoiseSpec {
  double snr = 10.0;  // mean in-mask intensity / noise standard deviation
  std::uint64_t seed = 0;
};

struct NoiseStats {
  double sigma = 0.0;           // requested standard deviation
  double realized_mean = 0.0;   // of the added field, before clamping
  double realized_std = 0.0;
  double clamped_fraction = 0.0;  // of in-mask pixels
  std::size_t mask_pixels = 0;
};

/// Adds N(0, sigma^2) inside the mask with sigma = mean(in-mask image)/snr,
/// then clamps to [0,1]. Pixels outside the mask are copied unchanged.
inline ImageSample add_noise(const ImageSample& sample, const NoiseSpec& spec,
                             NoiseStats* stats = nullptr) {
  if (!(spec.snr > 0.0)) throw ConfigError("add_noise: snr must be > 0");
  if (sample.mask.shape() != sample.image.shape()) {
    throw ShapeError("add_noise: mask shape differs from image shape");
  }
  double signal = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < sample.image.size(); ++i) {
    if (sample.mask[i]) {
      signal += sample.image[i];
      ++count;
    }
  }
  if (count == 0) throw ValidationError("add_noise: mask is empty");
  const double sigma = (signal / static_cast<double>(count)) / spec.snr;

  ImageSample out = sample;
  Rng rng(spec.seed);
  double sum = 0.0, sum_sq = 0.0;
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < out.image.size(); ++i) {
    if (!out.mask[i]) continue;
    const double n = sigma * rng.normal();
    sum += n;
    sum_sq += n * n;
    const double v = double(sample.image[i]) + n;
    const double c = std::clamp(v, 0.0, 1.0);
    clamped += c != v;
    out.image[i] = static_cast<float>(c);
  }
  out.meta.provenance += " noise snr=" + std::to_string(spec.snr) +
                         " seed=" + std::to_string(spec.seed);
  if (stats) {
    const double mean = sum / static_cast<double>(count);
    stats->sigma = sigma;
    stats->realized_mean = mean;
    stats->realized_std =
        count > 1 ? std::sqrt(std::max(0.0, (sum_sq - count * mean * mean) / double(count - 1)))
                  : 0.0;
    stats->clamped_fraction = static_cast<double>(clamped) / static_cast<double>(count);
    stats->mask_pixels = count;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Geometry helpers for frames that are not divisible by the network stride

struct PadOffsets {
  std::size_t top = 0, left = 0, height = 0, width = 0;  // original extent
};

/// Centers the image in a zero frame whose sides are multiples of `multiple`.
inline Image pad_to_multiple(const Image& image, std::size_t multiple, PadOffsets* offsets = nullptr) {
  const std::size_t h = image_height(image), w = image_width(image);
  const std::size_t ph = (h + multiple - 1) / multiple * multiple;
  const std::size_t pw = (w + multiple - 1) / multiple * multiple;
  const std::size_t top = (ph - h) / 2, left = (pw - w) / 2;
  Image out(Shape{ph, pw});
  for (std::size_t i = 0; i < h; ++i) {
    std::copy_n(image.data().begin() + static_cast<std::ptrdiff_t>(i * w), w,
                out.data().begin() + static_cast<std::ptrdiff_t>((i + top) * pw + left));
  }
  if (offsets) *offsets = {top, left, h, w};
  return out;
}

inline Image crop(const Image& image, const PadOffsets& o) {
  const std::size_t w = image_width(image);
  if (o.top + o.height > image_height(image) || o.left + o.width > w) {
    throw ShapeError("crop: window exceeds image");
  }
  Image out(Shape{o.height, o.width});
  for (std::size_t i = 0; i < o.height; ++i) {
    std::copy_n(image.data().begin() + static_cast<std::ptrdiff_t>((i + o.top) * w + o.left),
                o.width, out.data().begin() + static_cast<std::ptrdiff_t>(i * o.width));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Little-endian byte helpers

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u32_be(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

inline void put_floats(std::string& out, std::span<const float> values) {
  out.reserve(out.size() + 4 * values.size());
  for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

inline void get_floats(const unsigned char* p, std::span<float> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Raw float image: 8-byte magic, u32 height, u32 width, row-major f32, all LE.

inline constexpr std::array<char, 8> raw_image_magic{'B', 'M', 'M', 'I', 'M', 'G', '0', '1'};
inline constexpr std::size_t raw_image_header_bytes = 16;
inline constexpr std::uint64_t raw_image_max_pixels = std::uint64_t{1} << 28;

inline std::string encode_raw_image(const Image& image) {
  require_rank(image.shape(), 2, "raw image");
  std::string out(raw_image_magic.begin(), raw_image_magic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(image_height(image)));
  detail::put_u32(out, static_cast<std::uint32_t>(image_width(image)));
  detail::put_floats(out, image.data());
  return out;
}

inline Image decode_raw_image(const std::string& bytes) {
  if (bytes.size() < raw_image_header_bytes) {
    throw FormatError("raw image: truncated header (" + std::to_string(bytes.size()) + " bytes)");
  }
  if (!std::equal(raw_image_magic.begin(), raw_image_magic.end(), bytes.begin())) {
    throw FormatError("raw image: bad magic");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t h = detail::get_u32(p + 8), w = detail::get_u32(p + 12);
  if (h == 0 || w == 0 || h * w > raw_image_max_pixels) {
    throw FormatError("raw image: dimension overflow (" + std::to_string(h) + "x" +
                      std::to_string(w) + ")");
  }
  if (bytes.size() != raw_image_header_bytes + 4 * h * w) {
    throw FormatError("raw image: payload is " + std::to_string(bytes.size() - 16) +
                      " bytes, expected " + std::to_string(4 * h * w));
  }
  Image out(Shape{h, w});
  detail::get_floats(p + raw_image_header_bytes, out.data());
  return out;
}

inline void write_image(const std::filesystem::path& path, const Image& image) {
  detail::write_file(path, encode_raw_image(image));
}

inline Image read_image(const std::filesystem::path& path) {
  return decode_raw_image(detail::read_file(path));
}

inline Image mask_to_image(const Mask& mask) {
  Image out(mask.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] ? 1.0f : 0.0f;
  return out;
}

inline Mask image_to_mask(const Image& image) {
  Mask out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = image[i] > 0.5f ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// PGM import (P2 ASCII or P5 binary, 8 or 16 bit) mapped to [0,1]

inline std::uint64_t parse_u64_token(const std::string& s) {
  std::uint64_t v = 0;
  if (s.empty()) throw FormatError("pgm: empty number");
  for (char c : s) {
    if (c < '0' || c > '9') throw FormatError("pgm: bad number '" + s + "'");
    v = v * 10 + static_cast<std::uint64_t>(c - '0');
  }
  return v;
}

inline Image decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw FormatError("pgm: truncated header");
    return bytes.substr(start, pos - start);
  };
  const std::string magic = token();
  if (magic != "P2" && magic != "P5") throw FormatError("pgm: unsupported magic '" + magic + "'");
  const std::uint64_t w = parse_u64_token(token());
  const std::uint64_t h = parse_u64_token(token());
  const std::uint64_t maxval = parse_u64_token(token());
  if (w == 0 || h == 0 || w * h > raw_image_max_pixels) throw FormatError("pgm: bad dimensions");
  if (maxval == 0 || maxval > 65535) throw FormatError("pgm: bad maxval");
  Image out(Shape{h, w});
  if (magic == "P2") {
    for (std::size_t i = 0; i < h * w; ++i) {
      out[i] = static_cast<float>(double(parse_u64_token(token())) / double(maxval));
    }
    return out;
  }
  ++pos;  // single whitespace after maxval
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  if (bytes.size() < pos + h * w * bpp) throw FormatError("pgm: truncated payload");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  for (std::size_t i = 0; i < h * w; ++i) {
    const unsigned v = bpp == 1 ? p[i] : (unsigned(p[2 * i]) << 8) | p[2 * i + 1];
    out[i] = static_cast<float>(double(v) / double(maxval));
  }
  return out;
}

inline Image read_pgm(const std::filesystem::path& path) {
  return decode_pgm(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// 8-bit grayscale PNG, quantized as round(255 * clamp(x, 0, 1))

inline std::vector<std::uint8_t> quantize8(const Image& image) {
  std::vector<std::uint8_t> out(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double x = std::clamp(double(image[i]), 0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * x));
  }
  return out;
}

inline std::string encode_png8(const Image& image) {
  require_rank(image.shape(), 2, "png export");
  const std::size_t h = image_height(image), w = image_width(image);
  const auto pixels = quantize8(image);
  std::string raw;
  raw.reserve(h * (w + 1));
  for (std::size_t i = 0; i < h; ++i) {
    raw.push_back('\0');  // filter type: none
    raw.append(reinterpret_cast<const char*>(pixels.data() + i * w), w);
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(packed_size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_size,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                9) != Z_OK) {
    throw FormatError("png: deflate failed");
  }
  packed.resize(packed_size);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  auto chunk = [&](const char* type, const std::string& data) {
    detail::put_u32_be(png, static_cast<std::uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    png += body;
    detail::put_u32_be(png, static_cast<std::uint32_t>(
                                crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                                      static_cast<uInt>(body.size()))));
  };
  std::string ihdr;
  detail::put_u32_be(ihdr, static_cast<std::uint32_t>(w));
  detail::put_u32_be(ihdr, static_cast<std::uint32_t>(h));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // 8-bit, grayscale, deflate, no filter, no interlace
  chunk("IHDR", ihdr);
  chunk("IDAT", packed);
  chunk("IEND", "");
  return png;
}

inline void export_png8(const Image& image, const std::filesystem::path& path) {
  detail::write_file(path, encode_png8(image));
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.tsv plus images/<id>.img and masks/<id>.img

inline constexpr const char* dataset_manifest_header =
    "id\tseed\timage\tmask\trange\tscale\toffset\tprovenance";

inline void write_dataset(const std::filesystem::path& dir, std::span<const ImageSample> samples) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  std::string manifest = std::string(dataset_manifest_header) + "\n";
  for (const auto& s : samples) {
    if (s.image.shape() != s.mask.shape()) {
      throw ShapeError("dataset: sample " + s.meta.id + " has mismatched image and mask");
    }
    if (s.meta.id.find_first_of("\t\n/") != std::string::npos || s.meta.id.empty()) {
      throw ValidationError("dataset: invalid sample id '" + s.meta.id + "'");
    }
    const std::string image = "images/" + s.meta.id + ".img";
    const std::string mask = "masks/" + s.meta.id + ".img";
    write_image(dir / image, s.image);
    write_image(dir / mask, mask_to_image(s.mask));
    const auto& n = s.meta.normalization;
    manifest += s.meta.id + "\t" + std::to_string(s.meta.seed) + "\t" + image + "\t" + mask + "\t" +
                range_name(n.range) + "\t" + format_double(n.scale) + "\t" + format_double(n.offset) +
                "\t" + s.meta.provenance + "\n";
  }
  detail::write_file(dir / "manifest.tsv", manifest);
}

inline std::vector<ImageSample> read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.tsv";
  if (!std::filesystem::exists(manifest_path)) {
    throw PrerequisiteError("dataset manifest " + manifest_path.string() +
                            " not found (run gen-data first)");
  }
  std::istringstream in(detail::read_file(manifest_path));
  std::string line;
  if (!std::getline(in, line) || line != dataset_manifest_header) {
    throw FormatError("dataset: unexpected manifest header in " + manifest_path.string());
  }
  std::vector<ImageSample> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream cols(line);
    std::string c;
    while (std::getline(cols, c, '\t')) f.push_back(c);
    if (f.size() != 8) throw FormatError("dataset: malformed manifest line '" + line + "'");
    ImageSample s;
    s.meta.id = f[0];
    s.meta.seed = parse_u64(f[1], "seed");
    s.image = read_image(dir / f[2]);
    s.mask = image_to_mask(read_image(dir / f[3]));
    if (f[4] != "unit" && f[4] != "symmetric") throw FormatError("dataset: unknown range " + f[4]);
    s.meta.normalization = {f[4] == "unit" ? IntensityRange::unit : IntensityRange::symmetric,
                            parse_double(f[5], "scale"), parse_double(f[6], "offset")};
    s.meta.provenance = f[7];
    if (s.image.shape() != s.mask.shape()) {
      throw FormatError("dataset: image and mask of " + s.meta.id + " differ in shape");
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace bmm
