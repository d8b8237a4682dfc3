#include "brain3d/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "brain3d/errors.hpp"

namespace brain3d {

namespace {

constexpr std::size_t kHeaderBytes = kVolumeMagic.size() + 3 * sizeof(std::uint32_t);

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

double lerp_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

// Maps output index i to input coordinate with align-corners convention.
double source_coord(std::size_t i, std::size_t n_in, std::size_t n_out) {
  if (n_out == 1) return 0.5 * static_cast<double>(n_in - 1);
  return static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
}

struct Tap {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

std::vector<Tap> taps(std::size_t n_in, std::size_t n_out) {
  std::vector<Tap> out(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double c = source_coord(i, n_in, n_out);
    auto lo = static_cast<std::size_t>(std::floor(c));
    lo = std::min(lo, n_in - 1);
    const std::size_t hi = std::min(lo + 1, n_in - 1);
    out[i] = {lo, hi, c - static_cast<double>(lo)};
  }
  return out;
}

}  // namespace

void PreprocessConfig::validate() const {
  if (!(clip_low_percentile >= 0.0 && clip_high_percentile <= 100.0 &&
        clip_low_percentile < clip_high_percentile)) {
    throw ConfigError("preprocess: require 0 <= clip_low < clip_high <= 100");
  }
  if (target_dims.depth < 1 || target_dims.height < 1 || target_dims.width < 1) {
    throw ConfigError("preprocess: target dims must be >= 1");
  }
}

std::vector<char> encode_volume_bytes(const Volume& volume) {
  if (volume.voxels.size() != volume.dims.count()) {
    throw ShapeError("volume voxel count does not match dims");
  }
  std::vector<char> out;
  out.reserve(kHeaderBytes + 4 * volume.voxels.size());
  out.insert(out.end(), kVolumeMagic.begin(), kVolumeMagic.end());
  put_u32(out, static_cast<std::uint32_t>(volume.dims.depth));
  put_u32(out, static_cast<std::uint32_t>(volume.dims.height));
  put_u32(out, static_cast<std::uint32_t>(volume.dims.width));
  for (float v : volume.voxels) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Volume decode_volume_bytes(std::span<const char> bytes) {
  if (bytes.size() < kVolumeMagic.size() ||
      !std::equal(kVolumeMagic.begin(), kVolumeMagic.end(), bytes.begin())) {
    throw FormatError(FormatErrorKind::kBadMagic, "BVOL: bad magic");
  }
  if (bytes.size() < kHeaderBytes) throw FormatError(FormatErrorKind::kTruncated, "BVOL: truncated header");
  const char* p = bytes.data() + kVolumeMagic.size();
  const std::uint64_t d = get_u32(p);
  const std::uint64_t h = get_u32(p + 4);
  const std::uint64_t w = get_u32(p + 8);
  // Each factor < 2^32, so the product of two fits; check before the third multiply.
  const std::uint64_t dh = d * h;
  if (dh != 0 && w > kMaxVoxels / dh) {
    throw FormatError(FormatErrorKind::kDimensionOverflow, "BVOL: dimensions overflow voxel limit");
  }
  const std::uint64_t n = dh * w;
  if (n > kMaxVoxels) throw FormatError(FormatErrorKind::kDimensionOverflow, "BVOL: dimensions overflow voxel limit");
  const std::uint64_t payload = bytes.size() - kHeaderBytes;
  if (payload < 4 * n) throw FormatError(FormatErrorKind::kTruncated, "BVOL: truncated payload");
  if (payload > 4 * n) throw FormatError(FormatErrorKind::kTrailingBytes, "BVOL: trailing bytes after payload");

  Volume v(Dims{static_cast<std::size_t>(d), static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  const char* q = bytes.data() + kHeaderBytes;
  for (std::size_t i = 0; i < n; ++i) v.voxels[i] = std::bit_cast<float>(get_u32(q + 4 * i));
  return v;
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open volume: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_volume_bytes(bytes);
}

void write_volume(const Volume& volume, const std::filesystem::path& path) {
  const auto bytes = encode_volume_bytes(volume);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write volume: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::kIo, "short write: " + path.string());
}

double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw DomainError("percentile of empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw DomainError("percentile q outside [0, 100]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return lerp_sorted(sorted, q);
}

double percentile(std::span<const float> values, double q) {
  std::vector<double> widened(values.begin(), values.end());
  return percentile(std::span<const double>(widened), q);
}

Volume resample_trilinear(const Volume& volume, Dims target) {
  const Dims& in = volume.dims;
  if (in.count() == 0 || target.count() == 0) throw ShapeError("resample: dims must be >= 1");
  if (in == target) return volume;

  const auto tz = taps(in.depth, target.depth);
  const auto ty = taps(in.height, target.height);
  const auto tx = taps(in.width, target.width);
  Volume out(target);
  for (std::size_t z = 0; z < target.depth; ++z) {
    for (std::size_t y = 0; y < target.height; ++y) {
      for (std::size_t x = 0; x < target.width; ++x) {
        const Tap& a = tz[z];
        const Tap& b = ty[y];
        const Tap& c = tx[x];
        auto line = [&](std::size_t zz, std::size_t yy) {
          return (1.0 - c.frac) * volume.at(zz, yy, c.lo) + c.frac * volume.at(zz, yy, c.hi);
        };
        const double p0 = (1.0 - b.frac) * line(a.lo, b.lo) + b.frac * line(a.lo, b.hi);
        const double p1 = (1.0 - b.frac) * line(a.hi, b.lo) + b.frac * line(a.hi, b.hi);
        out.at(z, y, x) = static_cast<float>((1.0 - a.frac) * p0 + a.frac * p1);
      }
    }
  }
  return out;
}

Volume preprocess_volume(const Volume& raw, const PreprocessConfig& cfg) {
  cfg.validate();
  if (raw.voxels.empty()) throw DomainError("preprocess: empty volume");
  const double lo = percentile(std::span<const float>(raw.voxels), cfg.clip_low_percentile);
  const double hi = percentile(std::span<const float>(raw.voxels), cfg.clip_high_percentile);

  Volume scaled(raw.dims);
  if (hi > lo) {
    const double range = hi - lo;
    for (std::size_t i = 0; i < raw.voxels.size(); ++i) {
      const double v = std::clamp(static_cast<double>(raw.voxels[i]), lo, hi);
      scaled.voxels[i] = static_cast<float>((v - lo) / range);
    }
  }
  Volume out = resample_trilinear(scaled, cfg.target_dims);
  for (float& v : out.voxels) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

}  // namespace brain3d
