#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace brain3d {

/// Depth, height, width in voxels.
struct Dims {
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t count() const { return depth * height * width; }
  bool operator==(const Dims&) const = default;
};

/// Single-channel scalar grid. Voxels are row-major with width fastest.
struct Volume {
  Dims dims;
  std::vector<float> voxels;

  Volume() = default;
  explicit Volume(Dims d, float fill = 0.0f) : dims(d), voxels(d.count(), fill) {}

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * dims.height + y) * dims.width + x;
  }
  float& at(std::size_t z, std::size_t y, std::size_t x) { return voxels[index(z, y, x)]; }
  float at(std::size_t z, std::size_t y, std::size_t x) const { return voxels[index(z, y, x)]; }
  bool operator==(const Volume&) const = default;
};

struct PreprocessConfig {
  double clip_low_percentile = 1.0;
  double clip_high_percentile = 99.0;
  Dims target_dims{64, 128, 128};

  void validate() const;
};

// BVOL: "BVOL1", u32 D, u32 H, u32 W (little endian), then D*H*W little-endian f32.
inline constexpr std::array<char, 5> kVolumeMagic{'B', 'V', 'O', 'L', '1'};
inline constexpr std::size_t kMaxVoxels = std::size_t{1} << 31;

Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& volume, const std::filesystem::path& path);
std::vector<char> encode_volume_bytes(const Volume& volume);
Volume decode_volume_bytes(std::span<const char> bytes);

/// Linear-interpolation percentile, q in [0, 100].
double percentile(std::span<const double> values, double q);
double percentile(std::span<const float> values, double q);

Volume resample_trilinear(const Volume& volume, Dims target);
Volume preprocess_volume(const Volume& raw, const PreprocessConfig& cfg);

}  // namespace brain3d
