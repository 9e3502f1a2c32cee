// Float RGB + alpha image buffers and file I/O (PFM, 8-bit PNG).
#pragma once

#include <filesystem>
#include <vector>

#include "avatar/geom.hpp"

namespace avatar {

/// Row-major RGB image with a separate accumulated-alpha channel.
struct ImageBuffer {
  int width = 0;
  int height = 0;
  std::vector<double> rgb;    // 3 * width * height, interleaved
  std::vector<double> alpha;  // width * height

  ImageBuffer() = default;
  ImageBuffer(int w, int h, const Vec3& fill = Vec3::Zero(), double fill_alpha = 0.0);

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  Vec3 color(int x, int y) const;
  void set_color(int x, int y, const Vec3& c);
  bool same_shape(const ImageBuffer& o) const { return width == o.width && height == o.height; }

  /// Rounds every channel to float precision.
  void quantize_to_float();
  bool operator==(const ImageBuffer&) const = default;
};

/// Throws std::invalid_argument unless a and b have equal dimensions.
void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what);

/// Portable float map, little-endian RGB. Alpha is not stored.
void write_pfm(const std::filesystem::path& path, const ImageBuffer& image);
ImageBuffer read_pfm(const std::filesystem::path& path);

/// 8-bit RGB PNG of the clamped colors.
void write_png_rgb(const std::filesystem::path& path, const ImageBuffer& image);
/// 8-bit grayscale PNG of values in [0,1].
void write_png_gray(const std::filesystem::path& path, int width, int height,
                    const std::vector<double>& values);
/// Reads an 8-bit grayscale PNG as values in [0,1].
std::vector<double> read_png_gray(const std::filesystem::path& path, int& width, int& height);

}  // namespace avatar
