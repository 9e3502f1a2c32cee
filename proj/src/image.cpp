#include "avatar/image.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>

namespace avatar {

ImageBuffer::ImageBuffer(int w, int h, const Vec3& fill, double fill_alpha)
    : width(w), height(h), alpha(static_cast<std::size_t>(w) * h, fill_alpha) {
  if (w <= 0 || h <= 0) throw std::invalid_argument("image dimensions must be positive");
  rgb.resize(3 * pixel_count());
  for (std::size_t i = 0; i < pixel_count(); ++i) {
    rgb[3 * i] = fill.x();
    rgb[3 * i + 1] = fill.y();
    rgb[3 * i + 2] = fill.z();
  }
}

Vec3 ImageBuffer::color(int x, int y) const {
  const std::size_t i = 3 * index(x, y);
  return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

void ImageBuffer::set_color(int x, int y, const Vec3& c) {
  const std::size_t i = 3 * index(x, y);
  rgb[i] = c.x();
  rgb[i + 1] = c.y();
  rgb[i + 2] = c.z();
}

void ImageBuffer::quantize_to_float() {
  for (double& v : rgb) v = static_cast<float>(v);
  for (double& v : alpha) v = static_cast<float>(v);
}

void require_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(what) + ": image dimensions differ (" +
                                std::to_string(a.width) + "x" + std::to_string(a.height) +
                                " vs " + std::to_string(b.width) + "x" +
                                std::to_string(b.height) + ")");
  }
}

void write_pfm(const std::filesystem::path& path, const ImageBuffer& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "PF\n" << image.width << ' ' << image.height << "\n-1.0\n";
  std::vector<float> row(3 * static_cast<std::size_t>(image.width));
  // PFM stores rows bottom to top.
  for (int y = image.height - 1; y >= 0; --y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) row[3 * x + c] = static_cast<float>(image.rgb[3 * image.index(x, y) + c]);
    }
    if constexpr (std::endian::native == std::endian::big) {
      for (float& f : row) {
        auto bits = std::bit_cast<std::uint32_t>(f);
        bits = __builtin_bswap32(bits);
        f = std::bit_cast<float>(bits);
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

ImageBuffer read_pfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  in >> magic >> w >> h >> scale;
  in.get();
  if (!in || magic != "PF" || w <= 0 || h <= 0) {
    throw std::runtime_error("not an RGB PFM file: " + path.string());
  }
  if (scale > 0) throw std::runtime_error("big-endian PFM is not supported: " + path.string());
  ImageBuffer image(w, h);
  std::vector<float> row(3 * static_cast<std::size_t>(w));
  for (int y = h - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated PFM file: " + path.string());
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) image.rgb[3 * image.index(x, y) + c] = row[3 * x + c];
    }
  }
  return image;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png(const std::filesystem::path& path, int width, int height, int channels,
               const std::vector<unsigned char>& data) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("failed writing PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data.data() + static_cast<std::size_t>(y) * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void write_png_rgb(const std::filesystem::path& path, const ImageBuffer& image) {
  std::vector<unsigned char> data(image.rgb.size());
  std::transform(image.rgb.begin(), image.rgb.end(), data.begin(), to_byte);
  write_png(path, image.width, image.height, 3, data);
}

void write_png_gray(const std::filesystem::path& path, int width, int height,
                    const std::vector<double>& values) {
  if (values.size() != static_cast<std::size_t>(width) * height) {
    throw std::invalid_argument("write_png_gray: size mismatch");
  }
  std::vector<unsigned char> data(values.size());
  std::transform(values.begin(), values.end(), data.begin(), to_byte);
  write_png(path, width, height, 1, data);
}

std::vector<double> read_png_gray(const std::filesystem::path& path, int& width, int& height) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng initialization failed");
  }
  std::vector<double> out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("corrupt PNG file: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int color_type = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) != 8 || color_type != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("expected an 8-bit grayscale PNG: " + path.string());
  }
  std::vector<unsigned char> row(static_cast<std::size_t>(width));
  out.resize(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < width; ++x) out[static_cast<std::size_t>(y) * width + x] = row[x] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace avatar
