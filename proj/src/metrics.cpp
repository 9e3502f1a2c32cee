#include "avatar/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace avatar {

double mean_squared_error(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_shape(a, b, "mean_squared_error");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = a.rgb[i] - b.rgb[i];
    sum += d * d;
  }
  return sum / static_cast<double>(a.rgb.size());
}

double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  const double mse = mean_squared_error(a, b);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace {

std::vector<double> luma(const ImageBuffer& img) {
  std::vector<double> y(img.pixel_count());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = 0.299 * img.rgb[3 * i] + 0.587 * img.rgb[3 * i + 1] + 0.114 * img.rgb[3 * i + 2];
  }
  return y;
}

}  // namespace

double ssim(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_shape(a, b, "ssim");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int w = a.width, h = a.height;
  const int half_x = std::min(5, (w - 1) / 2), half_y = std::min(5, (h - 1) / 2);
  std::vector<double> kx(2 * half_x + 1), ky(2 * half_y + 1);
  for (int i = -half_x; i <= half_x; ++i) kx[i + half_x] = std::exp(-0.5 * i * i / (1.5 * 1.5));
  for (int i = -half_y; i <= half_y; ++i) ky[i + half_y] = std::exp(-0.5 * i * i / (1.5 * 1.5));

  const auto ya = luma(a), yb = luma(b);
  double total = 0.0;
  int windows = 0;
  for (int cy = half_y; cy < h - half_y; ++cy) {
    for (int cx = half_x; cx < w - half_x; ++cx) {
      double wsum = 0, ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int dy = -half_y; dy <= half_y; ++dy) {
        for (int dx = -half_x; dx <= half_x; ++dx) {
          const double k = kx[dx + half_x] * ky[dy + half_y];
          const std::size_t p = static_cast<std::size_t>(cy + dy) * w + (cx + dx);
          wsum += k;
          ma += k * ya[p];
          mb += k * yb[p];
          saa += k * ya[p] * ya[p];
          sbb += k * yb[p] * yb[p];
          sab += k * ya[p] * yb[p];
        }
      }
      ma /= wsum;
      mb /= wsum;
      const double va = saa / wsum - ma * ma;
      const double vb = sbb / wsum - mb * mb;
      const double cov = sab / wsum - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++windows;
    }
  }
  return total / windows;
}

}  // namespace avatar
