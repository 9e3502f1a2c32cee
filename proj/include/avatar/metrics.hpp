// Image quality metrics on float RGB buffers in [0, 1].
#pragma once

#include "avatar/image.hpp"

namespace avatar {

inline constexpr double kPsnrCap = 99.0;

double mean_squared_error(const ImageBuffer& a, const ImageBuffer& b);

/// 10 log10(1 / MSE) over all RGB samples, capped at 99 dB.
double psnr(const ImageBuffer& a, const ImageBuffer& b);

/// Mean SSIM on BT.601 luma with an 11x11 Gaussian window (σ = 1.5) over the
/// valid region, K1 = 0.01, K2 = 0.03, dynamic range 1. Images smaller than
/// the window use a window clipped to the image.
double ssim(const ImageBuffer& a, const ImageBuffer& b);

}  // namespace avatar
