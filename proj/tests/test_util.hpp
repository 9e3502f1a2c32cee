// Shared helpers for the unit tests.
#pragma once

#include <doctest.h>

#include <cmath>
#include <random>

#include "avatar/geom.hpp"
#include "avatar/image.hpp"

namespace avatar::test {

inline constexpr double kPi = 3.14159265358979323846;

inline double max_abs_diff(const Mat3& a, const Mat3& b) { return (a - b).cwiseAbs().maxCoeff(); }

inline double max_abs_diff(const Quaternion& a, const Quaternion& b) {
  return (a.vec() - b.vec()).cwiseAbs().maxCoeff();
}

inline double max_abs_diff(const ImageBuffer& a, const ImageBuffer& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) m = std::max(m, std::abs(a.rgb[i] - b.rgb[i]));
  for (std::size_t i = 0; i < a.alpha.size(); ++i) m = std::max(m, std::abs(a.alpha[i] - b.alpha[i]));
  return m;
}

inline Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
inline Mat3 rot_y(double a) { return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix(); }
inline Mat3 rot_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

inline Quaternion random_unit_quaternion(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return Quaternion{n(rng), n(rng), n(rng), n(rng)}.normalized();
}

inline ImageBuffer random_image(int w, int h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageBuffer img(w, h);
  for (auto& v : img.rgb) v = u(rng);
  for (auto& v : img.alpha) v = u(rng);
  return img;
}

}  // namespace avatar::test
