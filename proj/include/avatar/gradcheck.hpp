// Finite-difference verification of the analytic gradients on small random
// scenes: network layers, the rasterizer, and the full per-frame objective.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace avatar {

enum class GradcheckModule { all, tinynet, render, model };
GradcheckModule gradcheck_module_from_string(const std::string& s);

struct GradcheckConfig {
  int seeds = 20;
  std::uint64_t base_seed = 1;
  double tolerance = 1e-3;      // max relative error
  double min_magnitude = 1e-6;  // entries with both values below this are not compared
  double step = 1e-4;  // Richardson-extrapolated central differences at h and 2h
};

struct GradcheckStats {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // probes straddling a ReLU kink, clamp or cull boundary
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  std::string worst;  // description of the worst entry
};

struct GradcheckReport {
  std::vector<GradcheckStats> groups;
  bool passed() const;
  double max_rel_error() const;
  std::size_t checked() const;
};

/// Compares `analytic` with central differences of `f` around `params`.
/// `f` must read the parameters through the span it is given.
void compare_gradient(GradcheckStats& stats, const std::string& label, std::span<double> params,
                      std::span<const double> analytic, const std::function<double()>& f,
                      const GradcheckConfig& config);

GradcheckReport run_gradcheck(GradcheckModule module, const GradcheckConfig& config = {});

}  // namespace avatar
