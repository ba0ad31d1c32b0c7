#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nsfpn/gradcheck.hpp"

namespace nsfpn {

struct GradCase {
  std::string op;
  double tolerance = 1e-4;
  /// Builds fresh random inputs from `seed` and runs grad_check on them.
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

/// One case per differentiable primitive plus the composite modules; `with_model` adds the
/// full-network rows (tiny backbone + pyramid + head), which take a few seconds each.
std::vector<GradCase> gradient_cases(bool with_model = true);

struct GradRow {
  std::string op;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  bool pass() const { return max_rel_error < tolerance; }
};

std::vector<GradRow> run_gradient_suite(std::uint64_t seed, bool with_model = true);

}  // namespace nsfpn
