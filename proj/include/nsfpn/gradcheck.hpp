#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nsfpn/tape.hpp"

namespace nsfpn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Upper bound on elements probed per parameter; 0 probes every element.
  std::size_t max_per_param = 0;
  std::uint64_t seed = 0;
  /// Parameters left out of the comparison (their gradient is identically zero, so the
  /// relative error only measures round-off).
  std::vector<std::string> skip;
  /// Elements where both |analytic| and |numeric| fall below this count as agreeing.
  double noise_floor = 0.0;
  /// Called once between the analytic pass and the finite-difference passes.
  std::function<void()> after_analytic;
};

/// Builds a scalar from the parameters in `params` on a fresh tape.
using ScalarGraph = std::function<Var(Tape&)>;

/// Compares tape gradients of `fn` against central differences
/// (f(x + h) - f(x - h)) / 2h, elementwise, with relative error
/// |a - n| / (|a| + |n| + 1e-12). Parameters are perturbed in place and restored.
GradCheckResult grad_check(const ScalarGraph& fn, ParamStore& params,
                           const GradCheckOptions& options = {});

/// Relative error used by grad_check.
double relative_error(double analytic, double numeric);

}  // namespace nsfpn
