#include "nsfpn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace nsfpn {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

namespace {

double evaluate(const ScalarGraph& fn) {
  Tape tape;
  Var out = fn(tape);
  return out.value().item();
}

}  // namespace

GradCheckResult grad_check(const ScalarGraph& fn, ParamStore& params,
                           const GradCheckOptions& options) {
  params.zero_grad();
  {
    Tape tape;
    Var out = fn(tape);
    if (out.value().size() != 1) {
      throw ShapeError("grad_check: graph output must be scalar, got " + out.shape().str());
    }
    tape.backward(out);
  }
  if (options.after_analytic) options.after_analytic();

  Rng rng(options.seed);
  GradCheckResult result;
  const double h = options.step;
  for (Param& p : params) {
    if (std::find(options.skip.begin(), options.skip.end(), p.name) != options.skip.end()) continue;
    std::vector<std::size_t> idx(p.value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (options.max_per_param != 0 && idx.size() > options.max_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(options.max_per_param);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double fp = evaluate(fn);
      p.value[i] = orig - h;
      const double fm = evaluate(fn);
      p.value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = p.grad[i];
      const bool below = std::max(std::abs(analytic), std::abs(numeric)) < options.noise_floor;
      const double err = below ? 0.0 : relative_error(analytic, numeric);
      ++result.checked;
      if (err > result.max_rel_error || result.worst_param.empty()) {
        if (err >= result.max_rel_error) {
          result.max_rel_error = err;
          result.worst_param = p.name;
          result.worst_index = i;
          result.analytic = analytic;
          result.numeric = numeric;
        }
      }
    }
  }
  return result;
}

}  // namespace nsfpn
