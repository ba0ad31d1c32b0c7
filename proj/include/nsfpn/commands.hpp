#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "nsfpn/config.hpp"

// Entry points behind the command-line tool. Each returns the process exit code:
// 0 success, 1 failed check or contract violation, 2 bad input, 3 non-finite training abort.
namespace nsfpn::commands {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  bool with_model = true;
  /// Test hook: corrupts the backward pass of the named primitive.
  std::string inject_fault;
  /// Also written to this file when non-empty.
  std::string csv_path;
};
/// CSV on `out`: op,max_rel_error,tolerance,checked,status
int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out, std::ostream& err);

/// Writes config.resolved.ini, metrics.csv and checkpoint.nsfpn into cfg.out.
int cmd_train(const config::RunConfig& cfg, std::ostream& out, std::ostream& err);

/// Writes eval_per_image.csv and eval_summary.csv into cfg.out and a table on `out`.
int cmd_eval(const config::RunConfig& cfg, const std::string& checkpoint, std::ostream& out, std::ostream& err);

/// Writes <image>_low.pgm, <image>_high.pgm and energy.csv into cfg.out; with a checkpoint also
/// variants.csv comparing original, low-frequency and high-frequency inputs.
int cmd_decompose(const config::RunConfig& cfg, const std::string& checkpoint, std::ostream& out,
                  std::ostream& err);

/// "h k dx dy" lines to `path`, or to `out` when path is empty or "-".
int cmd_spiral_dump(const sfs::SpiralConfig& cfg, const std::string& path, std::ostream& out, std::ostream& err);

/// Keeps freed tensor memory in the process heap; training reallocates the same large
/// buffers every step. No-op outside glibc.
void configure_allocator();

/// 16-bit raster codes of a decomposition: low = round(v * 65535) and high centred on 32768 at
/// half scale, with low adjusted so that low + 2 * (high - 32768) equals the original code.
struct DecompositionCodes {
  irdata::GrayImage original;
  irdata::GrayImage low;
  irdata::GrayImage high;
};
DecompositionCodes encode_decomposition(const Tensor4& image, const irdata::FreqParts& parts);

}  // namespace nsfpn::commands
