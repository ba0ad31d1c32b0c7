#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "nsfpn/commands.hpp"
#include "nsfpn/gradsuite.hpp"
#include "nsfpn/lfp.hpp"
#include "nsfpn/model.hpp"
#include "nsfpn/wavelet.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace nsfpn;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& body, double time_limit_s = 0.0) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (time_limit_s > 0.0 && secs > time_limit_s) {
    o.pass = false;
    o.detail += " (over time limit " + std::to_string(time_limit_s) + " s)";
  }
  if (!o.pass) ++failures;
  std::printf("%s %2d %-28s %8.2fs  %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), secs, o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(4);
  ss << v;
  return ss.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor4 forward_constant(const std::function<Var(Tape&)>& f) {
  Tape t;
  return f(t).value();
}

Outcome wavelet_round_trip() {
  Rng rng(101);
  double worst_rt = 0.0;
  double worst_energy = 0.0;
  int cases = 0;
  for (int trial = 0; trial < 120; ++trial) {
    const int b = 1 + static_cast<int>(rng() % 2);
    const int c = 1 + static_cast<int>(rng() % 4);
    const int h = 2 * (1 + static_cast<int>(rng() % 16));
    const int w = 2 * (1 + static_cast<int>(rng() % 16));
    const double scale = std::pow(10.0, static_cast<int>(rng() % 7) - 3);
    const Tensor4 x = randn({b, c, h, w}, rng, scale);
    const wavelet::WaveletBands bands = wavelet::dwt2(x);
    const Tensor4 back = wavelet::idwt2(bands);
    double peak = 0.0;
    for (double v : x.vec()) peak = std::max(peak, std::abs(v));
    worst_rt = std::max(worst_rt, max_abs_diff(back, x) / peak);
    const double e = x.sum_squares();
    const double eb = bands.ll.sum_squares() + bands.lh.sum_squares() + bands.hl.sum_squares() + bands.hh.sum_squares();
    worst_energy = std::max(worst_energy, std::abs(eb - e) / e);
    ++cases;
  }
  // Odd sizes go through symmetric padding and are cropped back.
  for (int trial = 0; trial < 30; ++trial) {
    const int h = 1 + 2 * static_cast<int>(rng() % 10);
    const int w = 1 + static_cast<int>(rng() % 20);
    const Tensor4 x = randn({1, 2, h, w}, rng);
    const Tensor4 back = wavelet::idwt2(wavelet::dwt2(x, wavelet::OddPolicy::SymmetricPad));
    double peak = 0.0;
    for (double v : x.vec()) peak = std::max(peak, std::abs(v));
    worst_rt = std::max(worst_rt, max_abs_diff(back, x) / peak);
    ++cases;
  }
  return {worst_rt <= 1e-10 && worst_energy <= 1e-10, std::to_string(cases) + " cases, round trip " + fmt(worst_rt) +
                                                          ", energy " + fmt(worst_energy)};
}

Outcome gradient_suite() {
  const std::vector<GradRow> rows = run_gradient_suite(0, true);
  double worst = 0.0;
  std::string worst_op;
  std::string failed;
  bool saw_model = false;
  for (const GradRow& r : rows) {
    if (r.max_rel_error > worst || worst_op.empty()) {
      worst = r.max_rel_error;
      worst_op = r.op;
    }
    if (!r.pass() || !(r.max_rel_error < 1e-4) || r.checked == 0) failed += " " + r.op;
    saw_model = saw_model || r.op == "model";
  }
  if (!saw_model) failed += " (no full-model row)";
  return {failed.empty(), std::to_string(rows.size()) + " rows, worst " + fmt(worst) + " (" + worst_op + ")" +
                              (failed.empty() ? "" : ", failed:" + failed)};
}

Outcome gaussian_kernel_contract() {
  double worst_sum = 0.0;
  for (double sigma : {0.1, 1.0, 10.0, 1e6}) {
    for (int k : {3, 5, 7}) worst_sum = std::max(worst_sum, std::abs(ops::gaussian_kernel(sigma, k).sum() - 1.0));
  }
  double worst_flat = 0.0;
  for (int k : {3, 5, 7}) {
    const Tensor4 g = ops::gaussian_kernel(1e6, k);
    for (double v : g.vec()) worst_flat = std::max(worst_flat, std::abs(v - 1.0 / (k * k)));
  }
  return {worst_sum <= 1e-12 && worst_flat <= 1e-9, "sum error " + fmt(worst_sum) + ", flat error " + fmt(worst_flat)};
}

Outcome gating_boundaries() {
  Rng rng(104);
  bool identity = true;
  double worst_smooth = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor4 x = randn({2, 4, 8 + 2 * (trial % 3), 8}, rng);
    const wavelet::WaveletBands b = wavelet::dwt2(x);
    const double sigma = 0.3 + 0.2 * trial;
    for (double q : {0.0, 1.0}) {
      lfp::LfpConfig cfg;
      cfg.tau_quantile = q;
      Tape t;
      const Var kernel = t.constant(ops::gaussian_kernel(sigma, 3));
      const wavelet::BandVars out =
          lfp::gated_gaussian({t.constant(b.ll), t.constant(b.lh), t.constant(b.hl), t.constant(b.hh)}, kernel, cfg);
      const std::pair<const Tensor4*, Var> details[] = {{&b.lh, out.lh}, {&b.hl, out.hl}, {&b.hh, out.hh}};
      if (q == 0.0) {
        identity = identity && out.ll.value().vec() == b.ll.vec();
        for (const auto& [in, o] : details) identity = identity && o.value().vec() == in->vec();
      } else {
        for (const auto& [in, o] : details) {
          const Tensor4 smooth = ops::depthwise_conv_symmetric(t.constant(*in), kernel).value();
          worst_smooth = std::max(worst_smooth, max_abs_diff(o.value(), smooth));
        }
      }
    }
  }
  return {identity && worst_smooth <= 1e-12, std::string("q=0 ") + (identity ? "bit-identical" : "differs") +
                                                 ", q=1 error " + fmt(worst_smooth)};
}

Outcome spiral_geometry() {
  Rng rng(105);
  double worst_radius = 0.0;
  double worst_gap = 0.0;
  double worst_rot = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    sfs::SpiralConfig cfg;
    cfg.heads = 1 + static_cast<int>(rng() % 8);
    cfg.points = 1 + static_cast<int>(rng() % 12);
    cfg.l0 = 0.05 + 3.0 * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    cfg.dl = 0.05 + 2.0 * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const Tensor4 s = sfs::spiral_offsets(cfg);
    for (int h = 0; h < cfg.heads; ++h) {
      const double a = 2.0 * std::numbers::pi * h / cfg.heads;
      for (int k = 0; k < cfg.points; ++k) {
        const double dx = s(0, h, k, 0);
        const double dy = s(0, h, k, 1);
        worst_radius = std::max(worst_radius, std::abs(std::hypot(dx, dy) - (cfg.l0 + (k + 1) * cfg.dl)));
        if (k > 0) {
          double gap = std::remainder(std::atan2(dy, dx) - std::atan2(s(0, h, k - 1, 1), s(0, h, k - 1, 0)),
                                      2.0 * std::numbers::pi);
          if (gap < -1e-9) gap += 2.0 * std::numbers::pi;
          worst_gap = std::max(worst_gap, std::abs(gap - 2.0 * std::numbers::pi / cfg.points));
        }
        const double rx = std::cos(a) * s(0, 0, k, 0) - std::sin(a) * s(0, 0, k, 1);
        const double ry = std::sin(a) * s(0, 0, k, 0) + std::cos(a) * s(0, 0, k, 1);
        worst_rot = std::max({worst_rot, std::abs(rx - dx), std::abs(ry - dy)});
      }
    }
  }
  sfs::SpiralConfig table;
  table.heads = 2;
  table.points = 2;
  table.l0 = 1.0;
  table.dl = 1.0;
  const Tensor4 t = sfs::spiral_offsets(table);
  const double expected[2][2][2] = {{{2, 0}, {-3, 0}}, {{-2, 0}, {3, 0}}};
  double worst_table = 0.0;
  for (int h = 0; h < 2; ++h) {
    for (int k = 0; k < 2; ++k) {
      for (int d = 0; d < 2; ++d) worst_table = std::max(worst_table, std::abs(t(0, h, k, d) - expected[h][k][d]));
    }
  }
  // Radii are products and sums of the inputs, so "exact" allows a few ulps of the radius.
  const bool pass = worst_radius <= 1e-12 && worst_gap <= 1e-12 && worst_rot <= 1e-12 && worst_table <= 1e-12;
  return {pass, "radius " + fmt(worst_radius) + ", gap " + fmt(worst_gap) + ", rotation " + fmt(worst_rot) +
                    ", table " + fmt(worst_table)};
}

Outcome oracle_equivalence() {
  Rng rng(106);
  double worst_fuse = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore store;
    sfs::SpiralConfig sc;
    sc.heads = 2;
    sc.points = 1 + trial % 3;
    sc.l0 = 0.5;
    sc.dl = 0.5;
    sc.grid_stride = 1 + trial % 2;
    const sfs::SfsParams p = sfs::SfsParams::create(store, "sfs", 8, sc, rng);
    for (Param& q : store) q.value = randn(q.value.shape(), rng, 0.5);
    const int h = 4 + 2 * (trial % 2);
    const Tensor4 x = randn({1 + trial % 2, 8, h, 4}, rng);
    const Tensor4 y = randn({x.batch(), 8, h / 2, 2}, rng);
    const Tensor4 fast = forward_constant([&](Tape& t) { return sfs::sfs_fuse(t.constant(x), t.constant(y), p); });
    worst_fuse = std::max(worst_fuse, max_abs_diff(fast, oracle::sfs_fuse(x, y, p)));
  }
  double worst_mha = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    ParamStore store;
    const int heads = 1 + trial % 4;
    const int c = 4 * heads;
    const MhaParams p = MhaParams::create(store, "m", c, heads, rng);
    for (Param& q : store) q.value = randn(q.value.shape(), rng, 0.5);
    const Tensor4 q = randn({1 + trial % 2, 1, 3 + trial % 5, c}, rng);
    const Tensor4 kv = randn({q.batch(), 1, 2 + trial % 7, c}, rng);
    const Tensor4 fast = forward_constant([&](Tape& t) { return mha_cross(t.constant(q), t.constant(kv), p); });
    worst_mha = std::max(worst_mha, max_abs_diff(fast, oracle::mha(q, kv, oracle::projections_of(p), heads)));
  }
  int cc_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    irdata::BinaryMask m;
    m.height = 16;
    m.width = 16;
    m.data.resize(256);
    const std::uint64_t density = 10 + trial % 50;
    for (auto& v : m.data) v = rng() % 100 < density ? 1 : 0;
    const auto got = irdata::connected_components(m);
    const auto want = oracle::flood_fill(m);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i) same = got[i].pixels == want[i];
    if (!same) ++cc_mismatch;
  }
  const bool pass = worst_fuse <= 1e-9 && worst_mha <= 1e-9 && cc_mismatch == 0;
  return {pass, "sfs_fuse " + fmt(worst_fuse) + ", mha_cross " + fmt(worst_mha) + " (20 each), components " +
                    std::to_string(1000 - cc_mismatch) + "/1000"};
}

Outcome pyramid_contract() {
  Rng rng(107);
  std::string bad;
  int checked = 0;
  for (model::FpnMode mode : {model::FpnMode::Plain, model::FpnMode::Ns}) {
    model::NsFpnConfig cfg;
    cfg.mode = mode;
    const model::NsFpnModel m(cfg, 7);
    for (int size : {32, 64, 128}) {
      Tape t;
      const model::Pyramid y = m.nsfpn_forward(m.tiny_backbone(t.constant(randn({1, 1, size, size}, rng))));
      for (int i = 0; i < 4; ++i) {
        const int stride = 2 << i;
        if (y[i].shape() != Shape{1, 64, size / stride, size / stride}) {
          bad += " " + model::to_string(mode) + "@" + std::to_string(size) + "/" + std::to_string(stride);
        }
        ++checked;
      }
    }
  }
  return {bad.empty(), std::to_string(checked) + " levels" + (bad.empty() ? "" : ", wrong:" + bad)};
}

Outcome shared_offsets() {
  const model::NsFpnConfig cfg;
  const model::NsFpnModel m(cfg, 8);
  const std::size_t expected = 3u * cfg.spiral.heads * cfg.spiral.points * 2;
  std::size_t eps = 0;
  for (const auto& e : m.sfs_edges()) eps += e.eps->value.size();
  bool pass = eps == expected;
  std::string detail = "table " + std::to_string(eps) + " (expected " + std::to_string(expected) + ")";
  for (int size : {32, 64, 128}) {
    const model::ComplexityReport r = model::count_params_flops(m, size, size);
    pass = pass && r.sfs_offset_params == expected && r.sfs_offset_params < r.dat_offset_params;
    detail += ", " + std::to_string(size) + ": " + std::to_string(r.sfs_offset_params) + " vs DAT " +
              std::to_string(r.dat_offset_params);
  }
  return {pass, detail};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

double cell(const std::vector<std::vector<std::string>>& rows, std::size_t row, const std::string& name) {
  const auto& header = rows.at(0);
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::runtime_error("missing column " + name);
  return std::stod(rows.at(row).at(static_cast<std::size_t>(it - header.begin())));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Ten runs of this length fit the 30 minute budget on one core.
constexpr int kAblationEpochs = 25;

struct RunResult {
  double iou = 0.0;
  double fa_e6 = 0.0;
  fs::path dir;
};

RunResult train_run(const fs::path& work, model::FpnMode mode, std::uint64_t seed) {
  config::RunConfig cfg;
  cfg.seed = seed;
  cfg.model.mode = mode;
  cfg.train.epochs = kAblationEpochs;
  cfg.train.eval_every = kAblationEpochs;
  cfg.out = (work / (model::to_string(mode) + "_seed" + std::to_string(seed))).string();
  std::ostringstream out, err;
  if (commands::cmd_train(cfg, out, err) != 0) throw std::runtime_error("train failed: " + err.str());
  const auto rows = read_csv(fs::path(cfg.out) / "metrics.csv");
  return {cell(rows, rows.size() - 1, "iou"), cell(rows, rows.size() - 1, "fa_e6"), cfg.out};
}

const std::vector<std::uint64_t> kSeeds = {1, 2, 3, 4, 5};

void run_fast() {
  report(1, "wavelet round trip", wavelet_round_trip, 10.0);
  report(2, "gradient suite", gradient_suite, 120.0);
  report(3, "gaussian kernel contract", gaussian_kernel_contract);
  report(4, "gating boundary cases", gating_boundaries);
  report(5, "spiral geometry", spiral_geometry);
  report(6, "oracle equivalence", oracle_equivalence);
  report(7, "pyramid shape contract", pyramid_contract);
  report(8, "shared offset count", shared_offsets);
}

void run_training(const fs::path& work) {
  fs::create_directories(work);
  std::vector<RunResult> ns_runs;
  report(9, "ablation trend ns vs plain", [&]() -> Outcome {
    std::vector<double> ns_iou, ns_fa, plain_iou, plain_fa;
    for (std::uint64_t s : kSeeds) {
      const RunResult p = train_run(work, model::FpnMode::Plain, s);
      const RunResult n = train_run(work, model::FpnMode::Ns, s);
      std::printf("     seed %llu  plain iou %.4f fa %.3f  ns iou %.4f fa %.3f\n", static_cast<unsigned long long>(s),
                  p.iou, p.fa_e6, n.iou, n.fa_e6);
      std::fflush(stdout);
      plain_iou.push_back(p.iou);
      plain_fa.push_back(p.fa_e6);
      ns_iou.push_back(n.iou);
      ns_fa.push_back(n.fa_e6);
      ns_runs.push_back(n);
    }
    const double ni = median(ns_iou), nf = median(ns_fa), pi = median(plain_iou), pf = median(plain_fa);
    return {nf <= pf && ni >= pi - 0.02, "median ns iou " + fmt(ni) + " fa " + fmt(nf) + " | plain iou " + fmt(pi) +
                                             " fa " + fmt(pf)};
  }, 1800.0);

  report(10, "lowfreq false alarms", [&]() -> Outcome {
    if (ns_runs.size() != kSeeds.size()) return {false, "ns checkpoints unavailable"};
    std::vector<double> orig, low;
    for (const RunResult& r : ns_runs) {
      config::RunConfig cfg;
      cfg.out = (r.dir / "decompose").string();
      std::ostringstream out, err;
      const int rc = commands::cmd_decompose(cfg, (r.dir / "checkpoint.nsfpn").string(), out, err);
      if (rc != 0) return {false, "decompose failed: " + err.str()};
      const auto rows = read_csv(r.dir / "decompose" / "variants.csv");
      orig.push_back(cell(rows, 1, "fa_e6"));
      low.push_back(cell(rows, 2, "fa_e6"));
    }
    const double mo = median(orig), ml = median(low);
    return {ml <= mo, "median fa original " + fmt(mo) + ", lowfreq " + fmt(ml)};
  });

  report(11, "train determinism", [&]() -> Outcome {
    std::string csv[2];
    std::string ckpt[2];
    for (int i = 0; i < 2; ++i) {
      config::RunConfig cfg;
      cfg.seed = 11;
      cfg.train.epochs = 2;
      cfg.data.train_count = 40;
      cfg.data.test_count = 10;
      cfg.out = (work / ("determinism_" + std::to_string(i))).string();
      std::ostringstream out, err;
      if (commands::cmd_train(cfg, out, err) != 0) return {false, "train failed: " + err.str()};
      csv[i] = slurp(fs::path(cfg.out) / "metrics.csv");
      ckpt[i] = slurp(fs::path(cfg.out) / "checkpoint.nsfpn");
    }
    const bool pass = !csv[0].empty() && csv[0] == csv[1] && ckpt[0] == ckpt[1];
    return {pass, std::string("metrics.csv ") + (csv[0] == csv[1] ? "identical" : "differs") + ", checkpoint " +
                      (ckpt[0] == ckpt[1] ? "identical" : "differs")};
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string group = "all";
  std::string work = "acceptance_work";
  app.add_option("--group", group, "fast, training or all")->check(CLI::IsMember({"fast", "training", "all"}));
  app.add_option("--work", work, "scratch directory for training runs");
  CLI11_PARSE(app, argc, argv);
  commands::configure_allocator();

  if (group != "training") run_fast();
  if (group != "fast") run_training(work);
  return failures == 0 ? 0 : 1;
}
