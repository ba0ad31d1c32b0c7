#include "nsfpn/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <ostream>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "nsfpn/gradsuite.hpp"
#include "nsfpn/wavelet.hpp"

namespace nsfpn::commands {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  return f;
}

const char* kMetricsHeader =
    "epoch,train_loss,evaluated,iou,pd,fa_e6,gt_targets,matched,false_regions,false_pixels,total_pixels";

void write_metric_fields(std::ostream& os, const irdata::SegMetrics& m) {
  os << num(m.iou) << ',' << num(m.pd) << ',' << num(m.fa * 1e6) << ',' << m.gt_targets << ',' << m.matched << ','
     << m.false_regions << ',' << m.false_pixels << ',' << m.total_pixels;
}

void print_table(std::ostream& out, const std::vector<std::pair<std::string, irdata::SegMetrics>>& rows) {
  out << std::left << std::setw(12) << "set" << std::right << std::setw(10) << "IoU(%)" << std::setw(10) << "Pd(%)"
      << std::setw(12) << "Fa(1e-6)" << '\n';
  for (const auto& [name, m] : rows) {
    out << std::left << std::setw(12) << name << std::right << std::fixed << std::setprecision(2) << std::setw(10)
        << 100.0 * m.iou << std::setw(10) << 100.0 * m.pd << std::setw(12) << 1e6 * m.fa << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

// Builds the model described by the checkpoint (or by an explicit config section) and loads it.
std::unique_ptr<model::NsFpnModel> restore(const config::RunConfig& cfg, const std::string& checkpoint) {
  const model::Checkpoint ckpt = model::read_checkpoint(checkpoint);
  auto net = std::make_unique<model::NsFpnModel>(cfg.model_explicit ? cfg.model : ckpt.config, 0);
  model::load_parameters(*net, ckpt);
  return net;
}

}  // namespace

int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out, std::ostream& err) {
  debug::set_corrupted_backward(opt.inject_fault);
  std::ostringstream csv;
  csv << "op,max_rel_error,tolerance,checked,status\n";
  std::vector<std::string> failed;
  for (const GradCase& c : gradient_cases(opt.with_model)) {
    GradRow row{c.op, 0.0, c.tolerance, 0};
    try {
      const GradCheckResult r = c.run(opt.seed);
      row.max_rel_error = r.max_rel_error;
      row.checked = r.checked;
    } catch (const std::exception& e) {
      err << "gradcheck: " << c.op << ": " << e.what() << '\n';
      row.max_rel_error = std::numeric_limits<double>::infinity();
    }
    csv << row.op << ',' << num(row.max_rel_error) << ',' << num(row.tolerance) << ',' << row.checked << ','
        << (row.pass() ? "ok" : "FAIL") << '\n';
    if (!row.pass()) failed.push_back(row.op);
  }
  debug::set_corrupted_backward("");
  out << csv.str();
  if (!opt.csv_path.empty()) {
    if (const fs::path parent = fs::path(opt.csv_path).parent_path(); !parent.empty()) fs::create_directories(parent);
    open_out(opt.csv_path) << csv.str();
  }
  if (!failed.empty()) {
    err << "gradcheck: tolerance exceeded for";
    for (const std::string& op : failed) err << ' ' << op;
    err << '\n';
    return 1;
  }
  return 0;
}

int cmd_train(const config::RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const fs::path dir(cfg.out);
  fs::create_directories(dir);
  open_out(dir / "config.resolved.ini") << config::to_ini(cfg);

  const irdata::Dataset train_set = config::load_split(cfg, "train");
  const irdata::Dataset test_set = config::load_split(cfg, "test");
  if (train_set.empty()) {
    err << "train: training set is empty\n";
    return 2;
  }
  model::NsFpnModel net(cfg.model, cfg.seed);
  train::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;

  std::ofstream csv = open_out(dir / "metrics.csv");
  csv << kMetricsHeader << '\n';
  csv.flush();
  try {
    train::fit(net, train_set, test_set, tc, [&](const train::EpochLog& log) {
      csv << log.epoch << ',' << num(log.train_loss) << ',' << (log.evaluated ? 1 : 0) << ',';
      write_metric_fields(csv, log.test);
      csv << '\n';
      csv.flush();
      out << "epoch " << log.epoch << " loss " << log.train_loss;
      if (log.evaluated) out << " iou " << log.test.iou << " pd " << log.test.pd << " fa_e6 " << 1e6 * log.test.fa;
      out << std::endl;
    });
  } catch (const NonFiniteError& e) {
    err << "train: aborted: " << e.what() << '\n';
    return 3;
  }
  model::save_checkpoint(net, (dir / "checkpoint.nsfpn").string(),
                         {{"seed", std::to_string(cfg.seed)}, {"epochs", std::to_string(cfg.train.epochs)}});
  return 0;
}

int cmd_eval(const config::RunConfig& cfg, const std::string& checkpoint, std::ostream& out, std::ostream& err) {
  std::unique_ptr<model::NsFpnModel> net;
  try {
    net = restore(cfg, checkpoint);
  } catch (const ShapeError& e) {
    err << "eval: checkpoint does not match the model configuration: " << e.what() << '\n';
    return 1;
  }
  const irdata::Dataset data = config::load_split(cfg, cfg.eval_split);
  if (data.empty()) {
    err << "eval: dataset is empty\n";
    return 1;
  }
  const train::EvalResult r = train::evaluate(*net, data, cfg.train.eval);

  const fs::path dir(cfg.out);
  fs::create_directories(dir);
  std::ofstream per = open_out(dir / "eval_per_image.csv");
  per << "image,iou,pd,fa_e6,gt_targets,matched,false_regions,false_pixels,total_pixels\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    per << data[i].name << ',';
    write_metric_fields(per, r.per_image[i]);
    per << '\n';
  }
  std::ofstream sum = open_out(dir / "eval_summary.csv");
  sum << "images,iou,pd,fa_e6,gt_targets,matched,false_regions,false_pixels,total_pixels\n";
  sum << data.size() << ',';
  write_metric_fields(sum, r.summary);
  sum << '\n';
  print_table(out, {{cfg.eval_split, r.summary}});
  return 0;
}

void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

DecompositionCodes encode_decomposition(const Tensor4& image, const irdata::FreqParts& parts) {
  DecompositionCodes c;
  c.original = irdata::tensor_to_gray(image, 65535);
  c.high = c.original;
  c.low = c.original;
  const double* h = parts.high.plane(0, 0);
  for (std::size_t i = 0; i < c.original.pixels.size(); ++i) {
    const long hc = std::clamp(std::lround(h[i] / 2.0 * 65535.0) + 32768L, 0L, 65535L);
    const long lc = std::clamp(static_cast<long>(c.original.pixels[i]) - 2 * (hc - 32768L), 0L, 65535L);
    c.high.pixels[i] = static_cast<std::uint16_t>(hc);
    c.low.pixels[i] = static_cast<std::uint16_t>(lc);
  }
  return c;
}

int cmd_decompose(const config::RunConfig& cfg, const std::string& checkpoint, std::ostream& out,
                  std::ostream& err) {
  // Images are loaded one by one so that an unreadable file only skips itself.
  irdata::Dataset data;
  std::size_t skipped = 0;
  if (cfg.data.source == config::DataSource::Manifest) {
    const std::string& manifest = cfg.eval_split == "train" ? cfg.data.train_manifest : cfg.data.test_manifest;
    for (const auto& [image_path, mask_path] : irdata::read_manifest(manifest)) {
      try {
        irdata::Sample s;
        s.name = fs::path(image_path).stem().string();
        s.image = irdata::gray_to_tensor(irdata::read_pgm(image_path));
        s.mask = irdata::mask_to_tensor(irdata::read_mask(mask_path));
        data.push_back(std::move(s));
      } catch (const std::exception& e) {
        err << "decompose: skipping " << image_path << ": " << e.what() << '\n';
        ++skipped;
      }
    }
  } else {
    data = config::load_split(cfg, cfg.eval_split);
  }
  if (data.empty()) {
    err << "decompose: no readable images\n";
    return 1;
  }

  const fs::path dir(cfg.out);
  fs::create_directories(dir);
  std::ofstream energy = open_out(dir / "energy.csv");
  energy << "image,original_detail_energy,lowfreq_detail_energy,highfreq_detail_energy,original_energy,"
            "lowfreq_energy,highfreq_energy\n";
  irdata::Dataset low_set, high_set;
  for (const irdata::Sample& s : data) {
    const irdata::FreqParts parts = irdata::freq_decompose_image(s.image);
    const DecompositionCodes codes = encode_decomposition(s.image, parts);
    irdata::write_pgm((dir / (s.name + "_low.pgm")).string(), codes.low);
    irdata::write_pgm((dir / (s.name + "_high.pgm")).string(), codes.high);
    const auto bands = [](const Tensor4& t) { return wavelet::dwt2(t, wavelet::OddPolicy::SymmetricPad); };
    const wavelet::WaveletBands bo = bands(s.image), bl = bands(parts.low), bh = bands(parts.high);
    energy << s.name << ',' << num(bo.detail_energy()) << ',' << num(bl.detail_energy()) << ','
           << num(bh.detail_energy()) << ',' << num(s.image.sum_squares()) << ',' << num(parts.low.sum_squares())
           << ',' << num(parts.high.sum_squares()) << '\n';
    low_set.push_back({s.name, parts.low, s.mask});
    high_set.push_back({s.name, parts.high, s.mask});
  }

  if (!checkpoint.empty()) {
    std::unique_ptr<model::NsFpnModel> net;
    try {
      net = restore(cfg, checkpoint);
    } catch (const ShapeError& e) {
      err << "decompose: checkpoint does not match the model configuration: " << e.what() << '\n';
      return 1;
    }
    const std::vector<std::pair<std::string, irdata::SegMetrics>> rows = {
        {"original", train::evaluate(*net, data, cfg.train.eval).summary},
        {"lowfreq", train::evaluate(*net, low_set, cfg.train.eval).summary},
        {"highfreq", train::evaluate(*net, high_set, cfg.train.eval).summary}};
    std::ofstream variants = open_out(dir / "variants.csv");
    variants << "variant,iou,pd,fa_e6,gt_targets,matched,false_regions,false_pixels,total_pixels\n";
    for (const auto& [name, m] : rows) {
      variants << name << ',';
      write_metric_fields(variants, m);
      variants << '\n';
    }
    print_table(out, rows);
  }
  out << "decomposed " << data.size() << " images, skipped " << skipped << '\n';
  return skipped == 0 ? 0 : 1;
}

int cmd_spiral_dump(const sfs::SpiralConfig& cfg, const std::string& path, std::ostream& out, std::ostream& err) {
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    err << "spiral-dump: " << e.what() << '\n';
    return 2;
  }
  if (path.empty() || path == "-") {
    sfs::write_spiral_dump(out, cfg);
    return 0;
  }
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream f = open_out(path);
  sfs::write_spiral_dump(f, cfg);
  return f ? 0 : 1;
}

}  // namespace nsfpn::commands
