#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "nsfpn/commands.hpp"

namespace {

nsfpn::config::RunConfig resolve(const std::string& config_path, std::optional<std::uint64_t> seed,
                                 const std::string& out) {
  nsfpn::config::RunConfig cfg = config_path.empty() ? nsfpn::config::RunConfig{} : nsfpn::config::load_config(config_path);
  if (seed) cfg.seed = *seed;
  if (!out.empty()) cfg.out = out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-suppression feature pyramid for infrared small targets"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  app.add_option("--config", config_path, "INI run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "overrides [run] seed");
  app.add_option("--out", out, "output directory (spiral-dump: output file)");

  nsfpn::commands::GradcheckOptions grad;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  gradcheck->add_flag("--with-model,!--no-with-model", grad.with_model, "include the full-network rows (default on)");
  gradcheck->add_option("--inject-fault", grad.inject_fault)->group("");

  auto* train = app.add_subcommand("train", "train a model and log per-epoch metrics");

  std::string checkpoint;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);

  std::string decompose_checkpoint;
  auto* decompose = app.add_subcommand("decompose", "split images into low and high frequency parts");
  decompose->add_option("--checkpoint", decompose_checkpoint, "also evaluate this checkpoint on each variant")
      ->check(CLI::ExistingFile);

  auto* spiral = app.add_subcommand("spiral-dump", "write the spiral offset table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  nsfpn::commands::configure_allocator();

  namespace cmd = nsfpn::commands;
  try {
    if (gradcheck->parsed()) {
      grad.seed = seed.value_or(0);
      grad.csv_path = out.empty() ? "" : out + "/gradcheck.csv";
      return cmd::cmd_gradcheck(grad, std::cout, std::cerr);
    }
    if (spiral->parsed()) {
      const nsfpn::config::RunConfig cfg = resolve(config_path, seed, "");
      return cmd::cmd_spiral_dump(cfg.model.spiral, out, std::cout, std::cerr);
    }
    const nsfpn::config::RunConfig cfg = resolve(config_path, seed, out);
    if (train->parsed()) return cmd::cmd_train(cfg, std::cout, std::cerr);
    if (eval->parsed()) return cmd::cmd_eval(cfg, checkpoint, std::cout, std::cerr);
    if (decompose->parsed()) return cmd::cmd_decompose(cfg, decompose_checkpoint, std::cout, std::cerr);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
