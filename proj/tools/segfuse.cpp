// segfuse <command> --config <path> [--workers N] [--seed S] [--window K]
//
// Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "segfuse/pipeline.hpp"

namespace pl = segfuse::pipeline;

int main(int argc, char** argv) {
  CLI::App app{"Multi-dataset RGB-D segmentation toolkit"};
  app.require_subcommand(1);

  std::string config;
  pl::Options opts;
  const std::map<std::string, std::string> help{
      {"harmonize", "merge class sets into one taxonomy and relabel label maps"},
      {"depth-from-cloud", "project point clouds and densify them into depth PNGs"},
      {"resize", "resize RGB, depth and labels under the configured policy"},
      {"evaluate", "per-class IoU and mIoU of predictions against relabeled ground truth"},
      {"train-toy", "train network variants on synthetic RGB-D scenes"},
      {"report", "compare finished evaluation runs side by side"}};
  for (const auto& name : pl::command_names()) {
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("--config", config, "pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--workers", opts.workers, "worker threads for per-sample work")->check(CLI::PositiveNumber);
    sub->add_option("--seed", opts.seed, "override the training seed");
    sub->add_option("--window", opts.window, "densification window (odd)")->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const pl::PipelineConfig cfg = pl::load_config(config);
    return pl::run_command(command, cfg, opts, std::cout, std::cerr);
  } catch (const segfuse::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const segfuse::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    // DataError and anything raised while reading or writing files.
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
