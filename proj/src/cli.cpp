#include "halluscope/cli.hpp"

#include <algorithm>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "halluscope/error.hpp"
#include "halluscope/pipeline.hpp"
#include "halluscope/service.hpp"

namespace halluscope {

namespace {

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::kConfig: return 2;
    case ErrorKind::kMissingArtifact: return 3;
    case ErrorKind::kValidation: return 4;
    default: return 1;
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"halluscope: hallucination detection from activation captures"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config_path, s8_source, out, cache_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> window;
  std::string host = "127.0.0.1";
  int port = 8080;
  bool quiet = false;
  app.add_option("--config", config_path, "pipeline config (JSON); falls back to $HALLUSCOPE_CONFIG");
  app.add_option("--seed", seed, "override the config seed");
  app.add_option("--window", window, "fixed-window start layer (skips cross-validated selection)");
  bool include_ahi = false;
  app.add_flag("--include-ahi", include_ahi, "append AHI as a classifier feature (fit-stats)");
  app.add_option("--s8-source", s8_source, "metadata | constant | plugin:<command>");
  app.add_option("--out", out, "output path of the command's main artifact");
  app.add_flag("-q,--quiet", quiet, "warnings and errors only");

  auto* synth = app.add_subcommand("synth", "generate a synthetic cache");
  auto* extract = app.add_subcommand("extract", "cache -> raw signal matrix");
  extract->add_option("--cache", cache_dir, "cache directory");
  app.add_subcommand("fit-stats", "fit training-split statistics");
  app.add_subcommand("train", "fit Stacking and RagtStacking");
  app.add_subcommand("calibrate", "fit the calibration bundle on the validation split");
  auto* predict = app.add_subcommand("predict", "score a cache, writing JSON lines");
  predict->add_option("--cache", cache_dir, "cache directory");
  app.add_subcommand("evaluate", "test-split metrics and breakdowns");
  app.add_subcommand("analyze", "signal stability and depth maps");
  auto* serve = app.add_subcommand("serve", "HTTP detection service");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port");
  (void)synth;

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    auto c = pipeline::load_config(config_path ? std::optional<std::filesystem::path>(*config_path) : std::nullopt);
    if (seed) {
      c.seed = *seed;
      c.synth.mixture.seed = *seed;
      c.synth.plant.seed = *seed;
    }
    if (window) c.window_start = *window;
    if (include_ahi) c.include_ahi = true;
    if (s8_source) c.s8 = pipeline::S8Source::parse(*s8_source);
    if (out) {
      const std::filesystem::path p = *out;
      if (cmd == "synth") c.paths.cache = p;
      else if (cmd == "extract") c.paths.features = p;
      else if (cmd == "fit-stats") c.paths.stats = p;
      else if (cmd == "train") c.paths.models = p;
      else if (cmd == "calibrate") c.paths.bundle = p;
      else if (cmd == "predict") c.paths.predictions = p;
      else if (cmd == "evaluate" || cmd == "analyze") c.paths.reports = p;
    }
    if (cmd == "extract" && cache_dir) c.paths.cache = *cache_dir;
    c.validate();

    if (cmd == "synth") pipeline::cmd_synth(c);
    else if (cmd == "extract") pipeline::cmd_extract(c);
    else if (cmd == "fit-stats") pipeline::cmd_fit_stats(c);
    else if (cmd == "train") pipeline::cmd_train(c);
    else if (cmd == "calibrate") pipeline::cmd_calibrate(c);
    else if (cmd == "predict") pipeline::cmd_predict(c, cache_dir ? std::optional<std::filesystem::path>(*cache_dir) : std::nullopt);
    else if (cmd == "evaluate") pipeline::cmd_evaluate(c);
    else if (cmd == "analyze") pipeline::cmd_analyze(c);
    else if (cmd == "serve") {
      const service::DetectionService svc(pipeline::Detector::load(c));
      if (!service::serve(svc, host, port)) {
        std::cerr << "halluscope: error: cannot listen on " << host << ":" << port << "\n";
        return 1;
      }
    }
  } catch (const Error& e) {
    std::cerr << "halluscope " << cmd << ": error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "halluscope " << cmd << ": error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace halluscope
