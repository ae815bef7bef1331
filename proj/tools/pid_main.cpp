// pid — physics-informed infrared image generation toolkit.
//
// Subcommands: data-gen, codec-train, tevnet-train, pid-train, sample,
// evaluate, decompose, run. Each takes --config <file> (flat key=value lines,
// "#" comments) plus any number of --set key=value overrides; overrides win.
// `run` reads the stage from the config itself, so a previously written
// config.resolved replays verbatim: pid run --config <dir>/config.resolved
//
// Exit codes: 0 ok, 2 config error, 3 dependency-order error, 4 missing
// artifact, 1 anything else. If PID_OUT_ROOT is set, relative out_dir values
// are placed under it.

#include <deque>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pid/commands.hpp"

namespace {

struct SubArgs {
  std::string name;
  std::string config_file;
  std::vector<std::string> overrides;
  CLI::App* sub = nullptr;
};

pid::cli::RunConfig build_config(const SubArgs& args) {
  pid::cli::RunConfig cfg;
  if (!args.config_file.empty()) cfg = pid::cli::config_from_file(args.config_file);
  for (const auto& kv : args.overrides) cfg.set_assignment(kv);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"physics-informed infrared image generation toolkit"};
  app.require_subcommand(1);

  const std::vector<std::pair<const char*, const char*>> names = {
      {"data-gen", "synthesize paired visible/infrared datasets"},
      {"codec-train", "train the latent autoencoder"},
      {"tevnet-train", "train the physical decomposition network"},
      {"pid-train", "train the conditioned diffusion model"},
      {"sample", "generate infrared images from visible inputs"},
      {"evaluate", "fidelity metrics, loss distributions, compute table"},
      {"decompose", "export decomposition component maps"},
      {"run", "run the stage named in the config"},
  };

  std::deque<SubArgs> subs;
  for (const auto& [name, help] : names) {
    auto& args = subs.emplace_back();
    args.name = name;
    args.sub = app.add_subcommand(name, help);
    args.sub->add_option("--config", args.config_file, "flat key=value config file");
    args.sub->add_option("--set", args.overrides, "override: key=value (repeatable)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // malformed command line is a config error
  }

  try {
    for (const auto& args : subs) {
      if (!args.sub->parsed()) continue;
      auto cfg = build_config(args);
      if (args.name == "run") {
        pid::cli::run_stage(cfg.require_string("stage"), cfg);
      } else {
        pid::cli::run_stage(args.name, cfg);
      }
      return 0;
    }
    std::cerr << "error: no subcommand selected\n";
    return 2;
  } catch (const pid::cli::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pid::cli::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 3;
  } catch (const pid::cli::MissingArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
