#include <iostream>
#include <optional>
#include <string>
#include <utility>

#include <CLI11.hpp>

#include "ccl/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Contrastive continual learning toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ccl::kVersion);

  std::string config_path, out, grid;
  std::optional<std::uint64_t> seed;
  const std::pair<const char*, const char*> commands[] = {
      {"verify", "numerical property checks on the bound machinery"},
      {"train", "run a task sequence, write checkpoints and trace"},
      {"probe", "linear probe on a saved checkpoint"},
      {"bounds", "upper bound vs lambda curve and turning point"},
      {"sweep", "grid of training runs, mean/std accuracy table"},
  };
  for (const auto& [name, desc] : commands) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON experiment config");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--grid", grid, "bounds: lo:hi:n, sweep: key=v1,v2;key2=...");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : ccl::kExitConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  ccl::json cfg;
  try {
    const ccl::json user = config_path.empty() ? ccl::json::object() : ccl::read_json_file(config_path);
    cfg = ccl::resolve_config(user);
    if (!out.empty()) cfg["output"] = out;
    if (seed) cfg["seed"] = *seed;
    if (!grid.empty()) {
      if (command == "bounds") cfg["bounds"]["grid"] = grid;
      else if (command == "sweep") cfg["sweep"]["vary"] = ccl::parse_vary_spec(grid);
      else throw ccl::ConfigError("--grid only applies to bounds and sweep");
    }
  } catch (const ccl::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return ccl::kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return ccl::kExitConfig;
  }
  return ccl::run_command(command, cfg, std::cerr);
}
