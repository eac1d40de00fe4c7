// adshard command line. Flags override values read from --config.

#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "adshard/cli.hpp"
#include "adshard/config.hpp"
#include "adshard/errors.hpp"

int main(int argc, char** argv) {
  CLI::App app{"adjoint-sharded SSM gradients: training, checks and cost reports"};
  std::string config_path;
  app.add_option("--config", config_path, "key = value config file");

  // every flag maps to one config key; only flags actually given are applied
  std::map<std::string, std::string> flags;
  const std::pair<const char*, const char*> keys[] = {
      {"mode", "train, gradcheck, distcheck, cost or curves"},
      {"T", "sequence length"},
      {"Tbar", "truncation length (default T)"},
      {"K", "layers"},
      {"N", "state size"},
      {"P", "embedding size"},
      {"V", "vocabulary size"},
      {"bs", "batch size (cost model only)"},
      {"upsilon", "device counts, comma separated"},
      {"workers", "worker threads per device"},
      {"seed", "random seed"},
      {"lr", "SGD learning rate"},
      {"steps", "SGD steps"},
      {"sequences", "synthetic training sequences"},
      {"deterministic", "on or off"},
      {"out", "output directory"},
      {"variant", "unstructured, diagonal or scalar"},
      {"activation", "identity, sigmoid or tanh"},
      {"loss", "cross_entropy or mse"},
      {"preset", "gradcheck preset: k1, k3 or saturation"},
      {"gradient", "train gradient: adjoint, tape-detached or tape-full"},
      {"instances", "instances per device for the speedup model"},
      {"curve_lengths", "context lengths for curves, comma separated"},
      {"tape_limit", "tape scalar limit for curves"},
      {"init_scale", "initialization scale"},
      {"h0", "initial state policy (zero)"},
  };
  for (const auto& [key, help] : keys) app.add_option(std::string("--") + key, flags[key], help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    adshard::RunConfig cfg;
    if (!config_path.empty()) adshard::load_config_file(cfg, config_path);
    for (const auto& [key, help] : keys)
      if (app.count(std::string("--") + key) > 0) adshard::apply_setting(cfg, key, flags[key]);
    return adshard::run(cfg, std::cout);
  } catch (const adshard::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
