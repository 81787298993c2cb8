// gradleak: gradient capture, reconstruction attack and architecture metric.
//
//   gradleak gradients --config exp.cfg [--out DIR] [--seed N]
//   gradleak attack    --config exp.cfg --grads FILE [--out DIR] [--label N]
//   gradleak metric    --config exp.cfg [--out DIR] [--seed N] [--upper-bound]
//   gradleak suite     [--config exp.cfg] [--out DIR] [--seed N] [--threads N]
//   gradleak synth     --out FILE [--count N] [--seed N]
//
// Exit codes: 0 success, 1 configuration or I/O error, 2 numerical failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "gradleak/experiment.hpp"

namespace {

struct Options {
  std::string config;
  std::string grads;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> label;
  std::optional<std::size_t> threads;
  bool upper_bound = false;
  std::size_t count = 10;
};

gradleak::config::ExperimentConfig load(const Options& o, bool config_required) {
  gradleak::config::ExperimentConfig cfg;
  if (!o.config.empty()) {
    cfg = gradleak::config::load_experiment_config(o.config);
  } else if (config_required) {
    throw gradleak::ConfigError("--config is required for this command");
  }
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.seed) cfg.seed = *o.seed;
  if (o.label) cfg.label = *o.label;
  if (o.threads) {
    if (*o.threads == 0) throw gradleak::ConfigError("--threads must be >= 1");
    cfg.threads = *o.threads;
  }
  if (o.upper_bound) cfg.upper_bound = true;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient inversion attack and rank-deficiency metric for small CNNs"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config file (key=value)");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "weight seed, overrides the model file");
  };

  auto* grads = app.add_subcommand("gradients", "run one forward/backward pass and write the weight gradients");
  add_common(grads);

  auto* atk = app.add_subcommand("attack", "reconstruct the input from a gradient file");
  add_common(atk);
  atk->add_option("--grads", o.grads, "gradient file written by 'gradients'")->required();
  atk->add_option("--label", o.label, "class label to use instead of inferring it");

  auto* metric = app.add_subcommand("metric", "rank-deficiency metric of the model");
  add_common(metric);
  metric->add_flag("--upper-bound", o.upper_bound, "shape-only bound, no probe image needed");

  auto* suite = app.add_subcommand("suite", "all CNN3 variants under both activation suites");
  add_common(suite);
  suite->add_option("--threads", o.threads, "worker threads");
  suite->add_option("--label", o.label, "class label to use instead of inferring it");

  auto* synth = app.add_subcommand("synth", "write a synthetic CIFAR-10 format batch");
  synth->add_option("--out", o.out, "output file")->required();
  synth->add_option("--count", o.count, "number of images");
  synth->add_option("--seed", o.seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    nlohmann::json result;
    if (grads->parsed()) {
      result = gradleak::experiment::cmd_gradients(load(o, true));
    } else if (atk->parsed()) {
      result = gradleak::experiment::cmd_attack(load(o, true), o.grads);
      result.erase("config");
    } else if (metric->parsed()) {
      result = gradleak::experiment::cmd_metric(load(o, true));
      result.erase("config");
    } else if (suite->parsed()) {
      const auto report = gradleak::experiment::cmd_suite(load(o, false));
      std::cout << report["table"].get<std::string>();
      return 0;
    } else if (synth->parsed()) {
      gradleak::synthetic::write_synthetic_cifar10(o.out, o.count, o.seed.value_or(0));
      std::cout << "wrote " << o.count << " images to " << o.out << "\n";
      return 0;
    }
    std::cout << result.dump(2) << "\n";
    return 0;
  } catch (const gradleak::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const gradleak::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
}
