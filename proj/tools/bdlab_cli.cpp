// Command-line front end: each subcommand runs the experiment pipeline up to
// (and including) its stage, reusing hash-verified checkpoints under --out.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>

#include "bdlab/harness.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "runs/experiment";
  int64_t seed = -1;
  int threads = 0;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config JSON (defaults to the canonical desk config)");
  cmd->add_option("--out", args.out_dir, "experiment output directory");
  cmd->add_option("--seed", args.seed, "override the config seed");
  cmd->add_option("--threads", args.threads, "override the config thread count");
}

bdlab::ExperimentConfig resolve_config(const CommonArgs& args) {
  bdlab::ExperimentConfig cfg = args.config_path.empty()
                                    ? bdlab::canonical_desk_config()
                                    : bdlab::ExperimentConfig::load(args.config_path);
  if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
  if (args.threads > 0) cfg.threads = args.threads;
  cfg.validate();
  return cfg;
}

int run_stage(const CommonArgs& args, const std::string& stage) {
  const auto cfg = resolve_config(args);
  const auto report = bdlab::run_experiment(cfg, args.out_dir, stage);
  std::cout << "pipeline ok through stage '" << stage << "' in " << args.out_dir << "\n";
  if (!report.metrics.is_null()) {
    std::cout << "  benchmark accuracy: " << report.metrics["benchmark_accuracy"] << "\n"
              << "  attacked accuracy:  " << report.metrics["attacked_accuracy"] << "\n"
              << "  attack success:     " << report.metrics["attack_success_rate"] << "\n";
  }
  if (!report.mamf_attacked.is_null()) {
    std::cout << "  rho* attacked: " << report.mamf_attacked["rho_star"]
              << "  (pair " << report.mamf_attacked["argmax_source"] << "->"
              << report.mamf_attacked["argmax_target"] << ")\n"
              << "  rho* clean:    " << report.mamf_clean["rho_star"] << "\n"
              << "  decision:      "
              << (report.mamf_attacked["decision_attacked"].get<bool>() ? "attacked" : "clean")
              << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"perceptible-backdoor laboratory: attacks, MAMF detection, baselines"};
  app.require_subcommand(1);

  CommonArgs args;
  struct Sub {
    const char* name;
    const char* stage;
    const char* help;
  };
  const Sub subs[] = {
      {"synth", "dataset", "synthesize (or load) the dataset and write the train/test split"},
      {"train", "attacked", "train the benchmark and attacked models"},
      {"poison", "attack", "craft the poisoned training set and pattern"},
      {"detect", "mamf", "run MAMF detection on the attacked and clean models"},
      {"nc", "nc", "run the NC-style reverse-engineering baseline"},
      {"fp", "fp", "run the fine-pruning sweep"},
      {"blur", "blur", "run the blurring in-flight baseline"},
      {"robustness", "robustness", "noise/crop (and fixed-location) robustness suites"},
      {"report", "report", "assemble report.json and figure CSVs"},
      {"run", "report", "run the full pipeline"},
  };
  for (const auto& s : subs) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_common(cmd, args);
    cmd->callback([&args, stage = std::string(s.stage)]() {
      const int rc = run_stage(args, stage);
      if (rc != 0) throw CLI::RuntimeError(rc);
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const bdlab::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
