#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "bdlab/baselines.hpp"
#include "bdlab/dataset.hpp"
#include "bdlab/mamf.hpp"
#include "bdlab/model.hpp"
#include "bdlab/poison.hpp"

namespace bdlab {

struct ExperimentConfig {
  uint64_t seed = 101;
  int threads = 1;

  struct Dataset {
    int classes = 5;
    int height = 24, width = 24, channels = 3;
    int per_class = 600;
    double test_fraction = 1.0 / 6.0;
    double noise_sigma = 0.05;
    double ambiguity = 0.07;
    std::string load_path;  // when set, loads instead of synthesizing
  } dataset;

  struct Attack {
    std::string pattern = "dots";  // "dots", "blocks", or a pattern file path
    int pattern_h = 6, pattern_w = 6;
    std::vector<int> source_classes{0};
    int target_class = 1;
    int poison_per_source = 50;
    std::string placement = "random";  // or "fixed"
    int fixed_anchor_row = -1, fixed_anchor_col = -1;  // -1,-1 = bottom-left
  } attack;

  struct Model {
    std::string arch = "tiny";
    float lr = 1e-3f;
    int batch = 32;
    int epochs = 40;
  } model;

  struct Detection {
    bool enabled = true;
    // 0.125 keeps the smallest support at 3x3 on 24x24 inputs; supports
    // with no interior pixel cannot express any trigger a conv net with
    // zero padding responds to at the image corner
    double r_min = 0.125, r_max = 0.22;
    std::string anchor = "top_left";
    double pi = 0.7;
    float lr = 0.5f;
    int epochs = 100;
    int batch = 32;
    int n_per_class = 50;
    int max_width_count = 0;
    bool early_stop = true;
  } detection;

  struct Nc {
    bool enabled = true;
    std::vector<double> lambda_grid{0.05, 0.1, 0.5};
    double phi = 0.9;
    float lr = 0.05f;
    int epochs = 100;
    int batch = 32;
    bool include_clean_model = false;
  } nc;

  struct Fp {
    bool enabled = true;
    int stride = 1;
  } fp;

  struct Blur {
    bool enabled = true;
    std::string filter = "average";
    int size = 2;
  } blur;

  struct Robustness {
    bool enabled = true;
    std::vector<double> noise_sigma_sq{0.01, 0.25, 1.0};
    std::vector<double> crop_fractions{0.64, 0.36};
  } robustness;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
};

// The canonical desk-scale experiment shipped in configs/desk.json.
ExperimentConfig canonical_desk_config();

// Pipeline stage names, in execution order.
// dataset -> benchmark -> attack -> attacked -> metrics -> mamf ->
// nc -> fp -> blur -> robustness -> report
struct ExperimentReport {
  nlohmann::json config;
  nlohmann::json metrics;
  nlohmann::json mamf_attacked;
  nlohmann::json mamf_clean;
  nlohmann::json nc;
  nlohmann::json fp;
  nlohmann::json blur;
  nlohmann::json robustness;
  nlohmann::json timings;

  // full report including timings; `deterministic_json` drops them
  nlohmann::json to_json() const;
  nlohmann::json deterministic_json() const;
};

// Runs the pipeline up to and including `last_stage` ("report" = all),
// checkpointing each stage under out_dir and reusing hash-verified
// checkpoints on reruns.
ExperimentReport run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                const std::string& last_stage = "report");

void emit_figure_data(const ExperimentReport& report, const std::string& out_dir);

uint64_t fnv1a64_file(const std::string& path);
uint64_t fnv1a64_bytes(const void* data, size_t n);

}  // namespace bdlab
