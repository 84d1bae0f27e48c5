#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "bdlab/dataset.hpp"
#include "bdlab/model.hpp"
#include "bdlab/poison.hpp"

namespace bdlab {

enum class Corner { TopLeft, TopRight, BottomLeft, BottomRight };

Corner corner_from_string(const std::string& s);
std::string corner_to_string(Corner c);

struct DetectionConfig {
  double r_min = 0.08;
  double r_max = 0.22;
  Corner anchor = Corner::TopLeft;
  double pi = 0.7;
  float lr = 0.5f;
  int epochs = 100;
  int batch = 32;
  int max_width_count = 0;  // 0 = estimate every width in range
  bool early_stop = true;   // stop a problem once it reaches rho == 1
  uint64_t seed = 0;
  int threads = 1;

  void validate(int image_width) const;
};

// Integer widths in [ceil(r_min*W), floor(r_max*W)]; if more than
// max_width_count, an evenly spaced subsample keeping both endpoints.
std::vector<int> support_widths(int image_width, double r_min, double r_max, int max_width_count);

// w x w block of ones at the given corner, identical for all images.
Mask make_support_mask(int image_h, int image_w, int w, Corner anchor);

struct EstimationOpt {
  float lr = 0.5f;
  int epochs = 100;
  int batch = 32;
  bool early_stop = true;
};

struct PatternEstimate {
  Tensor v;  // [H,W,C]; zero outside the mask
  double objective_initial = 0.0;
  double objective_final = 0.0;
  int epochs_run = 0;
  double rho = -1.0;  // filled when the caller evaluates it
};

// Maximizes the mean target posterior over D_s images blended with v on the
// mask support (Adam ascent, box projection to [0,1] after each step).
// The model is never updated.
PatternEstimate estimate_pattern(const ClassifierModel& model,
                                 const std::vector<LabeledImage>& source_images, int target,
                                 const Mask& support, const EstimationOpt& opt, uint64_t seed);

// Fraction of D_s flipped to the target by v on the given support.
double mamf(const ClassifierModel& model, const std::vector<LabeledImage>& source_images,
            const Tensor& v_star, const Mask& support, int target);

struct MamfResult {
  int class_count = 0;
  std::vector<int> widths;
  // grids indexed (s*K + t); rho has one entry per width
  std::vector<std::vector<double>> rho;
  std::vector<double> rho_bar;
  double rho_star = 0.0;
  int argmax_source = -1;
  int argmax_target = -1;
  bool tie = false;
  bool decision_attacked = false;
  double pi_used = 0.0;
  bool small_clean_set_warning = false;
  std::vector<std::vector<double>> objective_initial;  // parallel to rho
  std::vector<std::vector<double>> objective_final;
  std::vector<std::vector<Tensor>> patterns;  // audit; not serialized to JSON

  double rho_at(int s, int t, size_t wi) const { return rho[idx(s, t)][wi]; }
  size_t idx(int s, int t) const { return static_cast<size_t>(s) * class_count + t; }
};

MamfResult scan(const ClassifierModel& model, const CleanDetectionSets& clean_sets,
                const DetectionConfig& cfg);

struct Decision {
  bool attacked = false;
  int source = -1;
  int target = -1;
};

Decision infer(const MamfResult& result, double pi);

// Smallest relative width at which at least `pair_fraction` of class pairs
// reach `rho_floor`; the optional adaptive choice of r_max.
double adaptive_r_max(const ClassifierModel& model, const CleanDetectionSets& clean_sets,
                      const DetectionConfig& cfg, double pair_fraction = 0.5,
                      double rho_floor = 0.4);

nlohmann::json mamf_to_json(const MamfResult& r);
MamfResult mamf_from_json(const nlohmann::json& j);

}  // namespace bdlab
