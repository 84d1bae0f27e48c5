#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "bdlab/dataset.hpp"
#include "bdlab/model.hpp"

namespace bdlab {

// ---- NC-style reverse engineering with MAD anomaly inference ----

struct NcConfig {
  std::vector<double> lambda_grid{0.05, 0.1, 0.5};
  double phi = 0.9;  // target group-misclassification level
  float lr = 0.05f;
  int epochs = 200;
  int batch = 32;
  uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

struct NcPerTarget {
  int target = -1;
  double lambda = 0.0;
  Tensor mask;     // [H,W], continuous in [0,1]
  Tensor pattern;  // [H,W,C]
  double mask_l1 = 0.0;
  double achieved_fraction = 0.0;
};

struct NcLambdaResult {
  double lambda = 0.0;
  std::vector<NcPerTarget> per_target;  // one per putative target class
  std::vector<double> anomaly_index;    // NaN where excluded
  std::vector<int> excluded_targets;    // did not reach phi
  std::vector<int> flagged_targets;     // index > 2 and L1 below median
  bool degenerate_mad = false;
  bool too_few_for_mad = false;
};

struct NcResult {
  std::vector<NcLambdaResult> per_lambda;
  bool decision_attacked = false;
  int inferred_target = -1;
  NcConfig config;
};

// Joint mask+pattern search toward class t over clean images from every
// other class; both re-parameterized through a sigmoid to stay in [0,1].
NcPerTarget nc_reverse_engineer(const ClassifierModel& model,
                                const std::vector<LabeledImage>& nontarget_images, int target,
                                double lambda, const NcConfig& cfg, uint64_t seed);

// index_i = |v_i - median| / (1.4826 * MAD); needs >= 3 values; errors when
// MAD is exactly zero.
std::vector<double> mad_anomaly_index(const std::vector<double>& values);

NcResult nc_detect(const ClassifierModel& model, const CleanDetectionSets& clean_sets,
                   const NcConfig& cfg);

nlohmann::json nc_to_json(const NcResult& r);

// ---- fine-pruning ----

std::vector<double> penult_mean_activations(const ClassifierModel& model,
                                            const LabeledDataset& clean_set);

// Zeroes (masks) the k penultimate neurons with the lowest mean activation
// over the clean set; ties break toward the lower neuron index.
ClassifierModel fp_prune(const ClassifierModel& model, const LabeledDataset& clean_set, int k);

struct PruneCurvePoint {
  int pruned = 0;
  double clean_accuracy = 0.0;
  double attack_success_rate = 0.0;
};

struct PruneCurve {
  std::vector<PruneCurvePoint> points;
};

PruneCurve fp_sweep(const ClassifierModel& model, const LabeledDataset& clean_test,
                    const LabeledDataset& backdoor_test, int target, int stride = 1);

nlohmann::json prune_curve_to_json(const PruneCurve& c);

// ---- blurring in-flight detector ----

enum class BlurFilter { Average, Median };

BlurFilter blur_filter_from_string(const std::string& s);

LabeledImage blur_image(const LabeledImage& image, int h, int w, int c, BlurFilter filter,
                        int size);

bool blur_detect(const ClassifierModel& model, const LabeledImage& image, BlurFilter filter,
                 int size);

struct BlurRow {
  int id = 0;
  int clean_label = 0;
  int pred = 0;
  int pred_blurred = 0;
  bool flagged = false;
  bool is_backdoor = false;
};

struct BlurEval {
  double fpr = 0.0;  // flagged fraction of clean test images
  double tpr = 0.0;  // flagged fraction of backdoor test images
  std::vector<BlurRow> rows;
};

BlurEval blur_eval(const ClassifierModel& model, const LabeledDataset& clean_test,
                   const LabeledDataset& backdoor_test, BlurFilter filter, int size);

void write_blur_csv(const std::string& path, const BlurEval& eval);

}  // namespace bdlab
