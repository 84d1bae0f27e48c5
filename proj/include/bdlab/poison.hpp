#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bdlab/dataset.hpp"

namespace bdlab {

// Binary mask over the image plane, applied identically to all channels.
// For square/rectangular supports the ones form a contiguous block at
// (anchor_row, anchor_col); an arbitrary stencil (from a non-rectangular
// pattern) is folded into `bits`.
struct Mask {
  int height = 0, width = 0;            // image plane size
  int anchor_row = 0, anchor_col = 0;   // top-left of the support block
  int support_h = 0, support_w = 0;     // block size
  std::vector<uint8_t> bits;            // height*width, row-major, {0,1}

  int64_t ones() const {
    int64_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }
};

struct PerceptiblePattern {
  std::string name;
  int height = 0, width = 0, channels = 0;
  std::vector<float> pixels;            // [0,1], h*w*c
  std::vector<uint8_t> stencil;         // h*w; empty means all ones

  void validate() const;
};

// Solid high-contrast multi-color patch (2x2 palette blocks).
PerceptiblePattern make_builtin_pattern(int height, int width, int channels);

// The canonical desk-scale trigger: four saturated single-pixel dots
// centered in the patch (bullet-holes style, carried by the stencil).
// Its features survive cropping and stay visible to small estimation
// supports.
PerceptiblePattern make_dotted_pattern(int height, int width, int channels);

// Pattern container: the dataset format with K=0 sentinel and one record.
void save_pattern(const PerceptiblePattern& p, const std::string& path);
PerceptiblePattern load_pattern(const std::string& path);

enum class Placement { Random, Fixed };

struct AttackSpec {
  PerceptiblePattern pattern;
  std::vector<int> source_classes;
  int target_class = 0;
  int poison_count_per_source = 0;
  Placement placement = Placement::Random;
  int fixed_anchor_row = 0, fixed_anchor_col = 0;
  uint64_t seed = 0;

  void validate(const LabeledDataset& train) const;
};

// Ground truth of which items were poisoned; never visible to a detector.
struct PoisonRecord {
  std::vector<int64_t> indices;
  std::vector<std::pair<int, int>> anchors;
  std::vector<int> original_labels;
  int target_label = 0;

  std::string to_json() const;
  static PoisonRecord from_json(const std::string& text);
};

// Eq-style mask replacement: out = v where mask is 1, x elsewhere.
std::vector<float> embed_perceptible(const std::vector<float>& x, int h, int w, int c,
                                     const PerceptiblePattern& v, const Mask& m);

Mask place_mask(int pattern_h, int pattern_w, const std::vector<uint8_t>& stencil, int image_h,
                int image_w, Placement placement, int anchor_row, int anchor_col, uint64_t seed);

// Norm-bounded additive embedding with clipping to [0,1].
std::vector<float> embed_imperceptible(const std::vector<float>& x,
                                       const std::vector<float>& perturbation, double p_norm,
                                       double epsilon);

std::pair<LabeledDataset, PoisonRecord> craft_attack(const LabeledDataset& train,
                                                     const AttackSpec& spec);

// The zero-mean Gaussian field added by perturb_pattern_noise, exposed so
// its variance can be measured before clamping.
std::vector<float> gaussian_noise_field(size_t count, double sigma_sq, uint64_t seed);

PerceptiblePattern perturb_pattern_noise(const PerceptiblePattern& v, double sigma_sq,
                                         uint64_t seed);

// Central crop keeping sqrt(area_fraction) of each linear dimension
// (rounded to nearest, minimum 1).
PerceptiblePattern crop_pattern(const PerceptiblePattern& v, double area_fraction);

struct BackdoorVariant {
  enum class Kind { Exact, Noisy, Cropped, FixedAnchor, Shifted } kind = Kind::Exact;
  double sigma_sq = 0.0;      // Noisy
  double area_fraction = 1.0; // Cropped
  int anchor_row = 0, anchor_col = 0;  // FixedAnchor
  int shift_rows = 0, shift_cols = 0;  // Shifted, relative to spec's fixed anchor

  static BackdoorVariant exact() { return {}; }
  static BackdoorVariant noisy(double s2);
  static BackdoorVariant cropped(double f);
  static BackdoorVariant fixed_anchor(int r, int c);
  static BackdoorVariant shifted(int dr, int dc);
};

// Every source-class test image gets the (possibly perturbed) pattern;
// original labels are kept for bookkeeping.
LabeledDataset make_backdoor_test_set(const LabeledDataset& test, const AttackSpec& spec,
                                      const BackdoorVariant& variant);

}  // namespace bdlab
