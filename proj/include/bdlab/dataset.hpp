#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bdlab/errors.hpp"

namespace bdlab {

class ClassifierModel;

// One image: H*W*C pixels, row-major with channels innermost, values in [0,1].
struct LabeledImage {
  std::vector<float> pixels;
  int label = 0;
};

struct LabeledDataset {
  std::string name;
  int class_count = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<LabeledImage> images;

  int64_t pixels_per_image() const {
    return static_cast<int64_t>(height) * width * channels;
  }
  void validate() const;
};

struct SynthSpec {
  int class_count = 5;
  int height = 24;
  int width = 24;
  int channels = 3;
  int per_class_count = 500;
  double noise_sigma = 0.05;
  // fraction of images drawn from the next class's shape family; gives the
  // corpus an irreducible confusion floor so trained models land in the
  // low-to-mid 90s instead of being perfectly confident
  double ambiguity = 0.07;
};

// Deterministic class-conditional geometric textures (disk, bar, cross,
// checker, gradient, ...). Pixels are quantized to the 1/255 grid so the
// container round-trips bit-exactly.
LabeledDataset synth_dataset(const SynthSpec& spec, uint64_t seed);

// Container: magic "BDL1", u32 K,H,W,C,N (little-endian), then N records of
// (u16 label, H*W*C bytes). Bytes scale to [0,1] by /255 on load.
void save_dataset(const LabeledDataset& ds, const std::string& path);
LabeledDataset load_dataset(const std::string& path);

// Stratified split; same seed gives the same split; union equals the input.
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double test_fraction,
                                                uint64_t seed);

// Defender's clean per-class sets D_s: up to n_per_class images of class s
// that the model under inspection classifies as s, sampled without
// replacement.
struct CleanDetectionSets {
  int requested_per_class = 0;
  int height = 0, width = 0, channels = 0;
  int class_count = 0;
  std::vector<std::vector<LabeledImage>> per_class;

  std::vector<int> actual_counts() const {
    std::vector<int> c;
    c.reserve(per_class.size());
    for (const auto& v : per_class) c.push_back(static_cast<int>(v.size()));
    return c;
  }
};

CleanDetectionSets clean_detection_set(const ClassifierModel& model, const LabeledDataset& ds,
                                       int n_per_class, uint64_t seed);

}  // namespace bdlab
