#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bdlab/autodiff.hpp"
#include "bdlab/dataset.hpp"
#include "bdlab/poison.hpp"
#include "bdlab/tensor.hpp"

namespace bdlab {

enum class LayerKind { Conv, Relu, MaxPool, Dense, Softmax };

struct LayerDesc {
  LayerKind kind = LayerKind::Relu;
  int units = 0;    // conv: output channels; dense: output units
  int kernel = 0;   // conv kernel size
  Padding pad = Padding::Same;
};

struct TrainHyper {
  float lr = 1e-3f;
  int batch = 32;
  int epochs = 30;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
  double final_test_accuracy = -1.0;  // filled by the caller once known
  double wall_seconds = 0.0;
};

class ClassifierModel {
 public:
  std::string arch_name;
  std::vector<LayerDesc> layers;
  int input_h = 0, input_w = 0, input_c = 0;
  int class_count = 0;
  std::vector<Tensor> weights;  // layer order: conv/dense contribute [W, b]

  // training metadata (JSON sidecar)
  uint64_t init_seed = 0;
  uint64_t train_seed = 0;
  TrainHyper hyper;
  std::string trained_on;
  double clean_test_accuracy = -1.0;

  // Fine-pruning support: multiplicative mask over the penultimate dense
  // activations; empty means no pruning. Not serialized (the weight file
  // stays identical to the unpruned model).
  std::vector<float> penult_mask;

  int penultimate_width() const;
  int64_t parameter_count() const;
};

// Appends the model's forward pass to an existing graph, consuming node
// `x` ([N,H,W,C]). With trainable=false the weights become frozen leaves.
struct ForwardHandles {
  int logits = -1;
  int probs = -1;
  int penult = -1;  // post-relu penultimate dense activations
  std::vector<int> weight_nodes;
};

ForwardHandles append_forward(Graph& g, const ClassifierModel& m, int x, bool trainable);

ClassifierModel build_cnn(const std::string& arch_name, int input_h, int input_w, int input_c,
                          int class_count, uint64_t seed);

TrainReport train(ClassifierModel& model, const LabeledDataset& train_set, const TrainHyper& hyper,
                  uint64_t seed);

// Posterior and argmax label; ties go to the smallest class index.
std::pair<std::vector<float>, int> predict(const ClassifierModel& model, const LabeledImage& image);

std::vector<int> predict_labels(const ClassifierModel& model, const LabeledDataset& ds);
std::vector<int> predict_labels_raw(const ClassifierModel& model,
                                    const std::vector<const float*>& images, int h, int w, int c);

double clean_accuracy(const ClassifierModel& model, const LabeledDataset& test_set);

double attack_success_rate(const ClassifierModel& model, const LabeledDataset& backdoor_test,
                           int target);

// Per-class rate of trigger-induced flips to the target; the target's own
// slot holds NaN.
std::vector<double> collateral_damage(const ClassifierModel& model, const LabeledDataset& test_set,
                                      const PerceptiblePattern& pattern, int target, uint64_t seed);

// Model file: magic "BDM1", architecture block, then little-endian f32
// weight payloads in layer order; training metadata in a ".json" sidecar.
void save_model(const ClassifierModel& model, const std::string& path);
ClassifierModel load_model(const std::string& path);

}  // namespace bdlab
