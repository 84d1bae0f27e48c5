#include "bdlab/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include <json.hpp>

#include "bdlab/adam.hpp"
#include "bdlab/binio.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

namespace {

constexpr int kPredictChunk = 256;

int last_dense_index(const std::vector<LayerDesc>& layers) {
  int last = -1;
  for (size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind == LayerKind::Dense) last = static_cast<int>(i);
  return last;
}

Tensor he_uniform(std::vector<int> shape, int64_t fan_in, uint64_t seed) {
  Tensor t(std::move(shape));
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
  auto rng = make_rng(seed);
  std::uniform_real_distribution<float> d(-limit, limit);
  for (auto& v : t.data) v = d(rng);
  return t;
}

}  // namespace

int ClassifierModel::penultimate_width() const {
  const int last = last_dense_index(layers);
  int prev = -1;
  for (int i = 0; i < last; ++i)
    if (layers[static_cast<size_t>(i)].kind == LayerKind::Dense) prev = i;
  if (prev < 0) throw ValidationError("model has no penultimate dense layer");
  return layers[static_cast<size_t>(prev)].units;
}

int64_t ClassifierModel::parameter_count() const {
  int64_t n = 0;
  for (const auto& w : weights) n += w.numel();
  return n;
}

ForwardHandles append_forward(Graph& g, const ClassifierModel& m, int x, bool trainable) {
  ForwardHandles h;
  const int last_dense = last_dense_index(m.layers);
  int cur = x;
  size_t wi = 0;
  int prev_dense_node = -1;
  for (size_t li = 0; li < m.layers.size(); ++li) {
    const auto& ld = m.layers[li];
    switch (ld.kind) {
      case LayerKind::Conv: {
        const std::string base = "L" + std::to_string(li);
        if (m.weights.size() < wi + 2)
          throw ValidationError("model weights missing for layer " + std::to_string(li));
        int wn = trainable ? g.param(base + ".w", m.weights[wi]) : g.frozen(base + ".w", m.weights[wi]);
        int bn = trainable ? g.param(base + ".b", m.weights[wi + 1])
                           : g.frozen(base + ".b", m.weights[wi + 1]);
        h.weight_nodes.push_back(wn);
        h.weight_nodes.push_back(bn);
        wi += 2;
        cur = g.conv2d(cur, wn, bn, ld.pad, base + ".conv");
        break;
      }
      case LayerKind::Dense: {
        const std::string base = "L" + std::to_string(li);
        if (m.weights.size() < wi + 2)
          throw ValidationError("model weights missing for layer " + std::to_string(li));
        int wn = trainable ? g.param(base + ".w", m.weights[wi]) : g.frozen(base + ".w", m.weights[wi]);
        int bn = trainable ? g.param(base + ".b", m.weights[wi + 1])
                           : g.frozen(base + ".b", m.weights[wi + 1]);
        h.weight_nodes.push_back(wn);
        h.weight_nodes.push_back(bn);
        wi += 2;
        cur = g.dense(cur, wn, bn, base + ".dense");
        prev_dense_node = static_cast<int>(li);
        break;
      }
      case LayerKind::Relu: {
        cur = g.relu(cur);
        // the relu after a hidden dense is the penultimate activation;
        // fine-pruning masks it
        if (prev_dense_node >= 0 && prev_dense_node != last_dense) {
          h.penult = cur;
          if (!m.penult_mask.empty()) {
            Tensor mask({static_cast<int>(m.penult_mask.size())});
            mask.data = m.penult_mask;
            cur = g.row_scale(cur, g.frozen("penult_mask", mask));
          }
        }
        prev_dense_node = -1;
        break;
      }
      case LayerKind::MaxPool:
        cur = g.max_pool2(cur);
        prev_dense_node = -1;
        break;
      case LayerKind::Softmax:
        h.logits = cur;
        cur = g.softmax(cur);
        h.probs = cur;
        break;
    }
  }
  if (h.probs < 0) throw ValidationError("model architecture lacks a softmax head");
  return h;
}

ClassifierModel build_cnn(const std::string& arch_name, int input_h, int input_w, int input_c,
                          int class_count, uint64_t seed) {
  ClassifierModel m;
  m.arch_name = arch_name;
  m.input_h = input_h;
  m.input_w = input_w;
  m.input_c = input_c;
  m.class_count = class_count;
  m.init_seed = seed;

  auto conv = [](int ch) { return LayerDesc{LayerKind::Conv, ch, 3, Padding::Same}; };
  auto dense = [](int units) { return LayerDesc{LayerKind::Dense, units, 0, Padding::Same}; };
  const LayerDesc relu{LayerKind::Relu, 0, 0, Padding::Same};
  const LayerDesc pool{LayerKind::MaxPool, 0, 0, Padding::Same};
  const LayerDesc softmax{LayerKind::Softmax, 0, 0, Padding::Same};

  if (arch_name == "tiny") {
    m.layers = {conv(8), relu, pool, conv(16), relu, pool, dense(64), relu, dense(class_count), softmax};
  } else if (arch_name == "small") {
    m.layers = {conv(8),  relu, pool, conv(16), relu, pool, conv(32), relu, pool,
                dense(64), relu, dense(class_count), softmax};
  } else {
    throw ValidationError("unknown architecture '" + arch_name + "'");
  }

  int h = input_h, w = input_w, c = input_c;
  int li = 0;
  for (const auto& ld : m.layers) {
    switch (ld.kind) {
      case LayerKind::Conv: {
        const int64_t fan_in = static_cast<int64_t>(ld.kernel) * ld.kernel * c;
        m.weights.push_back(he_uniform({ld.kernel, ld.kernel, c, ld.units}, fan_in,
                                       derive_seed(seed, 0x1217, static_cast<uint64_t>(li), 0)));
        m.weights.push_back(Tensor({ld.units}, 0.0f));
        c = ld.units;
        if (ld.pad == Padding::Valid) {
          h -= ld.kernel - 1;
          w -= ld.kernel - 1;
        }
        break;
      }
      case LayerKind::MaxPool:
        h /= 2;
        w /= 2;
        break;
      case LayerKind::Dense: {
        const int64_t fan_in = static_cast<int64_t>(h) * w * c;
        m.weights.push_back(he_uniform({static_cast<int>(fan_in), ld.units}, fan_in,
                                       derive_seed(seed, 0x1217, static_cast<uint64_t>(li), 0)));
        m.weights.push_back(Tensor({ld.units}, 0.0f));
        h = 1;
        w = 1;
        c = ld.units;
        break;
      }
      default:
        break;
    }
    ++li;
  }
  if (h < 1 || w < 1) throw ValidationError("architecture shrinks the input away");
  return m;
}

namespace {

void fill_batch(Tensor& xb, std::vector<int>& labels, const LabeledDataset& ds,
                const std::vector<size_t>& order, size_t begin, size_t end) {
  const int64_t px = ds.pixels_per_image();
  const int n = static_cast<int>(end - begin);
  xb.shape = {n, ds.height, ds.width, ds.channels};
  xb.data.resize(static_cast<size_t>(n) * px);
  labels.resize(static_cast<size_t>(n));
  for (size_t i = begin; i < end; ++i) {
    const auto& im = ds.images[order[i]];
    std::copy(im.pixels.begin(), im.pixels.end(),
              xb.data.begin() + static_cast<int64_t>(i - begin) * px);
    labels[i - begin] = im.label;
  }
}

}  // namespace

TrainReport train(ClassifierModel& model, const LabeledDataset& train_set, const TrainHyper& hyper,
                  uint64_t seed) {
  train_set.validate();
  if (train_set.height != model.input_h || train_set.width != model.input_w ||
      train_set.channels != model.input_c)
    throw ValidationError("train: dataset shape does not match the model input");
  if (train_set.class_count != model.class_count)
    throw ValidationError("train: dataset class count does not match the model");
  if (hyper.batch < 1) throw ValidationError("train: batch must be >= 1");
  if (hyper.epochs < 0) throw ValidationError("train: epochs must be >= 0");

  const auto t0 = std::chrono::steady_clock::now();
  model.train_seed = seed;
  model.hyper = hyper;
  model.trained_on = train_set.name;

  Graph g;
  const int x = g.input("x");
  auto h = append_forward(g, model, x, /*trainable=*/true);
  const int ce = g.cross_entropy(h.probs);
  const int loss = g.mean(ce);

  std::vector<Tensor*> params;
  params.reserve(h.weight_nodes.size());
  for (int id : h.weight_nodes) params.push_back(&g.tensor(id));
  AdamState adam;
  adam.lr = hyper.lr;
  adam.init(params);

  TrainReport rep;
  std::vector<size_t> order(train_set.images.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Tensor xb;
  std::vector<int> labels;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    auto rng = make_rng(derive_seed(seed, 0x7a19, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int64_t correct = 0;
    for (size_t begin = 0; begin < order.size(); begin += static_cast<size_t>(hyper.batch)) {
      const size_t end = std::min(order.size(), begin + static_cast<size_t>(hyper.batch));
      fill_batch(xb, labels, train_set, order, begin, end);
      g.bind(x, xb);
      g.bind_labels(ce, labels);
      const float batch_loss = g.forward(loss).data[0];
      if (std::isnan(batch_loss))
        throw ComputeError("training diverged: NaN loss at epoch " + std::to_string(epoch));
      loss_sum += static_cast<double>(batch_loss) * static_cast<double>(end - begin);
      const auto& probs = g.tensor(h.probs);
      const int K = probs.shape[1];
      for (int i = 0; i < static_cast<int>(end - begin); ++i) {
        int arg = 0;
        for (int k = 1; k < K; ++k)
          if (probs.data[static_cast<size_t>(i) * K + k] > probs.data[static_cast<size_t>(i) * K + arg])
            arg = k;
        if (arg == labels[static_cast<size_t>(i)]) ++correct;
      }
      g.backward(loss);
      adam_step(params, adam);
    }
    rep.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    rep.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(order.size()));
  }

  for (size_t i = 0; i < params.size(); ++i) {
    model.weights[i].data = params[i]->data;
    model.weights[i].grad.clear();
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

std::vector<int> predict_labels_raw(const ClassifierModel& model,
                                    const std::vector<const float*>& images, int h, int w, int c) {
  if (h != model.input_h || w != model.input_w || c != model.input_c)
    throw ShapeError("predict: image shape does not match the model input");
  Graph g;
  const int x = g.input("x");
  auto hd = append_forward(g, model, x, /*trainable=*/false);
  const int64_t px = static_cast<int64_t>(h) * w * c;
  std::vector<int> out;
  out.reserve(images.size());
  Tensor xb;
  for (size_t begin = 0; begin < images.size(); begin += kPredictChunk) {
    const size_t end = std::min(images.size(), begin + kPredictChunk);
    const int n = static_cast<int>(end - begin);
    xb.shape = {n, h, w, c};
    xb.data.resize(static_cast<size_t>(n) * px);
    for (size_t i = begin; i < end; ++i)
      std::copy(images[i], images[i] + px, xb.data.begin() + static_cast<int64_t>(i - begin) * px);
    g.bind(x, xb);
    const auto& probs = g.forward(hd.probs);
    const int K = probs.shape[1];
    for (int i = 0; i < n; ++i) {
      int arg = 0;
      for (int k = 1; k < K; ++k)
        if (probs.data[static_cast<size_t>(i) * K + k] > probs.data[static_cast<size_t>(i) * K + arg])
          arg = k;
      out.push_back(arg);
    }
  }
  return out;
}

std::vector<int> predict_labels(const ClassifierModel& model, const LabeledDataset& ds) {
  std::vector<const float*> ptrs;
  ptrs.reserve(ds.images.size());
  for (const auto& im : ds.images) ptrs.push_back(im.pixels.data());
  return predict_labels_raw(model, ptrs, ds.height, ds.width, ds.channels);
}

std::pair<std::vector<float>, int> predict(const ClassifierModel& model, const LabeledImage& image) {
  Graph g;
  const int x = g.input("x");
  auto hd = append_forward(g, model, x, /*trainable=*/false);
  Tensor xb({1, model.input_h, model.input_w, model.input_c});
  if (xb.data.size() != image.pixels.size())
    throw ShapeError("predict: image pixel count does not match the model input");
  xb.data = image.pixels;
  g.bind(x, xb);
  const auto& probs = g.forward(hd.probs);
  int arg = 0;
  for (int k = 1; k < probs.shape[1]; ++k)
    if (probs.data[static_cast<size_t>(k)] > probs.data[static_cast<size_t>(arg)]) arg = k;
  return {probs.data, arg};
}

double clean_accuracy(const ClassifierModel& model, const LabeledDataset& test_set) {
  if (test_set.images.empty()) throw ValidationError("clean_accuracy: empty test set");
  const auto preds = predict_labels(model, test_set);
  int64_t correct = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == test_set.images[i].label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double attack_success_rate(const ClassifierModel& model, const LabeledDataset& backdoor_test,
                           int target) {
  if (backdoor_test.images.empty()) throw ValidationError("attack_success_rate: empty test set");
  const auto preds = predict_labels(model, backdoor_test);
  int64_t hits = 0;
  for (int p : preds)
    if (p == target) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

std::vector<double> collateral_damage(const ClassifierModel& model, const LabeledDataset& test_set,
                                      const PerceptiblePattern& pattern, int target, uint64_t seed) {
  std::vector<double> rates(static_cast<size_t>(test_set.class_count),
                            std::numeric_limits<double>::quiet_NaN());
  for (int cls = 0; cls < test_set.class_count; ++cls) {
    if (cls == target) continue;
    AttackSpec probe;
    probe.pattern = pattern;
    probe.source_classes = {cls};
    probe.target_class = target;
    probe.poison_count_per_source = 1;  // unused by make_backdoor_test_set
    probe.placement = Placement::Random;
    probe.seed = derive_seed(seed, 0xc0d4, static_cast<uint64_t>(cls));
    const LabeledDataset bd = make_backdoor_test_set(test_set, probe, BackdoorVariant::exact());
    if (bd.images.empty()) continue;
    rates[static_cast<size_t>(cls)] = attack_success_rate(model, bd, target);
  }
  return rates;
}

namespace {

uint32_t layer_tag(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return 1;
    case LayerKind::Relu: return 2;
    case LayerKind::MaxPool: return 3;
    case LayerKind::Dense: return 4;
    case LayerKind::Softmax: return 5;
  }
  return 0;
}

LayerKind tag_layer(uint32_t t, const std::string& path) {
  switch (t) {
    case 1: return LayerKind::Conv;
    case 2: return LayerKind::Relu;
    case 3: return LayerKind::MaxPool;
    case 4: return LayerKind::Dense;
    case 5: return LayerKind::Softmax;
    default:
      throw IoError("unknown layer tag " + std::to_string(t) + " in " + path +
                    " (format version mismatch)");
  }
}

}  // namespace

void save_model(const ClassifierModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("BDM1", 4);
  binio::write_u32(os, static_cast<uint32_t>(model.class_count));
  binio::write_u32(os, static_cast<uint32_t>(model.input_h));
  binio::write_u32(os, static_cast<uint32_t>(model.input_w));
  binio::write_u32(os, static_cast<uint32_t>(model.input_c));
  binio::write_u32(os, static_cast<uint32_t>(model.layers.size()));
  for (const auto& ld : model.layers) {
    binio::write_u32(os, layer_tag(ld.kind));
    binio::write_u32(os, static_cast<uint32_t>(ld.units));
    binio::write_u32(os, static_cast<uint32_t>(ld.kernel));
    binio::write_u32(os, ld.pad == Padding::Same ? 1 : 0);
  }
  binio::write_u32(os, static_cast<uint32_t>(model.weights.size()));
  for (const auto& w : model.weights) {
    binio::write_u32(os, static_cast<uint32_t>(w.shape.size()));
    for (int d : w.shape) binio::write_u32(os, static_cast<uint32_t>(d));
    for (float v : w.data) binio::write_f32(os, v);
  }
  if (!os) throw IoError("write failed: " + path);

  nlohmann::json meta;
  meta["arch"] = model.arch_name;
  meta["init_seed"] = model.init_seed;
  meta["train_seed"] = model.train_seed;
  meta["lr"] = model.hyper.lr;
  meta["batch"] = model.hyper.batch;
  meta["epochs"] = model.hyper.epochs;
  meta["trained_on"] = model.trained_on;
  meta["clean_test_accuracy"] = model.clean_test_accuracy;
  std::ofstream js(path + ".json");
  if (!js) throw IoError("cannot open for writing: " + path + ".json");
  js << meta.dump(2) << "\n";
}

ClassifierModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  binio::expect_magic(is, "BDM1", path);
  ClassifierModel m;
  m.class_count = static_cast<int>(binio::read_u32(is, "class count"));
  m.input_h = static_cast<int>(binio::read_u32(is, "input height"));
  m.input_w = static_cast<int>(binio::read_u32(is, "input width"));
  m.input_c = static_cast<int>(binio::read_u32(is, "input channels"));
  const uint32_t nl = binio::read_u32(is, "layer count");
  for (uint32_t i = 0; i < nl; ++i) {
    LayerDesc ld;
    ld.kind = tag_layer(binio::read_u32(is, "layer tag"), path);
    ld.units = static_cast<int>(binio::read_u32(is, "layer units"));
    ld.kernel = static_cast<int>(binio::read_u32(is, "layer kernel"));
    ld.pad = binio::read_u32(is, "layer padding") ? Padding::Same : Padding::Valid;
    m.layers.push_back(ld);
  }
  const uint32_t nw = binio::read_u32(is, "weight count");
  for (uint32_t i = 0; i < nw; ++i) {
    const uint32_t rank = binio::read_u32(is, "weight rank");
    std::vector<int> shape;
    for (uint32_t r = 0; r < rank; ++r)
      shape.push_back(static_cast<int>(binio::read_u32(is, "weight dim")));
    Tensor w(shape);
    for (auto& v : w.data) v = binio::read_f32(is, "weight payload");
    m.weights.push_back(std::move(w));
  }

  std::ifstream js(path + ".json");
  if (js) {
    nlohmann::json meta;
    js >> meta;
    m.arch_name = meta.value("arch", "");
    m.init_seed = meta.value("init_seed", uint64_t{0});
    m.train_seed = meta.value("train_seed", uint64_t{0});
    m.hyper.lr = meta.value("lr", 1e-3f);
    m.hyper.batch = meta.value("batch", 32);
    m.hyper.epochs = meta.value("epochs", 0);
    m.trained_on = meta.value("trained_on", "");
    m.clean_test_accuracy = meta.value("clean_test_accuracy", -1.0);
  }
  return m;
}

}  // namespace bdlab
