#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "bdlab/model.hpp"
#include "bdlab/poison.hpp"

using namespace bdlab;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

LabeledDataset quick_dataset(int k, int per_class, uint64_t seed) {
  SynthSpec s;
  s.class_count = k;
  s.height = s.width = 24;
  s.channels = 3;
  s.per_class_count = per_class;
  return synth_dataset(s, seed);
}

}  // namespace

TEST_CASE("build_cnn is deterministic and parameter count matches hand arithmetic") {
  const auto a = build_cnn("tiny", 24, 24, 3, 5, 99);
  const auto b = build_cnn("tiny", 24, 24, 3, 5, 99);
  REQUIRE(a.weights.size() == b.weights.size());
  for (size_t i = 0; i < a.weights.size(); ++i) CHECK(a.weights[i].data == b.weights[i].data);

  // conv1 3*3*3*8+8 = 224; conv2 3*3*8*16+16 = 1168;
  // dense 576*64+64 = 36928; head 64*5+5 = 325; total 38645
  CHECK(a.parameter_count() == 224 + 1168 + 36928 + 325);
  CHECK(a.parameter_count() == 38645);
  CHECK(a.penultimate_width() == 64);

  const auto c = build_cnn("tiny", 24, 24, 3, 5, 100);
  CHECK(a.weights[0].data != c.weights[0].data);

  CHECK_THROWS_AS(build_cnn("huge", 24, 24, 3, 5, 1), ValidationError);
}

TEST_CASE("forward on a zero image is a valid simplex") {
  const auto m = build_cnn("tiny", 24, 24, 3, 5, 3);
  LabeledImage zero;
  zero.pixels.assign(24 * 24 * 3, 0.0f);
  zero.label = 0;
  const auto [posterior, label] = predict(m, zero);
  REQUIRE(posterior.size() == 5);
  double s = 0.0;
  for (float p : posterior) {
    CHECK(p > 0.0f);
    CHECK(p < 1.0f);
    s += p;
  }
  CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(label >= 0);
  CHECK(label < 5);
}

TEST_CASE("small arch builds and runs") {
  const auto m = build_cnn("small", 24, 24, 3, 4, 3);
  LabeledImage img;
  img.pixels.assign(24 * 24 * 3, 0.3f);
  const auto [posterior, label] = predict(m, img);
  CHECK(posterior.size() == 4);
}

TEST_CASE("exact logit ties break toward the smallest class index") {
  auto m = build_cnn("tiny", 24, 24, 3, 5, 3);
  // zero head weights -> identical logits for every class
  m.weights[6].fill(0.0f);
  m.weights[7].fill(0.0f);
  LabeledImage img;
  img.pixels.assign(24 * 24 * 3, 0.5f);
  CHECK(predict(m, img).second == 0);
}

TEST_CASE("zero epochs leaves weights unchanged") {
  const auto ds = quick_dataset(3, 10, 21);
  auto m = build_cnn("tiny", 24, 24, 3, 3, 8);
  const auto before = m.weights;
  TrainHyper h{1e-3f, 8, 0};
  const auto rep = train(m, ds, h, 5);
  CHECK(rep.epoch_loss.empty());
  for (size_t i = 0; i < before.size(); ++i) CHECK(m.weights[i].data == before[i].data);
}

TEST_CASE("training determinism: same seed, same weights") {
  const auto ds = quick_dataset(3, 20, 33);
  TrainHyper h{1e-3f, 16, 3};
  auto m1 = build_cnn("tiny", 24, 24, 3, 3, 44);
  auto m2 = build_cnn("tiny", 24, 24, 3, 3, 44);
  train(m1, ds, h, 7);
  train(m2, ds, h, 7);
  for (size_t i = 0; i < m1.weights.size(); ++i) CHECK(m1.weights[i].data == m2.weights[i].data);

  auto m3 = build_cnn("tiny", 24, 24, 3, 3, 44);
  train(m3, ds, h, 8);
  bool any_diff = false;
  for (size_t i = 0; i < m1.weights.size(); ++i)
    if (m1.weights[i].data != m3.weights[i].data) any_diff = true;
  CHECK(any_diff);
}

TEST_CASE("training fits the synthetic data and drives loss down") {
  const auto ds = quick_dataset(4, 40, 51);
  auto m = build_cnn("tiny", 24, 24, 3, 4, 60);
  TrainHyper h{1e-3f, 16, 8};
  const auto rep = train(m, ds, h, 61);
  REQUIRE(rep.epoch_loss.size() == 8);
  CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
  CHECK(rep.epoch_accuracy.back() > 0.9);
  CHECK(clean_accuracy(m, ds) > 0.9);
}

TEST_CASE("train rejects mismatched datasets") {
  const auto ds = quick_dataset(3, 6, 5);
  auto m = build_cnn("tiny", 24, 24, 3, 4, 8);  // wrong class count
  TrainHyper h{1e-3f, 4, 1};
  CHECK_THROWS_AS(train(m, ds, h, 1), ValidationError);
}

TEST_CASE("accuracy counting") {
  const auto ds = quick_dataset(3, 10, 71);
  auto m = build_cnn("tiny", 24, 24, 3, 3, 8);
  const auto acc = clean_accuracy(m, ds);
  const auto preds = predict_labels(m, ds);
  int correct = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == ds.images[i].label) ++correct;
  CHECK(acc == doctest::Approx(static_cast<double>(correct) / preds.size()));

  LabeledDataset empty = ds;
  empty.images.clear();
  CHECK_THROWS_AS(clean_accuracy(m, empty), ValidationError);
  CHECK_THROWS_AS(attack_success_rate(m, empty, 0), ValidationError);
}

TEST_CASE("attack success rate counts predictions equal to the target") {
  const auto ds = quick_dataset(3, 15, 81);
  auto m = build_cnn("tiny", 24, 24, 3, 3, 8);
  TrainHyper h{1e-3f, 16, 6};
  train(m, ds, h, 82);
  AttackSpec spec;
  spec.pattern = make_builtin_pattern(6, 6, 3);
  spec.source_classes = {0};
  spec.target_class = 2;
  spec.poison_count_per_source = 1;
  spec.seed = 5;
  const auto bd = make_backdoor_test_set(ds, spec, BackdoorVariant::exact());
  const auto asr = attack_success_rate(m, bd, 2);
  const auto preds = predict_labels(m, bd);
  int hits = 0;
  for (int p : preds)
    if (p == 2) ++hits;
  CHECK(asr == doctest::Approx(static_cast<double>(hits) / preds.size()));
}

TEST_CASE("collateral damage covers every non-target class") {
  const auto ds = quick_dataset(4, 10, 91);
  auto m = build_cnn("tiny", 24, 24, 3, 4, 8);
  const auto pattern = make_builtin_pattern(6, 6, 3);
  const auto rates = collateral_damage(m, ds, pattern, 1, 7);
  REQUIRE(rates.size() == 4);
  CHECK(std::isnan(rates[1]));
  for (int c = 0; c < 4; ++c) {
    if (c == 1) continue;
    CHECK(rates[static_cast<size_t>(c)] >= 0.0);
    CHECK(rates[static_cast<size_t>(c)] <= 1.0);
  }
}

TEST_CASE("model container round trip, sidecar, and unknown tag") {
  const auto ds = quick_dataset(3, 10, 95);
  auto m = build_cnn("tiny", 24, 24, 3, 3, 12);
  TrainHyper h{1e-3f, 8, 2};
  train(m, ds, h, 13);
  m.clean_test_accuracy = clean_accuracy(m, ds);

  const auto path = temp_path("bdlab_test_model.bdm");
  save_model(m, path);
  const auto back = load_model(path);
  CHECK(back.arch_name == m.arch_name);
  CHECK(back.class_count == m.class_count);
  CHECK(back.layers.size() == m.layers.size());
  REQUIRE(back.weights.size() == m.weights.size());
  for (size_t i = 0; i < m.weights.size(); ++i) {
    CHECK(back.weights[i].shape == m.weights[i].shape);
    CHECK(back.weights[i].data == m.weights[i].data);
  }
  CHECK(back.train_seed == m.train_seed);
  CHECK(back.hyper.epochs == m.hyper.epochs);
  CHECK(back.clean_test_accuracy == doctest::Approx(m.clean_test_accuracy));

  // save -> load -> save byte identity
  const auto path2 = temp_path("bdlab_test_model2.bdm");
  save_model(back, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  // corrupt the first layer tag -> version error
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4 + 5 * 4);
    const unsigned char bad[4] = {99, 0, 0, 0};
    f.write(reinterpret_cast<const char*>(bad), 4);
  }
  CHECK_THROWS_AS(load_model(path), IoError);

  std::remove(path.c_str());
  std::remove(path2.c_str());
  std::remove((path + ".json").c_str());
  std::remove((path2 + ".json").c_str());
}

TEST_CASE("identical predictions before and after the posterior simplex check") {
  const auto ds = quick_dataset(3, 12, 101);
  auto m = build_cnn("tiny", 24, 24, 3, 3, 14);
  for (const auto& im : ds.images) {
    const auto [post, label] = predict(m, im);
    double s = 0.0;
    for (float p : post) s += p;
    CHECK(std::fabs(s - 1.0) < 1e-6);
  }
}
