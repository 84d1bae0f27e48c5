#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <set>

#include "bdlab/poison.hpp"
#include "bdlab/rng.hpp"

using namespace bdlab;

namespace {

LabeledDataset tiny_dataset(int k = 4, int hw = 16, int per_class = 30, uint64_t seed = 5) {
  SynthSpec s;
  s.class_count = k;
  s.height = s.width = hw;
  s.channels = 3;
  s.per_class_count = per_class;
  return synth_dataset(s, seed);
}

std::vector<float> random_image(int h, int w, int c, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> px(static_cast<size_t>(h) * w * c);
  for (auto& p : px) p = u(rng);
  return px;
}

}  // namespace

TEST_CASE("embedding algebra: full mask, empty mask, idempotence") {
  std::mt19937_64 rng(3);
  const int h = 8, w = 8, c = 3;

  PerceptiblePattern v = make_builtin_pattern(h, w, c);  // image-sized pattern
  Mask full = place_mask(h, w, {}, h, w, Placement::Fixed, 0, 0, 0);
  const auto x = random_image(h, w, c, rng);

  auto out = embed_perceptible(x, h, w, c, v, full);
  CHECK(out == v.pixels);  // m all ones -> pure pattern

  Mask empty = full;
  std::fill(empty.bits.begin(), empty.bits.end(), 0);
  CHECK(embed_perceptible(x, h, w, c, v, empty) == x);  // m all zeros -> x

  // idempotence: re-embedding changes nothing
  auto again = embed_perceptible(out, h, w, c, v, full);
  CHECK(again == out);
}

TEST_CASE("embedding property suite on randomized cases") {
  std::mt19937_64 rng(17);
  const int h = 12, w = 10, c = 3;
  for (int rep = 0; rep < 200; ++rep) {
    const int ph = 1 + static_cast<int>(rng() % 5);
    const int pw = 1 + static_cast<int>(rng() % 5);
    PerceptiblePattern v;
    v.height = ph;
    v.width = pw;
    v.channels = c;
    v.pixels = random_image(ph, pw, c, rng);
    const Mask m = place_mask(ph, pw, {}, h, w, Placement::Random, 0, 0, rng());
    const auto x = random_image(h, w, c, rng);
    const auto out = embed_perceptible(x, h, w, c, v, m);
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        for (int ch = 0; ch < c; ++ch) {
          const size_t i = (static_cast<size_t>(y) * w + xx) * c + ch;
          if (m.bits[static_cast<size_t>(y) * w + xx]) {
            CHECK(out[i] == v.pixels[(static_cast<size_t>(y - m.anchor_row) * pw +
                                      (xx - m.anchor_col)) * c + ch]);
          } else {
            CHECK(out[i] == x[i]);
          }
          CHECK(out[i] >= 0.0f);
          CHECK(out[i] <= 1.0f);
        }
    const auto again = embed_perceptible(out, h, w, c, v, m);
    CHECK(again == out);
  }
}

TEST_CASE("mask placement bounds and determinism") {
  for (uint64_t seed = 0; seed < 300; ++seed) {
    const Mask m = place_mask(6, 6, {}, 24, 24, Placement::Random, 0, 0, seed);
    CHECK(m.anchor_row >= 0);
    CHECK(m.anchor_row <= 18);
    CHECK(m.anchor_col >= 0);
    CHECK(m.anchor_col <= 18);
    CHECK(m.ones() == 36);
  }
  const Mask a = place_mask(6, 6, {}, 24, 24, Placement::Random, 0, 0, 123);
  const Mask b = place_mask(6, 6, {}, 24, 24, Placement::Random, 0, 0, 123);
  CHECK(a.anchor_row == b.anchor_row);
  CHECK(a.anchor_col == b.anchor_col);

  // fixed bottom-left anchor of an H x W image
  const Mask bl = place_mask(6, 5, {}, 24, 20, Placement::Fixed, 24 - 6, 0, 0);
  CHECK(bl.anchor_row == 18);
  CHECK(bl.anchor_col == 0);

  CHECK_THROWS_AS(place_mask(30, 30, {}, 24, 24, Placement::Random, 0, 0, 1), ValidationError);
  CHECK_THROWS_AS(place_mask(6, 6, {}, 24, 24, Placement::Fixed, 20, 0, 0), ValidationError);
}

TEST_CASE("stencil folds into the mask") {
  std::vector<uint8_t> stencil(9, 1);
  stencil[4] = 0;  // center hole
  const Mask m = place_mask(3, 3, stencil, 8, 8, Placement::Fixed, 2, 2, 0);
  CHECK(m.ones() == 8);
  CHECK(m.bits[3 * 8 + 3] == 0);  // the hole
}

TEST_CASE("imperceptible embedding: zero, clamp, single pixel, norm bound") {
  std::mt19937_64 rng(5);
  const auto x = random_image(4, 4, 1, rng);
  std::vector<float> zero(x.size(), 0.0f);
  CHECK(embed_imperceptible(x, zero, 2.0, 0.1) == x);

  std::vector<float> x2(x.size(), 0.9f);
  std::vector<float> u(x.size(), 0.0f);
  u[5] = 0.3f;
  const auto out = embed_imperceptible(x2, u, 2.0, 0.5);
  CHECK(out[5] == 1.0f);  // clipped
  int changed = 0;
  for (size_t i = 0; i < out.size(); ++i)
    if (out[i] != x2[i]) ++changed;
  CHECK(changed == 1);  // L0-style single-pixel perturbation

  std::vector<float> big(x.size(), 0.0f);
  big[0] = 0.6f;
  CHECK_THROWS_AS(embed_imperceptible(x, big, 2.0, 0.5), ValidationError);
}

TEST_CASE("craft_attack: conservation, labels, record") {
  const auto train = tiny_dataset(4, 16, 30, 11);
  AttackSpec spec;
  spec.pattern = make_builtin_pattern(4, 4, 3);
  spec.source_classes = {2};
  spec.target_class = 0;
  spec.poison_count_per_source = 12;
  spec.seed = 31;
  auto [poisoned, rec] = craft_attack(train, spec);

  CHECK(poisoned.images.size() == train.images.size());
  REQUIRE(rec.indices.size() == 12);
  CHECK(rec.target_label == 0);

  std::set<int64_t> touched(rec.indices.begin(), rec.indices.end());
  CHECK(touched.size() == 12);  // without replacement
  int changed_labels = 0;
  for (size_t i = 0; i < train.images.size(); ++i) {
    if (touched.count(static_cast<int64_t>(i))) {
      CHECK(poisoned.images[i].label == 0);
      CHECK(train.images[i].label == 2);
      ++changed_labels;
    } else {
      // untouched items are bit-identical
      CHECK(poisoned.images[i].label == train.images[i].label);
      CHECK(poisoned.images[i].pixels == train.images[i].pixels);
    }
  }
  CHECK(changed_labels == 12);

  // anchors recorded per item; embedded region matches the pattern
  for (size_t k = 0; k < rec.indices.size(); ++k) {
    const auto [ar, ac] = rec.anchors[k];
    const auto& im = poisoned.images[static_cast<size_t>(rec.indices[k])];
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        for (int c = 0; c < 3; ++c)
          CHECK(im.pixels[(static_cast<size_t>(ar + y) * 16 + (ac + x)) * 3 + c] ==
                spec.pattern.pixels[(static_cast<size_t>(y) * 4 + x) * 3 + c]);
  }

  // round trip of the record
  const auto back = PoisonRecord::from_json(rec.to_json());
  CHECK(back.indices == rec.indices);
  CHECK(back.anchors == rec.anchors);
  CHECK(back.original_labels == rec.original_labels);
}

TEST_CASE("craft_attack multi-source counts") {
  const auto train = tiny_dataset(5, 16, 25, 19);
  AttackSpec spec;
  spec.pattern = make_builtin_pattern(4, 4, 3);
  spec.source_classes = {0, 2, 3, 4};
  spec.target_class = 1;
  spec.poison_count_per_source = 20;
  spec.seed = 77;
  auto [poisoned, rec] = craft_attack(train, spec);
  CHECK(rec.indices.size() == 80);  // 4 sources x 20
}

TEST_CASE("craft_attack rejects infeasible specs") {
  const auto train = tiny_dataset(4, 16, 10, 3);
  AttackSpec spec;
  spec.pattern = make_builtin_pattern(4, 4, 3);
  spec.source_classes = {1};
  spec.target_class = 1;
  spec.poison_count_per_source = 5;
  CHECK_THROWS_AS(craft_attack(train, spec), ValidationError);  // target in sources

  spec.target_class = 0;
  spec.poison_count_per_source = 11;  // only 10 available
  CHECK_THROWS_AS(craft_attack(train, spec), ValidationError);

  spec.poison_count_per_source = 5;
  spec.pattern = make_builtin_pattern(20, 20, 3);  // larger than image
  CHECK_THROWS_AS(craft_attack(train, spec), ValidationError);
}

TEST_CASE("pattern noise: zero sigma is identity; field variance matches") {
  const auto v = make_builtin_pattern(6, 6, 3);
  const auto same = perturb_pattern_noise(v, 0.0, 9);
  CHECK(same.pixels == v.pixels);

  // Monte-Carlo estimate of the pre-clamp field variance at sigma^2 = 1
  const size_t draws = 100000;
  const auto field = gaussian_noise_field(draws, 1.0, 12345);
  double mean = 0.0;
  for (float f : field) mean += f;
  mean /= static_cast<double>(draws);
  double var = 0.0;
  for (float f : field) var += (f - mean) * (f - mean);
  var /= static_cast<double>(draws - 1);
  CHECK(var == doctest::Approx(1.0).epsilon(0.05));

  // clamped output stays in range
  const auto noisy = perturb_pattern_noise(v, 1.0, 9);
  for (float p : noisy.pixels) {
    CHECK(p >= 0.0f);
    CHECK(p <= 1.0f);
  }
}

TEST_CASE("crop fractions map to central blocks") {
  PerceptiblePattern v;
  v.height = v.width = 10;
  v.channels = 1;
  v.pixels.resize(100);
  for (int i = 0; i < 100; ++i) v.pixels[static_cast<size_t>(i)] = static_cast<float>(i) / 255.0f;

  const auto full = crop_pattern(v, 1.0);
  CHECK(full.pixels == v.pixels);

  const auto p64 = crop_pattern(v, 0.64);
  CHECK(p64.height == 8);
  CHECK(p64.width == 8);
  CHECK(p64.pixels[0] == v.pixels[11]);  // (1,1) of the original

  const auto p36 = crop_pattern(v, 0.36);
  CHECK(p36.height == 6);
  CHECK(p36.width == 6);
  CHECK(p36.pixels[0] == v.pixels[22]);  // (2,2) of the original

  CHECK_THROWS_AS(crop_pattern(v, 0.0), ValidationError);
}

TEST_CASE("backdoor test sets cover exactly the source classes") {
  const auto ds = tiny_dataset(4, 16, 20, 41);
  AttackSpec spec;
  spec.pattern = make_builtin_pattern(4, 4, 3);
  spec.source_classes = {1, 3};
  spec.target_class = 0;
  spec.poison_count_per_source = 5;
  spec.seed = 13;

  const auto bd = make_backdoor_test_set(ds, spec, BackdoorVariant::exact());
  CHECK(bd.images.size() == 40);  // 2 source classes x 20
  for (const auto& im : bd.images) {
    CHECK((im.label == 1 || im.label == 3));  // original labels kept
    for (float p : im.pixels) {
      CHECK(p >= 0.0f);
      CHECK(p <= 1.0f);
    }
  }

  // fixed anchor variant puts the pattern in one place for all images
  const auto fixed = make_backdoor_test_set(ds, spec, BackdoorVariant::fixed_anchor(12, 0));
  for (const auto& im : fixed.images)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        for (int c = 0; c < 3; ++c)
          CHECK(im.pixels[(static_cast<size_t>(12 + y) * 16 + x) * 3 + c] ==
                spec.pattern.pixels[(static_cast<size_t>(y) * 4 + x) * 3 + c]);

  // shift beyond the border errors
  spec.placement = Placement::Fixed;
  spec.fixed_anchor_row = 12;
  spec.fixed_anchor_col = 0;
  CHECK_THROWS_AS(make_backdoor_test_set(ds, spec, BackdoorVariant::shifted(0, -1)),
                  ValidationError);
  const auto up = make_backdoor_test_set(ds, spec, BackdoorVariant::shifted(-1, 0));
  CHECK(up.images.size() == 40);
}

TEST_CASE("pattern container round trip") {
  const auto v = make_builtin_pattern(6, 6, 3);
  const auto path =
      (std::filesystem::temp_directory_path() / "bdlab_test_pattern.bdl").string();
  save_pattern(v, path);
  const auto back = load_pattern(path);
  CHECK(back.height == v.height);
  CHECK(back.width == v.width);
  CHECK(back.channels == v.channels);
  CHECK(back.pixels == v.pixels);
  std::remove(path.c_str());
}
