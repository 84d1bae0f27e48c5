#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "bdlab/adam.hpp"
#include "bdlab/autodiff.hpp"
#include "bdlab/grad_check.hpp"
#include "oracles.hpp"

using namespace bdlab;

namespace {

DTensor randn(std::vector<int> shape, std::mt19937_64& rng, double scale = 1.0) {
  DTensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t.data) v = d(rng);
  return t;
}

}  // namespace

TEST_CASE("relu forward") {
  DGraph g;
  int x = g.input("x");
  int y = g.relu(x);
  DTensor xt({3});
  xt.data = {-1.0, 0.0, 2.0};
  g.bind(x, xt);
  auto& out = g.forward(y);
  CHECK(out.data[0] == 0.0);
  CHECK(out.data[1] == 0.0);
  CHECK(out.data[2] == 2.0);
}

TEST_CASE("dense identity map") {
  DGraph g;
  int x = g.input("x");
  DTensor w({4, 4}, 0.0);
  for (int i = 0; i < 4; ++i) w.at(i, i) = 1.0;
  int wi = g.frozen("w", w);
  int bi = g.frozen("b", DTensor({4}, 0.0));
  int y = g.dense(x, wi, bi);
  DTensor xt({1, 4});
  xt.data = {0.5, -2.0, 3.0, 0.0};
  g.bind(x, xt);
  auto& out = g.forward(y);
  for (int i = 0; i < 4; ++i) CHECK(out.data[i] == doctest::Approx(xt.data[i]));
}

TEST_CASE("two-layer graph matches straight-line recomputation on fixed 3x3 input") {
  // conv 2x2 valid (1->2 channels) then dense to 2 units, evaluated by the
  // oracle's standalone loops. Expected output frozen below from the oracle.
  std::mt19937_64 rng(7);
  DTensor x = randn({1, 3, 3, 1}, rng);
  DTensor k = randn({2, 2, 1, 2}, rng);
  DTensor kb = randn({2}, rng);
  DTensor w = randn({8, 2}, rng);
  DTensor wb = randn({2}, rng);

  auto conv = oracle::conv2d_nhwc(x.data, 1, 3, 3, 1, k.data, 2, 2, 2, kb.data, 0, 0);
  auto expect = oracle::dense(oracle::relu(conv), 1, 8, w.data, 2, wb.data);

  DGraph g;
  int xi = g.input("x");
  int c = g.conv2d(xi, g.frozen("k", k), g.frozen("kb", kb), Padding::Valid);
  int y = g.dense(g.relu(c), g.frozen("w", w), g.frozen("wb", wb));
  g.bind(xi, x);
  auto& out = g.forward(y);
  REQUIRE(out.numel() == 2);
  CHECK(out.data[0] == doctest::Approx(expect[0]).epsilon(1e-12));
  CHECK(out.data[1] == doctest::Approx(expect[1]).epsilon(1e-12));
}

TEST_CASE("conv2d same padding matches oracle") {
  std::mt19937_64 rng(11);
  DTensor x = randn({2, 5, 4, 3}, rng);
  DTensor k = randn({3, 3, 3, 4}, rng);
  DTensor b = randn({4}, rng);
  auto expect = oracle::conv2d_nhwc(x.data, 2, 5, 4, 3, k.data, 3, 3, 4, b.data, 1, 1);
  DGraph g;
  int xi = g.input("x");
  int y = g.conv2d(xi, g.frozen("k", k), g.frozen("b", b), Padding::Same);
  g.bind(xi, x);
  auto& out = g.forward(y);
  REQUIRE(out.shape == std::vector<int>{2, 5, 4, 4});
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK(out.data[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("softmax basics") {
  DGraph g;
  int x = g.input("x");
  int y = g.softmax(x);

  DTensor flat({1, 3}, 0.0);
  g.bind(x, flat);
  auto& out = g.forward(y);
  for (int k = 0; k < 3; ++k) CHECK(out.data[k] == doctest::Approx(1.0 / 3));

  DTensor pair({1, 2});
  pair.data = {1.25, 1.25 + 1e-3};
  g.bind(x, pair);
  auto& o2 = g.forward(y);
  CHECK(o2.data[1] > o2.data[0]);

  DTensor big({1, 2});
  big.data = {1000.0, 0.0};
  g.bind(x, big);
  auto& o3 = g.forward(y);
  CHECK(o3.data[0] == doctest::Approx(1.0));
  CHECK(o3.data[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(o3.data[0]));

  DTensor bad({1, 2});
  bad.data = {std::nan(""), 0.0};
  g.bind(x, bad);
  CHECK_THROWS_AS(g.forward(y), ComputeError);
}

TEST_CASE("softmax normalization over random inputs") {
  std::mt19937_64 rng(3);
  DGraph g;
  int x = g.input("x");
  int y = g.softmax(x);
  for (int rep = 0; rep < 200; ++rep) {
    DTensor xt = randn({4, 7}, rng, 5.0);
    g.bind(x, xt);
    auto& out = g.forward(y);
    for (int n = 0; n < 4; ++n) {
      double s = 0.0;
      for (int k = 0; k < 7; ++k) s += out.at(n, k);
      CHECK(std::fabs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("cross entropy values and clamp") {
  DGraph g;
  int p = g.input("p");
  int ce = g.cross_entropy(p);

  DTensor sure({1, 3});
  sure.data = {0.0, 1.0, 0.0};
  g.bind(p, sure);
  g.bind_labels(ce, {1});
  CHECK(g.forward(ce).data[0] == doctest::Approx(0.0));

  const int K = 5;
  DTensor unif({1, K}, 1.0 / K);
  g.bind(p, unif);
  g.bind_labels(ce, {0});
  CHECK(g.forward(ce).data[0] == doctest::Approx(std::log(double(K))));

  DTensor tiny({1, 2});
  tiny.data = {1e-20, 1.0 - 1e-20};
  g.bind(p, tiny);
  g.bind_labels(ce, {0});
  CHECK(g.forward(ce).data[0] == doctest::Approx(-std::log(1e-12)));

  g.bind_labels(ce, {7});
  CHECK_THROWS_AS(g.forward(ce), ComputeError);
}

TEST_CASE("backward of sum is all-ones") {
  std::mt19937_64 rng(5);
  DGraph g;
  int x = g.param("x", randn({3, 4}, rng));
  int s = g.sum(x);
  g.forward(s);
  g.backward(s);
  for (double v : g.grad(x)) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("backward of half squared norm is x") {
  std::mt19937_64 rng(6);
  DGraph g;
  DTensor xt = randn({11}, rng);
  int x = g.param("x", xt);
  int obj = g.scale(g.sum(g.mul(x, x)), 0.5);
  g.forward(obj);
  g.backward(obj);
  const auto& gx = g.grad(x);
  for (size_t i = 0; i < xt.data.size(); ++i) CHECK(gx[i] == doctest::Approx(xt.data[i]));
}

TEST_CASE("backward errors") {
  DGraph g;
  int x = g.param("x", DTensor({3}, 1.0));
  int y = g.relu(x);
  CHECK_THROWS_AS(g.backward(y), ComputeError);  // forward not run
  g.forward(y);
  CHECK_THROWS_AS(g.backward(y), ComputeError);  // non-scalar output
  int s = g.sum(y);
  g.forward(s);
  g.backward(s);  // fine
}

TEST_CASE("random 3-layer CNN gradient matches central differences") {
  std::mt19937_64 rng(42);
  DGraph g;
  // nudge inputs away from relu kinks: random normal values make exact
  // zeros measure-zero, and the check tolerance covers the rest
  int x = g.input("x");
  int c1 = g.relu(g.conv2d(x, g.param("k1", randn({3, 3, 2, 4}, rng, 0.5)),
                           g.param("b1", randn({4}, rng, 0.1)), Padding::Same));
  int p1 = g.max_pool2(c1);
  int d1 = g.relu(g.dense(p1, g.param("w1", randn({64, 8}, rng, 0.3)),
                          g.param("b2", randn({8}, rng, 0.1))));
  int logits = g.dense(d1, g.param("w2", randn({8, 3}, rng, 0.3)), g.param("b3", randn({3}, rng, 0.1)));
  int probs = g.softmax(logits);
  int ce = g.cross_entropy(probs);
  g.bind_labels(ce, {1, 0});
  int loss = g.mean(ce);
  g.bind(x, randn({2, 8, 8, 2}, rng));

  auto rep = grad_check(g, loss, 1e-5);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("per-primitive gradient checks on randomized shapes") {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 3; ++trial) {
    const int N = 1 + static_cast<int>(rng() % 2);
    const int H = 4 + static_cast<int>(rng() % 3) * 2;
    const int W = 4 + static_cast<int>(rng() % 3) * 2;
    const int C = 1 + static_cast<int>(rng() % 3);
    const int Co = 1 + static_cast<int>(rng() % 4);

    {
      DGraph g;  // conv2d, both paddings
      int x = g.param("x", randn({N, H, W, C}, rng));
      int k = g.param("k", randn({3, 3, C, Co}, rng, 0.4));
      int b = g.param("b", randn({Co}, rng, 0.1));
      int y = g.conv2d(x, k, b, trial % 2 ? Padding::Same : Padding::Valid);
      int obj = g.sum(g.mul(y, y));
      auto rep = grad_check(g, obj, 1e-5);
      CHECK_MESSAGE(rep.max_rel_error < 1e-4, "conv2d worst=", rep.worst_param);
    }
    {
      DGraph g;  // dense
      int x = g.param("x", randn({N, 10}, rng));
      int w = g.param("w", randn({10, 5}, rng, 0.4));
      int b = g.param("b", randn({5}, rng, 0.1));
      int obj = g.sum(g.mul(g.dense(x, w, b), g.dense(x, w, b)));
      auto rep = grad_check(g, obj, 1e-5);
      CHECK(rep.max_rel_error < 1e-4);
    }
    {
      DGraph g;  // relu + max-pool
      int x = g.param("x", randn({N, H, W, C}, rng));
      int y = g.max_pool2(g.relu(x));
      auto rep = grad_check(g, g.sum(g.mul(y, y)), 1e-5);
      CHECK(rep.max_rel_error < 1e-4);
    }
    {
      DGraph g;  // softmax + cross-entropy + select_class
      int x = g.param("x", randn({N, 4}, rng));
      int pr = g.softmax(x);
      int ce = g.cross_entropy(pr);
      std::vector<int> labels;
      for (int i = 0; i < N; ++i) labels.push_back(static_cast<int>(rng() % 4));
      g.bind_labels(ce, labels);
      int obj = g.add(g.mean(ce), g.mean(g.select_class(pr, 2)));
      auto rep = grad_check(g, obj, 1e-5);
      CHECK(rep.max_rel_error < 1e-4);
    }
    {
      DGraph g;  // blend of the mask-replacement embedding, grads to x, v, m
      DTensor m({H, W});
      std::uniform_real_distribution<double> u01(0.05, 0.95);
      for (auto& v : m.data) v = u01(rng);
      int x = g.param("x", randn({N, H, W, C}, rng));
      int v = g.param("v", randn({H, W, C}, rng));
      int mi = g.param("m", m);
      int y = g.blend(x, v, mi);
      auto rep = grad_check(g, g.sum(g.mul(y, y)), 1e-5);
      CHECK(rep.max_rel_error < 1e-4);
    }
    {
      DGraph g;  // sigmoid
      int x = g.param("x", randn({N, 6}, rng));
      auto rep = grad_check(g, g.sum(g.sigmoid(x)), 1e-5);
      CHECK(rep.max_rel_error < 1e-4);
    }
    {
      DGraph g;  // row_scale
      int x = g.param("x", randn({N, 5}, rng));
      int s = g.param("s", randn({5}, rng));
      auto rep = grad_check(g, g.sum(g.mul(g.row_scale(x, s), g.row_scale(x, s))), 1e-5);
      CHECK(rep.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("grad_check on linear graph is near exact") {
  std::mt19937_64 rng(77);
  DGraph g;
  int x = g.param("x", randn({6}, rng));
  int obj = g.sum(g.scale(x, 3.25));
  auto rep = grad_check(g, obj, 1e-5);
  CHECK(rep.max_rel_error < 1e-10);
}

TEST_CASE("grad_check negative control: corrupted gradient is flagged") {
  std::mt19937_64 rng(78);
  DGraph g;
  int x = g.param("x", randn({8}, rng));
  int obj = g.sum(g.mul(x, x));
  auto rep = grad_check(g, obj, 1e-5);
  REQUIRE(rep.max_rel_error < 1e-8);
  auto broken = rep.analytic["x"];
  broken[3] += 0.5;  // a wrong gradient rule would land here
  CHECK(relative_error(broken, rep.numeric["x"]) > 1e-2);
}

TEST_CASE("adam zero gradient leaves params unchanged") {
  Tensor p({4}, 2.5f);
  p.requires_grad = true;
  p.zero_grad();
  AdamState st;
  st.lr = 0.1f;
  st.init({&p});
  adam_step({&p}, st);
  CHECK(st.step_count == 1);
  for (float v : p.data) CHECK(v == doctest::Approx(2.5f));
}

TEST_CASE("adam first step is approximately lr*sign(g)") {
  Tensor p({3}, 0.0f);
  p.requires_grad = true;
  p.grad = {0.3f, -1.7f, 4.0f};
  AdamState st;
  st.lr = 0.05f;
  st.init({&p});
  adam_step({&p}, st);
  CHECK(p.data[0] == doctest::Approx(-0.05).epsilon(1e-3));
  CHECK(p.data[1] == doctest::Approx(0.05).epsilon(1e-3));
  CHECK(p.data[2] == doctest::Approx(-0.05).epsilon(1e-3));
}

TEST_CASE("adam ascent negates the direction") {
  Tensor p({1}, 0.0f);
  p.grad = {2.0f};
  AdamState st;
  st.lr = 0.05f;
  st.init({&p});
  adam_step({&p}, st, /*ascent=*/true);
  CHECK(p.data[0] == doctest::Approx(0.05).epsilon(1e-3));
}

TEST_CASE("adam converges on (w-3)^2 and tracks the scalar recursion") {
  // independent recursion first
  oracle::ScalarAdam ref(0.1);
  double wr = 0.0;
  for (int t = 0; t < 200; ++t) wr = ref.step(wr, 2.0 * (wr - 3.0));
  REQUIRE(std::fabs(wr - 3.0) < 0.05);

  TensorT<double> p({1}, 0.0);
  AdamStateT<double> st;
  st.lr = 0.1;
  st.init({&p});
  for (int t = 0; t < 200; ++t) {
    p.grad = {2.0 * (p.data[0] - 3.0)};
    adam_step({&p}, st);
  }
  CHECK(std::fabs(p.data[0] - 3.0) < 0.05);
  CHECK(p.data[0] == doctest::Approx(wr).epsilon(1e-9));
}

TEST_CASE("adam validates hyperparameters and shapes") {
  AdamState st;
  st.lr = -1.0f;
  CHECK_THROWS_AS(st.validate(), ValidationError);
  st.lr = 0.1f;
  st.beta1 = 1.0f;
  CHECK_THROWS_AS(st.validate(), ValidationError);

  Tensor a({2}, 0.0f);
  a.grad = {1.0f, 1.0f};
  AdamState ok;
  ok.init({&a});
  Tensor b({3}, 0.0f);
  b.grad = {1.0f, 1.0f, 1.0f};
  CHECK_THROWS_AS(adam_step({&a, &b}, ok), ShapeError);
}

TEST_CASE("forward is deterministic bit for bit") {
  std::mt19937_64 rng(9);
  DTensor x = randn({2, 6, 6, 3}, rng);
  DTensor k = randn({3, 3, 3, 4}, rng);
  DTensor b = randn({4}, rng);
  auto run = [&]() {
    DGraph g;
    int xi = g.input("x");
    int y = g.sum(g.max_pool2(g.relu(g.conv2d(xi, g.frozen("k", k), g.frozen("b", b), Padding::Same))));
    g.bind(xi, x);
    return g.forward(y).data[0];
  };
  const double a = run();
  const double c = run();
  CHECK(std::memcmp(&a, &c, sizeof a) == 0);
}

TEST_CASE("shape errors name the offending node") {
  DGraph g;
  int x = g.input("x");
  int y = g.conv2d(x, g.frozen("k", DTensor({3, 3, 5, 2}, 0.1)), g.frozen("b", DTensor({2}, 0.0)),
                   Padding::Same, "conv_bad");
  g.bind(x, DTensor({1, 6, 6, 3}, 0.5));
  try {
    g.forward(y);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("conv_bad") != std::string::npos);
  }
}
