#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bixnas/graph.hpp"
#include "bixnas/optim.hpp"
#include "testutil.hpp"

using namespace bixnas;
using namespace testutil;

TEST_CASE("conv2d forward matches the six-loop oracle") {
  struct Case {
    TensorShape x, w;
    int stride, padding;
  };
  const Case cases[] = {
      {{2, 3, 8, 8}, {5, 3, 3, 3}, 1, 1},
      {{1, 4, 9, 7}, {2, 4, 3, 3}, 2, 0},
      {{2, 2, 6, 6}, {3, 2, 1, 1}, 1, 0},
      {{1, 1, 5, 5}, {1, 1, 3, 3}, 1, 2},
  };
  int k = 0;
  for (const auto& c : cases) {
    CAPTURE(k);
    const auto x = randn_t(c.x, 100 + k);
    const auto w = randn_t(c.w, 200 + k);
    const auto b = randn_t({1, c.w.b, 1, 1}, 300 + k);
    Graph<double> g;
    auto pw = std::make_shared<Param<double>>("w", w);
    auto pb = std::make_shared<Param<double>>("b", b);
    const auto out = g.conv2d(g.input(x), g.param(pw), g.param(pb), c.stride, c.padding);
    const auto oracle = naive_conv2d(x, w, b, c.stride, c.padding);
    REQUIRE(g.value(out).shape == oracle.shape);
    for (std::size_t i = 0; i < oracle.data.size(); ++i)
      CHECK(g.value(out).data[i] == doctest::Approx(oracle.data[i]).epsilon(1e-12));
    ++k;
  }
}

TEST_CASE("conv2d gradients pass a finite-difference check") {
  const auto x0 = randn_t({2, 3, 6, 6}, 1);
  auto px = std::make_shared<Param<double>>("x", x0);
  auto pw = randn_p("w", {4, 3, 3, 3}, 2, 0.5);
  auto pb = randn_p("b", {1, 4, 1, 1}, 3, 0.5);
  const auto forward = [&](bool back) {
    Graph<double> g;
    const auto y = g.conv2d(g.param(px), g.param(pw), g.param(pb), 1, 1);
    // square so the loss is curved in every coordinate
    const auto loss = g.sum(g.mul(y, y));
    if (back) g.backward(loss);
    return g.value(loss).data[0];
  };
  const auto res = fd_check({px, pw, pb}, [&] { return forward(false); }, [&] { forward(true); });
  CHECK(res.checked >= 100);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("strided padded conv gradients pass a finite-difference check") {
  auto px = std::make_shared<Param<double>>("x", randn_t({1, 2, 7, 7}, 4));
  auto pw = randn_p("w", {3, 2, 3, 3}, 5, 0.5);
  auto pb = randn_p("b", {1, 3, 1, 1}, 6, 0.5);
  const auto forward = [&](bool back) {
    Graph<double> g;
    const auto y = g.conv2d(g.param(px), g.param(pw), g.param(pb), 2, 1);
    const auto loss = g.sum(g.mul(y, y));
    if (back) g.backward(loss);
    return g.value(loss).data[0];
  };
  const auto res = fd_check({px, pw, pb}, [&] { return forward(false); }, [&] { forward(true); });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("relu / add / mul / scale / sum gradients pass a finite-difference check") {
  // keep every relu input away from its kink
  auto pa = std::make_shared<Param<double>>("a", randn_t({2, 3, 4, 4}, 7));
  auto pbp = std::make_shared<Param<double>>("b", randn_t({2, 3, 4, 4}, 8));
  for (auto* p : {&pa, &pbp})
    for (auto& v : (*p)->value.data) v += (v >= 0 ? 0.25 : -0.25);
  const auto forward = [&](bool back) {
    Graph<double> g;
    const auto r = g.relu(g.param(pa));
    const auto m = g.mul(r, g.param(pbp));
    const auto s = g.add(m, g.scale(g.param(pa), -0.5));
    const auto loss = g.sum(g.mul(s, s));
    if (back) g.backward(loss);
    return g.value(loss).data[0];
  };
  const auto res = fd_check({pa, pbp}, [&] { return forward(false); }, [&] { forward(true); });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("bilinear resize matches the align-corners table on 2x2 -> 4x4") {
  Tensor<double> x({1, 1, 2, 2});
  x.data = {0, 1, 2, 3};
  Graph<double> g;
  const auto out = g.bilinear_resize(g.input(x), 4, 4);
  for (i64 i = 0; i < 4; ++i)
    for (i64 j = 0; j < 4; ++j)
      CHECK(g.value(out).at(0, 0, i, j) == doctest::Approx((2.0 * i + j) / 3.0).epsilon(1e-12));
}

TEST_CASE("bilinear resize to the same size is a bit-exact identity") {
  const auto x = randn_t({2, 3, 5, 5}, 11);
  Graph<double> g;
  const auto out = g.bilinear_resize(g.input(x), 5, 5);
  CHECK(g.value(out).data == x.data);
}

TEST_CASE("bilinear resize gradients pass a finite-difference check both ways") {
  for (const i64 out_hw : {9, 3}) {
    CAPTURE(out_hw);
    auto px = std::make_shared<Param<double>>("x", randn_t({1, 2, 5, 5}, 12 + out_hw));
    const auto forward = [&](bool back) {
      Graph<double> g;
      const auto y = g.bilinear_resize(g.param(px), out_hw, out_hw);
      const auto loss = g.sum(g.mul(y, y));
      if (back) g.backward(loss);
      return g.value(loss).data[0];
    };
    const auto res = fd_check({px}, [&] { return forward(false); }, [&] { forward(true); });
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("max-pool picks the window maximum and routes its gradient") {
  Tensor<double> x({1, 1, 2, 4});
  x.data = {1, 5, 2, 2, 3, 0, 2, 9};
  auto px = std::make_shared<Param<double>>("x", x);
  Graph<double> g;
  const auto y = g.max_pool2(g.param(px));
  CHECK(g.value(y).shape == TensorShape{1, 1, 1, 2});
  CHECK(g.value(y).data[0] == 5);
  CHECK(g.value(y).data[1] == 9);
  g.backward(g.sum(y));
  const std::vector<double> want{0, 1, 0, 0, 0, 0, 0, 1};
  CHECK(px->grad.data == want);
}

TEST_CASE("max-pool gradients pass a finite-difference check") {
  auto px = std::make_shared<Param<double>>("x", randn_t({2, 2, 6, 6}, 13));
  const auto forward = [&](bool back) {
    Graph<double> g;
    const auto y = g.max_pool2(g.param(px));
    const auto loss = g.sum(g.mul(y, y));
    if (back) g.backward(loss);
    return g.value(loss).data[0];
  };
  const auto res = fd_check({px}, [&] { return forward(false); }, [&] { forward(true); });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("batch norm (training) gradients pass a finite-difference check") {
  auto px = std::make_shared<Param<double>>("x", randn_t({3, 4, 5, 5}, 14));
  auto pg = std::make_shared<Param<double>>("g", randn_t({1, 4, 1, 1}, 15, 0.3));
  auto pb = std::make_shared<Param<double>>("b", randn_t({1, 4, 1, 1}, 16, 0.3));
  for (auto& v : pg->value.data) v += 1.0;  // keep scales away from zero
  // A pure sum-of-squares after normalization is nearly invariant to x (the
  // statistics absorb the perturbation), leaving ~0 gradients that drown in
  // differencing noise; the fixed random linear term keeps them O(1).
  const auto r = randn_t({3, 4, 5, 5}, 17);
  const auto forward = [&](bool back) {
    Graph<double> g;
    NormStats<double> stats(4);  // fresh stats: running buffers must not leak between probes
    const auto y = g.batch_norm(g.param(px), g.param(pg), g.param(pb), &stats, true);
    const auto loss = g.sum(g.add(g.mul(y, g.input(r)), g.mul(y, y)));
    if (back) g.backward(loss);
    return g.value(loss).data[0];
  };
  const auto res = fd_check({px, pg, pb}, [&] { return forward(false); }, [&] { forward(true); });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("batch norm eval mode normalizes with the running buffers") {
  auto pg = std::make_shared<Param<double>>("g", Tensor<double>::full({1, 2, 1, 1}, 2.0));
  auto pb = std::make_shared<Param<double>>("b", Tensor<double>::full({1, 2, 1, 1}, 0.5));
  NormStats<double> stats(2);
  stats.running_mean.data = {1.0, -1.0};
  stats.running_var.data = {4.0, 0.25};
  Tensor<double> x({1, 2, 1, 2});
  x.data = {3.0, 1.0, 0.0, -1.0};
  Graph<double> g;
  const auto y = g.batch_norm(g.input(x), g.param(pg), g.param(pb), &stats, false);
  const double e = 1e-5;
  CHECK(g.value(y).data[0] == doctest::Approx(2 * (3 - 1) / std::sqrt(4 + e) + 0.5));
  CHECK(g.value(y).data[1] == doctest::Approx(2 * (1 - 1) / std::sqrt(4 + e) + 0.5));
  CHECK(g.value(y).data[2] == doctest::Approx(2 * (0 + 1) / std::sqrt(0.25 + e) + 0.5));
  CHECK(g.value(y).data[3] == doctest::Approx(2 * (-1 + 1) / std::sqrt(0.25 + e) + 0.5));
}

TEST_CASE("cross entropy equals ln(C) on uniform logits and ~0 when confident") {
  for (const i64 classes : {2, 5}) {
    CAPTURE(classes);
    Tensor<float> logits({1, classes, 2, 2});
    IndexMap target(1, 2, 2);
    for (std::size_t i = 0; i < target.v.size(); ++i) target.v[i] = static_cast<std::int32_t>(i % classes);
    Graph<float> g;
    const auto loss = g.cross_entropy(g.input(logits), target);
    CHECK(g.value(loss).data[0] == doctest::Approx(std::log(double(classes))).epsilon(1e-6));
  }
  Tensor<float> confident({1, 3, 1, 2});
  confident.data = {20, 0, 0, 20, 0, 0};  // pixel 0 -> class 0, pixel 1 -> class 1
  IndexMap t2(1, 1, 2);
  t2.v = {0, 1};
  Graph<float> g2;
  CHECK(g2.value(g2.cross_entropy(g2.input(confident), t2)).data[0] < 1e-3);
}

TEST_CASE("cross entropy gradients pass a finite-difference check") {
  auto pl = std::make_shared<Param<double>>("logits", randn_t({2, 4, 3, 3}, 17));
  IndexMap target(2, 3, 3);
  Rng rng(18);
  for (auto& v : target.v) v = static_cast<std::int32_t>(rng.uniform_int(0, 3));
  const auto forward = [&](bool back) {
    Graph<double> g;
    const auto loss = g.cross_entropy(g.param(pl), target);
    if (back) g.backward(loss);
    return g.value(loss).data[0];
  };
  const auto res = fd_check({pl}, [&] { return forward(false); }, [&] { forward(true); });
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("softmax over columns gradients pass a finite-difference check") {
  auto pm = std::make_shared<Param<double>>("m", randn_t({1, 1, 5, 3}, 19));
  const auto w = randn_t({1, 1, 5, 3}, 20);  // fixed mixing weights make the loss generic
  for (const double tau : {1.0, 0.37}) {
    CAPTURE(tau);
    const auto forward = [&](bool back) {
      Graph<double> g;
      const auto s = g.softmax_columns(g.param(pm), tau);
      const auto loss = g.sum(g.mul(s, g.input(w)));
      if (back) g.backward(loss);
      return g.value(loss).data[0];
    };
    const auto res = fd_check({pm}, [&] { return forward(false); }, [&] { forward(true); });
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("softmax columns each sum to one and sharpen as tau shrinks") {
  const auto m = randn_t({1, 1, 6, 4}, 21);
  Graph<double> g;
  const auto soft = g.softmax_columns(g.input(m), 1.0);
  const auto sharp = g.softmax_columns(g.input(m), 0.05);
  for (i64 c = 0; c < 4; ++c) {
    double s1 = 0, s2 = 0, m2 = 0;
    for (i64 r = 0; r < 6; ++r) {
      s1 += g.value(soft).at(0, 0, r, c);
      s2 += g.value(sharp).at(0, 0, r, c);
      m2 = std::max(m2, g.value(sharp).at(0, 0, r, c));
    }
    CHECK(s1 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s2 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m2 > 0.99);  // near one-hot at tiny temperature
  }
}

TEST_CASE("hard one-hot is a valid straight-through argmax") {
  const auto m = randn_t({1, 1, 5, 3}, 22);
  Graph<double> g;
  const auto soft = g.softmax_columns(g.input(m), 1.0);
  const auto hard = g.hard_onehot_st(soft);
  for (i64 c = 0; c < 3; ++c) {
    double sum = 0;
    i64 ones = 0, arg = -1;
    double best = -1;
    for (i64 r = 0; r < 5; ++r) {
      const double v = g.value(hard).at(0, 0, r, c);
      CHECK((v == 0.0 || v == 1.0));
      sum += v;
      if (v == 1.0) ones++;
      if (g.value(soft).at(0, 0, r, c) > best) {
        best = g.value(soft).at(0, 0, r, c);
        arg = r;
      }
    }
    CHECK(sum == 1.0);
    CHECK(ones == 1);
    CHECK(g.value(hard).at(0, 0, arg, c) == 1.0);
  }
}

TEST_CASE("straight-through argmax passes gradients through unchanged") {
  auto pm = std::make_shared<Param<double>>("m", randn_t({1, 1, 4, 2}, 23));
  const auto w = randn_t({1, 1, 4, 2}, 24);
  Graph<double> g;
  const auto soft = g.softmax_columns(g.param(pm), 1.0);
  const auto loss1 = g.sum(g.mul(g.hard_onehot_st(soft), g.input(w)));
  // d loss1 / d soft through the straight-through estimator equals w, so the
  // matrix gradient must match the plain soft loss with the same weights...
  g.backward(loss1);
  const auto grad_st = pm->grad;
  pm->zero_grad();
  Graph<double> g2;
  const auto loss2 = g2.sum(g2.mul(g2.softmax_columns(g2.param(pm), 1.0), g2.input(w)));
  g2.backward(loss2);
  CHECK(grad_st.data == pm->grad.data);  // ...bit for bit
}

TEST_CASE("gumbel-perturbed argmax samples match softmax probabilities") {
  Tensor<double> m({1, 1, 4, 1});
  m.data = {0.9, 0.1, -0.4, 1.3};
  double z = 0;
  std::vector<double> want(4);
  for (int r = 0; r < 4; ++r) z += std::exp(m.data[static_cast<std::size_t>(r)]);
  for (int r = 0; r < 4; ++r) want[static_cast<std::size_t>(r)] = std::exp(m.data[static_cast<std::size_t>(r)]) / z;

  Rng rng(2024);
  const int draws = 20000;
  std::vector<double> freq(4, 0);
  for (int d = 0; d < draws; ++d) {
    Tensor<double> noise({1, 1, 4, 1});
    for (auto& v : noise.data) v = rng.gumbel();
    Graph<double> g;
    const auto hard = g.hard_onehot_st(g.softmax_columns(g.input(m), 1.0, &noise));
    for (int r = 0; r < 4; ++r) freq[static_cast<std::size_t>(r)] += g.value(hard).at(0, 0, r, 0);
  }
  for (int r = 0; r < 4; ++r) {
    CAPTURE(r);
    // within five percentage points of the exact categorical probability
    CHECK(std::abs(freq[static_cast<std::size_t>(r)] / draws - want[static_cast<std::size_t>(r)]) < 0.05);
  }
}

TEST_CASE("average of streams is exact and near permutation-invariant") {
  const auto a = randn_t({1, 2, 3, 3}, 25), b = randn_t({1, 2, 3, 3}, 26), c = randn_t({1, 2, 3, 3}, 27);
  Graph<double> g;
  const auto m1 = g.average({g.input(a), g.input(b), g.input(c)});
  const auto m2 = g.average({g.input(c), g.input(a), g.input(b)});
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    CHECK(g.value(m1).data[i] == doctest::Approx((a.data[i] + b.data[i] + c.data[i]) / 3.0).epsilon(1e-14));
    CHECK(g.value(m1).data[i] == doctest::Approx(g.value(m2).data[i]).epsilon(1e-14));
  }
}

TEST_CASE("average gradients split equally") {
  auto pa = std::make_shared<Param<double>>("a", randn_t({1, 1, 2, 2}, 28));
  auto pb = std::make_shared<Param<double>>("b", randn_t({1, 1, 2, 2}, 29));
  Graph<double> g;
  g.backward(g.sum(g.average({g.param(pa), g.param(pb)})));
  for (const double v : pa->grad.data) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
  for (const double v : pb->grad.data) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("Adam takes a signed unit first step and ignores zero gradients") {
  auto p = std::make_shared<Param<double>>("p", Tensor<double>::full({1, 1, 1, 2}, 1.0));
  Adam<double> opt({p}, 1e-3);
  opt.zero_grad();
  p->grad.data = {0.3, -0.7};
  opt.step();
  CHECK(p->value.data[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-7));
  CHECK(p->value.data[1] == doctest::Approx(1.0 + 1e-3).epsilon(1e-7));

  auto q = std::make_shared<Param<double>>("q", Tensor<double>::full({1, 1, 1, 1}, 2.5));
  Adam<double> opt2({q}, 1e-3);
  opt2.zero_grad();
  opt2.step();
  CHECK(q->value.data[0] == 2.5);
}

TEST_CASE("Adam on an autodiff quadratic converges to the minimum") {
  auto pw = std::make_shared<Param<double>>("w", Tensor<double>::zeros({1, 1, 1, 1}));
  Adam<double> opt({pw}, 0.1);
  for (int i = 0; i < 200; ++i) {
    Graph<double> g;
    const auto target = g.input(Tensor<double>::full({1, 1, 1, 1}, -3.0));
    const auto diff = g.add(g.param(pw), target);  // w - 3
    const auto loss = g.sum(g.mul(diff, diff));
    opt.zero_grad();
    g.backward(loss);
    opt.step();
  }
  CHECK(pw->value.data[0] == doctest::Approx(3.0).epsilon(0.02));
}

TEST_CASE("learning-rate schedules") {
  CHECK(inverse_time_lr(1e-3, 3e-3, 0) == doctest::Approx(1e-3));
  CHECK(inverse_time_lr(1e-3, 3e-3, 100) == doctest::Approx(1e-3 / 1.3));
  CHECK(step_decay_lr(1e-3, 10.0, 10, 0) == doctest::Approx(1e-3));
  CHECK(step_decay_lr(1e-3, 10.0, 10, 9) == doctest::Approx(1e-3));
  CHECK(step_decay_lr(1e-3, 10.0, 10, 10) == doctest::Approx(1e-4));
  CHECK(step_decay_lr(1e-3, 10.0, 10, 25) == doctest::Approx(1e-5));
}

TEST_CASE("non-finite op results raise a numeric error naming the op") {
  Tensor<double> x({1, 1, 1, 1});
  x.data = {1e308};
  Graph<double> g;
  const auto n = g.input(x);
  CHECK_THROWS_AS(g.mul(n, n), NumericError);
}

TEST_CASE("backward demands a scalar loss") {
  Graph<double> g;
  const auto x = g.input(randn_t({1, 1, 2, 2}, 30));
  CHECK_THROWS_AS(g.backward(x), UsageError);
}

TEST_CASE("graph evaluation is deterministic") {
  const auto run = [] {
    Graph<double> g;
    const auto x = g.input(randn_t({2, 3, 8, 8}, 31));
    auto pw = randn_p("w", {4, 3, 3, 3}, 32, 0.5);
    auto pb = randn_p("b", {1, 4, 1, 1}, 33, 0.5);
    const auto y = g.relu(g.conv2d(x, g.param(pw), g.param(pb), 1, 1));
    return digest(g.value(y));
  };
  CHECK(run() == run());
}
