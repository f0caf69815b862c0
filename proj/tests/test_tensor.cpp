#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "icl/rng.hpp"
#include "icl/tensor.hpp"

using namespace icl;

namespace {

Tensor randn(Shape shape, std::uint64_t seed, bool grad = true) {
  RngStream rng(seed, "test-randn", 0);
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<double> d(n);
  for (auto& v : d) v = rng.normal();
  return Tensor::from_data(std::move(shape), std::move(d), grad);
}

}  // namespace

TEST_CASE("factories and accessors") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.rows() == 2);
  CHECK(z.cols() == 3);
  CHECK(z.size() == 6);
  for (double v : z.data()) CHECK(v == 0.0);

  Tensor s = Tensor::scalar(2.5);
  CHECK(s.is_scalar());
  CHECK(s.value() == 2.5);

  Tensor f = Tensor::full({4}, -1.0);
  CHECK(f.data()[3] == -1.0);

  Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(m.at(1, 0) == 3.0);
}

TEST_CASE("matmul matches naive oracle") {
  Tensor a = randn({3, 5}, 1, false);
  Tensor b = randn({5, 4}, 2, false);
  Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 5; ++k) acc += a.at(i, k) * b.at(k, j);
      CHECK(c.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("softmax_rows normalizes and honors the mask") {
  Tensor x = randn({3, 4}, 3, false);
  std::vector<std::uint8_t> mask{1, 1, 0, 0, 1, 1, 1, 0, 1, 0, 0, 0};
  Tensor p = softmax_rows(x, &mask);
  for (std::size_t i = 0; i < 3; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      if (!mask[i * 4 + j]) CHECK(p.at(i, j) == 0.0);
      row += p.at(i, j);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }

  std::vector<std::uint8_t> dead(12, 0);
  CHECK_THROWS(softmax_rows(x, &dead));
}

TEST_CASE("layernorm_rows output statistics") {
  Tensor x = randn({4, 8}, 4, false);
  Tensor g = Tensor::full({8}, 1.0);
  Tensor b = Tensor::zeros({8});
  Tensor y = layernorm_rows(x, g, b);
  for (std::size_t i = 0; i < 4; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mean += y.at(i, j);
    mean /= 8;
    for (std::size_t j = 0; j < 8; ++j)
      var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
    var /= 8;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("embedding gathers rows") {
  Tensor table = randn({6, 3}, 5, false);
  Tensor e = embedding(table, {4, 0, 4});
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(e.at(0, j) == table.at(4, j));
    CHECK(e.at(1, j) == table.at(0, j));
    CHECK(e.at(2, j) == table.at(4, j));
  }
}

TEST_CASE("slices") {
  Tensor x = randn({4, 6}, 6, false);
  Tensor r = slice_rows(x, 1, 2);
  CHECK(r.rows() == 2);
  CHECK(r.at(0, 3) == x.at(1, 3));
  Tensor c = slice_cols(x, 2, 3);
  CHECK(c.cols() == 3);
  CHECK(c.at(3, 0) == x.at(3, 2));
}

TEST_CASE("gradient checks per op") {
  const double step = 1e-5;
  const double tol = 1e-6;

  auto check = [&](const std::function<Tensor(const Tensor&)>& f, Shape shape,
                   std::uint64_t seed) {
    Tensor x = randn(shape, seed);
    CHECK(finite_diff_check(f, x, step) < tol);
  };

  Tensor w = randn({5, 4}, 100, false);
  check([&](const Tensor& x) { return matmul(x, w); }, {3, 5}, 10);
  check([&](const Tensor& x) { return matmul(w, x); }, {4, 6}, 11);
  check([](const Tensor& x) { return transpose(x); }, {3, 4}, 12);
  Tensor other = randn({3, 4}, 101, false);
  check([&](const Tensor& x) { return add(x, other); }, {3, 4}, 13);
  check([&](const Tensor& x) { return sub(other, x); }, {3, 4}, 14);
  check([&](const Tensor& x) { return mul(x, other); }, {3, 4}, 15);
  check([](const Tensor& x) { return scale(x, -2.5); }, {3, 4}, 16);
  Tensor row = randn({1, 4}, 102, false);
  check([&](const Tensor& x) { return add_rowvec(x, row); }, {3, 4}, 17);
  check([&](const Tensor& x) { return mul_rowvec(x, row); }, {3, 4}, 18);
  // weighted so the functional is not the constant row-sum
  Tensor wgt = randn({3, 4}, 105, false);
  check([&](const Tensor& x) { return mul(softmax_rows(x), wgt); }, {3, 4}, 19);
  check([](const Tensor& x) { return gelu(x); }, {3, 4}, 20);
  Tensor gamma = randn({1, 6}, 103, false);
  Tensor beta = randn({1, 6}, 104, false);
  check([&](const Tensor& x) { return layernorm_rows(x, gamma, beta); }, {3, 6}, 21);
  check([](const Tensor& x) { return slice_rows(x, 1, 2); }, {4, 3}, 22);
  check([](const Tensor& x) { return slice_cols(x, 1, 2); }, {4, 5}, 23);
  check([](const Tensor& x) { return sum(x); }, {3, 4}, 24);
  std::vector<double> target{0.5, -1.0, 2.0};
  check([&](const Tensor& x) { return mse_loss(x, target); }, {3, 1}, 25);
  std::vector<int> ids{2, 0, 1};
  check(
      [&](const Tensor& x) { return cross_entropy(x, ids, nullptr); }, {3, 5},
      26);
}

TEST_CASE("fused attention matches per-head primitive composition") {
  const std::size_t seq = 5, heads = 2, d = 8, dh = d / heads;
  Tensor x = randn({seq, d}, 30);
  Tensor wq = randn({d, d}, 31, false);
  Tensor wk = randn({d, d}, 32, false);
  Tensor wv = randn({d, d}, 33, false);
  Tensor wo = randn({d, d}, 34, false);

  Tensor fused = multihead_attention(x, wq, wk, wv, wo, 1, seq, heads);

  std::vector<std::uint8_t> causal(seq * seq, 0);
  for (std::size_t i = 0; i < seq; ++i)
    for (std::size_t j = 0; j <= i; ++j) causal[i * seq + j] = 1;
  Tensor q = matmul(x, wq), k = matmul(x, wk), v = matmul(x, wv);
  Tensor acc;
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor probs = softmax_rows(scale(matmul(qh, transpose(kh)),
                                      1.0 / std::sqrt(double(dh))), &causal);
    Tensor out = matmul(matmul(probs, vh), slice_rows(wo, h * dh, dh));
    acc = h == 0 ? out : add(acc, out);
  }
  for (std::size_t i = 0; i < seq; ++i)
    for (std::size_t j = 0; j < d; ++j)
      CHECK(fused.at(i, j) == doctest::Approx(acc.at(i, j)).epsilon(1e-10));
}

TEST_CASE("fused attention gradient check with edge mask") {
  const std::size_t seq = 4, heads = 2, d = 6;
  Tensor wq = randn({d, d}, 40, false);
  Tensor wk = randn({d, d}, 41, false);
  Tensor wv = randn({d, d}, 42, false);
  Tensor wo = randn({d, d}, 43, false);
  std::vector<std::uint8_t> allowed(seq * seq, 1);
  allowed[2 * seq + 0] = 0;  // blank one edge
  auto f = [&](const Tensor& x) {
    return multihead_attention(x, wq, wk, wv, wo, 1, seq, heads, &allowed);
  };
  Tensor x = randn({seq, d}, 44);
  CHECK(finite_diff_check(f, x, 1e-5) < 1e-6);

  // weight gradients too
  Tensor x2 = randn({seq, d}, 45, false);
  auto fw = [&](const Tensor& w) {
    return multihead_attention(x2, w, wk, wv, wo, 1, seq, heads, &allowed);
  };
  CHECK(finite_diff_check(fw, randn({d, d}, 46), 1e-5) < 1e-6);
}

TEST_CASE("backward grads are reproducible bit-exactly") {
  auto run = [] {
    Tensor x = randn({4, 4}, 50);
    Tensor w = randn({4, 4}, 51);
    Tensor loss = sum(gelu(matmul(x, w)));
    GradMap g = backward(loss);
    return std::vector<double>(g.at(x.id()).data().begin(),
                               g.at(x.id()).data().end());
  };
  CHECK(run() == run());
}

TEST_CASE("retain_grad exposes intermediate gradients") {
  Tensor x = randn({2, 2}, 60);
  Tensor h = gelu(x);
  h.retain_grad();
  Tensor loss = sum(h);
  GradMap g = backward(loss);
  REQUIRE(g.count(h.id()) == 1);
  for (double v : g.at(h.id()).data()) CHECK(v == 1.0);
}

TEST_CASE("f32 mode rounds op results through float") {
  Tensor a = Tensor::from_data({1, 1}, {0.1});
  Tensor b = Tensor::from_data({1, 1}, {0.2});
  set_global_precision(Precision::f32);
  double sum32 = add(a, b).value();
  set_global_precision(Precision::f64);
  double sum64 = add(a, b).value();
  CHECK(sum32 == double(float(sum64)));
  CHECK(sum32 != sum64);
}

TEST_CASE("finite_diff_check argument validation") {
  auto f = [](const Tensor& x) { return sum(x); };
  Tensor x = randn({2, 2}, 70);
  CHECK_THROWS_AS(finite_diff_check(f, x, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(finite_diff_check(f, x, -1e-5), std::invalid_argument);
}

TEST_CASE("parameter updates") {
  Tensor p = Tensor::from_data({2}, {1.0, 2.0}, true);
  p.update_data(std::vector<double>{3.0, 4.0});
  CHECK(p.data()[0] == 3.0);
  Tensor d = Tensor::from_data({2}, {1.0, 1.0});
  p.add_scaled_(d, -0.5);
  CHECK(p.data()[0] == 2.5);
  CHECK(p.data()[1] == 3.5);
}
