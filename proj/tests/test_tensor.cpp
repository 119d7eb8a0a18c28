#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "check.hpp"
#include "icf/tensor.hpp"

using namespace icf;
using icf::test::grad_rel_error;
using icf::test::probe_sum;
using icf::test::randn;
using TD = Tensor<double>;
using TF = Tensor<float>;

TEST_CASE("matmul values") {
  auto eye = TF::from({2, 2}, {1, 0, 0, 1});
  auto a = TF::from({2, 2}, {1, 2, 3, 4});
  auto r = matmul(eye, a);
  CHECK(std::vector<float>(r.data().begin(), r.data().end()) == std::vector<float>{1, 2, 3, 4});

  auto z = matmul(TF::from({2, 2}, {1, 0, 0, 0}), TF::from({2, 1}, {0, 5}));
  CHECK(z.at(0, 0) == 0.0f);
  CHECK(z.at(1, 0) == 0.0f);

  std::mt19937_64 rng(1);
  auto x = randn({3, 4}, rng), y = randn({4, 2}, rng);
  auto p = matmul(x, y);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 4; ++k) acc += x.at(i, k) * y.at(k, j);
      CHECK(p.at(i, j) == doctest::Approx(acc).epsilon(1e-14));
    }
  CHECK_THROWS_AS(matmul(x, x), ShapeError);
}

TEST_CASE("matmul_nt equals matmul with a transposed operand") {
  std::mt19937_64 rng(2);
  auto a = randn({3, 5}, rng), b = randn({4, 5}, rng);
  auto r = matmul_nt(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 5; ++k) acc += a.at(i, k) * b.at(j, k);
      CHECK(r.at(i, j) == doctest::Approx(acc).epsilon(1e-14));
    }
}

TEST_CASE("flops counter charges 2MNK per matmul") {
  std::mt19937_64 rng(3);
  auto a = randn({3, 4}, rng), b = randn({4, 5}, rng), c = randn({6, 4}, rng);
  FlopsScope outer;
  matmul(a, b);
  {
    FlopsScope inner;
    matmul_nt(a, c);
    CHECK(inner.count() == 2u * 3 * 6 * 4);
  }
  add(a, a);
  softmax_masked(a, Mask::full(3, 4));
  CHECK(outer.count() == 2u * 3 * 5 * 4 + 2u * 3 * 6 * 4);
}

TEST_CASE("softmax_masked") {
  auto u = softmax_masked(TF::full({1, 4}, 0.3f), Mask::full(1, 4));
  for (float v : u.data()) CHECK(v == doctest::Approx(0.25));

  auto s = softmax_masked(TD::from({1, 3}, {0, 1000, 0}), Mask{1, 3, {1, 0, 1}});
  CHECK(s.at(0, 0) == doctest::Approx(0.5));
  CHECK(s.at(0, 1) == 0.0);
  CHECK(s.at(0, 2) == doctest::Approx(0.5));

  std::mt19937_64 rng(4);
  auto x = randn({2, 3}, rng);
  Mask m{2, 3, {1, 0, 1, 0, 1, 1}};
  auto y = softmax_masked(x, m);
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 3; ++c)
      if (m(r, c)) z += std::exp(x.at(r, c));
    double row = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double expect = m(r, c) ? std::exp(x.at(r, c)) / z : 0.0;
      CHECK(std::abs(y.at(r, c) - expect) < 1e-6);
      if (!m(r, c)) CHECK(y.at(r, c) == 0.0);
      row += y.at(r, c);
    }
    CHECK(std::abs(row - 1.0) < 1e-6);
  }
  CHECK_THROWS_AS(softmax_masked(x, Mask{2, 3, {1, 1, 1, 0, 0, 0}}), std::invalid_argument);
}

TEST_CASE("rms_norm") {
  auto ones = rms_norm(TD::full({1, 4}, 1.0), TD::full({4}, 1.0), 0.0);
  for (double v : ones.data()) CHECK(v == doctest::Approx(1.0));
  auto zero = rms_norm(TD::zeros({1, 4}), TD::full({4}, 1.0), 1e-6);
  for (double v : zero.data()) CHECK(v == 0.0);

  std::mt19937_64 rng(5);
  auto x = randn({1, 6}, rng), w = randn({6}, rng);
  auto y = rms_norm(x, w, 1e-6);
  double ms = 0;
  for (double v : x.data()) ms += v * v;
  const double inv = 1.0 / std::sqrt(ms / 6 + 1e-6);
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(y.at(0, i) - x.at(0, i) * inv * w.data()[i]) < 1e-6);
  CHECK_THROWS_AS(rms_norm(x, TD::full({5}, 1.0), 1e-6), ShapeError);
}

TEST_CASE("silu_gate") {
  std::mt19937_64 rng(6);
  auto up = randn({2, 3}, rng);
  auto zero = silu_gate(up, TD::zeros({2, 3}));
  for (double v : zero.data()) CHECK(v == 0.0);
  auto sat = silu_gate(up, TD::full({2, 3}, 60.0));
  for (std::size_t i = 0; i < 6; ++i) CHECK(sat.data()[i] == doctest::Approx(60.0 * up.data()[i]));

  auto gate = randn({2, 3}, rng);
  auto y = silu_gate(up, gate);
  for (std::size_t i = 0; i < 6; ++i) {
    const double g = gate.data()[i];
    CHECK(std::abs(y.data()[i] - up.data()[i] * g / (1 + std::exp(-g))) < 1e-6);
  }
  CHECK_THROWS_AS(silu_gate(up, randn({3, 2}, rng)), ShapeError);
}

TEST_CASE("cross_entropy") {
  std::vector<int> t{2};
  CHECK(cross_entropy(TD::from({1, 3}, {0, 0, 800}), std::span<const int>(t)).item() == doctest::Approx(0.0));
  std::vector<int> t2{0, 17, 255};
  CHECK(cross_entropy(TD::zeros({3, 256}), std::span<const int>(t2)).item() == doctest::Approx(std::log(256.0)));

  std::mt19937_64 rng(7);
  auto logits = randn({3, 5}, rng);
  std::vector<int> tg{4, 0, 2};
  double expect = 0;
  for (std::size_t r = 0; r < 3; ++r) {
    double m = -1e300;
    for (std::size_t c = 0; c < 5; ++c) m = std::max(m, logits.at(r, c));
    double z = 0;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(logits.at(r, c) - m);
    expect += m + std::log(z) - logits.at(r, static_cast<std::size_t>(tg[r]));
  }
  CHECK(std::abs(cross_entropy(logits, std::span<const int>(tg)).item() - expect / 3) < 1e-6);
  std::vector<int> bad{0, 5, 1};
  CHECK_THROWS_AS(cross_entropy(logits, std::span<const int>(bad)), std::out_of_range);
}

TEST_CASE("backward basics") {
  auto x = TD::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  auto a = TD::scalar(2.0, true), b = TD::scalar(3.0, true);
  backward(mul(a, b));
  CHECK(a.grad()[0] == 3.0);
  CHECK(b.grad()[0] == 2.0);

  // A leaf that does not take part ends up with a zero gradient.
  auto unused = TD::scalar(5.0, true);
  unused.zero_grad();
  backward(sum(x));
  CHECK(unused.grad()[0] == 0.0);

  CHECK_THROWS_AS(backward(x), std::invalid_argument);
}

TEST_CASE("backward twice from zeroed grads is bitwise identical") {
  std::mt19937_64 rng(8);
  auto w = randn({4, 4}, rng), x = randn({3, 4}, rng);
  w.set_requires_grad(true);
  auto run = [&] {
    w.zero_grad();
    backward(probe_sum(rms_norm(matmul(x, w), TD::full({4}, 1.0), 1e-6)));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  CHECK(run() == run());
}

TEST_CASE("non-finite values are reported") {
  CHECK_THROWS_AS(TF::from({1, 2}, {1.0f, std::numeric_limits<float>::infinity()}), NonFiniteError);
  auto big = TF::full({1, 1}, 3e38f);
  CHECK_THROWS_AS(scale(big, 10.0f), NonFiniteError);
}

TEST_CASE("finite-difference gradients of every primitive") {
  std::mt19937_64 rng(9);
  using V = std::vector<TD>;
  SUBCASE("matmul") {
    CHECK(grad_rel_error([](const V& in) { return probe_sum(matmul(in[0], in[1])); },
                         {randn({3, 4}, rng), randn({4, 2}, rng)}) <= 1e-4);
  }
  SUBCASE("matmul_nt") {
    CHECK(grad_rel_error([](const V& in) { return probe_sum(matmul_nt(in[0], in[1])); },
                         {randn({3, 4}, rng), randn({5, 4}, rng)}) <= 1e-4);
  }
  SUBCASE("add, mul, scale, sum") {
    CHECK(grad_rel_error([](const V& in) { return sum(scale(mul(add(in[0], in[1]), in[1]), 0.7)); },
                         {randn({2, 3}, rng), randn({2, 3}, rng)}) <= 1e-4);
  }
  SUBCASE("rms_norm") {
    CHECK(grad_rel_error([](const V& in) { return probe_sum(rms_norm(in[0], in[1], 1e-6)); },
                         {randn({3, 6}, rng), randn({6}, rng)}) <= 1e-4);
  }
  SUBCASE("silu_gate") {
    CHECK(grad_rel_error([](const V& in) { return probe_sum(silu_gate(in[0], in[1])); },
                         {randn({2, 5}, rng), randn({2, 5}, rng)}) <= 1e-4);
  }
  SUBCASE("softmax_masked") {
    Mask m{3, 4, {1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 0}};
    CHECK(grad_rel_error([&](const V& in) { return probe_sum(softmax_masked(in[0], m)); }, {randn({3, 4}, rng)}) <=
          1e-4);
  }
  SUBCASE("cross_entropy") {
    std::vector<int> t{1, 4, 0};
    CHECK(grad_rel_error([&](const V& in) { return cross_entropy(in[0], std::span<const int>(t)); },
                         {randn({3, 5}, rng)}) <= 1e-4);
  }
  SUBCASE("embedding with repeated ids") {
    std::vector<int> ids{2, 0, 2, 3};
    CHECK(grad_rel_error([&](const V& in) { return probe_sum(embedding(in[0], std::span<const int>(ids))); },
                         {randn({5, 3}, rng)}) <= 1e-4);
  }
  SUBCASE("concat and slice") {
    CHECK(grad_rel_error(
              [](const V& in) {
                auto r = concat_rows<double>({in[0], in[1]});
                auto c = concat_cols<double>({slice_rows(r, 1, 3), slice_rows(slice_cols(r, 0, 2), 0, 3)});
                return probe_sum(c);
              },
              {randn({2, 3}, rng), randn({2, 3}, rng)}) <= 1e-4);
  }
  SUBCASE("rope") {
    std::vector<std::size_t> pos{0, 3, 7};
    CHECK(grad_rel_error([&](const V& in) { return probe_sum(rope(in[0], std::span<const std::size_t>(pos), 4, 10000.0)); },
                         {randn({3, 8}, rng)}) <= 1e-4);
  }
}

TEST_CASE("rope operator") {
  SUBCASE("position 0 is the identity") {
    auto r = rope_matrix(0, 6, 10000.0);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) CHECK(r[i * 6 + j] == (i == j ? 1.0 : 0.0));
  }
  SUBCASE("h=2, position 1 rotates by one radian") {
    auto r = rope_matrix(1, 2, 10000.0);
    CHECK(r[0] == doctest::Approx(std::cos(1.0)));
    CHECK(r[1] == doctest::Approx(-std::sin(1.0)));
    CHECK(r[2] == doctest::Approx(std::sin(1.0)));
    CHECK(r[3] == doctest::Approx(std::cos(1.0)));
  }
  SUBCASE("odd width is rejected") {
    CHECK_THROWS_AS(rope_matrix(1, 3, 10000.0), std::invalid_argument);
    std::vector<std::size_t> pos{1};
    CHECK_THROWS_AS(rope(TD::zeros({1, 3}), std::span<const std::size_t>(pos), 3, 10000.0), std::invalid_argument);
  }
  SUBCASE("rope() applies rope_matrix row-wise") {
    std::mt19937_64 rng(10);
    auto x = randn({1, 8}, rng);
    std::vector<std::size_t> pos{5};
    auto y = rope(x, std::span<const std::size_t>(pos), 8, 10000.0);
    auto r = rope_matrix(5, 8, 10000.0);
    for (std::size_t i = 0; i < 8; ++i) {
      double acc = 0;
      for (std::size_t j = 0; j < 8; ++j) acc += r[i * 8 + j] * x.data()[j];
      CHECK(std::abs(y.data()[i] - acc) < 1e-12);
    }
  }
}

TEST_CASE("rope relative-position identity") {
  std::mt19937_64 rng(11);
  const std::size_t h = 16;
  auto apply = [&](std::int64_t pos, const std::vector<double>& v) {
    auto r = rope_matrix(pos, h, 10000.0);
    std::vector<double> out(h, 0.0);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < h; ++j) out[i] += r[i * h + j] * v[j];
    return out;
  };
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<int> posd(0, 500);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> q(h), k(h);
    for (auto& v : q) v = nd(rng);
    for (auto& v : k) v = nd(rng);
    const int i = posd(rng), j = posd(rng);
    CHECK(std::abs(dot(apply(i, q), apply(j, k)) - dot(q, apply(j - i, k))) < 1e-6);
  }
}

TEST_CASE("requires_grad only on leaves") {
  auto a = TF::full({2, 2}, 1.0f, true);
  auto b = add(a, a);
  CHECK(b.requires_grad());
  CHECK_THROWS(b.set_requires_grad(false));
  NoGradGuard g;
  auto c = add(a, a);
  CHECK_FALSE(c.requires_grad());
}
