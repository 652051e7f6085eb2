#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "stcl/diffcore.hpp"
#include "stcl/errors.hpp"
#include "stcl/image.hpp"

using namespace stcl;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double spread = 1.0, bool grad = false) {
  std::normal_distribution<double> normal(0.0, spread);
  std::vector<double> v(shape_size(shape));
  for (double& d : v) d = normal(rng);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST_SUITE("diffcore") {

TEST_CASE("matmul examples") {
  Tape tape;
  const Tensor id = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor b = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor y = matmul(tape, id, b);
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{1, 2, 3, 4, 5, 6});

  const Tensor r = matmul(tape, Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  CHECK(r.item() == 11.0);

  const Tensor z = matmul(tape, Tensor::zeros({2, 2}), b);
  for (double v : z.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(matmul(tape, b, b), DimensionError);
}

TEST_CASE("matmul backward is g·bᵀ and aᵀ·g") {
  Tape tape;
  const Tensor a = Tensor::from({1, 2}, {1, 2}, true);
  const Tensor b = Tensor::from({2, 1}, {3, 4}, true);
  tape.backward(matmul(tape, a, b));
  CHECK(a.grad()[0] == 3.0);
  CHECK(a.grad()[1] == 4.0);
  CHECK(b.grad()[0] == 1.0);
  CHECK(b.grad()[1] == 2.0);
}

TEST_CASE("softmax examples") {
  Tape tape;
  const Tensor half = softmax(tape, Tensor::from({1, 2}, {0, 0}), 1);
  CHECK(half.at(0) == 0.5);
  CHECK(half.at(1) == 0.5);

  const Tensor big = softmax(tape, Tensor::from({1, 2}, {1000, 0}), 1);
  CHECK(big.at(0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(big.at(1) >= 0.0);
  CHECK(big.at(1) < 1e-300);

  const Tensor third = softmax(tape, Tensor::from({1, 2}, {std::log(2.0), 0}), 1);
  CHECK(third.at(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(third.at(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  // Axis 0 normalizes columns.
  const Tensor col = softmax(tape, Tensor::from({2, 1}, {std::log(2.0), 0}), 0);
  CHECK(col.at(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax slices sum to one for magnitudes up to 1e3") {
  auto rng = make_rng(7, 1);
  std::uniform_real_distribution<double> u(-1000.0, 1000.0);
  Tape tape(Tape::Mode::inference);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(5 * 7);
    for (double& d : v) d = u(rng);
    const Tensor x = Tensor::from({5, 7}, v);
    const Tensor rows = softmax(tape, x, 1);
    const Tensor cols = softmax(tape, x, 0);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) s += rows.at(r, c);
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
    for (std::size_t c = 0; c < 7; ++c) {
      double s = 0;
      for (std::size_t r = 0; r < 5; ++r) s += cols.at(r, c);
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("pairwise_similarity examples") {
  Tape tape;
  const Tensor e = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor dot = pairwise_similarity(tape, e, e, Similarity::dot);
  CHECK(dot.at(0, 0) == 1.0);
  CHECK(dot.at(0, 1) == 0.0);
  CHECK(dot.at(1, 0) == 0.0);
  CHECK(dot.at(1, 1) == 1.0);

  auto rng = make_rng(3, 1);
  Tensor a = random_tensor({4, 3}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  for (std::size_t c = 0; c < 4; ++c) b.mutable_data()[c * 5] = a.data()[c * 3];
  const Tensor l2 = pairwise_similarity(tape, a, b, Similarity::neg_l2);
  CHECK(l2.at(0, 0) == 0.0);
  for (std::size_t j = 1; j < 5; ++j) CHECK(l2.at(0, j) <= 0.0);

  const Tensor cos = pairwise_similarity(tape, Tensor::from({2, 1}, {1, 0}), Tensor::from({2, 1}, {0, 1}),
                                         Similarity::cosine);
  CHECK(cos.item() == 0.0);

  CHECK_THROWS_AS(pairwise_similarity(tape, Tensor::from({2, 1}, {0, 0}), e, Similarity::cosine),
                  DegenerateInputError);
  CHECK_THROWS_AS(pairwise_similarity(tape, Tensor::zeros({3, 1}), e, Similarity::dot), DimensionError);
}

TEST_CASE("cross_entropy examples") {
  Tape tape;
  const std::vector<std::size_t> zero{0};
  CHECK(cross_entropy(tape, Tensor::from({1, 4}, {0, 0, 0, 0}), zero).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(cross_entropy(tape, Tensor::from({1, 2}, {800, 0}), zero).item() < 1e-300);
  CHECK(cross_entropy(tape, Tensor::from({1, 2}, {1, 0}), zero).item() ==
        doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1.0))).epsilon(1e-15));
  const std::vector<std::size_t> bad{2};
  CHECK_THROWS_AS(cross_entropy(tape, Tensor::from({1, 2}, {1, 0}), bad), IndexError);
}

TEST_CASE("cross_entropy backward is (softmax - onehot)/N") {
  Tape tape;
  const Tensor logits = Tensor::from({2, 2}, {1, 0, 0, 0}, true);
  const std::vector<std::size_t> labels{0, 1};
  tape.backward(cross_entropy(tape, logits, labels));
  const double p = std::exp(1.0) / (std::exp(1.0) + 1.0);
  CHECK(logits.grad()[0] == doctest::Approx((p - 1.0) / 2).epsilon(1e-14));
  CHECK(logits.grad()[1] == doctest::Approx((1.0 - p) / 2).epsilon(1e-14));
  CHECK(logits.grad()[2] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(logits.grad()[3] == doctest::Approx(-0.25).epsilon(1e-14));
}

TEST_CASE("finite_diff_check of a quadratic is exact") {
  auto rng = make_rng(11, 1);
  const Tensor x = random_tensor({3, 4}, rng);
  const ScalarFunction f = [](Tape& tape, const Tensor& t) {
    return sum(tape, matmul(tape, reshape(tape, t, {1, 12}), reshape(tape, t, {12, 1})));
  };
  const GradCheckReport r = finite_diff_check(f, x);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-8);
  CHECK(r.coordinates == 12);
}

TEST_CASE("finite_diff_check rejects non-finite output") {
  const ScalarFunction f = [](Tape& tape, const Tensor& t) { return log(tape, sum(tape, t)); };
  CHECK_THROWS_AS(finite_diff_check(f, Tensor::from({1}, {0.0})), NumericError);
}

TEST_CASE("every op passes the gradient oracle on random inputs") {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    auto rng = make_rng(seed, 2);
    const Tensor w = random_tensor({2, 2, 3, 3}, rng);
    const Tensor b = random_tensor({2}, rng);
    const Tensor other = random_tensor({3, 4}, rng);
    const Tensor probe = random_tensor({2, 8, 8}, rng);
    const std::vector<std::size_t> labels{0, 2, 1, 3};
    const std::vector<std::size_t> cols{3, 0, 0};
    const std::vector<std::vector<ColumnTap>> taps{{{0, 0.25}, {1, 0.75}}, {{3, 1.0}}};
    const Similarity measure = seed % 3 == 0 ? Similarity::dot : seed % 3 == 1 ? Similarity::neg_l2 : Similarity::cosine;

    const std::vector<std::pair<const char*, ScalarFunction>> probes{
        {"matmul+softmax",
         [&](Tape& t, const Tensor& x) {
           return sum(t, matmul(t, softmax(t, x, seed % 2), transpose(t, other)));
         }},
        {"similarity+ce",
         [&](Tape& t, const Tensor& x) { return cross_entropy(t, pairwise_similarity(t, x, other, measure), labels); }},
        {"layout",
         [&](Tape& t, const Tensor& x) {
           const Tensor g = gather_columns(t, x, cols);
           const Tensor c = concat_columns(t, {g, combine_columns(t, x, taps)});
           const Tensor r = concat_rows(t, {c, scale(t, c, -0.5)});
           return mean(t, silu(t, column_dot(t, r, r)));
         }},
        {"normalize",
         [&](Tape& t, const Tensor& x) {
           const Tensor n = l2_normalize_columns(t, x);
           const Tensor s = add(t, pairwise_similarity(t, n, other, Similarity::dot), pairwise_similarity(t, x, x, Similarity::dot));
           return sum(t, pick(t, s, labels, labels));
         }},
    };
    const Tensor x = random_tensor({3, 4}, rng);
    for (const auto& [name, f] : probes) {
      const auto r = finite_diff_check(f, x);
      INFO(name << " seed " << seed << " err " << r.max_rel_error);
      CHECK(r.passed);
    }

    const Tensor img = random_tensor({2, 8, 8}, rng);
    const ScalarFunction conv = [&](Tape& t, const Tensor& x) {
      const Tensor y = conv2d(t, x, w, b, 1 + seed % 2, 1);
      return sum(t, matmul(t, reshape(t, silu(t, upsample_bilinear(t, y, 2)), {1, y.size() * 4}),
                           reshape(t, upsample_bilinear(t, y, 2), {y.size() * 4, 1})));
    };
    const auto rc = finite_diff_check(conv, img);
    INFO("conv seed " << seed << " err " << rc.max_rel_error);
    CHECK(rc.passed);
    const ScalarFunction conv_w = [&](Tape& t, const Tensor& x) {
      const Tensor y = conv2d(t, probe, x, b, 2, 1);
      return sum(t, log(t, add(t, silu(t, y), Tensor::full(y.shape(), 2.0))));
    };
    const auto rw = finite_diff_check(conv_w, w);
    INFO("conv weight seed " << seed << " err " << rw.max_rel_error);
    CHECK(rw.passed);
  }
}

TEST_CASE("conv2d matches a direct nested-loop oracle") {
  auto rng = make_rng(5, 3);
  const Tensor x = random_tensor({2, 7, 6}, rng);
  const Tensor w = random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = random_tensor({3}, rng);
  for (std::size_t stride : {1, 2}) {
    Tape tape(Tape::Mode::inference);
    const Tensor y = conv2d(tape, x, w, b, stride, 1);
    const std::size_t oh = (7 + 2 - 3) / stride + 1, ow = (6 + 2 - 3) / stride + 1;
    REQUIRE(y.shape() == Shape{3, oh, ow});
    for (std::size_t co = 0; co < 3; ++co)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = b.at(co);
          for (std::size_t ci = 0; ci < 2; ++ci)
            for (long ky = 0; ky < 3; ++ky)
              for (long kx = 0; kx < 3; ++kx) {
                const long iy = static_cast<long>(oy * stride) + ky - 1;
                const long ix = static_cast<long>(ox * stride) + kx - 1;
                if (iy < 0 || ix < 0 || iy >= 7 || ix >= 6) continue;
                acc += w.at(((co * 2 + ci) * 3 + ky) * 3 + kx) * x.at((ci * 7 + iy) * 6 + ix);
              }
          CHECK(y.at((co * oh + oy) * ow + ox) == doctest::Approx(acc).epsilon(1e-12));
        }
  }
}

TEST_CASE("two constructions of the same function give the same gradient") {
  auto rng = make_rng(9, 4);
  const Tensor other = random_tensor({3, 3}, rng);
  const Tensor x1 = random_tensor({3, 3}, rng, 1.0, true);
  const Tensor x2 = x1.clone(true);
  {
    // f = sum(x·o + x·o) built from a shared subexpression (two paths)...
    Tape tape;
    const Tensor p = matmul(tape, x1, other);
    tape.backward(sum(tape, add(tape, p, p)));
  }
  {
    // ...and as a single scaled product.
    Tape tape;
    tape.backward(sum(tape, scale(tape, matmul(tape, x2, other), 2.0)));
  }
  for (std::size_t i = 0; i < x1.size(); ++i) CHECK(x1.grad()[i] == doctest::Approx(x2.grad()[i]).epsilon(1e-14));
}

TEST_CASE("tape replays in exact reverse push order and skips unrelated records") {
  Tape tape;
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  const Tensor a = scale(tape, x, 2.0);
  const Tensor side = scale(tape, x, 5.0);  // never reaches the output
  const Tensor c = sum(tape, a);
  std::vector<const void*> visited;
  tape.backward(c, [&](const Tape::Record& r) { visited.push_back(r.output.identity()); });
  REQUIRE(visited.size() == 2);
  CHECK(visited[0] == c.identity());
  CHECK(visited[1] == a.identity());
  CHECK(x.grad()[0] == 2.0);
  (void)side;
}

TEST_CASE("gradients accumulate until re-zeroed") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  for (int pass = 1; pass <= 2; ++pass) {
    Tape tape;
    tape.backward(sum(tape, scale(tape, x, 4.0)));
    CHECK(x.grad()[0] == 4.0 * pass);
  }
  x.zero_grad();
  Tape tape;
  tape.backward(sum(tape, scale(tape, x, 4.0)));
  CHECK(x.grad()[0] == 4.0);
}

TEST_CASE("inference tape records nothing and non-finite values raise") {
  Tape tape(Tape::Mode::inference);
  const Tensor x = Tensor::from({1, 2}, {1, 2}, true);
  const Tensor y = softmax(tape, x, 1);
  CHECK(tape.size() == 0);
  CHECK_FALSE(y.requires_grad());
  CHECK_THROWS_AS(log(tape, Tensor::from({1}, {-1.0})), NumericError);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tape().backward(Tensor::from({2}, {1, 2}, true)), DimensionError);
}

}  // TEST_SUITE
