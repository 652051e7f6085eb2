#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "stcl/errors.hpp"
#include "stcl/image.hpp"
#include "stcl/matching.hpp"

using namespace stcl;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (double& d : v) d = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

FeatureGrid grid_of(const Tensor& values, std::size_t h, std::size_t w) {
  Tape tape(Tape::Mode::inference);
  return FeatureGrid::from_chw(tape, values, h, w);
}

}  // namespace

TEST_SUITE("matching") {

TEST_CASE("self-match under orthonormal keys") {
  Tape tape;
  std::vector<double> eye(16, 0.0);
  for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
  const FeatureGrid key = grid_of(Tensor::from({4, 4}, eye), 2, 2);
  MemoryBank memory;
  memory.insert(key, Tensor::zeros({3, 4}), 0);
  const AffinityMatrix a = memory_affinity(tape, memory, key, Similarity::dot);
  CHECK(a.norm_axis == NormAxis::over_rows);
  for (std::size_t j = 0; j < 4; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 4; ++i)
      if (a.table.at(i, j) > a.table.at(best, j)) best = i;
    CHECK(best == j);
  }
}

TEST_CASE("constant keys give uniform columns") {
  Tape tape;
  const FeatureGrid key = grid_of(Tensor::full({2, 6}, 0.3), 2, 3);
  MemoryBank memory;
  memory.insert(key, Tensor::zeros({1, 6}), 0);
  memory.insert(key, Tensor::zeros({1, 6}), 1);
  const AffinityMatrix a = memory_affinity(tape, memory, key, Similarity::neg_l2);
  REQUIRE(a.rows() == 12);
  for (double v : a.table.data()) CHECK(v == doctest::Approx(1.0 / 12.0).epsilon(1e-15));
}

TEST_CASE("two-position toy column with logits (0, ln 3)") {
  Tape tape;
  // dot logits: memory keys k0 = 0, k1 = ln 3 against query q = 1 in one channel.
  const FeatureGrid mem = grid_of(Tensor::from({1, 2}, {0.0, std::log(3.0)}), 1, 2);
  const FeatureGrid query = grid_of(Tensor::from({1, 2}, {1.0, 1.0}), 1, 2);
  MemoryBank memory;
  memory.insert(mem, Tensor::zeros({1, 2}), 0);
  const AffinityMatrix a = memory_affinity(tape, memory, query, Similarity::dot);
  CHECK(a.table.at(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(a.table.at(1, 0) == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("memory_affinity errors") {
  Tape tape;
  MemoryBank memory;
  const FeatureGrid q = grid_of(Tensor::zeros({2, 4}), 2, 2);
  CHECK_THROWS_AS(memory_affinity(tape, memory, q, Similarity::dot), StateError);
  memory.insert(grid_of(Tensor::zeros({3, 4}), 2, 2), Tensor::zeros({1, 4}), 0);
  CHECK_THROWS_AS(memory_affinity(tape, memory, q, Similarity::dot), DimensionError);
}

TEST_CASE("readout examples") {
  Tape tape;
  MemoryBank memory;
  const Tensor values = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  memory.insert(grid_of(Tensor::zeros({1, 3}), 1, 3), values, 0);

  // One-hot columns select memory columns: query j reads position (2 - j).
  std::vector<double> onehot(9, 0.0);
  for (std::size_t j = 0; j < 3; ++j) onehot[(2 - j) * 3 + j] = 1.0;
  const Tensor sel = readout(tape, memory, AffinityMatrix{Tensor::from({3, 3}, onehot), NormAxis::over_rows});
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(sel.at(0, j) == values.at(0, 2 - j));
    CHECK(sel.at(1, j) == values.at(1, 2 - j));
  }

  const Tensor avg = readout(tape, memory, AffinityMatrix{Tensor::full({3, 2}, 1.0 / 3.0), NormAxis::over_rows});
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(avg.at(0, j) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(avg.at(1, j) == doctest::Approx(5.0).epsilon(1e-15));
  }
  CHECK_THROWS_AS(readout(tape, memory, AffinityMatrix{Tensor::full({2, 2}, 0.5), NormAxis::over_rows}),
                  DimensionError);
}

TEST_CASE("affinity columns sum to one and readout stays inside value bounds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto rng = make_rng(seed, 0x3a);
    Tape tape(Tape::Mode::inference);
    MemoryBank memory(4);
    const std::size_t frames = 1 + seed % 4;
    for (std::size_t f = 0; f < frames; ++f) {
      memory.insert(grid_of(random_tensor({3, 6}, rng, -3, 3), 2, 3), random_tensor({2, 6}, rng, 0, 1), f);
    }
    const FeatureGrid q = grid_of(random_tensor({3, 6}, rng, -3, 3), 2, 3);
    const Similarity m = seed % 3 == 0 ? Similarity::dot : seed % 3 == 1 ? Similarity::neg_l2 : Similarity::cosine;
    const AffinityMatrix a = memory_affinity(tape, memory, q, m);
    for (std::size_t j = 0; j < a.cols(); ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < a.rows(); ++i) {
        CHECK(a.table.at(i, j) >= 0.0);
        CHECK(a.table.at(i, j) <= 1.0);
        s += a.table.at(i, j);
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    const Tensor v = memory.values(tape);
    const Tensor out = readout(tape, memory, a);
    for (std::size_t c = 0; c < 2; ++c) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t i = 0; i < v.dim(1); ++i) {
        lo = std::min(lo, v.at(c, i));
        hi = std::max(hi, v.at(c, i));
      }
      for (std::size_t j = 0; j < out.dim(1); ++j) {
        CHECK(out.at(c, j) >= lo - 1e-12);
        CHECK(out.at(c, j) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("memory eviction keeps the first frame and the most recent ones") {
  MemoryBank empty(3);
  const FeatureGrid k = grid_of(Tensor::zeros({1, 2}), 1, 2);
  const MemoryBank one = memory_insert(empty, k, Tensor::zeros({1, 2}), 0);
  CHECK(one.frame_count() == 1);
  CHECK(empty.frame_count() == 0);

  MemoryBank m(3);
  for (std::size_t f = 0; f < 5; ++f) m.insert(k, Tensor::zeros({1, 2}), f);
  CHECK(m.frames() == std::vector<std::size_t>{0, 3, 4});

  MemoryBank pinned(4);
  for (std::size_t f = 0; f < 100; ++f) {
    pinned.insert(k, Tensor::zeros({1, 2}), f);
    CHECK(pinned.frames().front() == 0);
    CHECK(pinned.frame_count() <= 4);
  }
  CHECK(pinned.frames() == std::vector<std::size_t>{0, 97, 98, 99});
  CHECK_THROWS_AS(pinned.insert(grid_of(Tensor::zeros({2, 2}), 1, 2), Tensor::zeros({1, 2}), 100), DimensionError);
  CHECK_THROWS_AS(pinned.insert(k, Tensor::zeros({1, 3}), 100), DimensionError);
}

TEST_CASE("gradients pass the oracle through affinity and readout") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto rng = make_rng(seed, 0x3b);
    const Tensor mem_key = random_tensor({3, 4}, rng);
    const Tensor values = random_tensor({2, 8}, rng);
    const Tensor x = random_tensor({3, 4}, rng);
    const Similarity m = seed % 3 == 0 ? Similarity::dot : seed % 3 == 1 ? Similarity::neg_l2 : Similarity::cosine;
    const ScalarFunction f = [&](Tape& tape, const Tensor& q) {
      MemoryBank memory;
      memory.insert(FeatureGrid::from_chw(tape, mem_key, 2, 2), gather_columns(tape, values, std::vector<std::size_t>{0, 1, 2, 3}), 0);
      memory.insert(FeatureGrid::from_chw(tape, q, 2, 2), gather_columns(tape, values, std::vector<std::size_t>{4, 5, 6, 7}), 1);
      const FeatureGrid query = FeatureGrid::from_chw(tape, q, 2, 2);
      const Tensor out = readout(tape, memory, memory_affinity(tape, memory, query, m));
      return sum(tape, silu(tape, out));
    };
    const auto r = finite_diff_check(f, x);
    INFO("seed " << seed << " err " << r.max_rel_error);
    CHECK(r.passed);
  }
}

}  // TEST_SUITE
