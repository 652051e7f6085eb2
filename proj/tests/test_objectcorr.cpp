#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "stcl/errors.hpp"
#include "stcl/gradsuite.hpp"
#include "stcl/objectcorr.hpp"

using namespace stcl;

namespace {

Proposal box(double x, double y, double w, double h, ProposalSource s = ProposalSource::discovered) {
  Proposal p;
  p.x = x;
  p.y = y;
  p.w = w;
  p.h = h;
  p.source = s;
  return p;
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(shape_size(shape));
  for (double& d : v) d = normal(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

TEST_SUITE("objectcorr") {

TEST_CASE("filter rules: aspect and scale, closed intervals, annotated bypass") {
  CHECK(filter_proposals({box(100, 100, 30, 120)}, 200, 200).proposals.empty());
  CHECK(filter_proposals({box(50, 50, 50, 50)}, 100, 100).proposals.size() == 1);
  CHECK(filter_proposals({box(50, 50, 30, 30)}, 100, 100).proposals.size() == 1);  // area fraction 0.09 exactly
  CHECK(filter_proposals({box(50, 50, 80, 80)}, 100, 100).proposals.size() == 1);  // 0.64 exactly
  CHECK(filter_proposals({box(50, 50, 29, 29)}, 100, 100).proposals.empty());
  CHECK(filter_proposals({box(50, 50, 81, 81)}, 100, 100).proposals.empty());
  CHECK(filter_proposals({box(50, 50, 90, 30)}, 100, 100).proposals.size() == 1);  // aspect 3 exactly
  CHECK(filter_proposals({box(50, 50, 5, 5, ProposalSource::annotated)}, 100, 100).proposals.size() == 1);
  CHECK(filter_proposals({box(50, 50, 0, 5, ProposalSource::annotated)}, 100, 100).proposals.empty());
  CHECK(filter_proposals({box(-100, 50, 50, 50)}, 100, 100).proposals.empty());
}

TEST_CASE("filtering is idempotent and assigns 32-pixel cluster cells") {
  auto rng = make_rng(1, 2);
  std::uniform_real_distribution<double> centre(-10, 74), side(1, 70);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Proposal> raw;
    for (int k = 0; k < 30; ++k) raw.push_back(box(centre(rng), centre(rng), side(rng), side(rng)));
    const ProposalSet once = filter_proposals(raw, 64, 64);
    const ProposalSet twice = filter_proposals(once.proposals, 64, 64);
    CHECK(once.proposals == twice.proposals);
    CHECK(once.cluster_ids == twice.cluster_ids);
    for (std::size_t i = 0; i < once.proposals.size(); ++i) {
      const auto& p = once.proposals[i];
      const double aspect = p.w / p.h, area = p.w * p.h / 4096.0;
      CHECK(aspect >= 1.0 / 3.0);
      CHECK(aspect <= 3.0);
      CHECK(area >= 0.09);
      CHECK(area <= 0.64);
      const auto col = static_cast<std::size_t>(std::clamp(std::floor(p.x / 32), 0.0, 1.0));
      const auto row = static_cast<std::size_t>(std::clamp(std::floor(p.y / 32), 0.0, 1.0));
      CHECK(once.cluster_ids[i] == row * 2 + col);
    }
  }
}

TEST_CASE("Q sampling: one per occupied cell, deterministic") {
  const ProposalSet set = filter_proposals(
      {box(10, 10, 30, 30), box(12, 12, 30, 30), box(50, 10, 30, 30), box(10, 50, 30, 30), box(50, 50, 30, 30)}, 64, 64);
  const auto q = cluster_and_sample_q(set, 3, 7);
  CHECK(q.size() == 3);
  std::set<std::size_t> cells;
  for (std::size_t i : q) cells.insert(set.cluster_ids[i]);
  CHECK(cells.size() == 3);
  CHECK(cluster_and_sample_q(set, 3, 7) == q);
  CHECK(cluster_and_sample_q(set, 10, 7).size() == 4);

  const ProposalSet one_cell = filter_proposals({box(10, 10, 30, 30), box(12, 14, 30, 30), box(8, 9, 30, 30)}, 64, 64);
  CHECK(cluster_and_sample_q(one_cell, 3, 1).size() == 1);
  CHECK(cluster_and_sample_q(ProposalSet{}, 3, 1).empty());
}

TEST_CASE("RoI embedding examples") {
  Tape tape;
  const FeatureGrid constant{2, 4, 4, Tensor::full({2, 16}, 0.7)};
  const Tensor e = roi_embed(tape, constant, box(7, 9, 6, 10), 4);
  CHECK(e.shape() == Shape{2, 1});
  CHECK(e.at(0) == doctest::Approx(0.7).epsilon(1e-14));
  CHECK(e.at(1) == doctest::Approx(0.7).epsilon(1e-14));

  // Full-lattice box with one sample per texel averages the lattice.
  auto rng = make_rng(2, 2);
  const FeatureGrid g{3, 4, 4, random_tensor({3, 16}, rng)};
  const Tensor mean_embed = roi_embed(tape, g, box(8, 8, 16, 16), 4, 4);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0.0;
    for (std::size_t i = 0; i < 16; ++i) m += g.values.at(c, i);
    CHECK(mean_embed.at(c) == doctest::Approx(m / 16).epsilon(1e-13));
  }
  CHECK_THROWS_AS(roi_embed(tape, g, box(100, 100, 10, 10), 4), DegenerateInputError);
  const Tensor all = roi_embed_all(tape, g, {box(8, 8, 16, 16), box(4, 4, 6, 6)}, 4, 4);
  CHECK(all.shape() == Shape{3, 2});
  CHECK(all.at(0, 0) == mean_embed.at(0));
}

TEST_CASE("RoI embedding gradient oracle") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto rng = make_rng(seed, 3);
    const Tensor x = random_tensor({2, 36}, rng);
    std::uniform_real_distribution<double> c(2, 22), s(3, 20);
    const std::vector<Proposal> boxes{box(c(rng), c(rng), s(rng), s(rng)), box(c(rng), c(rng), s(rng), s(rng))};
    const ScalarFunction f = [&](Tape& tape, const Tensor& v) {
      const FeatureGrid g{2, 6, 6, v};
      const Tensor e = roi_embed_all(tape, g, boxes, 4, 3);
      return sum(tape, silu(tape, column_dot(tape, e, e)));
    };
    const auto r = finite_diff_check(f, x);
    INFO("seed " << seed << " err " << r.max_rel_error);
    CHECK(r.passed);
  }
}

TEST_CASE("Hungarian examples") {
  const AssignmentMatrix a = hungarian_match({1, 2, 3, 1}, 2, 2);
  CHECK(a.at(0, 1) == 1);
  CHECK(a.at(1, 0) == 1);
  CHECK(a.at(0, 0) == 0);
  CHECK(a.total == 5.0);
  CHECK(positive_indices(a) == std::map<std::size_t, std::size_t>{{0, 1}, {1, 0}});

  const AssignmentMatrix id = hungarian_match({5, 1, 0, 1, 5, 1, 0, 1, 5}, 3, 3);
  CHECK(positive_indices(id) == std::map<std::size_t, std::size_t>{{0, 0}, {1, 1}, {2, 2}});

  const AssignmentMatrix none = hungarian_match({-1, -2, -0.5, -3}, 2, 2);
  CHECK(none.total == 0.0);
  CHECK(positive_indices(none).empty());

  const AssignmentMatrix partial = hungarian_match({4, -1, -1, -1}, 2, 2);
  CHECK(positive_indices(partial) == std::map<std::size_t, std::size_t>{{0, 0}});

  CHECK_THROWS_AS(hungarian_match({}, 0, 3), StateError);
}

TEST_CASE("positive indices from one-hot rows") {
  AssignmentMatrix a;
  a.rows = 2;
  a.cols = 3;
  a.table = {0, 1, 0, 0, 0, 0};
  CHECK(positive_indices(a) == std::map<std::size_t, std::size_t>{{0, 1}});
}

TEST_CASE("Hungarian equals brute force on random tables") {
  for (std::uint64_t k = 0; k < 1000; ++k) {
    const oracle::Table t = oracle::random_table(k);
    const AssignmentMatrix a = hungarian_match(t.sim, t.rows, t.cols);
    INFO("trial " << k << " " << t.rows << "x" << t.cols);
    CHECK(a.total == oracle::brute_force_assignment(t.sim, t.rows, t.cols));
    for (std::size_t r = 0; r < t.rows; ++r) {
      int s = 0;
      for (std::size_t c = 0; c < t.cols; ++c) s += a.at(r, c);
      CHECK(s <= 1);
    }
    for (std::size_t c = 0; c < t.cols; ++c) {
      int s = 0;
      for (std::size_t r = 0; r < t.rows; ++r) s += a.at(r, c);
      CHECK(s <= 1);
    }
  }
}

TEST_CASE("positive indices survive monotone transforms that keep the optimum") {
  auto rng = make_rng(4, 4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> sim(9);
    for (double& v : sim) v = u(rng);
    std::vector<double> shifted = sim;
    for (double& v : shifted) v = 3.0 * v + 1.0;  // positive affine: the same optimum
    CHECK(positive_indices(hungarian_match(sim, 3, 3)) == positive_indices(hungarian_match(shifted, 3, 3)));
  }
}

TEST_CASE("ocl_loss closed forms and monotonicity") {
  Tape tape;
  const Tensor q = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor p = Tensor::from({2, 2}, {1, 0, 0, 1});
  const std::map<std::size_t, std::size_t> pos{{0, 0}, {1, 1}};
  CHECK(ocl_loss(tape, q, p, pos, Tensor()).item() == 0.0);
  CHECK(ocl_loss(tape, q, p, pos, Tensor::zeros({2, 0})).item() == 0.0);
  CHECK(ocl_loss(tape, q, p, {}, Tensor::zeros({2, 3})).item() == 0.0);

  // Cosine: positive 1, negatives orthogonal (0) -> -log(e / (e + n)).
  const Tensor neg = Tensor::from({2, 2}, {0, 1, 1, 0});
  const std::map<std::size_t, std::size_t> first{{0, 0}};
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(0.0)));
  const Tensor n1 = gather_columns(tape, neg, std::vector<std::size_t>{0});
  CHECK(ocl_loss(tape, q, p, first, n1).item() == doctest::Approx(expected).epsilon(1e-14));

  OclOptions dot;
  dot.measure = Similarity::dot;
  double previous = 1e9;
  for (double s : {0.0, 1.0, 4.0, 16.0, 64.0}) {
    const Tensor pp = Tensor::from({2, 1}, {s, 0});
    const double v = ocl_loss(tape, q, pp, first, neg, dot).item();
    CHECK(v >= 0.0);
    CHECK(v <= previous);
    previous = v;
  }
  CHECK(previous < 1e-12);
}

TEST_CASE("ocl gradient oracle on 100 seeds") {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const GradProblem p = object_contrast_problem(seed);
    const auto r = finite_diff_check(p.f, p.x);
    INFO("seed " << seed << " err " << r.max_rel_error);
    CHECK(r.passed);
  }
}

TEST_CASE("proposal files round-trip and are filtered on read") {
  std::vector<ProposalSet> sets(2);
  sets[0] = filter_proposals({box(20, 20, 30, 30), box(40, 30, 20.25, 25.5)}, 64, 64, 0);
  Proposal a = box(30, 30, 10, 12, ProposalSource::annotated);
  a.object_id = 3;
  sets[1] = filter_proposals({a}, 64, 64, 1);
  std::stringstream io;
  write_proposals(io, sets);
  const auto back = read_proposals(io, 3, 64, 64);
  REQUIRE(back.size() == 3);
  CHECK(back[0].proposals == sets[0].proposals);
  CHECK(back[1].proposals == sets[1].proposals);
  CHECK(back[2].proposals.empty());

  std::stringstream raw("0 32 32 30 120 discovered\n# comment\n0 32 32 40 40 d\n");
  const auto filtered = read_proposals(raw, 1, 64, 64);
  CHECK(filtered[0].proposals.size() == 1);

  std::stringstream bad("0 1 2 3 x\n");
  CHECK_THROWS_AS(read_proposals(bad, 1, 64, 64), IoError);
  CHECK_THROWS_AS(read_proposals(std::string("/nonexistent/p.txt"), 1, 64, 64), IoError);
}

}  // TEST_SUITE
