#include "stcl/gradsuite.hpp"

#include <memory>
#include <numeric>
#include <random>

#include "stcl/objectcorr.hpp"
#include "stcl/pixelcorr.hpp"

namespace stcl {

TrainConfig gradcheck_config(std::uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  c.train_clips = 2;
  c.eval_clips = 0;
  c.clip_length = 4;
  c.width = 32;
  c.height = 32;
  c.n_objects = 2;
  c.object_min_size = 10;
  c.object_max_size = 14;
  c.motion_range = 2;
  c.distractors = 2;
  c.max_objects = 2;
  c.key_channels = 2;
  c.value_channels = 2;
  c.hidden1 = 2;
  c.hidden2 = 2;
  c.decoder_channels = 2;
  c.anchor_rows = 4;
  c.anchor_cols = 4;
  c.cluster_cell = 16;
  c.q_size = 2;
  c.batch_clips = 2;
  c.warmup_steps = 0;
  c.total_steps = 1;
  return c;
}

namespace {

std::vector<std::size_t> column_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> cols(end - begin);
  std::iota(cols.begin(), cols.end(), begin);
  return cols;
}

Tensor random_table(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(shape_size(shape));
  for (double& d : v) d = normal(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Differentiates the chosen objective with respect to one network parameter,
// cycling through the parameter list with the seed.
GradProblem network_problem(const TrainConfig& config, std::uint64_t seed, bool total) {
  auto data = std::make_shared<Datasets>(make_datasets(config));
  const Network net = init_network(net_config(config), seed);
  const Batch batch = build_batch(data->train.size(), config.clip_length, config, seed);
  const std::size_t which = seed % net.params.size();
  GradProblem p;
  p.x = net.params[which].second.clone(false);
  p.f = [data, net, batch, config, which, total](Tape& tape, const Tensor& x) {
    Network probe = net;
    probe.params[which].second = x;
    const Objective o = compute_objective(tape, probe, data->train, batch, config);
    return total ? o.total : o.l_seg;
  };
  return p;
}

}  // namespace

GradProblem segmentation_problem(std::uint64_t seed) {
  TrainConfig c = gradcheck_config(seed);
  c.use_pcl = false;
  c.use_ocl = false;
  c.frames_per_clip = 2;
  return network_problem(c, seed, false);
}

GradProblem combined_problem(std::uint64_t seed) { return network_problem(gradcheck_config(seed), seed, true); }

GradProblem pixel_contrast_problem(std::uint64_t seed) {
  auto rng = make_rng(seed, 0x9c1);
  const std::size_t c = 3, side = 4, n_anchor = 4, n_neg = 8, hw = side * side;
  const Similarity measures[] = {Similarity::dot, Similarity::neg_l2, Similarity::cosine};
  const Similarity measure = measures[seed % 3];
  GradProblem p;
  p.x = random_table({c, hw + n_anchor + n_neg}, rng);

  Tape scratch(Tape::Mode::inference);
  FeatureGrid kt{c, side, side, random_table({c, hw}, rng)};
  AnchorSet anchors;
  anchors.positions = column_range(0, n_anchor);
  anchors.features = gather_columns(scratch, p.x, column_range(hw, hw + n_anchor));
  const PseudoLabels labels = pseudo_labels(anchor_affinity(scratch, kt, anchors, measure));

  p.f = [=](Tape& tape, const Tensor& x) {
    FeatureGrid kt1{c, side, side, gather_columns(tape, x, column_range(0, hw))};
    AnchorSet a;
    a.positions = anchors.positions;
    a.features = gather_columns(tape, x, column_range(hw, hw + n_anchor));
    const Tensor negatives = gather_columns(tape, x, column_range(hw + n_anchor, hw + n_anchor + n_neg));
    PclOptions opts;
    opts.measure = measure;
    return pcl_loss(tape, kt1, a, labels, negatives, opts);
  };
  return p;
}

GradProblem object_contrast_problem(std::uint64_t seed) {
  auto rng = make_rng(seed, 0x9c2);
  const std::size_t c = 3, side = 6, hw = side * side, n_neg = 4;
  GradProblem p;
  p.x = random_table({c, 2 * hw + n_neg}, rng);
  std::uniform_real_distribution<double> centre(4.0, 20.0), extent(6.0, 16.0);
  auto box = [&]() {
    Proposal b;
    b.x = centre(rng);
    b.y = centre(rng);
    b.w = extent(rng);
    b.h = extent(rng);
    return b;
  };
  const std::vector<Proposal> queries{box(), box()};
  const std::vector<Proposal> candidates{box(), box(), box()};
  const std::map<std::size_t, std::size_t> positives{{0, 1}, {1, 2}};
  p.f = [=](Tape& tape, const Tensor& x) {
    FeatureGrid a{c, side, side, gather_columns(tape, x, column_range(0, hw))};
    FeatureGrid b{c, side, side, gather_columns(tape, x, column_range(hw, 2 * hw))};
    const Tensor negatives = gather_columns(tape, x, column_range(2 * hw, 2 * hw + n_neg));
    const Tensor q = roi_embed_all(tape, a, queries, kEncoderStride, 3);
    const Tensor cand = roi_embed_all(tape, b, candidates, kEncoderStride, 3);
    return ocl_loss(tape, q, cand, positives, negatives);
  };
  return p;
}

std::vector<GradSuiteEntry> run_gradient_suite(std::size_t seeds, std::uint64_t first_seed) {
  using Maker = GradProblem (*)(std::uint64_t);
  const std::pair<const char*, Maker> losses[] = {
      {"l_seg", &segmentation_problem},
      {"l_pcl", &pixel_contrast_problem},
      {"l_ocl", &object_contrast_problem},
      {"l_total", &combined_problem},
  };
  std::vector<GradSuiteEntry> out;
  for (const auto& [name, make] : losses) {
    GradSuiteEntry entry;
    entry.name = name;
    for (std::size_t k = 0; k < seeds; ++k) {
      const GradProblem problem = make(first_seed + k);
      const GradCheckReport r = finite_diff_check(problem.f, problem.x);
      ++entry.trials;
      if (!r.passed) ++entry.failures;
      entry.max_rel_error = std::max(entry.max_rel_error, r.max_rel_error);
    }
    out.push_back(entry);
  }
  return out;
}

}  // namespace stcl
