#include "stcl/pixelcorr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "stcl/errors.hpp"

namespace stcl {

namespace {

AnchorSet gather_anchors(Tape& tape, const FeatureGrid& anchor, std::vector<std::size_t> positions,
                         std::size_t source_frame) {
  AnchorSet set;
  set.source_frame = source_frame;
  set.features = gather_columns(tape, anchor.values, positions);
  set.positions = std::move(positions);
  return set;
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi_exclusive) {
  std::uniform_int_distribution<std::size_t> d(lo, hi_exclusive - 1);
  return d(rng);
}

}  // namespace

AnchorSet sample_anchor_grid(Tape& tape, const FeatureGrid& anchor, std::size_t rows, std::size_t cols,
                             std::uint64_t seed, std::size_t source_frame) {
  if (rows == 0 || cols == 0 || rows > anchor.height || cols > anchor.width) {
    throw DimensionError("anchor grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " does not fit a " + std::to_string(anchor.height) + "x" +
                         std::to_string(anchor.width) + " lattice");
  }
  auto rng = make_rng(seed, 0xa1);
  std::vector<std::size_t> positions;
  positions.reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t r0 = r * anchor.height / rows, r1 = (r + 1) * anchor.height / rows;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t c0 = c * anchor.width / cols, c1 = (c + 1) * anchor.width / cols;
      const std::size_t pr = uniform_index(rng, r0, r1);
      const std::size_t pc = uniform_index(rng, c0, c1);
      positions.push_back(anchor.position(pr, pc));
    }
  }
  return gather_anchors(tape, anchor, std::move(positions), source_frame);
}

AnchorSet sample_anchor_cells(Tape& tape, const FeatureGrid& anchor, std::size_t cell, std::uint64_t seed,
                              std::size_t source_frame) {
  if (cell == 0 || cell > anchor.height || cell > anchor.width) {
    throw DimensionError("anchor cell side " + std::to_string(cell) + " does not fit the lattice");
  }
  auto rng = make_rng(seed, 0xa2);
  std::vector<std::size_t> positions;
  for (std::size_t r0 = 0; r0 < anchor.height; r0 += cell) {
    const std::size_t r1 = std::min(anchor.height, r0 + cell);
    for (std::size_t c0 = 0; c0 < anchor.width; c0 += cell) {
      const std::size_t c1 = std::min(anchor.width, c0 + cell);
      const std::size_t pr = uniform_index(rng, r0, r1);
      const std::size_t pc = uniform_index(rng, c0, c1);
      positions.push_back(anchor.position(pr, pc));
    }
  }
  return gather_anchors(tape, anchor, std::move(positions), source_frame);
}

std::pair<double, double> ViewTransform::to_source(double x, double y) const {
  const double xo = flip ? static_cast<double>(width) - 1.0 - x : x;
  const double sx = static_cast<double>(crop_x) +
                    (xo + 0.5) * static_cast<double>(crop_width) / static_cast<double>(width) - 0.5;
  const double sy = static_cast<double>(crop_y) +
                    (y + 0.5) * static_cast<double>(crop_height) / static_cast<double>(height) - 0.5;
  return {sx, sy};
}

std::pair<double, double> ViewTransform::from_source(double x, double y) const {
  const double xo = (x - static_cast<double>(crop_x) + 0.5) * static_cast<double>(width) /
                        static_cast<double>(crop_width) - 0.5;
  const double yo = (y - static_cast<double>(crop_y) + 0.5) * static_cast<double>(height) /
                        static_cast<double>(crop_height) - 0.5;
  return {flip ? static_cast<double>(width) - 1.0 - xo : xo, yo};
}

ViewTransform crop_for_scale(std::size_t width, std::size_t height, double scale, std::size_t crop_x,
                             std::size_t crop_y, bool flip) {
  ViewTransform t;
  t.width = width;
  t.height = height;
  const double side = std::sqrt(std::clamp(scale, 0.0, 1.0));
  t.crop_width = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * static_cast<double>(width))), 1, width);
  t.crop_height = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(side * static_cast<double>(height))), 1, height);
  t.crop_x = std::min(crop_x, width - t.crop_width);
  t.crop_y = std::min(crop_y, height - t.crop_height);
  t.flip = flip;
  return t;
}

Image apply_view(const Image& image, const ViewTransform& t) {
  if (t.width != image.width || t.height != image.height) throw DimensionError("view transform extents differ from image");
  Image out(image.width, image.height);
  const double x_lo = static_cast<double>(t.crop_x), x_hi = static_cast<double>(t.crop_x + t.crop_width - 1);
  const double y_lo = static_cast<double>(t.crop_y), y_hi = static_cast<double>(t.crop_y + t.crop_height - 1);
  for (std::size_t r = 0; r < image.height; ++r) {
    for (std::size_t c = 0; c < image.width; ++c) {
      auto [sx, sy] = t.to_source(static_cast<double>(c), static_cast<double>(r));
      sx = std::clamp(sx, x_lo, x_hi);
      sy = std::clamp(sy, y_lo, y_hi);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const auto y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t x1 = std::min(x0 + 1, image.width - 1), y1 = std::min(y0 + 1, image.height - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double top = image.at(ch, y0, x0) * (1.0 - fx) + image.at(ch, y0, x1) * fx;
        const double bottom = image.at(ch, y1, x0) * (1.0 - fx) + image.at(ch, y1, x1) * fx;
        out.at(ch, r, c) = top * (1.0 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

CrossView cross_view_anchor(const Image& image, std::uint64_t seed, const CrossViewOptions& options) {
  auto rng = make_rng(seed, 0xa3);
  std::uniform_real_distribution<double> scale_dist(options.scale_min, options.scale_max);
  const double scale = scale_dist(rng);
  auto probe = crop_for_scale(image.width, image.height, scale, 0, 0, false);
  const std::size_t x = uniform_index(rng, 0, image.width - probe.crop_width + 1);
  const std::size_t y = uniform_index(rng, 0, image.height - probe.crop_height + 1);
  std::bernoulli_distribution flip(options.flip_probability);
  const bool flipped = flip(rng);
  CrossView view;
  view.transform = crop_for_scale(image.width, image.height, scale, x, y, flipped);
  view.image = apply_view(image, view.transform);
  return view;
}

AffinityMatrix anchor_affinity(Tape& tape, const FeatureGrid& kt, const AnchorSet& anchors, Similarity measure,
                               double temperature) {
  if (anchors.size() == 0) throw StateError("anchor affinity with an empty anchor set");
  if (anchors.features.dim(0) != kt.channels) throw DimensionError("anchor channels differ from query channels");
  Tensor logits = pairwise_similarity(tape, kt.values, anchors.features, measure);
  if (temperature != 1.0) logits = scale(tape, logits, 1.0 / temperature);
  return AffinityMatrix{softmax(tape, logits, 1), NormAxis::over_cols};
}

PseudoLabels pseudo_labels(const AffinityMatrix& affinity) {
  if (affinity.norm_axis != NormAxis::over_cols) throw StateError("pseudo-labels need a row-normalized affinity");
  PseudoLabels labels;
  labels.source = affinity;
  const std::size_t rows = affinity.rows(), cols = affinity.cols();
  const auto d = affinity.table.data();
  labels.j_star.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto row = d.subspan(i * cols, cols);
    labels.j_star[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return labels;
}

Tensor pcl_loss(Tape& tape, const FeatureGrid& kt1, const AnchorSet& anchors, const PseudoLabels& labels,
                const Tensor& negatives, const PclOptions& options) {
  if (anchors.size() == 0) throw StateError("pcl_loss with an empty anchor set");
  if (labels.j_star.size() != kt1.positions()) throw DimensionError("pcl_loss: one pseudo-label per position expected");
  if (!(options.temperature > 0.0)) throw NumericError("pcl_loss: temperature must be positive");
  for (std::size_t j : labels.j_star)
    if (j >= anchors.size()) throw IndexError("pcl_loss: pseudo-label " + std::to_string(j) + " out of range");
  const std::size_t n = kt1.positions();
  const bool has_negatives = negatives.defined() && negatives.rank() == 2 && negatives.dim(1) > 0;
  if (has_negatives && negatives.dim(0) != kt1.channels) throw DimensionError("pcl_loss: negative channels differ");

  Tensor anchor_logits = pairwise_similarity(tape, kt1.values, anchors.features, options.measure);
  std::vector<std::size_t> labels_used = labels.j_star;
  Tensor logits;
  if (options.intra_negatives) {
    logits = anchor_logits;
  } else {
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), 0);
    logits = reshape(tape, pick(tape, anchor_logits, rows, labels.j_star), {n, 1});
    std::fill(labels_used.begin(), labels_used.end(), 0);
  }
  if (has_negatives) {
    logits = concat_columns(tape, {logits, pairwise_similarity(tape, kt1.values, negatives, options.measure)});
  }
  if (options.temperature != 1.0) logits = scale(tape, logits, 1.0 / options.temperature);
  if (options.form == LossForm::verbatim) {
    Tensor probs = softmax(tape, logits, 1);
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), 0);
    return scale(tape, log(tape, sum(tape, pick(tape, probs, rows, labels_used))), -1.0);
  }
  return cross_entropy(tape, logits, labels_used);
}

}  // namespace stcl
