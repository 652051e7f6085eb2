#pragma once

// Pixel-level correspondence: anchor sampling, cross-view anchors,
// anchor affinity, argmax pseudo-labels and the pixel contrastive loss.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "stcl/diffcore.hpp"
#include "stcl/image.hpp"
#include "stcl/matching.hpp"
#include "stcl/objectcorr.hpp"

namespace stcl {

struct AnchorSet {
  std::size_t source_frame = 0;
  std::vector<std::size_t> positions;  // lattice indices into the anchor grid
  Tensor features;                     // C × |positions|

  std::size_t size() const { return positions.size(); }
};

struct PseudoLabels {
  std::vector<std::size_t> j_star;  // one anchor index per source position
  AffinityMatrix source;
};

// Splits the lattice into rows×cols bands (row band r covers
// [floor(r·H/rows), floor((r+1)·H/rows))) and samples one position per cell.
AnchorSet sample_anchor_grid(Tape& tape, const FeatureGrid& anchor, std::size_t rows, std::size_t cols,
                             std::uint64_t seed, std::size_t source_frame = 0);

// Alternative reading of the anchor grid: square cells of side `cell` tiled
// over the lattice (partial cells at the far edges included).
AnchorSet sample_anchor_cells(Tape& tape, const FeatureGrid& anchor, std::size_t cell, std::uint64_t seed,
                              std::size_t source_frame = 0);

struct CrossViewOptions {
  double scale_min = 0.6;  // fraction of frame area
  double scale_max = 1.0;
  double flip_probability = 0.5;
};

// Crop rectangle and flip relating an augmented view to its source frame.
// The crop is resized back to the full frame size.
struct ViewTransform {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t crop_x = 0;
  std::size_t crop_y = 0;
  std::size_t crop_width = 0;
  std::size_t crop_height = 0;
  bool flip = false;

  // Output pixel (x, y) -> source pixel coordinates (continuous, pixel centres at integers).
  std::pair<double, double> to_source(double x, double y) const;
  std::pair<double, double> from_source(double x, double y) const;
};

// Crop sides are lround(sqrt(scale)·W) and lround(sqrt(scale)·H), clamped to [1, W] / [1, H].
ViewTransform crop_for_scale(std::size_t width, std::size_t height, double scale, std::size_t crop_x,
                             std::size_t crop_y, bool flip);

struct CrossView {
  Image image;
  ViewTransform transform;
};

Image apply_view(const Image& image, const ViewTransform& transform);
CrossView cross_view_anchor(const Image& image, std::uint64_t seed, const CrossViewOptions& options = {});

// A(i,j) = softmax over anchors j of <K_t(i), anchor_j> / temperature; rows sum to 1.
AffinityMatrix anchor_affinity(Tape& tape, const FeatureGrid& kt, const AnchorSet& anchors, Similarity measure,
                               double temperature = 1.0);

// Row-wise argmax with ties to the lowest index. Nothing is recorded.
PseudoLabels pseudo_labels(const AffinityMatrix& affinity);

struct PclOptions {
  Similarity measure = Similarity::neg_l2;
  double temperature = 1.0;
  LossForm form = LossForm::mean_log;
  // Non-matching anchors of the same clip enter the denominator.
  bool intra_negatives = true;
};

// Mean over all positions of K_{t+1} of -log softmax of the pseudo-labelled
// anchor against the other anchors (when intra_negatives) and `negatives`
// (C × N, may be undefined or empty).
Tensor pcl_loss(Tape& tape, const FeatureGrid& kt1, const AnchorSet& anchors, const PseudoLabels& labels,
                const Tensor& negatives, const PclOptions& options = {});

}  // namespace stcl
