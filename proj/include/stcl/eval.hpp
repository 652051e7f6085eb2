#pragma once

// Region similarity J, boundary F-measure and correspondence accuracy.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "stcl/image.hpp"
#include "stcl/segnet.hpp"
#include "stcl/synthvid.hpp"

namespace stcl {

// IoU of the pixels labelled `id`; two empty masks score 1.
double region_J(const Mask& pred, const Mask& truth, std::uint8_t id);

// ceil(0.008 · image diagonal).
std::size_t default_contour_tolerance(std::size_t width, std::size_t height);

// Object pixels with a 4-neighbour (inside the image) of another label.
std::vector<std::uint8_t> boundary_map(const Mask& mask, std::uint8_t id);

// F = 2PR/(P+R) with boundary pixels matched inside a closed disk of radius
// `tolerance`; two empty boundaries score 1, exactly one empty scores 0.
double contour_F(const Mask& pred, const Mask& truth, std::uint8_t id, std::size_t tolerance);

// Fraction of lattice positions of frame t whose centre pixel has an oracle
// target in frame t2 and whose best key match in t2 lies within `tolerance`
// lattice cells (Chebyshev distance) of that target. 1 when nothing is mapped.
double correspondence_accuracy(const Network& net, const VideoClip& clip, std::size_t t, std::size_t t2,
                               std::size_t tolerance = 1, Similarity measure = Similarity::neg_l2);

struct EvalReport {
  std::vector<std::uint8_t> object_ids;
  std::vector<double> object_J;  // parallel to object_ids
  std::vector<double> object_F;
  double J_mean = 0.0;
  double F_mean = 0.0;
  double JF_mean = 0.0;
  double corr_acc = 0.0;
  std::vector<std::uint64_t> clip_ids;
  std::uint64_t config_hash = 0;
};

struct EvalOptions {
  InferOptions infer;
  std::size_t corr_tolerance = 1;
};

// Propagates each clip from its first-frame mask and scores frames 1..T-1 for
// every object of the clip; correspondence accuracy uses frames 0 and T-1.
EvalReport evaluate_clips(const Network& net, const std::vector<VideoClip>& clips, const EvalOptions& options,
                          std::uint64_t config_hash = 0, std::vector<std::vector<Mask>>* predictions = nullptr);

void write_eval_csv(std::ostream& out, const EvalReport& report);

}  // namespace stcl
