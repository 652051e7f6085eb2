#pragma once

// Finite-difference checks of every training loss on small random problems.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "stcl/diffcore.hpp"
#include "stcl/trainer.hpp"

namespace stcl {

struct GradSuiteEntry {
  std::string name;
  std::size_t trials = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  bool passed() const { return trials > 0 && failures == 0; }
};

// Toy settings: 32×32 frames, two objects, two-channel layers, 4×4 anchors.
TrainConfig gradcheck_config(std::uint64_t seed);

// One scalar function per loss and seed; the tensor is the point of evaluation.
struct GradProblem {
  ScalarFunction f;
  Tensor x;
};

GradProblem segmentation_problem(std::uint64_t seed);
GradProblem pixel_contrast_problem(std::uint64_t seed);
GradProblem object_contrast_problem(std::uint64_t seed);
GradProblem combined_problem(std::uint64_t seed);

// Runs `seeds` trials of each loss, seeds first_seed, first_seed + 1, ...
std::vector<GradSuiteEntry> run_gradient_suite(std::size_t seeds, std::uint64_t first_seed = 1);

}  // namespace stcl
