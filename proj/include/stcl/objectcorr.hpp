#pragma once

// Object-level correspondence: proposal filtering and clustering, RoI
// embeddings, exclusive bipartite matching, and the object contrastive loss.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "stcl/diffcore.hpp"
#include "stcl/matching.hpp"

namespace stcl {

enum class ProposalSource { annotated, discovered };

// Axis-aligned box in pixel units; (x, y) is the centre.
struct Proposal {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
  ProposalSource source = ProposalSource::discovered;
  // Known instance id for annotated boxes, -1 otherwise.
  int object_id = -1;
  // Generator-side provenance used only by diagnostics; -1 for background boxes.
  int origin_id = -1;

  bool operator==(const Proposal&) const = default;
};

struct ProposalSet {
  std::size_t frame = 0;
  std::size_t image_width = 0;
  std::size_t image_height = 0;
  std::vector<Proposal> proposals;
  std::vector<std::size_t> cluster_ids;  // parallel to proposals
};

struct ProposalRules {
  double min_aspect = 1.0 / 3.0;
  double max_aspect = 3.0;
  double min_area_fraction = 0.09;  // 0.3^2
  double max_area_fraction = 0.64;  // 0.8^2
  std::size_t cluster_cell = 32;    // pixels per clustering cell side
};

bool proposal_in_bounds(const Proposal& p, std::size_t image_width, std::size_t image_height);

// Keeps discovered boxes with w/h in [1/3, 3] and area fraction in [0.09, 0.64]
// (closed intervals); annotated boxes bypass the rules. Boxes with w or h <= 0
// or no overlap with the image are always dropped.
ProposalSet filter_proposals(const std::vector<Proposal>& raw, std::size_t image_width, std::size_t image_height,
                             std::size_t frame = 0, const ProposalRules& rules = {});

// Row-major index of the cell containing the centre; centres outside the image clamp to the border.
std::size_t cluster_of(const Proposal& p, std::size_t image_width, std::size_t image_height, std::size_t cell);

// At most one proposal per occupied clustering cell, min(q_size, #cells) in total.
// Returns indices into set.proposals.
std::vector<std::size_t> cluster_and_sample_q(const ProposalSet& set, std::size_t q_size, std::uint64_t seed);

// Average of an r×r grid of bilinear samples inside the box on the feature
// lattice; the box is mapped from pixels by `stride` with half-texel alignment.
// Returns a C×1 column.
Tensor roi_embed(Tape& tape, const FeatureGrid& features, const Proposal& box, std::size_t stride,
                 std::size_t pool = 3);
// Embeds several boxes into one C×|boxes| table.
Tensor roi_embed_all(Tape& tape, const FeatureGrid& features, const std::vector<Proposal>& boxes,
                     std::size_t stride, std::size_t pool = 3);

struct AssignmentMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> table;  // rows × cols, entries in {0,1}
  double total = 0.0;

  std::uint8_t at(std::size_t r, std::size_t c) const { return table[r * cols + c]; }
};

// Exact maximum-weight assignment with row and column sums <= 1; rows whose
// every choice would lower the total stay unmatched. `sim` is rows × cols.
AssignmentMatrix hungarian_match(const std::vector<double>& sim, std::size_t rows, std::size_t cols);

// Matched row -> column; unmatched rows are absent.
std::map<std::size_t, std::size_t> positive_indices(const AssignmentMatrix& assign);

enum class LossForm { mean_log, verbatim };

struct OclOptions {
  Similarity measure = Similarity::cosine;
  double temperature = 1.0;
  LossForm form = LossForm::mean_log;
};

// Mean over matched pairs of -log softmax of the positive against the
// negatives; zero (untracked) when there are no positives. `negatives` may be
// undefined or have zero columns.
Tensor ocl_loss(Tape& tape, const Tensor& query_embeds, const Tensor& candidate_embeds,
                const std::map<std::size_t, std::size_t>& positives, const Tensor& negatives,
                const OclOptions& options = {});

// Proposal text format: "frame x y w h source [object_id]" per line.
void write_proposals(std::ostream& out, const std::vector<ProposalSet>& sets);
void write_proposals(const std::string& path, const std::vector<ProposalSet>& sets);
// Groups lines by frame index; frames in [0, frame_count) without lines get empty sets.
std::vector<ProposalSet> read_proposals(std::istream& in, std::size_t frame_count, std::size_t image_width,
                                        std::size_t image_height, const ProposalRules& rules = {});
std::vector<ProposalSet> read_proposals(const std::string& path, std::size_t frame_count,
                                        std::size_t image_width, std::size_t image_height,
                                        const ProposalRules& rules = {});

}  // namespace stcl
