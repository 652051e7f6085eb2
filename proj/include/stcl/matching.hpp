#pragma once

// Memory-query affinity and value readout of matching-based segmentation.

#include <cstddef>
#include <vector>

#include "stcl/diffcore.hpp"

namespace stcl {

// C-channel features over an H×W lattice; column i is position row*W + col.
struct FeatureGrid {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor values;  // C × (H·W)

  std::size_t positions() const { return height * width; }
  std::size_t position(std::size_t row, std::size_t col) const { return row * width + col; }

  // Wraps a C×H×W (or C×HW) tensor, recording a reshape when needed.
  static FeatureGrid from_chw(Tape& tape, const Tensor& chw, std::size_t height, std::size_t width);
};

enum class NormAxis { over_rows, over_cols };

struct AffinityMatrix {
  Tensor table;  // M × N
  NormAxis norm_axis = NormAxis::over_rows;

  std::size_t rows() const { return table.dim(0); }
  std::size_t cols() const { return table.dim(1); }
};

class MemoryBank {
 public:
  struct Entry {
    Tensor key;    // C × HW
    Tensor value;  // D × HW
    std::size_t frame = 0;
  };

  explicit MemoryBank(std::size_t capacity = 8, std::size_t insertion_stride = 1);

  bool empty() const { return entries_.empty(); }
  std::size_t frame_count() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t insertion_stride() const { return insertion_stride_; }
  std::size_t key_channels() const;
  std::size_t value_channels() const;
  std::size_t positions_per_frame() const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<std::size_t> frames() const;

  // Appends one frame. Beyond capacity the oldest non-first frame is evicted;
  // the first inserted frame stays pinned.
  void insert(const FeatureGrid& key, const Tensor& value, std::size_t frame);

  // Concatenated reference keys C × (K·HW) and values D × (K·HW).
  Tensor keys(Tape& tape) const;
  Tensor values(Tape& tape) const;

 private:
  std::size_t capacity_;
  std::size_t insertion_stride_;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<Entry> entries_;
};

// Value-semantics form of MemoryBank::insert.
MemoryBank memory_insert(MemoryBank memory, const FeatureGrid& key, const Tensor& value, std::size_t frame);

// A(i,j) = softmax over reference positions i of <K_r(i), K_q(j)>; columns sum to 1.
AffinityMatrix memory_affinity(Tape& tape, const MemoryBank& memory, const FeatureGrid& query,
                               Similarity measure);

// V_q = V_r · A, a D × HW table whose columns are convex combinations of memory values.
Tensor readout(Tape& tape, const MemoryBank& memory, const AffinityMatrix& affinity);

}  // namespace stcl
