#include "stcl/matching.hpp"

#include <string>

#include "stcl/errors.hpp"

namespace stcl {

FeatureGrid FeatureGrid::from_chw(Tape& tape, const Tensor& chw, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw DimensionError("feature grid with an empty lattice");
  FeatureGrid grid;
  grid.channels = chw.dim(0);
  grid.height = height;
  grid.width = width;
  if (grid.channels == 0 || chw.size() != grid.channels * height * width) {
    throw DimensionError("feature tensor " + shape_string(chw.shape()) + " does not cover a " +
                         std::to_string(height) + "x" + std::to_string(width) + " lattice");
  }
  grid.values = chw.rank() == 2 ? chw : reshape(tape, chw, {grid.channels, height * width});
  return grid;
}

MemoryBank::MemoryBank(std::size_t capacity, std::size_t insertion_stride)
    : capacity_(capacity), insertion_stride_(insertion_stride) {
  if (capacity_ == 0) throw StateError("memory capacity must be at least 1");
  if (insertion_stride_ == 0) throw StateError("memory insertion stride must be at least 1");
}

std::size_t MemoryBank::key_channels() const { return empty() ? 0 : entries_.front().key.dim(0); }
std::size_t MemoryBank::value_channels() const { return empty() ? 0 : entries_.front().value.dim(0); }
std::size_t MemoryBank::positions_per_frame() const { return height_ * width_; }

std::vector<std::size_t> MemoryBank::frames() const {
  std::vector<std::size_t> out;
  for (const auto& e : entries_) out.push_back(e.frame);
  return out;
}

void MemoryBank::insert(const FeatureGrid& key, const Tensor& value, std::size_t frame) {
  if (value.rank() != 2 || value.dim(1) != key.positions()) {
    throw DimensionError("memory value " + shape_string(value.shape()) + " does not match key lattice");
  }
  if (!empty()) {
    if (key.height != height_ || key.width != width_ || key.channels != key_channels() ||
        value.dim(0) != value_channels()) {
      throw DimensionError("memory entry extents differ from stored frames");
    }
  }
  height_ = key.height;
  width_ = key.width;
  entries_.push_back(Entry{key.values, value, frame});
  if (entries_.size() > capacity_) {
    // entries_[0] is pinned; entries_[1] is the oldest evictable frame.
    entries_.erase(entries_.begin() + 1);
  }
}

Tensor MemoryBank::keys(Tape& tape) const {
  if (empty()) throw StateError("affinity against an empty memory");
  if (entries_.size() == 1) return entries_.front().key;
  std::vector<Tensor> parts;
  for (const auto& e : entries_) parts.push_back(e.key);
  return concat_columns(tape, parts);
}

Tensor MemoryBank::values(Tape& tape) const {
  if (empty()) throw StateError("readout from an empty memory");
  if (entries_.size() == 1) return entries_.front().value;
  std::vector<Tensor> parts;
  for (const auto& e : entries_) parts.push_back(e.value);
  return concat_columns(tape, parts);
}

MemoryBank memory_insert(MemoryBank memory, const FeatureGrid& key, const Tensor& value, std::size_t frame) {
  memory.insert(key, value, frame);
  return memory;
}

AffinityMatrix memory_affinity(Tape& tape, const MemoryBank& memory, const FeatureGrid& query,
                               Similarity measure) {
  if (memory.empty()) throw StateError("affinity against an empty memory");
  if (memory.key_channels() != query.channels) {
    throw DimensionError("memory keys have " + std::to_string(memory.key_channels()) +
                         " channels, query has " + std::to_string(query.channels));
  }
  Tensor logits = pairwise_similarity(tape, memory.keys(tape), query.values, measure);
  return AffinityMatrix{softmax(tape, logits, 0), NormAxis::over_rows};
}

Tensor readout(Tape& tape, const MemoryBank& memory, const AffinityMatrix& affinity) {
  if (affinity.norm_axis != NormAxis::over_rows) {
    throw DimensionError("readout needs an affinity normalised over memory positions");
  }
  Tensor values = memory.values(tape);
  if (affinity.rows() != values.dim(1)) {
    throw DimensionError("affinity has " + std::to_string(affinity.rows()) + " rows, memory holds " +
                         std::to_string(values.dim(1)) + " positions");
  }
  return matmul(tape, values, affinity.table);
}

}  // namespace stcl
