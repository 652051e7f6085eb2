#pragma once

// Small convolutional key encoder, value encoder and mask decoder for
// memory-based segmentation, plus the checkpoint file format.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stcl/diffcore.hpp"
#include "stcl/image.hpp"
#include "stcl/matching.hpp"

namespace stcl {

inline constexpr std::size_t kEncoderStride = 4;

struct NetConfig {
  std::size_t key_channels = 16;    // C
  std::size_t value_channels = 32;  // D
  std::size_t hidden1 = 8;
  std::size_t hidden2 = 16;
  std::size_t decoder_channels = 16;
  std::size_t max_objects = 8;  // M; logits cover M + 1 classes
};

using NamedTensor = std::pair<std::string, Tensor>;

struct Network {
  NetConfig config;
  std::vector<NamedTensor> params;  // fixed order, see init_network

  const Tensor& param(std::string_view name) const;
  std::size_t parameter_count() const;
  void zero_grad();
};

// Weights ~ N(0, 2/fan_in), biases zero. Parameters require gradients.
Network init_network(const NetConfig& config, std::uint64_t seed);
// Rebuilds a network from stored tensors; names and extents must match `config`.
Network network_from_params(const NetConfig& config, const std::vector<NamedTensor>& stored);

Tensor image_tensor(const Image& image);

struct KeyFeatures {
  FeatureGrid key;  // C × (H/4 · W/4)
  Tensor skip;      // hidden2 × H/4 × W/4
};

KeyFeatures encode_key(Tape& tape, const Network& net, const Tensor& image);

// Majority label over each 4×4 block, ties to the lowest id.
Mask downsample_mask(const Mask& mask, std::size_t factor);
// (M+1) × h × w indicator planes.
Tensor one_hot(const Mask& mask, std::size_t classes);

Tensor encode_value(Tape& tape, const Network& net, const Tensor& image, const Mask& mask);

// (M+1) × H × W logits.
Tensor decode_mask(Tape& tape, const Network& net, const Tensor& vq, const KeyFeatures& query);

Tensor segmentation_loss(Tape& tape, const Tensor& logits, const Mask& truth);
Mask argmax_mask(const Tensor& logits);

// Memory lookup and decoding for one query frame.
struct FramePrediction {
  KeyFeatures features;
  Tensor logits;
};
FramePrediction predict_frame(Tape& tape, const Network& net, const MemoryBank& memory, const Tensor& image,
                              Similarity measure);

struct InferOptions {
  Similarity measure = Similarity::neg_l2;
  std::size_t memory_capacity = 8;
  std::size_t insertion_stride = 1;
};

// Masks for frames 1..T-1 (T-1 masks); frame 0 enters memory with `first_mask`.
std::vector<Mask> infer_sequence(const Network& net, const std::vector<Image>& frames, const Mask& first_mask,
                                 const InferOptions& options = {});

// "STCL", version byte, named tensors, trailing FNV-1a checksum of value bytes.
void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::string& path);
std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin);

}  // namespace stcl
