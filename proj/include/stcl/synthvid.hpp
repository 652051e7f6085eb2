#pragma once

// Deterministic synthetic videos: rigid textured shapes translating over a
// static textured background, with exact masks, displacements and proposals.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "stcl/image.hpp"
#include "stcl/objectcorr.hpp"

namespace stcl {

enum class TextureMode { flat, noise, stripes };

TextureMode parse_texture_mode(const std::string& name);
std::string texture_mode_name(TextureMode mode);

enum class ShapeKind { rectangle, ellipse, triangle };

struct ClipSpec {
  std::size_t frames = 6;
  std::size_t width = 64;
  std::size_t height = 64;
  std::size_t n_objects = 2;
  int motion_range = 3;  // per-frame |dx|, |dy| bound in pixels
  TextureMode texture_mode = TextureMode::noise;
  std::size_t max_objects = 8;
  std::size_t min_size = 20;  // object bounding box side range in pixels
  std::size_t max_size = 30;
  // Per-frame global gain drawn from [1 - photometric, 1 + photometric] and
  // additive per-pixel Gaussian noise; both zero keeps static clips identical.
  double photometric = 0.0;
  double pixel_noise = 0.0;
};

struct ObjectTrack {
  std::uint8_t id = 0;
  ShapeKind shape = ShapeKind::rectangle;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> support;  // width × height footprint
  std::vector<double> texture;        // 3 × height × width colours
  std::vector<int> x;                 // top-left column per frame
  std::vector<int> y;                 // top-left row per frame
};

struct Displacement {
  std::uint8_t id = 0;
  int dx = 0;
  int dy = 0;
};

struct VideoClip {
  ClipSpec spec;
  std::uint64_t seed = 0;
  std::vector<Image> frames;
  std::vector<Mask> masks;
  std::vector<std::vector<Displacement>> flow;  // T-1 records, one per object
  std::vector<ObjectTrack> objects;
  std::vector<ProposalSet> proposals;

  std::size_t length() const { return frames.size(); }
};

// Places objects disjointly at frame 0 (GenerationError when that fails) and
// moves each with a constant integer velocity that reflects at the borders;
// objects stay fully inside the frame. Higher ids are drawn on top.
VideoClip generate_clip(const ClipSpec& spec, std::uint64_t seed);

struct ProposalConfig {
  std::size_t distractors_per_frame = 4;
  int jitter = 2;
  ProposalRules rules;
};

// Per frame: jittered tight boxes of visible objects (discovered), exact boxes
// (annotated), random background boxes (discovered); then filtered.
std::vector<ProposalSet> generate_proposals(const VideoClip& clip, const ProposalConfig& config, std::uint64_t seed);

// Tight box of the visible pixels of `id` in a mask; w = h = 0 when absent.
Proposal visible_box(const Mask& mask, std::uint8_t id);

// For every pixel of frame t: the pixel index it moves to in frame t2, or -1
// for background, pixels leaving the frame, and pixels occluded at t2.
std::vector<long> ground_truth_correspondence(const VideoClip& clip, std::size_t t, std::size_t t2);

// Writes <prefix>_fNN.ppm / <prefix>_fNN.pgm per frame; returns the file names written.
std::vector<std::string> write_clip_files(const std::string& directory, const std::string& prefix,
                                          const VideoClip& clip);

struct ManifestEntry {
  std::string name;
  std::uint64_t seed = 0;
  std::vector<std::string> files;
};

void write_manifest(const std::string& path, const std::string& split, const ClipSpec& spec,
                    const std::vector<ManifestEntry>& entries);

}  // namespace stcl
