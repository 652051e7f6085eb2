#pragma once

// Planar RGB frames, label masks, and their binary Netpbm encodings.

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace stcl {

// RGB in [0,1], stored planar (channel, row, col) so it feeds conv2d directly.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;  // 3 × H × W

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), pixels(3 * w * h, 0.0) {}

  double& at(std::size_t channel, std::size_t row, std::size_t col) {
    return pixels[(channel * height + row) * width + col];
  }
  double at(std::size_t channel, std::size_t row, std::size_t col) const {
    return pixels[(channel * height + row) * width + col];
  }
  bool operator==(const Image&) const = default;
};

// Per-pixel class ids; 0 is background.
struct Mask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> labels;

  Mask() = default;
  Mask(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), labels(w * h, fill) {}

  std::uint8_t& at(std::size_t row, std::size_t col) { return labels[row * width + col]; }
  std::uint8_t at(std::size_t row, std::size_t col) const { return labels[row * width + col]; }
  std::size_t count(std::uint8_t id) const;
  std::uint8_t max_label() const;
  bool operator==(const Mask&) const = default;
};

// Binary P6 with maxval 255; values are rounded to the nearest byte.
void write_ppm(const std::string& path, const Image& image);
Image read_ppm(const std::string& path);
// Binary P5 with maxval 255; the gray level is the class id.
void write_pgm(const std::string& path, const Mask& mask);
Mask read_pgm(const std::string& path);

// Deterministic generator for (seed, stream, index); streams keep consumers independent.
std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

// FNV-1a over raw bytes.
std::uint64_t fnv1a64(const void* data, std::size_t length, std::uint64_t state = 0xcbf29ce484222325ULL);

}  // namespace stcl
